#include "metatsr/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace metatsr {

namespace fs = std::filesystem;
using nlohmann::json;

std::string resolve_out_dir(const RunConfig& cfg) {
    if (const char* env = std::getenv("METATSR_OUT"); env && *env)
        return env;
    return cfg.out_dir;
}

namespace {

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory: " + dir);
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << content;
    if (!os) throw DataError("write failed: " + path);
}

void echo_config(const RunConfig& cfg, const std::string& dir) {
    write_text(join(dir, "effective_config.json"), cfg.canonical_json() + "\n");
}

std::string stem_of(const std::string& path) {
    return fs::path(path).stem().string();
}

}  // namespace

std::vector<LongSeries> load_raw_series(
    const RunConfig& cfg, std::vector<std::string>* channel_names) {
    std::vector<LongSeries> series;
    std::vector<std::string> names;

    if (cfg.data.synthetic_enabled) {
        SynthFamily family = synth_task_family(cfg.synth_config());
        series = std::move(family.series);
        for (int c = 0; c < cfg.data.synth_channels; ++c)
            names.push_back("c" + std::to_string(c));
    } else {
        std::vector<std::string> paths = cfg.data.csv_paths;
        if (!cfg.data.csv_dir.empty()) {
            if (!fs::is_directory(cfg.data.csv_dir))
                throw DataError("csv_dir is not a directory: " +
                                cfg.data.csv_dir);
            for (const auto& entry : fs::directory_iterator(cfg.data.csv_dir))
                if (entry.path().extension() == ".csv")
                    paths.push_back(entry.path().string());
            std::sort(paths.begin(), paths.end());
        }
        if (paths.empty()) throw DataError("no input CSV files found");
        for (const auto& path : paths) {
            std::vector<std::string> file_names;
            series.push_back(series_from_csv(path, cfg.data.target_column,
                                             stem_of(path), &file_names));
            if (names.empty())
                names = file_names;
            else if (names != file_names)
                throw DataError("inconsistent CSV headers across series");
        }
    }

    if (!cfg.data.split_manifest.empty()) {
        const auto manifest = read_split_manifest(cfg.data.split_manifest);
        split_series(series, &manifest);
    } else {
        split_series(series);
    }
    if (channel_names) *channel_names = names;
    return series;
}

void cmd_preprocess(const RunConfig& cfg) {
    std::vector<std::string> channel_names;
    std::vector<LongSeries> raw = load_raw_series(cfg, &channel_names);
    const auto impute = cfg.impute_policies(channel_names);

    std::vector<LongSeries> train_raw;
    for (const auto& s : raw)
        if (s.split == Split::train) train_raw.push_back(s);
    const PreprocessParams params = fit_preprocess(train_raw, impute);

    const WindowSpec spec{cfg.windowing.window_size, cfg.windowing.step_size};
    const int l = cfg.windowing.meta_window_length;

    // Everything is computed before any file is written, so a failure
    // leaves no partial outputs.
    MetaWindowSet window_sets[2];   // train, validation (l = 1)
    MetaWindowSet meta_sets[3];     // meta-train, meta-validation, meta-test
    for (auto* set : {&window_sets[0], &window_sets[1]}) {
        set->delta = spec.window_size;
        set->k = spec.step_size;
        set->l = 1;
        set->channels = static_cast<int>(raw[0].channel_count());
    }
    for (auto* set : {&meta_sets[0], &meta_sets[1], &meta_sets[2]}) {
        set->delta = spec.window_size;
        set->k = spec.step_size;
        set->l = l;
        set->channels = static_cast<int>(raw[0].channel_count());
    }

    std::ostringstream acf_csv;
    acf_csv << "series_id,lag,acf\n";
    for (const auto& raw_series : raw) {
        const LongSeries s = preprocess(raw_series, params);
        const auto windows = rolling_window(s, spec);

        const int max_lag =
            static_cast<int>(std::min<long>(100, s.length() - 1));
        const Vector acf = autocorrelation(s.target, max_lag);
        for (int lag = 0; lag <= max_lag; ++lag)
            acf_csv << s.id << ',' << lag << ',' << format_double(acf(lag))
                    << '\n';

        if (s.split != Split::test) {
            MetaWindowSet& wset =
                window_sets[s.split == Split::train ? 0 : 1];
            MetaWindowSet::SeriesBlock block;
            block.id = s.id;
            block.split = s.split;
            block.meta_windows = generate_meta_windows(windows, 1, s.id);
            wset.series.push_back(std::move(block));
        }
        MetaWindowSet& mset =
            meta_sets[s.split == Split::train ? 0
                      : s.split == Split::validation ? 1 : 2];
        MetaWindowSet::SeriesBlock block;
        block.id = s.id;
        block.split = s.split;
        block.meta_windows = generate_meta_windows(windows, l, s.id);
        mset.series.push_back(std::move(block));
    }

    const std::string dir = resolve_out_dir(cfg);
    ensure_dir(dir);
    const std::uint64_t hash = cfg.pipeline_hash();
    write_meta_window_set(join(dir, "train_windows.mtw"), window_sets[0], hash);
    write_meta_window_set(join(dir, "validation_windows.mtw"), window_sets[1],
                          hash);
    write_meta_window_set(join(dir, "meta_train.mtw"), meta_sets[0], hash);
    write_meta_window_set(join(dir, "meta_validation.mtw"), meta_sets[1], hash);
    write_meta_window_set(join(dir, "meta_test.mtw"), meta_sets[2], hash);

    json pj{{"channel_mean", std::vector<double>(
                                 params.channel_mean.data(),
                                 params.channel_mean.data() +
                                     params.channel_mean.size())},
            {"channel_std", std::vector<double>(
                                params.channel_std.data(),
                                params.channel_std.data() +
                                    params.channel_std.size())},
            {"target_min", params.target_min},
            {"target_max", params.target_max},
            {"channel_names", channel_names}};
    write_text(join(dir, "preprocess_params.json"), pj.dump(2) + "\n");
    write_text(join(dir, "autocorrelation.csv"), acf_csv.str());
    echo_config(cfg, dir);
}

namespace {

MetaWindowSet read_artifact_checked(const RunConfig& cfg,
                                    const std::string& name) {
    const std::string path = join(resolve_out_dir(cfg), name);
    std::uint64_t hash = 0;
    MetaWindowSet set = read_meta_window_set(path, &hash);
    if (hash != cfg.pipeline_hash())
        throw DataError("config-hash mismatch for artifact " + path +
                        " (re-run preprocess)");
    return set;
}

void write_training_log(const std::string& path,
                        const std::vector<TrainLogRow>& log) {
    std::ostringstream os;
    os << "epoch,train_query_mae,val_query_mae,wall_seconds\n";
    for (const auto& row : log)
        os << row.epoch << ',' << format_double(row.train_mae) << ','
           << format_double(row.val_mae) << ','
           << format_double(row.wall_seconds) << '\n';
    write_text(path, os.str());
}

Checkpoint net_checkpoint(const RunConfig& cfg, const TaskNetwork& net,
                          const std::string& tag) {
    Checkpoint ckpt;
    ckpt.model_tag = tag;
    ckpt.model_hash = cfg.model_hash();
    ckpt.artifact_hash = cfg.pipeline_hash();
    capture_tensors(parameters(const_cast<TaskNetwork&>(net)), "net/", ckpt);
    return ckpt;
}

void add_mod_tensors(Checkpoint& ckpt, const ModulationNetwork& mod) {
    capture_tensors(parameters(const_cast<ModulationNetwork&>(mod)), "mod/",
                    ckpt);
}

TaskNetwork net_from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt,
                                int channels) {
    RngStream rng(cfg.seed);
    auto init = rng.derive("net_init");
    TaskNetwork net = TaskNetwork::make(cfg.net_config(channels), init);
    restore_tensors(ckpt, "net/", parameters(net));
    return net;
}

ModulationNetwork mod_from_checkpoint(const RunConfig& cfg,
                                      const Checkpoint& ckpt, int channels) {
    RngStream rng(cfg.seed);
    auto init = rng.derive("mod_init");
    ModulationNetwork mod =
        ModulationNetwork::make(cfg.modnet_config(channels), init);
    restore_tensors(ckpt, "mod/", parameters(mod));
    return mod;
}

}  // namespace

void cmd_train(const RunConfig& cfg, bool resume) {
    const std::string dir = resolve_out_dir(cfg);
    ensure_dir(dir);

    if (cfg.model.kind == "target-mean") {
        Checkpoint ckpt;
        ckpt.model_tag = "target-mean";
        ckpt.model_hash = cfg.model_hash();
        ckpt.artifact_hash = cfg.pipeline_hash();
        write_checkpoint(join(dir, "checkpoint_best.ckpt"), ckpt);
        write_checkpoint(join(dir, "checkpoint_final.ckpt"), ckpt);
        write_training_log(join(dir, "training_log.csv"), {});
        return;
    }

    RngStream rng(cfg.seed);

    if (cfg.model.kind == "lstm-finetune") {
        const MetaWindowSet train_set =
            read_artifact_checked(cfg, "train_windows.mtw");
        const MetaWindowSet val_set =
            read_artifact_checked(cfg, "validation_windows.mtw");
        auto init = rng.derive("net_init");
        TaskNetwork net =
            TaskNetwork::make(cfg.net_config(train_set.channels), init);
        PretrainResult result = pretrain(
            std::move(net), train_set.all_windows(), cfg.train.pretrain_lr,
            cfg.train.pretrain_epochs, cfg.train.pretrain_patience,
            val_set.all_windows(), cfg.train.pretrain_batch_size,
            rng.derive("pretrain"), cfg.threads);
        write_checkpoint(join(dir, "checkpoint_best.ckpt"),
                         net_checkpoint(cfg, result.net, "lstm-finetune"));
        write_checkpoint(join(dir, "checkpoint_final.ckpt"),
                         net_checkpoint(cfg, result.net, "lstm-finetune"));
        write_training_log(join(dir, "training_log.csv"), result.log);
        return;
    }

    const MetaWindowSet meta_train_set =
        read_artifact_checked(cfg, "meta_train.mtw");
    const MetaWindowSet meta_val_set =
        read_artifact_checked(cfg, "meta_validation.mtw");
    const std::vector<MetaWindow> train_mws = meta_train_set.flattened();
    const std::vector<MetaWindow> val_mws = meta_val_set.flattened();
    const auto train_tasks = virtual_tasks(train_mws, cfg.windowing.task_stride);
    const auto val_tasks = virtual_tasks(val_mws, cfg.windowing.task_stride);
    if (train_tasks.empty()) throw DataError("no training virtual tasks");
    if (val_tasks.empty()) throw DataError("no validation virtual tasks");

    auto init = rng.derive("net_init");
    TaskNetwork net =
        TaskNetwork::make(cfg.net_config(meta_train_set.channels), init);

    MetaTrainState resume_state;
    const MetaTrainState* resume_ptr = nullptr;
    const std::string last_path = join(dir, "checkpoint_last.ckpt");
    if (resume) {
        const Checkpoint last = read_checkpoint(last_path);
        if (last.model_hash != cfg.model_hash())
            throw DataError("config-hash mismatch for resume checkpoint");
        restore_tensors(last, "net/", parameters(net));
        resume_state.next_epoch = std::stoi(last.meta.at("epoch"));
        resume_state.best_val = std::stod(last.meta.at("best_val"));
        resume_state.best_epoch = std::stoi(last.meta.at("best_epoch"));
        resume_ptr = &resume_state;
    }

    if (cfg.model.kind == "maml") {
        TrainHooks hooks;
        MetaTrainResult snapshot_tracker;
        hooks.checkpoint_every = cfg.train.checkpoint_every;
        double best_val_so_far = resume_ptr
                                     ? resume_state.best_val
                                     : std::numeric_limits<double>::infinity();
        (void)best_val_so_far;
        hooks.on_checkpoint = [&](int epoch, const TaskNetwork& current) {
            Checkpoint ckpt = net_checkpoint(cfg, current, "maml");
            ckpt.meta["epoch"] = std::to_string(epoch);
            // Best-so-far bookkeeping is finalized below; the last checkpoint
            // carries enough to resume the loop deterministically.
            ckpt.meta["best_val"] = "inf";
            ckpt.meta["best_epoch"] = "0";
            write_checkpoint(last_path, ckpt);
        };

        MetaTrainResult result =
            meta_train(train_tasks, std::move(net), cfg.maml_config(),
                       val_tasks, rng.derive("meta_train"), cfg.threads,
                       cfg.train.checkpoint_every > 0 ? &hooks : nullptr,
                       resume_ptr);
        (void)snapshot_tracker;

        TaskNetwork best = result.net;
        if (resume_ptr && result.best_epoch == resume_state.best_epoch) {
            const Checkpoint prev_best =
                read_checkpoint(join(dir, "checkpoint_best.ckpt"));
            restore_tensors(prev_best, "net/", parameters(best));
        }
        Checkpoint best_ckpt = net_checkpoint(cfg, best, "maml");
        best_ckpt.meta["best_epoch"] = std::to_string(result.best_epoch);
        best_ckpt.meta["best_val"] = format_double(result.best_val);
        write_checkpoint(join(dir, "checkpoint_best.ckpt"), best_ckpt);

        Checkpoint final_ckpt = net_checkpoint(cfg, result.final_net, "maml");
        final_ckpt.meta["epoch"] = std::to_string(result.epochs_run);
        final_ckpt.meta["best_val"] = format_double(result.best_val);
        final_ckpt.meta["best_epoch"] = std::to_string(result.best_epoch);
        write_checkpoint(join(dir, "checkpoint_final.ckpt"), final_ckpt);
        write_checkpoint(last_path, final_ckpt);
        write_training_log(join(dir, "training_log.csv"), result.log);
        return;
    }

    // mmaml
    auto mod_init = rng.derive("mod_init");
    ModulationNetwork mod = ModulationNetwork::make(
        cfg.modnet_config(meta_train_set.channels), mod_init);
    if (resume) {
        const Checkpoint last = read_checkpoint(last_path);
        restore_tensors(last, "mod/", parameters(mod));
    }

    MmamlTrainHooks hooks;
    hooks.checkpoint_every = cfg.train.checkpoint_every;
    hooks.on_checkpoint = [&](int epoch, const TaskNetwork& current,
                              const ModulationNetwork& current_mod) {
        Checkpoint ckpt = net_checkpoint(cfg, current, "mmaml");
        add_mod_tensors(ckpt, current_mod);
        ckpt.meta["epoch"] = std::to_string(epoch);
        ckpt.meta["best_val"] = "inf";
        ckpt.meta["best_epoch"] = "0";
        write_checkpoint(last_path, ckpt);
    };

    MmamlTrainResult result = mmaml_meta_train(
        train_tasks, std::move(net), std::move(mod), cfg.mmaml_config(),
        val_tasks, rng.derive("meta_train"), cfg.threads,
        cfg.train.checkpoint_every > 0 ? &hooks : nullptr, resume_ptr);

    Checkpoint best_ckpt = net_checkpoint(cfg, result.net, "mmaml");
    add_mod_tensors(best_ckpt, result.mod);
    best_ckpt.meta["best_epoch"] = std::to_string(result.best_epoch);
    best_ckpt.meta["best_val"] = format_double(result.best_val);
    write_checkpoint(join(dir, "checkpoint_best.ckpt"), best_ckpt);

    Checkpoint final_ckpt = net_checkpoint(cfg, result.final_net, "mmaml");
    add_mod_tensors(final_ckpt, result.final_mod);
    final_ckpt.meta["epoch"] = std::to_string(result.epochs_run);
    final_ckpt.meta["best_val"] = format_double(result.best_val);
    final_ckpt.meta["best_epoch"] = std::to_string(result.best_epoch);
    write_checkpoint(join(dir, "checkpoint_final.ckpt"), final_ckpt);
    write_checkpoint(last_path, final_ckpt);
    write_training_log(join(dir, "training_log.csv"), result.log);
}

void cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_path) {
    const Checkpoint ckpt = read_checkpoint(checkpoint_path);
    if (ckpt.model_hash != cfg.model_hash())
        throw DataError("config-hash mismatch: checkpoint was trained under a "
                        "different configuration");
    if (ckpt.artifact_hash != cfg.pipeline_hash())
        throw DataError("config-hash mismatch: checkpoint artifacts differ "
                        "from this configuration");
    if (ckpt.model_tag != cfg.model.kind)
        throw DataError("checkpoint model '" + ckpt.model_tag +
                        "' does not match configured model '" +
                        cfg.model.kind + "'");

    const MetaWindowSet test_set = read_artifact_checked(cfg, "meta_test.mtw");
    const auto series = test_set.by_series();

    std::unique_ptr<Adapter> adapter;
    if (cfg.model.kind == "target-mean") {
        adapter = make_target_mean_adapter();
    } else if (cfg.model.kind == "maml") {
        adapter = make_maml_adapter(
            net_from_checkpoint(cfg, ckpt, test_set.channels),
            cfg.train.inner_lr);
    } else if (cfg.model.kind == "lstm-finetune") {
        adapter = make_finetune_adapter(
            net_from_checkpoint(cfg, ckpt, test_set.channels),
            cfg.train.finetune_lr, cfg.train.finetune_weight_decay);
    } else {
        adapter = make_mmaml_adapter(
            net_from_checkpoint(cfg, ckpt, test_set.channels),
            mod_from_checkpoint(cfg, ckpt, test_set.channels),
            cfg.mmaml_config());
    }

    const std::string dir = resolve_out_dir(cfg);
    ensure_dir(dir);

    std::ostringstream results, curves, raw;
    results << "model,dataset,gradient_steps,horizon,mae,ci95\n";
    curves << "model,dataset,gradient_steps,horizon,mae,ci95\n";
    raw << "gradient_steps,run,error\n";

    const std::uint64_t config_hash = cfg.model_hash();
    for (int g : cfg.eval.gradient_steps) {
        MetaTestConfig mt = cfg.metatest_config(g);
        EvalResult r = meta_test(*adapter, series, mt);
        r.config_hash = config_hash;

        // Table rows: horizon column h reads "mean MAE over horizons 1..h".
        for (int h = 1; h <= mt.horizon; ++h) {
            std::vector<double> cums;
            for (const auto& run : r.runs) {
                double acc = 0.0;
                for (int i = 0; i < h; ++i) acc += run.per_horizon_mae[i];
                cums.push_back(acc / static_cast<double>(h));
            }
            double mean = 0.0;
            for (double c : cums) mean += c;
            mean /= static_cast<double>(cums.size());
            double ci = 0.0;
            if (cums.size() > 1) {
                double ss = 0.0;
                for (double c : cums) ss += (c - mean) * (c - mean);
                const double n = static_cast<double>(cums.size());
                ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
            }
            results << r.model_tag << ',' << cfg.dataset_name << ',' << g << ','
                    << h << ',' << format_double(mean) << ','
                    << format_double(ci) << '\n';
        }
        for (int h = 1; h <= mt.horizon; ++h) {
            std::vector<double> vals;
            for (const auto& run : r.runs)
                vals.push_back(run.per_horizon_mae[h - 1]);
            double mean = 0.0;
            for (double v : vals) mean += v;
            mean /= static_cast<double>(vals.size());
            double ci = 0.0;
            if (vals.size() > 1) {
                double ss = 0.0;
                for (double v : vals) ss += (v - mean) * (v - mean);
                const double n = static_cast<double>(vals.size());
                ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
            }
            curves << r.model_tag << ',' << cfg.dataset_name << ',' << g << ','
                   << h << ',' << format_double(mean) << ','
                   << format_double(ci) << '\n';
        }
        if (cfg.eval.dump_raw_errors)
            for (std::size_t run_i = 0; run_i < r.runs.size(); ++run_i)
                for (double e : r.runs[run_i].raw_abs_errors)
                    raw << g << ',' << run_i << ',' << format_double(e) << '\n';
    }

    write_text(join(dir, "results.csv"), results.str());
    write_text(join(dir, "curves.csv"), curves.str());
    if (cfg.eval.dump_raw_errors)
        write_text(join(dir, "raw_errors.csv"), raw.str());

    if (cfg.eval.export_embeddings && cfg.model.kind == "mmaml") {
        const ModulationNetwork mod =
            mod_from_checkpoint(cfg, ckpt, test_set.channels);
        std::ostringstream emb;
        emb << "split,series_id,t_index";
        for (int i = 0; i < mod.config.latent_dim; ++i) emb << ",z" << i;
        emb << '\n';
        std::map<Split, std::vector<Vector>> by_split;
        auto emit = [&](const MetaWindowSet& set) {
            for (const auto& block : set.series)
                for (const auto& mw : block.meta_windows) {
                    const Encoding enc =
                        encode(mod, summarize(mw), false, nullptr);
                    by_split[block.split].push_back(enc.z);
                    emb << to_string(block.split) << ',' << block.id << ','
                        << mw.t_index;
                    for (int i = 0; i < enc.z.size(); ++i)
                        emb << ',' << format_double(enc.z(i));
                    emb << '\n';
                }
        };
        emit(read_artifact_checked(cfg, "meta_train.mtw"));
        emit(read_artifact_checked(cfg, "meta_validation.mtw"));
        emit(test_set);
        write_text(join(dir, "embeddings.csv"), emb.str());

        const SplitDistances d = split_similarity(by_split);
        std::ostringstream sim;
        sim << "comparison,distance\n";
        sim << "train-test," << format_double(d.train_test) << '\n';
        sim << "train-validation," << format_double(d.train_val) << '\n';
        sim << "test-validation," << format_double(d.test_val) << '\n';
        write_text(join(dir, "split_similarity.csv"), sim.str());
    }
}

namespace {

struct ResultRow {
    std::string model, dataset;
    int gradient_steps = 0;
    int horizon = 0;
    double mae = 0.0;
    double ci95 = 0.0;
};

std::vector<ResultRow> read_results_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open results file: " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty results file: " + path);
    if (line != "model,dataset,gradient_steps,horizon,mae,ci95")
        throw DataError("unexpected results schema in " + path);
    std::vector<ResultRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ResultRow row;
        std::string field;
        std::getline(ss, row.model, ',');
        std::getline(ss, row.dataset, ',');
        std::getline(ss, field, ',');
        row.gradient_steps = std::stoi(field);
        std::getline(ss, field, ',');
        row.horizon = std::stoi(field);
        std::getline(ss, field, ',');
        row.mae = std::stod(field);
        std::getline(ss, field, ',');
        row.ci95 = std::stod(field);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

void cmd_report(const RunConfig& cfg,
                const std::vector<std::string>& result_files) {
    if (result_files.empty()) throw ConfigError("report needs result files");
    std::vector<ResultRow> all;
    for (const auto& path : result_files) {
        auto rows = read_results_csv(path);
        all.insert(all.end(), rows.begin(), rows.end());
    }

    // Group by (dataset, gradient_steps, horizon); flag best / second best.
    std::map<std::tuple<std::string, int, int>, std::vector<const ResultRow*>>
        groups;
    for (const auto& row : all)
        groups[{row.dataset, row.gradient_steps, row.horizon}].push_back(&row);

    std::ostringstream summary;
    summary << "dataset,gradient_steps,horizon,model,mae,ci95,flag\n";
    for (auto& [key, rows] : groups) {
        std::sort(rows.begin(), rows.end(),
                  [](const ResultRow* a, const ResultRow* b) {
                      if (a->mae != b->mae) return a->mae < b->mae;
                      return a->model < b->model;
                  });
        const double best_mae = rows.front()->mae;
        double second_mae = std::numeric_limits<double>::infinity();
        for (const auto* r : rows)
            if (r->mae > best_mae) {
                second_mae = r->mae;
                break;
            }
        for (const auto* r : rows) {
            std::string flag;
            if (rows.size() > 1) {
                if (r->mae == best_mae)
                    flag = "best";
                else if (r->mae == second_mae)
                    flag = "second";
            }
            summary << std::get<0>(key) << ',' << std::get<1>(key) << ','
                    << std::get<2>(key) << ',' << r->model << ','
                    << format_double(r->mae) << ',' << format_double(r->ci95)
                    << ',' << flag << '\n';
        }
    }

    std::ostringstream merged;
    merged << "model,dataset,gradient_steps,horizon,mae,ci95\n";
    for (const auto& row : all)
        merged << row.model << ',' << row.dataset << ',' << row.gradient_steps
               << ',' << row.horizon << ',' << format_double(row.mae) << ','
               << format_double(row.ci95) << '\n';

    const std::string dir = resolve_out_dir(cfg);
    ensure_dir(dir);
    write_text(join(dir, "report_summary.csv"), summary.str());
    write_text(join(dir, "report_long.csv"), merged.str());
}

void cmd_gradcheck(const RunConfig& cfg) {
    RngStream rng(cfg.seed);

    NetConfig small;
    small.input_channels = 3;
    small.lstm_hidden = {6, 5};
    small.feature_dim = 7;
    small.tanh_features = true;
    auto net_rng = rng.derive("gradcheck_net");
    TaskNetwork net = TaskNetwork::make(small, net_rng);
    auto warm = rng.derive("gradcheck_head");
    for (int i = 0; i < net.head.size(); ++i)
        net.head(i) = warm.gaussian(0.0, 0.3);
    net.head_bias = warm.gaussian(0.0, 0.1);

    auto check_rng = rng.derive("gradcheck_probe");
    const GradCheckReport report = gradient_check(net, 1e-4, check_rng);
    std::printf("gradient_check: max_rel_error=%.3e worst=%s -> %s\n",
                report.max_rel_error, report.worst_param.c_str(),
                report.pass ? "pass" : "FAIL");

    // Kernel-oracle suite: one-step MAE adaptation vs the closed form.
    double worst = 0.0;
    auto oracle_rng = rng.derive("oracle");
    for (int trial = 0; trial < 100; ++trial) {
        auto trial_rng = oracle_rng.derive("trial", trial);
        NetConfig nc;
        nc.input_channels = 2;
        nc.lstm_hidden = {5};
        nc.feature_dim = 6;
        auto t_rng = trial_rng.derive("net");
        TaskNetwork tnet = TaskNetwork::make(nc, t_rng);
        for (int i = 0; i < tnet.head.size(); ++i)
            tnet.head(i) = trial_rng.gaussian(0.0, 0.5);
        tnet.head_bias = trial_rng.gaussian(0.0, 0.2);

        MetaWindow support;
        support.series_id = "oracle";
        const int l = 2 + static_cast<int>(trial_rng.index(6));
        for (int i = 0; i < l; ++i) {
            LabeledWindow w;
            w.inputs.resize(4, 2);
            for (int t = 0; t < 4; ++t)
                for (int c = 0; c < 2; ++c)
                    w.inputs(t, c) = trial_rng.gaussian(0.0, 1.0);
            w.label = trial_rng.gaussian(0.0, 1.0);
            w.origin_index = i;
            support.windows.push_back(std::move(w));
        }
        Matrix query(4, 2);
        for (int t = 0; t < 4; ++t)
            for (int c = 0; c < 2; ++c) query(t, c) = trial_rng.gaussian(0, 1);

        MamlConfig mc;
        mc.inner_lr = trial_rng.uniform(1e-4, 0.05);
        mc.inner_steps = 1;
        const AdaptedHead head = inner_adapt(tnet, support, mc);
        const double direct = forward_adapted(tnet, head, query);
        const double oracle = kernel_oracle_predict(tnet, support, query, mc);
        worst = std::max(worst, std::abs(direct - oracle));
    }
    const bool oracle_pass = worst <= 1e-10;
    std::printf("kernel_oracle: max_abs_diff=%.3e over 100 instances -> %s\n",
                worst, oracle_pass ? "pass" : "FAIL");

    if (!report.pass || !oracle_pass)
        throw NumericError("gradient or oracle verification failed");
}

void cmd_synth(const RunConfig& cfg) {
    SynthFamily family = synth_task_family(cfg.synth_config());
    const std::string dir = resolve_out_dir(cfg);
    ensure_dir(dir);

    std::ostringstream manifest;
    for (const auto& s : family.series) {
        std::ostringstream csv;
        for (int c = 0; c < s.channel_count(); ++c) csv << 'c' << c << ',';
        csv << "y\n";
        for (long t = 0; t < s.length(); ++t) {
            for (int c = 0; c < s.channel_count(); ++c)
                csv << format_double(s.channels(t, c)) << ',';
            csv << format_double(s.target(t)) << '\n';
        }
        write_text(join(dir, s.id + ".csv"), csv.str());
        manifest << s.id << '\t' << to_string(s.split) << '\n';
    }
    write_text(join(dir, "synth_splits.tsv"), manifest.str());

    json pj{{"regimes", family.config.regimes},
            {"series_count", family.config.series_count},
            {"length", family.config.length},
            {"seed", family.config.seed},
            {"channels", family.config.channels},
            {"drift_rate", family.config.drift_rate},
            {"noise_std", family.config.noise_std},
            {"regime_of_series", family.regime_of}};
    write_text(join(dir, "synth_params.json"), pj.dump(2) + "\n");
}

}  // namespace metatsr
