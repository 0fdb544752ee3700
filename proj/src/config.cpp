#include "metatsr/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace metatsr {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown config key '" + it.key() + "' in " +
                              where);
}

template <typename T>
void get_to(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) obj.at(key).get_to(out);
}

json data_to_json(const DataConfig& d) {
    return json{{"csv_paths", d.csv_paths},
                {"csv_dir", d.csv_dir},
                {"target_column", d.target_column},
                {"split_manifest", d.split_manifest},
                {"impute_default", d.impute_default},
                {"impute_overrides", d.impute_overrides},
                {"synthetic_enabled", d.synthetic_enabled},
                {"synth_regimes", d.synth_regimes},
                {"synth_series_count", d.synth_series_count},
                {"synth_length", d.synth_length},
                {"synth_channels", d.synth_channels},
                {"synth_drift_rate", d.synth_drift_rate},
                {"synth_noise_std", d.synth_noise_std}};
}

json windowing_to_json(const WindowingConfig& w) {
    return json{{"window_size", w.window_size},
                {"step_size", w.step_size},
                {"meta_window_length", w.meta_window_length},
                {"task_stride", w.task_stride}};
}

json model_to_json(const ModelConfig& m) {
    return json{{"kind", m.kind},
                {"lstm_hidden", m.lstm_hidden},
                {"feature_dim", m.feature_dim},
                {"tanh_features", m.tanh_features},
                {"enc_hidden", m.enc_hidden},
                {"dec_hidden", m.dec_hidden},
                {"latent_dim", m.latent_dim}};
}

json train_to_json(const TrainSection& t) {
    return json{{"inner_lr", t.inner_lr},
                {"meta_lr", t.meta_lr},
                {"inner_steps", t.inner_steps},
                {"meta_batch_size", t.meta_batch_size},
                {"noise_level", t.noise_level},
                {"meta_epochs", t.meta_epochs},
                {"patience", t.patience},
                {"second_order", t.second_order},
                {"val_every", t.val_every},
                {"vrae_weight", t.vrae_weight},
                {"stochastic_encode", t.stochastic_encode},
                {"pretrain_lr", t.pretrain_lr},
                {"pretrain_epochs", t.pretrain_epochs},
                {"pretrain_patience", t.pretrain_patience},
                {"pretrain_batch_size", t.pretrain_batch_size},
                {"finetune_lr", t.finetune_lr},
                {"finetune_weight_decay", t.finetune_weight_decay},
                {"checkpoint_every", t.checkpoint_every}};
}

json eval_to_json(const EvalSection& e) {
    return json{{"horizon", e.horizon},
                {"meta_test_step", e.meta_test_step},
                {"gradient_steps", e.gradient_steps},
                {"runs", e.runs},
                {"dump_raw_errors", e.dump_raw_errors},
                {"export_embeddings", e.export_embeddings}};
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }

    reject_unknown(j,
                   {"data", "windowing", "model", "train", "eval", "out_dir",
                    "seed", "threads", "dataset_name"},
                   "top level");

    RunConfig cfg;
    get_to(j, "out_dir", cfg.out_dir);
    get_to(j, "seed", cfg.seed);
    get_to(j, "threads", cfg.threads);
    get_to(j, "dataset_name", cfg.dataset_name);

    if (j.contains("data")) {
        const json& d = j["data"];
        reject_unknown(d,
                       {"csv_paths", "csv_dir", "target_column",
                        "split_manifest", "impute_default", "impute_overrides",
                        "synthetic_enabled", "synth_regimes",
                        "synth_series_count", "synth_length", "synth_channels",
                        "synth_drift_rate", "synth_noise_std"},
                       "data");
        get_to(d, "csv_paths", cfg.data.csv_paths);
        get_to(d, "csv_dir", cfg.data.csv_dir);
        get_to(d, "target_column", cfg.data.target_column);
        get_to(d, "split_manifest", cfg.data.split_manifest);
        get_to(d, "impute_default", cfg.data.impute_default);
        get_to(d, "impute_overrides", cfg.data.impute_overrides);
        get_to(d, "synthetic_enabled", cfg.data.synthetic_enabled);
        get_to(d, "synth_regimes", cfg.data.synth_regimes);
        get_to(d, "synth_series_count", cfg.data.synth_series_count);
        get_to(d, "synth_length", cfg.data.synth_length);
        get_to(d, "synth_channels", cfg.data.synth_channels);
        get_to(d, "synth_drift_rate", cfg.data.synth_drift_rate);
        get_to(d, "synth_noise_std", cfg.data.synth_noise_std);
    }
    if (j.contains("windowing")) {
        const json& w = j["windowing"];
        reject_unknown(
            w, {"window_size", "step_size", "meta_window_length", "task_stride"},
            "windowing");
        get_to(w, "window_size", cfg.windowing.window_size);
        get_to(w, "step_size", cfg.windowing.step_size);
        get_to(w, "meta_window_length", cfg.windowing.meta_window_length);
        get_to(w, "task_stride", cfg.windowing.task_stride);
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        reject_unknown(m,
                       {"kind", "lstm_hidden", "feature_dim", "tanh_features",
                        "enc_hidden", "dec_hidden", "latent_dim"},
                       "model");
        get_to(m, "kind", cfg.model.kind);
        get_to(m, "lstm_hidden", cfg.model.lstm_hidden);
        get_to(m, "feature_dim", cfg.model.feature_dim);
        get_to(m, "tanh_features", cfg.model.tanh_features);
        get_to(m, "enc_hidden", cfg.model.enc_hidden);
        get_to(m, "dec_hidden", cfg.model.dec_hidden);
        get_to(m, "latent_dim", cfg.model.latent_dim);
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown(
            t, {"inner_lr", "meta_lr", "inner_steps", "meta_batch_size",
                "noise_level", "meta_epochs", "patience", "second_order",
                "val_every", "vrae_weight", "stochastic_encode", "pretrain_lr",
                "pretrain_epochs", "pretrain_patience", "pretrain_batch_size",
                "finetune_lr", "finetune_weight_decay", "checkpoint_every"},
            "train");
        get_to(t, "inner_lr", cfg.train.inner_lr);
        get_to(t, "meta_lr", cfg.train.meta_lr);
        get_to(t, "inner_steps", cfg.train.inner_steps);
        get_to(t, "meta_batch_size", cfg.train.meta_batch_size);
        get_to(t, "noise_level", cfg.train.noise_level);
        get_to(t, "meta_epochs", cfg.train.meta_epochs);
        get_to(t, "patience", cfg.train.patience);
        get_to(t, "second_order", cfg.train.second_order);
        get_to(t, "val_every", cfg.train.val_every);
        get_to(t, "vrae_weight", cfg.train.vrae_weight);
        get_to(t, "stochastic_encode", cfg.train.stochastic_encode);
        get_to(t, "pretrain_lr", cfg.train.pretrain_lr);
        get_to(t, "pretrain_epochs", cfg.train.pretrain_epochs);
        get_to(t, "pretrain_patience", cfg.train.pretrain_patience);
        get_to(t, "pretrain_batch_size", cfg.train.pretrain_batch_size);
        get_to(t, "finetune_lr", cfg.train.finetune_lr);
        get_to(t, "finetune_weight_decay", cfg.train.finetune_weight_decay);
        get_to(t, "checkpoint_every", cfg.train.checkpoint_every);
    }
    if (j.contains("eval")) {
        const json& e = j["eval"];
        reject_unknown(e,
                       {"horizon", "meta_test_step", "gradient_steps", "runs",
                        "dump_raw_errors", "export_embeddings"},
                       "eval");
        get_to(e, "horizon", cfg.eval.horizon);
        get_to(e, "meta_test_step", cfg.eval.meta_test_step);
        get_to(e, "gradient_steps", cfg.eval.gradient_steps);
        get_to(e, "runs", cfg.eval.runs);
        get_to(e, "dump_raw_errors", cfg.eval.dump_raw_errors);
        get_to(e, "export_embeddings", cfg.eval.export_embeddings);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string RunConfig::canonical_json() const {
    json j{{"data", data_to_json(data)},
           {"windowing", windowing_to_json(windowing)},
           {"model", model_to_json(model)},
           {"train", train_to_json(train)},
           {"eval", eval_to_json(eval)},
           {"out_dir", out_dir},
           {"seed", seed},
           {"threads", threads},
           {"dataset_name", dataset_name}};
    return j.dump(2);
}

std::uint64_t RunConfig::pipeline_hash() const {
    json j{{"data", data_to_json(data)},
           {"windowing", windowing_to_json(windowing)},
           {"seed", seed}};
    return fnv1a(j.dump());
}

std::uint64_t RunConfig::model_hash() const {
    json j{{"data", data_to_json(data)},
           {"windowing", windowing_to_json(windowing)},
           {"model", model_to_json(model)},
           {"train", train_to_json(train)},
           {"seed", seed}};
    return fnv1a(j.dump());
}

void RunConfig::validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (windowing.window_size < 1 || windowing.step_size < 1 ||
        windowing.meta_window_length < 1 || windowing.task_stride < 1)
        throw ConfigError("windowing values must be >= 1");
    const std::set<std::string> kinds{"maml", "mmaml", "lstm-finetune",
                                      "target-mean"};
    if (!kinds.count(model.kind))
        throw ConfigError("unknown model kind '" + model.kind + "'");
    if (!data.synthetic_enabled && data.csv_paths.empty() &&
        data.csv_dir.empty())
        throw ConfigError("no data source: csv_paths, csv_dir, or synthetic");
    if (!data.synthetic_enabled && data.target_column.empty())
        throw ConfigError("target_column is required for CSV data");
    const std::set<std::string> policies{"interpolate"};
    auto check_policy = [](const std::string& p) {
        if (p == "interpolate") return;
        if (p.rfind("constant:", 0) == 0) {
            std::stod(p.substr(9));
            return;
        }
        throw ConfigError("unknown imputation policy '" + p + "'");
    };
    check_policy(data.impute_default);
    for (const auto& [col, p] : data.impute_overrides) check_policy(p);
    maml_config().validate();
    if (model.kind == "mmaml") mmaml_config().validate();
    for (int g : eval.gradient_steps)
        if (g < 1) throw ConfigError("eval gradient_steps must be >= 1");
    if (eval.gradient_steps.empty())
        throw ConfigError("eval gradient_steps must not be empty");
    metatest_config(eval.gradient_steps.front()).validate();
}

MamlConfig RunConfig::maml_config() const {
    MamlConfig m;
    m.inner_lr = train.inner_lr;
    m.meta_lr = train.meta_lr;
    m.inner_steps = train.inner_steps;
    m.meta_batch_size = train.meta_batch_size;
    m.noise_level = train.noise_level;
    m.meta_epochs = train.meta_epochs;
    m.patience = train.patience;
    m.second_order = train.second_order;
    m.val_every = train.val_every;
    return m;
}

MmamlConfig RunConfig::mmaml_config() const {
    MmamlConfig m;
    static_cast<MamlConfig&>(m) = maml_config();
    m.vrae_weight = train.vrae_weight;
    m.latent_dim = model.latent_dim;
    m.stochastic_encode = train.stochastic_encode;
    return m;
}

NetConfig RunConfig::net_config(int input_channels) const {
    NetConfig n;
    n.input_channels = input_channels;
    n.lstm_hidden = model.lstm_hidden;
    n.feature_dim = model.feature_dim;
    n.tanh_features = model.tanh_features;
    return n;
}

ModNetConfig RunConfig::modnet_config(int input_channels) const {
    ModNetConfig m;
    m.summary_dim = input_channels + 1;
    m.enc_hidden = model.enc_hidden;
    m.dec_hidden = model.dec_hidden;
    m.latent_dim = model.latent_dim;
    m.film_dim = model.feature_dim;
    return m;
}

MetaTestConfig RunConfig::metatest_config(int gradient_steps) const {
    MetaTestConfig m;
    m.horizon = eval.horizon;
    m.meta_test_step = eval.meta_test_step;
    m.gradient_steps = gradient_steps;
    m.runs = eval.runs;
    m.seed = seed;
    return m;
}

std::vector<ChannelImpute> RunConfig::impute_policies(
    const std::vector<std::string>& channel_names) const {
    auto parse = [](const std::string& p) {
        if (p == "interpolate") return ChannelImpute::interpolate();
        return ChannelImpute::constant(std::stod(p.substr(9)));
    };
    std::vector<ChannelImpute> out;
    for (const auto& name : channel_names) {
        auto it = data.impute_overrides.find(name);
        out.push_back(parse(it != data.impute_overrides.end()
                                ? it->second
                                : data.impute_default));
    }
    return out;
}

SynthConfig RunConfig::synth_config() const {
    SynthConfig s;
    s.regimes = data.synth_regimes;
    s.series_count = data.synth_series_count;
    s.length = data.synth_length;
    s.seed = seed;
    s.channels = data.synth_channels;
    s.drift_rate = data.synth_drift_rate;
    s.noise_std = data.synth_noise_std;
    return s;
}

}  // namespace metatsr
