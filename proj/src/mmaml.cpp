#include "metatsr/mmaml.hpp"

#include <chrono>
#include <cmath>

namespace metatsr {

void ModNetConfig::validate() const {
    if (summary_dim < 2) throw ConfigError("summary_dim must be >= 2");
    if (enc_hidden < 1 || dec_hidden < 1)
        throw ConfigError("modulation hidden sizes must be >= 1");
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    if (film_dim < 1) throw ConfigError("film_dim must be >= 1");
}

ModulationNetwork ModulationNetwork::make(const ModNetConfig& cfg,
                                          RngStream& rng) {
    cfg.validate();
    ModulationNetwork mod;
    mod.config = cfg;
    auto enc_rng = rng.derive("encoder");
    mod.encoder = LstmCell::make(cfg.summary_dim, cfg.enc_hidden, enc_rng);
    auto mu_rng = rng.derive("mu");
    mod.mu_head = Dense::make(cfg.latent_dim, cfg.enc_hidden, mu_rng);
    auto lv_rng = rng.derive("logvar");
    mod.logvar_head = Dense::make(cfg.latent_dim, cfg.enc_hidden, lv_rng);
    auto dec_rng = rng.derive("decoder");
    mod.decoder = LstmCell::make(cfg.latent_dim, cfg.dec_hidden, dec_rng);
    auto out_rng = rng.derive("dec_out");
    mod.dec_out = Dense::make(cfg.summary_dim, cfg.dec_hidden, out_rng);
    // Identity modulation at initialization: gamma = 1 + 0, beta = 0.
    mod.generator.W = Matrix::Zero(2 * cfg.film_dim, cfg.latent_dim);
    mod.generator.b = Vector::Zero(2 * cfg.film_dim);
    return mod;
}

std::vector<ParamRef> parameters(ModulationNetwork& mod) {
    std::vector<ParamRef> refs;
    auto push = [&](const std::string& name, Matrix& m) {
        refs.push_back({name, m.data(), (std::size_t)m.size()});
    };
    auto pushv = [&](const std::string& name, Vector& v) {
        refs.push_back({name, v.data(), (std::size_t)v.size()});
    };
    push("enc.W", mod.encoder.W);
    push("enc.U", mod.encoder.U);
    pushv("enc.b", mod.encoder.b);
    push("mu.W", mod.mu_head.W);
    pushv("mu.b", mod.mu_head.b);
    push("logvar.W", mod.logvar_head.W);
    pushv("logvar.b", mod.logvar_head.b);
    push("dec.W", mod.decoder.W);
    push("dec.U", mod.decoder.U);
    pushv("dec.b", mod.decoder.b);
    push("dec_out.W", mod.dec_out.W);
    pushv("dec_out.b", mod.dec_out.b);
    push("gen.W", mod.generator.W);
    pushv("gen.b", mod.generator.b);
    return refs;
}

std::uint64_t param_digest(const ModulationNetwork& mod) {
    auto refs = parameters(const_cast<ModulationNetwork&>(mod));
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& r : refs) {
        h = fnv1a(r.name, h);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(r.data),
                                   r.size * sizeof(double)),
                  h);
    }
    return h;
}

ModGrads ModGrads::zeros_like(const ModulationNetwork& mod) {
    ModGrads g;
    g.enc.resize_like(mod.encoder);
    g.dec.resize_like(mod.decoder);
    g.dmu_W = Matrix::Zero(mod.mu_head.W.rows(), mod.mu_head.W.cols());
    g.dmu_b = Vector::Zero(mod.mu_head.b.size());
    g.dlogvar_W =
        Matrix::Zero(mod.logvar_head.W.rows(), mod.logvar_head.W.cols());
    g.dlogvar_b = Vector::Zero(mod.logvar_head.b.size());
    g.ddec_out_W = Matrix::Zero(mod.dec_out.W.rows(), mod.dec_out.W.cols());
    g.ddec_out_b = Vector::Zero(mod.dec_out.b.size());
    g.dgen_W = Matrix::Zero(mod.generator.W.rows(), mod.generator.W.cols());
    g.dgen_b = Vector::Zero(mod.generator.b.size());
    return g;
}

void ModGrads::add_scaled(const ModGrads& o, double s) {
    enc.dW += s * o.enc.dW;
    enc.dU += s * o.enc.dU;
    enc.db += s * o.enc.db;
    dec.dW += s * o.dec.dW;
    dec.dU += s * o.dec.dU;
    dec.db += s * o.dec.db;
    dmu_W += s * o.dmu_W;
    dmu_b += s * o.dmu_b;
    dlogvar_W += s * o.dlogvar_W;
    dlogvar_b += s * o.dlogvar_b;
    ddec_out_W += s * o.ddec_out_W;
    ddec_out_b += s * o.ddec_out_b;
    dgen_W += s * o.dgen_W;
    dgen_b += s * o.dgen_b;
}

void ModGrads::scale(double s) {
    enc.dW *= s;
    enc.dU *= s;
    enc.db *= s;
    dec.dW *= s;
    dec.dU *= s;
    dec.db *= s;
    dmu_W *= s;
    dmu_b *= s;
    dlogvar_W *= s;
    dlogvar_b *= s;
    ddec_out_W *= s;
    ddec_out_b *= s;
    dgen_W *= s;
    dgen_b *= s;
}

bool ModGrads::all_finite() const {
    return enc.dW.allFinite() && enc.dU.allFinite() && enc.db.allFinite() &&
           dec.dW.allFinite() && dec.dU.allFinite() && dec.db.allFinite() &&
           dmu_W.allFinite() && dmu_b.allFinite() && dlogvar_W.allFinite() &&
           dlogvar_b.allFinite() && ddec_out_W.allFinite() &&
           ddec_out_b.allFinite() && dgen_W.allFinite() && dgen_b.allFinite();
}

std::vector<ParamRef> parameters(ModGrads& g) {
    std::vector<ParamRef> refs;
    auto push = [&](const std::string& name, Matrix& m) {
        refs.push_back({name, m.data(), (std::size_t)m.size()});
    };
    auto pushv = [&](const std::string& name, Vector& v) {
        refs.push_back({name, v.data(), (std::size_t)v.size()});
    };
    push("enc.W", g.enc.dW);
    push("enc.U", g.enc.dU);
    pushv("enc.b", g.enc.db);
    push("mu.W", g.dmu_W);
    pushv("mu.b", g.dmu_b);
    push("logvar.W", g.dlogvar_W);
    pushv("logvar.b", g.dlogvar_b);
    push("dec.W", g.dec.dW);
    push("dec.U", g.dec.dU);
    pushv("dec.b", g.dec.db);
    push("dec_out.W", g.ddec_out_W);
    pushv("dec_out.b", g.ddec_out_b);
    push("gen.W", g.dgen_W);
    pushv("gen.b", g.dgen_b);
    return refs;
}

namespace {

struct EncoderCache {
    LstmCell::Cache enc;
    Vector h_enc;
};

Encoding encode_cached(const ModulationNetwork& mod,
                       const MetaWindowSummary& summary, bool stochastic,
                       RngStream* rng, const Vector* eta_in,
                       EncoderCache* cache) {
    if (summary.values.cols() != mod.config.summary_dim)
        throw DataError("summary width does not match modulation network");
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    Matrix hs = mod.encoder.forward(summary.values, &c.enc);
    c.h_enc = hs.row(hs.rows() - 1).transpose();

    Encoding e;
    e.mu = mod.mu_head.forward(c.h_enc);
    e.logvar = mod.logvar_head.forward(c.h_enc);
    e.stochastic = stochastic;
    if (stochastic) {
        if (eta_in) {
            e.eta = *eta_in;
        } else {
            if (!rng)
                throw ConfigError("stochastic encode needs an RNG or eta");
            e.eta.resize(e.mu.size());
            for (long i = 0; i < e.eta.size(); ++i)
                e.eta(i) = rng->gaussian(0.0, 1.0);
        }
        const Vector sigma = (0.5 * e.logvar.array()).exp().matrix();
        e.z = e.mu + sigma.cwiseProduct(e.eta);
    } else {
        e.eta = Vector::Zero(e.mu.size());
        e.z = e.mu;
    }
    return e;
}

}  // namespace

Encoding encode(const ModulationNetwork& mod, const MetaWindowSummary& summary,
                bool stochastic, RngStream* rng) {
    return encode_cached(mod, summary, stochastic, rng, nullptr, nullptr);
}

FilmParams modulate(const ModulationNetwork& mod, const Vector& z) {
    if (z.size() != mod.config.latent_dim)
        throw DataError("latent size mismatch");
    const Vector raw = mod.generator.forward(z);
    const int f = mod.config.film_dim;
    FilmParams film;
    film.gamma = Vector::Ones(f) + raw.head(f);
    film.beta = raw.tail(f);
    return film;
}

Matrix decode(const ModulationNetwork& mod, const Vector& z, int l) {
    Matrix input(l, z.size());
    for (int t = 0; t < l; ++t) input.row(t) = z.transpose();
    Matrix hs = mod.decoder.forward(input, nullptr);
    Matrix recon(l, mod.config.summary_dim);
    for (int t = 0; t < l; ++t)
        recon.row(t) =
            mod.dec_out.forward(hs.row(t).transpose()).transpose();
    return recon;
}

double kl_divergence(const Vector& mu, const Vector& logvar) {
    const auto var = logvar.array().exp();
    return 0.5 * (mu.array().square() + var - logvar.array() - 1.0).sum();
}

double vae_loss(const MetaWindowSummary& summary, const Matrix& reconstruction,
                const Vector& mu, const Vector& logvar) {
    if (summary.values.rows() != reconstruction.rows() ||
        summary.values.cols() != reconstruction.cols())
        throw DataError("reconstruction shape mismatch");
    const double mse = (summary.values - reconstruction).array().square().mean();
    return mse + kl_divergence(mu, logvar);
}

void MmamlConfig::validate() const {
    MamlConfig::validate();
    if (vrae_weight < 0.0) throw ConfigError("vrae_weight must be >= 0");
    if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
}

MmamlTaskTerms mmaml_task_backward(const TaskNetwork& net,
                                   const ModulationNetwork& mod,
                                   const MetaWindow& support,
                                   const MetaWindow& query,
                                   const MmamlConfig& cfg, const Vector* eta,
                                   GradientBundle& net_out, ModGrads& mod_out) {
    const MetaWindowSummary summary = summarize(support);
    const int l = summary.values.rows();
    const int d = summary.values.cols();

    EncoderCache enc_cache;
    const Encoding enc = encode_cached(mod, summary, eta != nullptr, nullptr,
                                       eta, &enc_cache);
    const FilmParams film = modulate(mod, enc.z);

    // Task-network path; the bundle's dgamma/dbeta collect this task's FiLM
    // gradients for the generator chain below.
    MmamlTaskTerms terms;
    terms.query_mae =
        meta_task_backward(net, support, query, cfg, &film, net_out);

    Vector dz = Vector::Zero(mod.config.latent_dim);
    {
        // gamma = 1 + raw.head(F); beta = raw.tail(F).
        Vector draw(2 * mod.config.film_dim);
        draw.head(mod.config.film_dim) = net_out.dgamma;
        draw.tail(mod.config.film_dim) = net_out.dbeta;
        mod_out.dgen_W.noalias() += draw * enc.z.transpose();
        mod_out.dgen_b += draw;
        dz += mod.generator.W.transpose() * draw;
    }

    Vector dmu = Vector::Zero(mod.config.latent_dim);
    Vector dlogvar = Vector::Zero(mod.config.latent_dim);

    if (cfg.vrae_weight > 0.0) {
        LstmCell::Cache dec_cache;
        Matrix dec_input(l, enc.z.size());
        for (int t = 0; t < l; ++t) dec_input.row(t) = enc.z.transpose();
        const Matrix h_dec = mod.decoder.forward(dec_input, &dec_cache);
        Matrix recon(l, d);
        for (int t = 0; t < l; ++t)
            recon.row(t) =
                mod.dec_out.forward(h_dec.row(t).transpose()).transpose();

        const double mse =
            (summary.values - recon).array().square().mean();
        const double kl = kl_divergence(enc.mu, enc.logvar);
        terms.vae = mse + kl;

        const double lambda = cfg.vrae_weight;
        const double scale = 2.0 * lambda / static_cast<double>(l * d);
        Matrix dh_dec(l, mod.config.dec_hidden);
        for (int t = 0; t < l; ++t) {
            const Vector drow =
                scale * (recon.row(t) - summary.values.row(t)).transpose();
            mod_out.ddec_out_W.noalias() +=
                drow * h_dec.row(t);
            mod_out.ddec_out_b += drow;
            dh_dec.row(t) = (mod.dec_out.W.transpose() * drow).transpose();
        }
        const Matrix dx_dec =
            mod.decoder.backward(dec_cache, dh_dec, mod_out.dec);
        dz += dx_dec.colwise().sum().transpose();

        dmu += lambda * enc.mu;
        dlogvar +=
            lambda * 0.5 * (enc.logvar.array().exp() - 1.0).matrix();
    }

    dmu += dz;
    if (enc.stochastic) {
        const Vector sigma = (0.5 * enc.logvar.array()).exp().matrix();
        dlogvar += 0.5 * dz.cwiseProduct(sigma).cwiseProduct(enc.eta);
    }

    mod_out.dmu_W.noalias() += dmu * enc_cache.h_enc.transpose();
    mod_out.dmu_b += dmu;
    mod_out.dlogvar_W.noalias() += dlogvar * enc_cache.h_enc.transpose();
    mod_out.dlogvar_b += dlogvar;

    const Vector dh_enc = mod.mu_head.W.transpose() * dmu +
                          mod.logvar_head.W.transpose() * dlogvar;
    Matrix dh_seq = Matrix::Zero(l, mod.config.enc_hidden);
    dh_seq.row(l - 1) = dh_enc.transpose();
    mod.encoder.backward(enc_cache.enc, dh_seq, mod_out.enc);

    terms.total = terms.query_mae + cfg.vrae_weight * terms.vae;
    return terms;
}

double mmaml_query_mae(const TaskNetwork& net, const ModulationNetwork& mod,
                       const MetaWindow& support, const MetaWindow& query,
                       const MmamlConfig& cfg) {
    const Encoding enc = encode(mod, summarize(support), false, nullptr);
    const FilmParams film = modulate(mod, enc.z);
    return adapted_query_mae(net, support, query, cfg, &film);
}

MmamlTrainResult mmaml_meta_train(const std::vector<VirtualTask>& tasks,
                                  TaskNetwork net, ModulationNetwork mod,
                                  const MmamlConfig& cfg,
                                  const std::vector<VirtualTask>& validation,
                                  RngStream rng, int threads,
                                  const MmamlTrainHooks* hooks,
                                  const MetaTrainState* resume) {
    cfg.validate();
    if (tasks.empty()) throw DataError("no training tasks");
    if (validation.empty()) throw DataError("no validation tasks");

    const auto t_start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t_start)
            .count();
    };

    auto validate_nets = [&](const TaskNetwork& n, const ModulationNetwork& m) {
        std::vector<double> maes(validation.size());
        parallel_for(validation.size(), threads, [&](std::size_t i) {
            maes[i] = mmaml_query_mae(n, m, *validation[i].support,
                                      *validation[i].query, cfg);
        });
        double sum = 0.0;
        for (double v : maes) sum += v;
        return sum / static_cast<double>(maes.size());
    };

    MmamlTrainResult result;
    int start_epoch = 0;
    if (resume) {
        start_epoch = resume->next_epoch;
        result.best_val = resume->best_val;
        result.best_epoch = resume->best_epoch;
        result.net = net;
        result.mod = mod;
    } else {
        result.best_val = validate_nets(net, mod);
        result.best_epoch = 0;
        result.net = net;
        result.mod = mod;
    }

    const int z = cfg.latent_dim;
    double last_val = result.best_val;
    for (int epoch = start_epoch; epoch < cfg.meta_epochs; ++epoch) {
        auto epoch_rng = rng.derive("epoch", static_cast<std::uint64_t>(epoch));
        auto sample_rng = epoch_rng.derive("sample");
        const auto batch =
            sample_batch(tasks.size(), cfg.meta_batch_size, sample_rng);

        std::vector<GradientBundle> slot_net(batch.size());
        std::vector<ModGrads> slot_mod(batch.size());
        std::vector<MmamlTaskTerms> slot_terms(batch.size());
        parallel_for(batch.size(), threads, [&](std::size_t s) {
            const VirtualTask& task = tasks[batch[s]];
            slot_net[s] = GradientBundle::zeros_like(net);
            slot_mod[s] = ModGrads::zeros_like(mod);

            Vector eta;
            const Vector* eta_ptr = nullptr;
            if (cfg.stochastic_encode) {
                auto eta_rng = epoch_rng.derive("eta", s);
                eta.resize(z);
                for (int i = 0; i < z; ++i) eta(i) = eta_rng.gaussian(0.0, 1.0);
                eta_ptr = &eta;
            }

            if (cfg.noise_level > 0.0) {
                auto noise_rng = epoch_rng.derive("noise", s);
                const MetaWindow augmented =
                    meta_augment(*task.support, cfg.noise_level, noise_rng);
                slot_terms[s] =
                    mmaml_task_backward(net, mod, augmented, *task.query, cfg,
                                        eta_ptr, slot_net[s], slot_mod[s]);
            } else {
                slot_terms[s] =
                    mmaml_task_backward(net, mod, *task.support, *task.query,
                                        cfg, eta_ptr, slot_net[s],
                                        slot_mod[s]);
            }
        });

        GradientBundle net_total = GradientBundle::zeros_like(net);
        ModGrads mod_total = ModGrads::zeros_like(mod);
        double train_mae = 0.0, recon = 0.0;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            net_total.add_scaled(slot_net[s], 1.0);
            mod_total.add_scaled(slot_mod[s], 1.0);
            train_mae += slot_terms[s].query_mae;
            recon += slot_terms[s].vae;
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        train_mae *= inv;
        recon *= inv;
        if (!net_total.all_finite() || !mod_total.all_finite())
            throw NumericError("non-finite meta-gradient at epoch " +
                               std::to_string(epoch));

        {
            auto params = parameters(net);
            auto grads = parameters(net_total);
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p].size; ++i)
                    params[p].data[i] -= cfg.meta_lr * inv * grads[p].data[i];
        }
        {
            auto params = parameters(mod);
            auto grads = parameters(mod_total);
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p].size; ++i)
                    params[p].data[i] -= cfg.meta_lr * inv * grads[p].data[i];
        }

        if ((epoch + 1) % cfg.val_every == 0) {
            last_val = validate_nets(net, mod);
            if (last_val < result.best_val) {
                result.best_val = last_val;
                result.best_epoch = epoch + 1;
                result.net = net;
                result.mod = mod;
            }
        }
        result.log.push_back({epoch + 1, train_mae, last_val, elapsed()});
        result.recon_mse_log.push_back(recon);
        result.epochs_run = epoch + 1;

        if (hooks && hooks->checkpoint_every > 0 && hooks->on_checkpoint &&
            (epoch + 1) % hooks->checkpoint_every == 0)
            hooks->on_checkpoint(epoch + 1, net, mod);

        if ((epoch + 1) - result.best_epoch >= cfg.patience) break;
    }
    result.final_net = std::move(net);
    result.final_mod = std::move(mod);
    return result;
}

MmamlPrediction mmaml_adapt_and_predict(
    const TaskNetwork& net, const ModulationNetwork& mod,
    const MetaWindow& support, const std::vector<const MetaWindow*>& queries,
    const MmamlConfig& cfg) {
    MmamlPrediction out;
    const Encoding enc = encode(mod, summarize(support), false, nullptr);
    out.film = modulate(mod, enc.z);
    out.head = inner_adapt(net, support, cfg, &out.film);

    for (const MetaWindow* q : queries) {
        std::vector<double> preds;
        preds.reserve(q->windows.size());
        double abs_sum = 0.0;
        for (const auto& w : q->windows) {
            const double p = forward_adapted(net, out.head, w.inputs, &out.film);
            preds.push_back(p);
            abs_sum += std::abs(w.label - p);
        }
        out.mae_per_query.push_back(abs_sum /
                                    static_cast<double>(q->windows.size()));
        out.predictions.push_back(std::move(preds));
    }
    return out;
}

SplitDistances split_similarity(
    const std::map<Split, std::vector<Vector>>& embeddings_by_split) {
    auto mean_of = [&](Split s) {
        auto it = embeddings_by_split.find(s);
        if (it == embeddings_by_split.end() || it->second.empty())
            throw DataError("empty split in similarity computation");
        Vector m = Vector::Zero(it->second[0].size());
        for (const auto& v : it->second) m += v;
        return Vector(m / static_cast<double>(it->second.size()));
    };
    const Vector train = mean_of(Split::train);
    const Vector val = mean_of(Split::validation);
    const Vector test = mean_of(Split::test);
    SplitDistances d;
    d.train_test = (train - test).norm();
    d.train_val = (train - val).norm();
    d.test_val = (test - val).norm();
    return d;
}

}  // namespace metatsr
