#include "metatsr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace metatsr {

void MetaTestConfig::validate() const {
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (meta_test_step < 0) throw ConfigError("meta_test_step must be >= 0");
    if (gradient_steps < 1) throw ConfigError("gradient_steps must be >= 1");
    if (runs < 1) throw ConfigError("runs must be >= 1");
}

long adaptation_point_count(long meta_window_count, int step, int horizon) {
    const long last = meta_window_count - 1 - horizon;
    if (last < 0) return 0;
    return last / step + 1;
}

EvalRun meta_test_single(Adapter& adapter,
                         const std::vector<std::vector<MetaWindow>>& series,
                         const MetaTestConfig& cfg) {
    cfg.validate();
    const int H = cfg.horizon;
    EvalRun run;
    run.per_horizon_mae.assign(H, 0.0);
    std::vector<long> horizon_counts(H, 0);

    for (const auto& mws : series) {
        const long m = static_cast<long>(mws.size());
        const int step = cfg.meta_test_step > 0
                             ? cfg.meta_test_step
                             : std::max(1l, m / 100);
        for (long t = 0; t + H <= m - 1; t += step) {
            adapter.reset();
            adapter.adapt(mws[t], cfg.gradient_steps);
            ++run.adaptation_points;
            for (int h = 1; h <= H; ++h) {
                const MetaWindow& q = mws[t + h];
                for (const auto& w : q.windows) {
                    const double err =
                        std::abs(adapter.predict(w.inputs) - w.label);
                    run.per_horizon_mae[h - 1] += err;
                    ++horizon_counts[h - 1];
                    run.raw_abs_errors.push_back(err);
                }
            }
        }
    }
    if (run.adaptation_points == 0)
        throw DataError(
            "meta-testing needs at least horizon+1 = " +
            std::to_string(H + 1) + " meta-windows in one test series");
    for (int h = 0; h < H; ++h)
        run.per_horizon_mae[h] /= static_cast<double>(horizon_counts[h]);
    double total = 0.0;
    for (double e : run.raw_abs_errors) total += e;
    run.aggregate_mae = total / static_cast<double>(run.raw_abs_errors.size());
    return run;
}

namespace {

EvalResult summarize_runs(std::vector<EvalRun> runs, const MetaTestConfig& cfg,
                          const std::string& tag) {
    EvalResult r;
    r.run_count = static_cast<int>(runs.size());
    r.model_tag = tag;
    const int H = cfg.horizon;
    r.per_horizon_mae.assign(H, 0.0);
    std::vector<double> aggregates;
    for (const auto& run : runs) {
        for (int h = 0; h < H; ++h) r.per_horizon_mae[h] += run.per_horizon_mae[h];
        aggregates.push_back(run.aggregate_mae);
    }
    for (int h = 0; h < H; ++h)
        r.per_horizon_mae[h] /= static_cast<double>(runs.size());
    const double n = static_cast<double>(aggregates.size());
    double mean = 0.0;
    for (double a : aggregates) mean += a;
    mean /= n;
    r.aggregate_mae = mean;
    if (aggregates.size() > 1) {
        double ss = 0.0;
        for (double a : aggregates) ss += (a - mean) * (a - mean);
        const double s = std::sqrt(ss / (n - 1.0));
        r.ci95_half_width = 1.96 * s / std::sqrt(n);
    }
    r.runs = std::move(runs);
    return r;
}

}  // namespace

EvalResult meta_test(Adapter& adapter,
                     const std::vector<std::vector<MetaWindow>>& series,
                     const MetaTestConfig& cfg) {
    std::vector<EvalRun> runs;
    for (int i = 0; i < cfg.runs; ++i)
        runs.push_back(meta_test_single(adapter, series, cfg));
    return summarize_runs(std::move(runs), cfg, adapter.tag());
}

EvalResult meta_test_runs(const AdapterFactory& factory,
                          const std::vector<std::vector<MetaWindow>>& series,
                          const MetaTestConfig& cfg) {
    std::vector<EvalRun> runs;
    std::string tag;
    RngStream base(cfg.seed);
    for (int i = 0; i < cfg.runs; ++i) {
        auto adapter = factory(base.derive("run", i).seed());
        tag = adapter->tag();
        runs.push_back(meta_test_single(*adapter, series, cfg));
    }
    return summarize_runs(std::move(runs), cfg, tag);
}

double target_mean_baseline(const MetaWindow& support) {
    if (support.windows.empty()) throw DataError("empty support set");
    double sum = 0.0;
    for (const auto& w : support.windows) sum += w.label;
    return sum / static_cast<double>(support.windows.size());
}

AdaptedHead finetune_baseline(const TaskNetwork& net, const MetaWindow& support,
                              double lr, int steps, double weight_decay) {
    if (support.windows.empty()) throw DataError("empty support set");
    std::vector<Vector> phi;
    std::vector<double> labels;
    for (const auto& w : support.windows) {
        phi.push_back(net.features(w.inputs));
        labels.push_back(w.label);
    }
    const double l = static_cast<double>(phi.size());
    Vector theta = net.head;
    double bias = net.head_bias;
    for (int step = 0; step < steps; ++step) {
        Vector g = Vector::Zero(theta.size());
        double gb = 0.0;
        for (std::size_t i = 0; i < phi.size(); ++i) {
            const double pred = theta.dot(phi[i]) + bias;
            const double r = labels[i] - pred;
            const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
            g -= s * phi[i];
            gb -= s;
        }
        g /= l;
        gb /= l;
        if (!g.allFinite() || !std::isfinite(gb))
            throw NumericError("divergent inner loop");
        theta = (1.0 - weight_decay) * theta - lr * g;
        bias -= lr * gb;
    }
    AdaptedHead out;
    out.theta_prime = std::move(theta);
    out.bias_prime = bias;
    out.steps_taken = steps;
    out.source_support = &support;
    return out;
}

namespace {

class TargetMeanAdapter final : public Adapter {
public:
    std::string tag() const override { return "target-mean"; }
    void reset() override { mean_ = 0.0; }
    void adapt(const MetaWindow& support, int) override {
        mean_ = target_mean_baseline(support);
    }
    double predict(const Matrix&) const override { return mean_; }
    std::uint64_t pristine_digest() const override { return 0; }

private:
    double mean_ = 0.0;
};

class MamlAdapter final : public Adapter {
public:
    MamlAdapter(TaskNetwork net, double inner_lr)
        : net_(std::move(net)), inner_lr_(inner_lr) {
        digest_ = param_digest(net_);
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    std::string tag() const override { return "maml"; }
    void reset() override {
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    void adapt(const MetaWindow& support, int gradient_steps) override {
        MamlConfig cfg;
        cfg.inner_lr = inner_lr_;
        cfg.inner_steps = gradient_steps;
        head_ = inner_adapt(net_, support, cfg);
    }
    double predict(const Matrix& window) const override {
        return forward_adapted(net_, head_, window);
    }
    std::uint64_t pristine_digest() const override { return digest_; }

private:
    TaskNetwork net_;
    double inner_lr_;
    AdaptedHead head_;
    std::uint64_t digest_;
};

class FinetuneAdapter final : public Adapter {
public:
    FinetuneAdapter(TaskNetwork net, double lr, double weight_decay)
        : net_(std::move(net)), lr_(lr), weight_decay_(weight_decay) {
        digest_ = param_digest(net_);
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    std::string tag() const override { return "lstm-finetune"; }
    void reset() override {
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    void adapt(const MetaWindow& support, int gradient_steps) override {
        head_ = finetune_baseline(net_, support, lr_, gradient_steps,
                                  weight_decay_);
    }
    double predict(const Matrix& window) const override {
        return forward_adapted(net_, head_, window);
    }
    std::uint64_t pristine_digest() const override { return digest_; }

private:
    TaskNetwork net_;
    double lr_;
    double weight_decay_;
    AdaptedHead head_;
    std::uint64_t digest_;
};

class MmamlAdapter final : public Adapter {
public:
    MmamlAdapter(TaskNetwork net, ModulationNetwork mod, MmamlConfig cfg)
        : net_(std::move(net)), mod_(std::move(mod)), cfg_(std::move(cfg)) {
        digest_ = param_digest(net_) ^ param_digest(mod_);
        film_ = FilmParams::identity(net_.feature_dim());
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    std::string tag() const override { return "mmaml"; }
    void reset() override {
        film_ = FilmParams::identity(net_.feature_dim());
        head_.theta_prime = net_.head;
        head_.bias_prime = net_.head_bias;
    }
    void adapt(const MetaWindow& support, int gradient_steps) override {
        const Encoding enc = encode(mod_, summarize(support), false, nullptr);
        film_ = modulate(mod_, enc.z);
        MmamlConfig cfg = cfg_;
        cfg.inner_steps = gradient_steps;
        head_ = inner_adapt(net_, support, cfg, &film_);
    }
    double predict(const Matrix& window) const override {
        return forward_adapted(net_, head_, window, &film_);
    }
    std::uint64_t pristine_digest() const override { return digest_; }

private:
    TaskNetwork net_;
    ModulationNetwork mod_;
    MmamlConfig cfg_;
    FilmParams film_;
    AdaptedHead head_;
    std::uint64_t digest_;
};

}  // namespace

std::unique_ptr<Adapter> make_target_mean_adapter() {
    return std::make_unique<TargetMeanAdapter>();
}

std::unique_ptr<Adapter> make_maml_adapter(TaskNetwork trained,
                                           double inner_lr) {
    return std::make_unique<MamlAdapter>(std::move(trained), inner_lr);
}

std::unique_ptr<Adapter> make_finetune_adapter(TaskNetwork pretrained,
                                               double lr, double weight_decay) {
    return std::make_unique<FinetuneAdapter>(std::move(pretrained), lr,
                                             weight_decay);
}

std::unique_ptr<Adapter> make_mmaml_adapter(TaskNetwork trained,
                                            ModulationNetwork mod,
                                            MmamlConfig cfg) {
    return std::make_unique<MmamlAdapter>(std::move(trained), std::move(mod),
                                          std::move(cfg));
}

PretrainResult pretrain(TaskNetwork net,
                        const std::vector<LabeledWindow>& training, double lr,
                        int epochs, int patience,
                        const std::vector<LabeledWindow>& validation,
                        int batch_size, RngStream rng, int threads) {
    if (training.empty()) throw DataError("no training windows");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");

    auto validation_mae = [&](const TaskNetwork& candidate) {
        if (validation.empty()) return 0.0;
        std::vector<double> errs(validation.size());
        parallel_for(validation.size(), threads, [&](std::size_t i) {
            errs[i] = std::abs(candidate.forward(validation[i].inputs) -
                               validation[i].label);
        });
        double sum = 0.0;
        for (double e : errs) sum += e;
        return sum / static_cast<double>(errs.size());
    };

    PretrainResult result;
    result.best_val = validation_mae(net);
    result.best_epoch = 0;
    result.net = net;

    std::vector<std::size_t> order(training.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto epoch_rng = rng.derive("epoch", static_cast<std::uint64_t>(epoch));
        auto perm_rng = epoch_rng.derive("perm");
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[perm_rng.index(i)]);

        double train_total = 0.0;
        long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end = std::min(
                order.size(), start + static_cast<std::size_t>(batch_size));
            std::vector<const LabeledWindow*> batch;
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(&training[order[i]]);
            GradientBundle g = GradientBundle::zeros_like(net);
            train_total += backward(net, batch, Loss::mae, nullptr, g);
            ++batches;
            if (!g.all_finite())
                throw NumericError("non-finite gradient during pretraining");
            auto params = parameters(net);
            auto grads = parameters(g);
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p].size; ++i)
                    params[p].data[i] -= lr * grads[p].data[i];
        }

        const double val = validation_mae(net);
        result.log.push_back({epoch + 1,
                              train_total / static_cast<double>(batches), val,
                              0.0});
        if (val < result.best_val) {
            result.best_val = val;
            result.best_epoch = epoch + 1;
            result.net = net;
        } else if ((epoch + 1) - result.best_epoch >= patience) {
            break;
        }
    }
    return result;
}

std::string to_string(AblationAxis a) {
    switch (a) {
        case AblationAxis::gradient_steps: return "gradient_steps";
        case AblationAxis::vrae_weight: return "vrae_weight";
        case AblationAxis::horizon: return "horizon";
    }
    return "gradient_steps";
}

std::vector<AblationRow> ablation_sweep(
    AblationAxis axis, const std::vector<double>& values,
    const std::function<std::unique_ptr<Adapter>(double, std::uint64_t)>&
        factory,
    const std::vector<std::vector<MetaWindow>>& series,
    const MetaTestConfig& base) {
    std::vector<AblationRow> rows;
    for (double value : values) {
        MetaTestConfig cfg = base;
        if (axis == AblationAxis::gradient_steps)
            cfg.gradient_steps = static_cast<int>(value);
        else if (axis == AblationAxis::horizon)
            cfg.horizon = static_cast<int>(value);
        const EvalResult r = meta_test_runs(
            [&](std::uint64_t seed) { return factory(value, seed); }, series,
            cfg);
        for (int h = 0; h < cfg.horizon; ++h) {
            // Per-horizon CI from the per-run per-horizon values.
            double mean = 0.0;
            for (const auto& run : r.runs) mean += run.per_horizon_mae[h];
            mean /= static_cast<double>(r.runs.size());
            double ci = 0.0;
            if (r.runs.size() > 1) {
                double ss = 0.0;
                for (const auto& run : r.runs) {
                    const double d = run.per_horizon_mae[h] - mean;
                    ss += d * d;
                }
                const double n = static_cast<double>(r.runs.size());
                ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
            }
            rows.push_back({value, h + 1, mean, ci});
        }
    }
    return rows;
}

void SynthConfig::validate() const {
    if (regimes < 1) throw ConfigError("regimes must be >= 1");
    if (series_count < 1) throw ConfigError("series_count must be >= 1");
    if (length < 16) throw ConfigError("length must be >= 16");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (drift_rate < 0.0) throw ConfigError("drift_rate must be >= 0");
    if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
}

SynthFamily synth_task_family(const SynthConfig& cfg) {
    cfg.validate();
    SynthFamily family;
    family.config = cfg;
    RngStream root(cfg.seed);

    for (int s = 0; s < cfg.series_count; ++s) {
        const int regime = s % cfg.regimes;
        family.regime_of.push_back(regime);
        auto rng = root.derive("series", s);

        // Smooth inputs: AR(1) with unit marginal variance.
        const double rho = 0.9;
        const double innov = std::sqrt(1.0 - rho * rho);
        Matrix u(cfg.length, cfg.channels);
        for (int c = 0; c < cfg.channels; ++c) {
            double v = rng.gaussian(0.0, 1.0);
            for (long t = 0; t < cfg.length; ++t) {
                u(t, c) = v;
                v = rho * v + innov * rng.gaussian(0.0, 1.0);
            }
        }

        // Regime-dependent lag-1 coefficients; odd regimes squash the input.
        Vector coeff(cfg.channels);
        for (int c = 0; c < cfg.channels; ++c) {
            const double base = 0.9 - 0.25 * c;
            coeff(c) = (regime % 2 == 0) ? base : -base;
        }

        // Slow coefficient drift: long-period sinusoids with random phase.
        std::vector<double> period(cfg.channels), phase(cfg.channels);
        for (int c = 0; c < cfg.channels; ++c) {
            period[c] =
                static_cast<double>(cfg.length) * (0.4 + 0.2 * rng.uniform(0, 1));
            phase[c] = rng.uniform(0.0, 2.0 * M_PI);
        }

        // Wandering level: scaled random walk, frozen when drift_rate == 0.
        Vector level = Vector::Zero(cfg.length);
        if (cfg.drift_rate > 0.0) {
            const double step_std =
                cfg.drift_rate / std::sqrt(static_cast<double>(cfg.length));
            double v = 0.0;
            for (long t = 0; t < cfg.length; ++t) {
                v += step_std * rng.gaussian(0.0, 1.0);
                level(t) = v;
            }
        }

        Vector y(cfg.length);
        for (long t = 0; t < cfg.length; ++t) {
            double task = 0.0;
            for (int c = 0; c < cfg.channels; ++c) {
                const double drift =
                    1.0 + 0.5 * cfg.drift_rate *
                              std::sin(2.0 * M_PI * t / period[c] + phase[c]);
                const double lag1 = t >= 1 ? u(t - 1, c) : 0.0;
                const double lag2 = t >= 2 ? u(t - 2, c) : 0.0;
                const double feature = (regime % 2 == 0)
                                           ? lag1 + 0.3 * lag2
                                           : std::tanh(1.5 * lag1) +
                                                 0.3 * std::tanh(1.5 * lag2);
                task += coeff(c) * drift * feature;
            }
            y(t) = level(t) + 0.6 * task + cfg.noise_std * rng.gaussian(0, 1);
        }

        LongSeries series;
        series.id = "synth-" + std::to_string(s) + "-r" + std::to_string(regime);
        series.channels = std::move(u);
        series.target = y;
        family.series.push_back(std::move(series));
    }
    return family;
}

SynthFamily synth_task_family(int regimes, int series_count, long length,
                              std::uint64_t seed) {
    SynthConfig cfg;
    cfg.regimes = regimes;
    cfg.series_count = series_count;
    cfg.length = length;
    cfg.seed = seed;
    return synth_task_family(cfg);
}

}  // namespace metatsr
