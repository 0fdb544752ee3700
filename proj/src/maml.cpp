#include "metatsr/maml.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

namespace metatsr {

namespace {

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

struct SupportFeatures {
    std::vector<Vector> phi;
    std::vector<double> labels;
};

SupportFeatures support_features(const TaskNetwork& net,
                                 const MetaWindow& support) {
    SupportFeatures sf;
    sf.phi.reserve(support.windows.size());
    sf.labels.reserve(support.windows.size());
    for (const auto& w : support.windows) {
        sf.phi.push_back(net.features(w.inputs));
        sf.labels.push_back(w.label);
    }
    return sf;
}

// Head-only gradient-descent steps given precomputed features. Returns the
// final per-sample residual signs of the FIRST step through `first_signs`
// when requested (used by the exact meta-gradient).
AdaptedHead adapt_on_features(const SupportFeatures& sf, const Vector& theta0,
                              double bias0, const MamlConfig& cfg,
                              const FilmParams* film,
                              std::vector<double>* first_signs) {
    const std::size_t l = sf.phi.size();
    const int f = static_cast<int>(theta0.size());
    Vector theta = theta0;
    double bias = bias0;
    for (int step = 0; step < cfg.inner_steps; ++step) {
        const Vector eff = film ? film->apply(theta) : theta;
        Vector g = Vector::Zero(f);
        double gb = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            const double pred = eff.dot(sf.phi[i]) + bias;
            const double s = sign0(sf.labels[i] - pred);
            if (first_signs && step == 0) (*first_signs)[i] = s;
            const Vector phi_eff =
                film ? film->gamma.cwiseProduct(sf.phi[i]) : sf.phi[i];
            g -= s * phi_eff;
            gb -= s;
        }
        g /= static_cast<double>(l);
        gb /= static_cast<double>(l);
        if (!g.allFinite() || !std::isfinite(gb))
            throw NumericError("divergent inner loop");
        theta -= cfg.inner_lr * g;
        bias -= cfg.inner_lr * gb;
    }
    AdaptedHead out;
    out.theta_prime = std::move(theta);
    out.bias_prime = bias;
    out.steps_taken = cfg.inner_steps;
    return out;
}

}  // namespace

void MamlConfig::validate() const {
    if (inner_lr <= 0.0) throw ConfigError("inner_lr must be positive");
    if (meta_lr < 0.0) throw ConfigError("meta_lr must be nonnegative");
    if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
    if (meta_batch_size < 1) throw ConfigError("meta_batch_size must be >= 1");
    if (noise_level < 0.0) throw ConfigError("noise_level must be >= 0");
    if (meta_epochs < 1) throw ConfigError("meta_epochs must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (val_every < 1) throw ConfigError("val_every must be >= 1");
}

AdaptedHead inner_adapt(const TaskNetwork& net, const MetaWindow& support,
                        const MamlConfig& cfg, const FilmParams* film) {
    if (support.windows.empty()) throw DataError("empty support set");
    const auto sf = support_features(net, support);
    AdaptedHead head =
        adapt_on_features(sf, net.head, net.head_bias, cfg, film, nullptr);
    head.source_support = &support;
    return head;
}

double forward_adapted(const TaskNetwork& net, const AdaptedHead& head,
                       const Matrix& window, const FilmParams* film) {
    return net.forward_with_head(window, head.theta_prime, head.bias_prime,
                                 film);
}

double kernel_oracle_predict(const TaskNetwork& net, const MetaWindow& support,
                             const Matrix& query_window,
                             const MamlConfig& cfg) {
    if (cfg.inner_steps != 1)
        throw ConfigError("kernel oracle requires exactly one inner step");
    if (support.windows.empty()) throw DataError("empty support set");

    const double alpha = cfg.inner_lr;
    const double l = static_cast<double>(support.windows.size());
    const Vector phi_q = net.features(query_window);
    const double base = net.head.dot(phi_q) + net.head_bias;

    double eps = 0.0;
    for (const auto& w : support.windows) {
        const Vector phi_i = net.features(w.inputs);
        const double pred_i = net.head.dot(phi_i) + net.head_bias;
        const double s = sign0(w.label - pred_i);
        const double kernel = phi_i.dot(phi_q) + 1.0;  // +1: bias feature
        eps -= (alpha / l) * s * kernel;
    }
    return base - eps;
}

MetaWindow meta_augment(const MetaWindow& support, double noise_level,
                        RngStream& rng) {
    MetaWindow out = support;
    if (noise_level <= 0.0) return out;
    for (auto& w : out.windows) w.label += rng.gaussian(0.0, noise_level);
    return out;
}

double meta_task_backward(const TaskNetwork& net, const MetaWindow& support,
                          const MetaWindow& query, const MamlConfig& cfg,
                          const FilmParams* film, GradientBundle& out) {
    if (support.windows.empty() || query.windows.empty())
        throw DataError("virtual task with empty half");
    const std::size_t l = support.windows.size();
    const std::size_t m = query.windows.size();
    const double alpha = cfg.inner_lr;

    // Support pass with caches (needed again by the second-order path).
    std::vector<TaskNetwork::FeatureCache> sup_cache(l);
    SupportFeatures sf;
    sf.phi.resize(l);
    sf.labels.resize(l);
    for (std::size_t i = 0; i < l; ++i) {
        sf.phi[i] = net.features(support.windows[i].inputs, sup_cache[i]);
        sf.labels[i] = support.windows[i].label;
    }
    std::vector<double> signs(l, 0.0);
    const AdaptedHead adapted =
        adapt_on_features(sf, net.head, net.head_bias, cfg, film, &signs);

    const Vector eff_adapted =
        film ? film->apply(adapted.theta_prime) : adapted.theta_prime;

    // Query pass.
    double loss = 0.0;
    Vector u = Vector::Zero(net.feature_dim());  // dL/d theta'
    double du_bias = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        TaskNetwork::FeatureCache cache;
        const Vector phi = net.features(query.windows[j].inputs, cache);
        const double pred = eff_adapted.dot(phi) + adapted.bias_prime;
        const double resid = query.windows[j].label - pred;
        loss += std::abs(resid);
        const double dpred = -sign0(resid) / static_cast<double>(m);

        u += dpred * (film ? film->gamma.cwiseProduct(phi) : phi);
        du_bias += dpred;
        if (film) {
            out.dgamma += dpred * adapted.theta_prime.cwiseProduct(phi);
            out.dbeta += dpred * phi;
        }
        features_backward(net, cache, dpred * eff_adapted, out);
    }
    loss /= static_cast<double>(m);

    // theta' = theta - alpha * grad: the identity path carries u into the
    // initial head in both modes (the MAE head Hessian is zero a.e.).
    out.dhead += u;
    out.dhead_bias += du_bias;

    // Support-feature path of the exact one-step meta-gradient:
    // theta' = theta + (alpha/l) sum_i s_i gamma.*phi_i.
    if (cfg.second_order && cfg.inner_steps == 1) {
        const Vector gu = film ? film->gamma.cwiseProduct(u) : u;
        for (std::size_t i = 0; i < l; ++i) {
            if (signs[i] == 0.0) continue;
            const double w = alpha / static_cast<double>(l) * signs[i];
            features_backward(net, sup_cache[i], w * gu, out);
            if (film) out.dgamma += w * sf.phi[i].cwiseProduct(u);
        }
    }
    return loss;
}

double adapted_query_mae(const TaskNetwork& net, const MetaWindow& support,
                         const MetaWindow& query, const MamlConfig& cfg,
                         const FilmParams* film) {
    const AdaptedHead head = inner_adapt(net, support, cfg, film);
    double total = 0.0;
    for (const auto& w : query.windows)
        total += std::abs(w.label - forward_adapted(net, head, w.inputs, film));
    return total / static_cast<double>(query.windows.size());
}

std::vector<std::size_t> sample_batch(std::size_t task_count,
                                      std::size_t batch_size, RngStream& rng) {
    std::vector<std::size_t> idx(task_count);
    std::iota(idx.begin(), idx.end(), 0);
    const std::size_t take = std::min(batch_size, task_count);
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + rng.index(task_count - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(take);
    return idx;
}

void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = std::min<std::size_t>(threads, n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    for (auto& t : pool) t.join();
}

MetaTrainResult meta_train(const std::vector<VirtualTask>& tasks,
                           TaskNetwork net, const MamlConfig& cfg,
                           const std::vector<VirtualTask>& validation,
                           RngStream rng, int threads, const TrainHooks* hooks,
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

    auto validate_net = [&](const TaskNetwork& candidate) {
        std::vector<double> maes(validation.size());
        parallel_for(validation.size(), threads, [&](std::size_t i) {
            maes[i] = adapted_query_mae(candidate, *validation[i].support,
                                        *validation[i].query, cfg);
        });
        double sum = 0.0;
        for (double v : maes) sum += v;
        return sum / static_cast<double>(maes.size());
    };

    MetaTrainResult result;
    int start_epoch = 0;
    if (resume) {
        start_epoch = resume->next_epoch;
        result.best_val = resume->best_val;
        result.best_epoch = resume->best_epoch;
        result.net = net;  // caller restores best separately when resuming
    } else {
        result.best_val = validate_net(net);
        result.best_epoch = 0;
        result.net = net;
    }

    double last_val = result.best_val;
    for (int epoch = start_epoch; epoch < cfg.meta_epochs; ++epoch) {
        auto epoch_rng = rng.derive("epoch", static_cast<std::uint64_t>(epoch));
        auto sample_rng = epoch_rng.derive("sample");
        const auto batch =
            sample_batch(tasks.size(), cfg.meta_batch_size, sample_rng);

        std::vector<GradientBundle> slot_grads(batch.size());
        std::vector<double> slot_mae(batch.size());
        parallel_for(batch.size(), threads, [&](std::size_t s) {
            const VirtualTask& task = tasks[batch[s]];
            slot_grads[s] = GradientBundle::zeros_like(net);
            if (cfg.noise_level > 0.0) {
                auto noise_rng = epoch_rng.derive("noise", s);
                const MetaWindow augmented =
                    meta_augment(*task.support, cfg.noise_level, noise_rng);
                slot_mae[s] = meta_task_backward(net, augmented, *task.query,
                                                 cfg, nullptr, slot_grads[s]);
            } else {
                slot_mae[s] = meta_task_backward(net, *task.support,
                                                 *task.query, cfg, nullptr,
                                                 slot_grads[s]);
            }
        });

        GradientBundle total = GradientBundle::zeros_like(net);
        double train_mae = 0.0;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            total.add_scaled(slot_grads[s], 1.0);
            train_mae += slot_mae[s];
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        total.scale(inv);
        train_mae *= inv;
        if (!total.all_finite())
            throw NumericError("non-finite meta-gradient at epoch " +
                               std::to_string(epoch));

        auto params = parameters(net);
        auto grads = parameters(total);
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params[p].size; ++i)
                params[p].data[i] -= cfg.meta_lr * grads[p].data[i];

        if ((epoch + 1) % cfg.val_every == 0) {
            last_val = validate_net(net);
            if (last_val < result.best_val) {
                result.best_val = last_val;
                result.best_epoch = epoch + 1;
                result.net = net;
            }
        }
        result.log.push_back({epoch + 1, train_mae, last_val, elapsed()});
        result.epochs_run = epoch + 1;

        if (hooks && hooks->checkpoint_every > 0 && hooks->on_checkpoint &&
            (epoch + 1) % hooks->checkpoint_every == 0)
            hooks->on_checkpoint(epoch + 1, net);

        if ((epoch + 1) - result.best_epoch >= cfg.patience) break;
    }
    result.final_net = std::move(net);
    return result;
}

}  // namespace metatsr
