#pragma once

#include "metatsr/net.hpp"

#include <functional>
#include <limits>

namespace metatsr {

struct MamlConfig {
    double inner_lr = 0.01;   // alpha
    double meta_lr = 0.0005;  // beta
    int inner_steps = 1;
    int meta_batch_size = 20;
    double noise_level = 0.0;
    int meta_epochs = 10000;
    int patience = 500;
    bool second_order = true;
    int val_every = 1;

    void validate() const;
};

/// Head after fast adaptation; the extractor and FiLM are untouched.
struct AdaptedHead {
    Vector theta_prime;
    double bias_prime = 0.0;
    int steps_taken = 0;
    const MetaWindow* source_support = nullptr;
};

/// cfg.inner_steps gradient-descent updates of the head only, using mean MAE
/// over the support set. Throws NumericError("divergent inner loop") on
/// non-finite gradients.
AdaptedHead inner_adapt(const TaskNetwork& net, const MetaWindow& support,
                        const MamlConfig& cfg,
                        const FilmParams* film = nullptr);

double forward_adapted(const TaskNetwork& net, const AdaptedHead& head,
                       const Matrix& window, const FilmParams* film = nullptr);

/// Closed-form prediction after one-step MAE last-layer adaptation:
///   pred(x_j) - eps_j,  eps_j = -(alpha/l) sum_i sign(y_i - pred(x_i))
///                                 * (phi(x_i)^T phi(x_j) + 1)
/// The +1 is the bias feature; alpha/l reflects the mean-loss convention.
/// Requires cfg.inner_steps == 1 (identity FiLM, MAE).
double kernel_oracle_predict(const TaskNetwork& net, const MetaWindow& support,
                             const Matrix& query_window,
                             const MamlConfig& cfg);

/// Copy of the support with zero-mean Gaussian noise of the given standard
/// deviation added to the labels. Inputs are untouched.
MetaWindow meta_augment(const MetaWindow& support, double noise_level,
                        RngStream& rng);

/// Post-adaptation query MAE plus the meta-gradient contribution for one
/// virtual task, accumulated into `out`. With second_order and one inner
/// step the support-feature path is included exactly (the head-path Hessian
/// term vanishes for MAE); otherwise the adapted head is treated as constant
/// (first-order).
double meta_task_backward(const TaskNetwork& net, const MetaWindow& support,
                          const MetaWindow& query, const MamlConfig& cfg,
                          const FilmParams* film, GradientBundle& out);

/// Evaluation-only path: adapt on the support, return query mean MAE.
double adapted_query_mae(const TaskNetwork& net, const MetaWindow& support,
                         const MetaWindow& query, const MamlConfig& cfg,
                         const FilmParams* film = nullptr);

struct TrainLogRow {
    int epoch = 0;
    double train_mae = 0.0;
    double val_mae = 0.0;
    double wall_seconds = 0.0;
};

/// Resume snapshot: parameters plus loop position. Epoch RNG streams are
/// derived from the base seed, so no generator state needs to be carried.
struct MetaTrainState {
    int next_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
};

struct TrainHooks {
    int checkpoint_every = 0;  // epochs; 0 disables
    std::function<void(int epoch, const TaskNetwork& current)> on_checkpoint;
};

struct MetaTrainResult {
    TaskNetwork net;        // best-validation parameters
    TaskNetwork final_net;  // parameters after the last epoch
    std::vector<TrainLogRow> log;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
};

/// Alg.-2-style meta-training: per epoch, a batch of virtual tasks sampled
/// without replacement, per-task fast adaptation, one outer update of all
/// parameters against the post-adaptation query MAE; early stopping on
/// meta-validation MAE.
MetaTrainResult meta_train(const std::vector<VirtualTask>& tasks,
                           TaskNetwork net, const MamlConfig& cfg,
                           const std::vector<VirtualTask>& validation,
                           RngStream rng, int threads = 1,
                           const TrainHooks* hooks = nullptr,
                           const MetaTrainState* resume = nullptr);

/// Deterministic batch sampling without replacement within the batch.
std::vector<std::size_t> sample_batch(std::size_t task_count,
                                      std::size_t batch_size, RngStream& rng);

/// Fixed-order indexed parallel map: each index writes only its own slot, so
/// results do not depend on the thread count.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace metatsr
