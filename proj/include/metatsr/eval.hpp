#pragma once

#include "metatsr/mmaml.hpp"

#include <memory>

namespace metatsr {

struct MetaTestConfig {
    int horizon = 10;       // H: query = next H meta-windows
    int meta_test_step = 0; // 0: per-series floor(M/100), floored at 1
    int gradient_steps = 1;
    int runs = 5;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Fast-adaptation model under the meta-testing protocol. reset() restores
/// the pristine trained parameters; adapt() fits on one support meta-window.
class Adapter {
public:
    virtual ~Adapter() = default;
    virtual std::string tag() const = 0;
    virtual void reset() = 0;
    virtual void adapt(const MetaWindow& support, int gradient_steps) = 0;
    virtual double predict(const Matrix& window_inputs) const = 0;
    /// Digest of the pristine parameters; constant across reset() calls.
    virtual std::uint64_t pristine_digest() const = 0;
};

struct EvalRun {
    std::vector<double> per_horizon_mae;  // length H
    double aggregate_mae = 0.0;
    std::vector<double> raw_abs_errors;   // every retained per-window error
    long adaptation_points = 0;
};

struct EvalResult {
    std::vector<double> per_horizon_mae;  // mean over runs
    double aggregate_mae = 0.0;           // mean of per-run aggregates
    double ci95_half_width = 0.0;         // 1.96 * s / sqrt(runs)
    int run_count = 0;
    std::string model_tag;
    std::uint64_t config_hash = 0;
    std::vector<EvalRun> runs;
};

/// Number of adaptation points for one series: t = 0, step, 2*step, ...
/// with t + H <= M-1.
long adaptation_point_count(long meta_window_count, int step, int horizon);

/// One protocol pass: for every test series, restore pristine parameters at
/// each support position, adapt, and score the next H meta-windows. Skips
/// nothing within range; points whose query range crosses the series end do
/// not exist. Throws when no series admits a single adaptation point.
EvalRun meta_test_single(Adapter& adapter,
                         const std::vector<std::vector<MetaWindow>>& series,
                         const MetaTestConfig& cfg);

/// cfg.runs passes of the same (deterministic) adapter; the CI collapses to
/// zero when nothing varies.
EvalResult meta_test(Adapter& adapter,
                     const std::vector<std::vector<MetaWindow>>& series,
                     const MetaTestConfig& cfg);

using AdapterFactory =
    std::function<std::unique_ptr<Adapter>(std::uint64_t seed)>;

/// cfg.runs passes with per-run seeds derived from cfg.seed; the factory may
/// re-run meta-training per seed.
EvalResult meta_test_runs(const AdapterFactory& factory,
                          const std::vector<std::vector<MetaWindow>>& series,
                          const MetaTestConfig& cfg);

/// Mean of the support labels.
double target_mean_baseline(const MetaWindow& support);

/// Last-layer fine-tuning with decoupled weight decay on the head vector:
/// theta <- (1 - weight_decay) * theta - lr * grad. Identical to inner_adapt
/// when weight_decay is zero.
AdaptedHead finetune_baseline(const TaskNetwork& net, const MetaWindow& support,
                              double lr, int steps, double weight_decay);

std::unique_ptr<Adapter> make_target_mean_adapter();
std::unique_ptr<Adapter> make_maml_adapter(TaskNetwork trained,
                                           double inner_lr);
std::unique_ptr<Adapter> make_finetune_adapter(TaskNetwork pretrained,
                                               double lr, double weight_decay);
std::unique_ptr<Adapter> make_mmaml_adapter(TaskNetwork trained,
                                            ModulationNetwork mod,
                                            MmamlConfig cfg);

struct PretrainResult {
    TaskNetwork net;  // best-validation parameters
    std::vector<TrainLogRow> log;
    int best_epoch = 0;
    double best_val = 0.0;
};

/// Standard supervised mini-batch training of all parameters with MAE loss
/// and early stopping on validation MAE.
PretrainResult pretrain(TaskNetwork net,
                        const std::vector<LabeledWindow>& training, double lr,
                        int epochs, int patience,
                        const std::vector<LabeledWindow>& validation,
                        int batch_size, RngStream rng, int threads = 1);

enum class AblationAxis { gradient_steps, vrae_weight, horizon };

std::string to_string(AblationAxis a);

struct AblationRow {
    double axis_value = 0.0;
    int horizon = 0;
    double mae = 0.0;
    double ci95 = 0.0;
};

/// Runs meta_test per axis value, holding everything else fixed; the factory
/// receives (axis value, run seed). Emits one row per (value, horizon).
std::vector<AblationRow> ablation_sweep(
    AblationAxis axis, const std::vector<double>& values,
    const std::function<std::unique_ptr<Adapter>(double, std::uint64_t)>&
        factory,
    const std::vector<std::vector<MetaWindow>>& series,
    const MetaTestConfig& base);

/// Synthetic family generator: regime-dependent functions of lagged inputs
/// with slowly drifting coefficients and a slowly wandering level, so that
/// adjacent meta-windows share a task and distant ones differ.
struct SynthConfig {
    int regimes = 2;
    int series_count = 6;
    long length = 6000;
    std::uint64_t seed = 0;
    int channels = 3;
    double drift_rate = 1.0;  // 0 freezes both drift and level
    double noise_std = 0.02;

    void validate() const;
};

struct SynthFamily {
    std::vector<LongSeries> series;
    SynthConfig config;
    std::vector<int> regime_of;
};

SynthFamily synth_task_family(const SynthConfig& cfg);
SynthFamily synth_task_family(int regimes, int series_count, long length,
                              std::uint64_t seed);

}  // namespace metatsr
