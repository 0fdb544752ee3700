#pragma once

#include "metatsr/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace metatsr {

enum class Split { train, validation, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// One long multivariate time series with a designated target channel.
/// Rows of `channels` are time steps; `target` has one value per row.
struct LongSeries {
    Matrix channels;  // length x C
    Vector target;    // length
    std::string id;
    Split split = Split::train;

    long length() const { return channels.rows(); }
    int channel_count() const { return static_cast<int>(channels.cols()); }
    void validate() const;
    /// True when every channel value and target value is finite.
    bool all_finite() const;
};

/// Rolling-window parameters: window size (time steps per window) and the
/// stride between consecutive window starts.
struct WindowSpec {
    int window_size = 1;  // delta
    int step_size = 1;    // k
    void validate() const;
};

/// Fixed-length input window plus the scalar label one step after it.
struct LabeledWindow {
    Matrix inputs;      // window_size x C
    double label = 0.0;
    long origin_index = 0;  // time index of the window's first row
};

/// Ordered group of exactly l consecutive labeled windows from one series;
/// the unit of support and query sets.
struct MetaWindow {
    std::vector<LabeledWindow> windows;
    std::string series_id;
    long t_index = 0;

    int size() const { return static_cast<int>(windows.size()); }
};

/// Support/query pair of temporally adjacent meta-windows. Holds
/// non-owning pointers into the meta-window list it was built from; that
/// list must outlive the task.
struct VirtualTask {
    const MetaWindow* support = nullptr;
    const MetaWindow* query = nullptr;
};

/// Downsampled meta-window: one row per window holding the first time step
/// of every input channel plus the window's label as an extra column.
struct MetaWindowSummary {
    Matrix values;  // l x (C+1)
};

/// Per-channel imputation policy applied before any scaling.
struct ChannelImpute {
    enum class Kind { interpolate, constant };
    Kind kind = Kind::interpolate;
    double value = 0.0;  // used when kind == constant

    static ChannelImpute interpolate() { return {Kind::interpolate, 0.0}; }
    static ChannelImpute constant(double v) { return {Kind::constant, v}; }
};

/// Scaling parameters fitted on the training split only. Channel values are
/// standardized, the target is min-max mapped to [0,1]. Standard deviations
/// are floored at 1e-8. Target NaNs impute to zero in raw units.
struct PreprocessParams {
    Vector channel_mean;
    Vector channel_std;
    double target_min = 0.0;
    double target_max = 1.0;
    std::vector<ChannelImpute> impute;

    static constexpr double kStdFloor = 1e-8;

    /// Min-max map with clamping to [0,1] for out-of-range values.
    double apply_target(double y) const;
    /// Inverse of the (unclamped) min-max map.
    double invert_target(double y01) const;
};

/// Generates labeled windows: window j covers rows [j*k, j*k + delta) and is
/// labeled with the target at j*k + delta, for every j with j*k + delta <= L-1.
/// Count: floor((L - 1 - delta) / k) + 1.
/// Throws DataError("series shorter than window plus label") when no window fits.
std::vector<LabeledWindow> rolling_window(const LongSeries& series,
                                          const WindowSpec& spec);

/// Groups windows into meta-windows of exactly l windows. The trailing
/// |windows| mod l windows are discarded; t_index runs 0,1,2,...
std::vector<MetaWindow> generate_meta_windows(
    const std::vector<LabeledWindow>& windows, int l,
    const std::string& series_id);

/// Pairs (T_t, T_{t+1}) at t = 0, step, 2*step, ... within each series run.
/// Input must be ordered by (series_id, t_index); pairs never span series.
std::vector<VirtualTask> virtual_tasks(
    const std::vector<MetaWindow>& meta_windows, int step);

MetaWindowSummary summarize(const MetaWindow& mw);

/// Fits means/stds (per channel) and target min/max on the training series,
/// after imputation. Throws DataError("degenerate target range") when the
/// target is constant on the training split.
PreprocessParams fit_preprocess(const std::vector<LongSeries>& train_series,
                                const std::vector<ChannelImpute>& impute);

/// Imputation, per-channel standardization, target min-max with clamping.
LongSeries preprocess(const LongSeries& raw, const PreprocessParams& params);

/// Assigns whole series to splits. With a manifest (id -> split) the manifest
/// wins and must cover every id. Otherwise validation and test each get
/// max(1, round(0.2*M)) series in input order from the back, training keeps
/// the rest. Throws DataError when fewer than 3 series and no manifest.
void split_series(std::vector<LongSeries>& all,
                  const std::map<std::string, Split>* manifest = nullptr);

/// Sample autocorrelation at lags 0..max_lag; acf[0] == 1.
/// Throws NumericError("constant series") for zero variance.
Vector autocorrelation(const Vector& y, int max_lag);

}  // namespace metatsr
