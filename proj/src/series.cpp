#include "metatsr/series.hpp"

#include <algorithm>
#include <cmath>

namespace metatsr {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation" || s == "val") return Split::validation;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split name: " + s);
}

void LongSeries::validate() const {
    if (channels.rows() != target.size())
        throw DataError("series '" + id + "': channel rows != target length");
    if (channels.cols() < 1 || channels.rows() < 1)
        throw DataError("series '" + id + "': empty");
}

bool LongSeries::all_finite() const {
    return channels.allFinite() && target.allFinite();
}

void WindowSpec::validate() const {
    if (window_size < 1) throw ConfigError("window_size must be >= 1");
    if (step_size < 1) throw ConfigError("step_size must be >= 1");
}

double PreprocessParams::apply_target(double y) const {
    double v = (y - target_min) / (target_max - target_min);
    return std::clamp(v, 0.0, 1.0);
}

double PreprocessParams::invert_target(double y01) const {
    return target_min + y01 * (target_max - target_min);
}

std::vector<LabeledWindow> rolling_window(const LongSeries& series,
                                          const WindowSpec& spec) {
    spec.validate();
    series.validate();
    const long L = series.length();
    const long delta = spec.window_size;
    const long k = spec.step_size;
    if (delta > L - 1)
        throw DataError("series shorter than window plus label");

    const long count = (L - 1 - delta) / k + 1;
    std::vector<LabeledWindow> out;
    out.reserve(count);
    for (long j = 0; j < count; ++j) {
        LabeledWindow w;
        w.origin_index = j * k;
        w.inputs = series.channels.middleRows(w.origin_index, delta);
        w.label = series.target(w.origin_index + delta);
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<MetaWindow> generate_meta_windows(
    const std::vector<LabeledWindow>& windows, int l,
    const std::string& series_id) {
    if (l < 1) throw ConfigError("meta-window length must be >= 1");
    const long n = static_cast<long>(windows.size()) / l;
    std::vector<MetaWindow> out;
    out.reserve(n);
    for (long t = 0; t < n; ++t) {
        MetaWindow mw;
        mw.series_id = series_id;
        mw.t_index = t;
        mw.windows.assign(windows.begin() + t * l,
                          windows.begin() + (t + 1) * l);
        out.push_back(std::move(mw));
    }
    return out;
}

std::vector<VirtualTask> virtual_tasks(
    const std::vector<MetaWindow>& meta_windows, int step) {
    if (step < 1) throw ConfigError("virtual task step must be >= 1");
    std::vector<VirtualTask> out;
    std::size_t run_begin = 0;
    while (run_begin < meta_windows.size()) {
        std::size_t run_end = run_begin;
        while (run_end < meta_windows.size() &&
               meta_windows[run_end].series_id ==
                   meta_windows[run_begin].series_id)
            ++run_end;
        const std::size_t run_len = run_end - run_begin;
        for (std::size_t t = 0; t + 1 < run_len;
             t += static_cast<std::size_t>(step))
            out.push_back({&meta_windows[run_begin + t],
                           &meta_windows[run_begin + t + 1]});
        run_begin = run_end;
    }
    return out;
}

MetaWindowSummary summarize(const MetaWindow& mw) {
    const int l = mw.size();
    const int c = l > 0 ? static_cast<int>(mw.windows[0].inputs.cols()) : 0;
    MetaWindowSummary s;
    s.values.resize(l, c + 1);
    for (int i = 0; i < l; ++i) {
        s.values.block(i, 0, 1, c) = mw.windows[i].inputs.row(0);
        s.values(i, c) = mw.windows[i].label;
    }
    return s;
}

namespace {

// Linear interpolation over NaN runs; edge runs copy the nearest valid value.
void interpolate_channel(Eigen::Ref<Vector> col) {
    const long n = col.size();
    long i = 0;
    while (i < n) {
        if (!std::isnan(col(i))) {
            ++i;
            continue;
        }
        long lo = i - 1;  // last valid before the run, -1 if none
        long hi = i;
        while (hi < n && std::isnan(col(hi))) ++hi;  // first valid after
        if (lo < 0 && hi >= n) {
            col.setZero();  // whole channel missing
            return;
        }
        if (lo < 0) {
            col.segment(0, hi).setConstant(col(hi));
        } else if (hi >= n) {
            col.segment(lo + 1, n - lo - 1).setConstant(col(lo));
        } else {
            const double a = col(lo), b = col(hi);
            const double span = static_cast<double>(hi - lo);
            for (long t = lo + 1; t < hi; ++t)
                col(t) = a + (b - a) * static_cast<double>(t - lo) / span;
        }
        i = hi;
    }
}

LongSeries impute(const LongSeries& raw,
                  const std::vector<ChannelImpute>& policies) {
    LongSeries s = raw;
    for (int c = 0; c < s.channel_count(); ++c) {
        const ChannelImpute pol =
            c < static_cast<int>(policies.size()) ? policies[c]
                                                  : ChannelImpute::interpolate();
        if (pol.kind == ChannelImpute::Kind::constant) {
            for (long t = 0; t < s.length(); ++t)
                if (std::isnan(s.channels(t, c))) s.channels(t, c) = pol.value;
        } else {
            interpolate_channel(s.channels.col(c));
        }
    }
    for (long t = 0; t < s.length(); ++t)
        if (std::isnan(s.target(t))) s.target(t) = 0.0;
    return s;
}

}  // namespace

PreprocessParams fit_preprocess(const std::vector<LongSeries>& train_series,
                                const std::vector<ChannelImpute>& impute_cfg) {
    if (train_series.empty())
        throw DataError("no training series to fit preprocessing on");
    const int c = train_series[0].channel_count();

    PreprocessParams p;
    p.impute = impute_cfg;
    p.channel_mean = Vector::Zero(c);
    p.channel_std = Vector::Zero(c);

    long total = 0;
    double tmin = std::numeric_limits<double>::infinity();
    double tmax = -std::numeric_limits<double>::infinity();
    std::vector<LongSeries> imputed;
    imputed.reserve(train_series.size());
    for (const auto& raw : train_series) {
        if (raw.channel_count() != c)
            throw DataError("channel count mismatch across series");
        imputed.push_back(impute(raw, impute_cfg));
        const auto& s = imputed.back();
        total += s.length();
        p.channel_mean += s.channels.colwise().sum().transpose();
        tmin = std::min(tmin, s.target.minCoeff());
        tmax = std::max(tmax, s.target.maxCoeff());
    }
    p.channel_mean /= static_cast<double>(total);
    for (const auto& s : imputed)
        p.channel_std +=
            (s.channels.rowwise() - p.channel_mean.transpose())
                .array().square().colwise().sum().matrix().transpose();
    p.channel_std =
        (p.channel_std / static_cast<double>(total)).array().sqrt().matrix();
    for (int i = 0; i < c; ++i)
        p.channel_std(i) = std::max(p.channel_std(i), PreprocessParams::kStdFloor);

    if (tmax - tmin <= 0.0) throw DataError("degenerate target range");
    p.target_min = tmin;
    p.target_max = tmax;
    return p;
}

LongSeries preprocess(const LongSeries& raw, const PreprocessParams& params) {
    if (params.target_max - params.target_min <= 0.0)
        throw DataError("degenerate target range");
    LongSeries s = impute(raw, params.impute);
    s.channels = (s.channels.rowwise() - params.channel_mean.transpose())
                     .array()
                     .rowwise() /
                 params.channel_std.transpose().array();
    for (long t = 0; t < s.length(); ++t)
        s.target(t) = params.apply_target(s.target(t));
    if (!s.all_finite())
        throw NumericError("non-finite values after preprocessing in '" +
                           s.id + "'");
    return s;
}

void split_series(std::vector<LongSeries>& all,
                  const std::map<std::string, Split>* manifest) {
    if (manifest) {
        for (auto& s : all) {
            auto it = manifest->find(s.id);
            if (it == manifest->end())
                throw DataError("split manifest missing series '" + s.id + "'");
            s.split = it->second;
        }
        return;
    }
    const long m = static_cast<long>(all.size());
    if (m < 3)
        throw DataError("need at least 3 series (or a split manifest)");
    const long n_val = std::max(1l, std::lround(0.2 * static_cast<double>(m)));
    const long n_test = n_val;
    const long n_train = m - n_val - n_test;
    for (long i = 0; i < m; ++i) {
        if (i < n_train)
            all[i].split = Split::train;
        else if (i < n_train + n_val)
            all[i].split = Split::validation;
        else
            all[i].split = Split::test;
    }
}

Vector autocorrelation(const Vector& y, int max_lag) {
    const long n = y.size();
    if (n <= max_lag)
        throw ConfigError("series length must exceed max_lag");
    const double mean = y.mean();
    const Vector centered = y.array() - mean;
    const double denom = centered.squaredNorm();
    if (denom <= 0.0) throw NumericError("constant series");
    Vector acf(max_lag + 1);
    for (int h = 0; h <= max_lag; ++h)
        acf(h) = centered.head(n - h).dot(centered.tail(n - h)) / denom;
    return acf;
}

}  // namespace metatsr
