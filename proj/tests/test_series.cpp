#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "metatsr/series.hpp"

#include <cmath>
#include <set>

using namespace metatsr;

namespace {

LongSeries make_series(long length, int channels, std::uint64_t seed = 1,
                       const std::string& id = "s") {
    RngStream rng(seed);
    LongSeries s;
    s.id = id;
    s.channels.resize(length, channels);
    s.target.resize(length);
    for (long t = 0; t < length; ++t) {
        for (int c = 0; c < channels; ++c)
            s.channels(t, c) = rng.gaussian(0.0, 1.0);
        s.target(t) = rng.gaussian(0.0, 1.0);
    }
    return s;
}

// Independent enumeration: count j >= 0 with j*k + delta <= L-1.
long brute_force_window_count(long L, long delta, long k) {
    long count = 0;
    for (long j = 0;; ++j) {
        if (j * k + delta > L - 1) break;
        ++count;
    }
    return count;
}

}  // namespace

TEST_CASE("rolling_window matches enumerated examples") {
    WindowSpec spec{3, 1};

    auto s = make_series(10, 1);
    auto w = rolling_window(s, spec);
    CHECK(w.size() == 7);
    CHECK(w[0].origin_index == 0);
    CHECK(w[0].inputs.rows() == 3);
    CHECK(w[0].label == s.target(3));

    auto s4 = make_series(4, 1);
    CHECK(rolling_window(s4, spec).size() == 1);

    auto s11 = make_series(11, 2);
    auto w2 = rolling_window(s11, WindowSpec{3, 4});
    REQUIRE(w2.size() == 2);
    CHECK(w2[0].label == s11.target(3));
    CHECK(w2[1].label == s11.target(7));
    CHECK(w2[1].origin_index == 4);
}

TEST_CASE("rolling_window rejects too-short series") {
    auto s = make_series(3, 1);
    CHECK_THROWS_WITH_AS(rolling_window(s, WindowSpec{3, 1}),
                         "series shorter than window plus label", DataError);
    CHECK_THROWS_AS(rolling_window(s, WindowSpec{5, 1}), DataError);
}

TEST_CASE("window count formula vs exhaustive enumeration") {
    for (long L = 2; L <= 64; ++L) {
        for (long delta = 1; delta <= 16 && delta <= L - 1; ++delta) {
            for (long k = 1; k <= 8; ++k) {
                auto s = make_series(L, 1, 7);
                auto w = rolling_window(s, WindowSpec{(int)delta, (int)k});
                long expected = brute_force_window_count(L, delta, k);
                REQUIRE(static_cast<long>(w.size()) == expected);
                // Formula from the docs.
                REQUIRE(expected == (L - 1 - delta) / k + 1);
            }
        }
    }
}

TEST_CASE("every label equals the raw target one step past the window") {
    auto s = make_series(200, 3, 11);
    for (int k : {1, 2, 5}) {
        auto w = rolling_window(s, WindowSpec{7, k});
        for (const auto& lw : w) {
            REQUIRE(lw.label == s.target(lw.origin_index + 7));
            REQUIRE((lw.inputs - s.channels.middleRows(lw.origin_index, 7))
                        .cwiseAbs()
                        .maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("generate_meta_windows floors and discards the remainder") {
    auto s = make_series(300, 1, 3);
    auto all = rolling_window(s, WindowSpec{2, 1});

    auto take = [&](std::size_t n) {
        return std::vector<LabeledWindow>(all.begin(), all.begin() + n);
    };

    CHECK(generate_meta_windows(take(103), 50, "a").size() == 2);
    CHECK(generate_meta_windows(take(50), 50, "a").size() == 1);
    CHECK(generate_meta_windows(take(49), 50, "a").empty());
    CHECK(generate_meta_windows({}, 5, "a").empty());

    auto mws = generate_meta_windows(take(103), 50, "a");
    CHECK(mws[0].t_index == 0);
    CHECK(mws[1].t_index == 1);
    CHECK(mws[0].series_id == "a");
}

TEST_CASE("meta-windows partition the retained windows") {
    auto s = make_series(500, 2, 5);
    auto windows = rolling_window(s, WindowSpec{4, 2});
    for (int l : {1, 3, 7, 50}) {
        auto mws = generate_meta_windows(windows, l, "s");
        std::set<long> seen;
        for (const auto& mw : mws) {
            REQUIRE(mw.size() == l);
            long prev = -1;
            for (const auto& w : mw.windows) {
                REQUIRE(seen.insert(w.origin_index).second);
                REQUIRE(w.origin_index > prev);
                prev = w.origin_index;
            }
        }
        const long discarded =
            static_cast<long>(windows.size()) - static_cast<long>(seen.size());
        REQUIRE(discarded == static_cast<long>(windows.size()) % l);
        REQUIRE(discarded < l);
    }
}

TEST_CASE("virtual_tasks strides and respects series boundaries") {
    auto s = make_series(300, 1, 9);
    auto w = rolling_window(s, WindowSpec{2, 1});

    auto mws5 = generate_meta_windows(
        std::vector<LabeledWindow>(w.begin(), w.begin() + 50), 10, "a");
    REQUIRE(mws5.size() == 5);
    CHECK(virtual_tasks(mws5, 1).size() == 4);
    auto t2 = virtual_tasks(mws5, 2);
    REQUIRE(t2.size() == 2);
    CHECK(t2[0].support->t_index == 0);
    CHECK(t2[1].support->t_index == 2);

    // Two series of 3 meta-windows each, concatenated.
    auto a = generate_meta_windows(
        std::vector<LabeledWindow>(w.begin(), w.begin() + 30), 10, "a");
    auto b = generate_meta_windows(
        std::vector<LabeledWindow>(w.begin(), w.begin() + 30), 10, "b");
    std::vector<MetaWindow> both = a;
    both.insert(both.end(), b.begin(), b.end());
    auto tasks = virtual_tasks(both, 1);
    REQUIRE(tasks.size() == 4);
    for (const auto& t : tasks) {
        CHECK(t.support->series_id == t.query->series_id);
        CHECK(t.query->t_index == t.support->t_index + 1);
    }
}

TEST_CASE("virtual_tasks never spans series over random inputs") {
    RngStream rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<MetaWindow> mws;
        const int n_series = 1 + (int)rng.index(4);
        for (int si = 0; si < n_series; ++si) {
            const int count = (int)rng.index(6);  // 0..5 meta-windows
            for (int t = 0; t < count; ++t) {
                MetaWindow mw;
                mw.series_id = "s" + std::to_string(si);
                mw.t_index = t;
                mws.push_back(mw);
            }
        }
        const int step = 1 + (int)rng.index(3);
        for (const auto& task : virtual_tasks(mws, step)) {
            REQUIRE(task.support->series_id == task.query->series_id);
            REQUIRE(task.query->t_index == task.support->t_index + 1);
        }
    }
}

TEST_CASE("summarize lays out first samples plus labels") {
    MetaWindow mw;
    mw.series_id = "s";
    LabeledWindow w1, w2;
    w1.inputs.resize(3, 1);
    w1.inputs << 0.5, 9.0, 9.0;
    w1.label = 1.0;
    w2.inputs.resize(3, 1);
    w2.inputs << 0.7, 9.0, 9.0;
    w2.label = 2.0;
    mw.windows = {w1, w2};

    auto s = summarize(mw);
    REQUIRE(s.values.rows() == 2);
    REQUIRE(s.values.cols() == 2);
    CHECK(s.values(0, 0) == 0.5);
    CHECK(s.values(0, 1) == 1.0);
    CHECK(s.values(1, 0) == 0.7);
    CHECK(s.values(1, 1) == 2.0);
}

TEST_CASE("summarize shape and exact column reproduction") {
    auto s = make_series(3000, 13, 21);
    auto w = rolling_window(s, WindowSpec{5, 1});
    auto mws = generate_meta_windows(w, 50, "hr-like");
    REQUIRE(!mws.empty());
    auto sum = summarize(mws[0]);
    CHECK(sum.values.rows() == 50);
    CHECK(sum.values.cols() == 14);
    for (int i = 0; i < 50; ++i)
        for (int c = 0; c < 13; ++c)
            REQUIRE(sum.values(i, c) == mws[0].windows[i].inputs(0, c));

    // Constant series: all summary rows identical.
    LongSeries cs;
    cs.id = "const";
    cs.channels = Matrix::Constant(100, 2, 3.25);
    cs.target = Vector::Constant(100, 0.5);
    auto cw = rolling_window(cs, WindowSpec{4, 1});
    auto cmw = generate_meta_windows(cw, 8, "const");
    auto csum = summarize(cmw[0]);
    for (int i = 1; i < csum.values.rows(); ++i)
        REQUIRE((csum.values.row(i) - csum.values.row(0)).cwiseAbs().maxCoeff() ==
                0.0);
}

TEST_CASE("preprocess standardizes channels and min-maxes the target") {
    LongSeries s;
    s.id = "t";
    s.channels.resize(3, 1);
    s.channels << 2, 4, 6;
    s.target.resize(3);
    s.target << 10, 20, 30;

    auto params = fit_preprocess({s}, {ChannelImpute::interpolate()});
    auto out = preprocess(s, params);
    CHECK(std::abs(out.channels.col(0).mean()) < 1e-12);
    CHECK(out.target(0) == 0.0);
    CHECK(out.target(2) == 1.0);

    // Test-split value above the train max clamps to 1.
    LongSeries hot = s;
    hot.target << 10, 20, 99;
    auto hot_out = preprocess(hot, params);
    CHECK(hot_out.target(2) == 1.0);

    // Round trip is the identity for in-range values.
    for (double y : {10.0, 12.5, 20.0, 29.9, 30.0})
        CHECK(std::abs(params.invert_target((y - 10.0) / 20.0) - y) < 1e-9);
    for (double y01 : {0.0, 0.25, 0.5, 1.0})
        CHECK(std::abs(params.apply_target(params.invert_target(y01)) - y01) <
              1e-9);
}

TEST_CASE("preprocess rejects a degenerate target range") {
    LongSeries s;
    s.id = "flat";
    s.channels = Matrix::Random(5, 1);
    s.target = Vector::Constant(5, 7.0);
    CHECK_THROWS_WITH_AS(fit_preprocess({s}, {}), "degenerate target range",
                         DataError);
}

TEST_CASE("imputation policies") {
    LongSeries s;
    s.id = "gaps";
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.channels.resize(6, 2);
    s.channels << 1, 5, nan, nan, 3, 5, 4, nan, nan, 5, 6, 5;
    s.target.resize(6);
    s.target << 0, 1, nan, 3, 4, 10;

    auto params = fit_preprocess(
        {s}, {ChannelImpute::interpolate(), ChannelImpute::constant(-1.0)});
    auto out = preprocess(s, params);
    CHECK(out.all_finite());

    // Interpolated channel: gap between 1 and 3 fills with 2; tail run copies 4.
    Vector col0_raw(6);
    col0_raw << 1, 2, 3, 4, 4, 6;
    Vector expected =
        (col0_raw.array() - params.channel_mean(0)) / params.channel_std(0);
    CHECK((out.channels.col(0) - expected).cwiseAbs().maxCoeff() < 1e-12);

    // Constant channel: NaNs became -1 before scaling.
    const double scaled_sentinel =
        (-1.0 - params.channel_mean(1)) / params.channel_std(1);
    CHECK(out.channels(1, 1) == doctest::Approx(scaled_sentinel));

    // Target NaN imputes to 0 in raw units, then min-max maps it.
    CHECK(out.target(2) == doctest::Approx(params.apply_target(0.0)));
}

TEST_CASE("split_series applies the rounding rule with floor one") {
    auto check_counts = [](int m, int want_train, int want_val, int want_test) {
        std::vector<LongSeries> all;
        for (int i = 0; i < m; ++i) all.push_back(make_series(5, 1, i, "s" + std::to_string(i)));
        split_series(all);
        int n_train = 0, n_val = 0, n_test = 0;
        for (const auto& s : all) {
            if (s.split == Split::train) ++n_train;
            if (s.split == Split::validation) ++n_val;
            if (s.split == Split::test) ++n_test;
        }
        CHECK(n_train == want_train);
        CHECK(n_val == want_val);
        CHECK(n_test == want_test);
    };
    check_counts(5, 3, 1, 1);
    check_counts(15, 9, 3, 3);
    check_counts(3, 1, 1, 1);

    std::vector<LongSeries> two = {make_series(5, 1, 0, "a"),
                                   make_series(5, 1, 1, "b")};
    CHECK_THROWS_AS(split_series(two), DataError);

    // Manifest override wins and must cover every id.
    std::map<std::string, Split> manifest{{"a", Split::test},
                                          {"b", Split::train}};
    split_series(two, &manifest);
    CHECK(two[0].split == Split::test);
    CHECK(two[1].split == Split::train);
    std::vector<LongSeries> three = {make_series(5, 1, 0, "a"),
                                     make_series(5, 1, 1, "b"),
                                     make_series(5, 1, 2, "c")};
    CHECK_THROWS_AS(split_series(three, &manifest), DataError);
}

TEST_CASE("autocorrelation basics") {
    auto s = make_series(500, 1, 33);
    auto acf = autocorrelation(s.target, 10);
    CHECK(acf(0) == 1.0);
    CHECK(acf.size() == 11);

    // White noise: |acf[k]| stays below ~2/sqrt(n) scaled bound.
    auto noise = make_series(10000, 1, 1234);
    auto nacf = autocorrelation(noise.target, 20);
    for (int k = 1; k <= 20; ++k) CHECK(std::abs(nacf(k)) < 0.05);

    // Linear trend: acf[1] very close to 1 (brute-force formula check too).
    Vector trend(1000);
    for (int t = 0; t < 1000; ++t) trend(t) = t;
    auto tacf = autocorrelation(trend, 1);
    CHECK(tacf(1) > 0.99);
    double mean = trend.mean();
    double num = 0, den = 0;
    for (int t = 0; t < 999; ++t)
        num += (trend(t) - mean) * (trend(t + 1) - mean);
    for (int t = 0; t < 1000; ++t) den += (trend(t) - mean) * (trend(t) - mean);
    CHECK(tacf(1) == doctest::Approx(num / den).epsilon(1e-12));

    Vector flat = Vector::Constant(100, 2.0);
    CHECK_THROWS_WITH_AS(autocorrelation(flat, 5), "constant series",
                         NumericError);
}
