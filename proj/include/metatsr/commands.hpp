#pragma once

#include "metatsr/config.hpp"
#include "metatsr/io.hpp"

namespace metatsr {

/// CLI exit codes: 0 success, 1 usage/config, 2 data, 3 numerical failure.
enum ExitCode {
    exit_ok = 0,
    exit_usage = 1,
    exit_data = 2,
    exit_numeric = 3
};

/// Output directory, honoring the METATSR_OUT environment override.
std::string resolve_out_dir(const RunConfig& cfg);

/// Raw series loading (CSV files or the synthetic generator) with split
/// assignment. Used by preprocess and exposed for tests.
std::vector<LongSeries> load_raw_series(const RunConfig& cfg,
                                        std::vector<std::string>* channel_names);

void cmd_preprocess(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg, bool resume = false);
void cmd_evaluate(const RunConfig& cfg, const std::string& checkpoint_path);
void cmd_report(const RunConfig& cfg,
                const std::vector<std::string>& result_files);
void cmd_gradcheck(const RunConfig& cfg);
void cmd_synth(const RunConfig& cfg);

}  // namespace metatsr
