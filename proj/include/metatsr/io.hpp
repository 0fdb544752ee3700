#pragma once

#include "metatsr/mmaml.hpp"

#include <map>
#include <string>
#include <vector>

namespace metatsr {

/// One split's windows grouped per series. A plain window set is the l == 1
/// case. The on-disk layout (little-endian) is:
///   magic "MTW1", u32 version, u64 pipeline hash,
///   u32 delta, u32 k, u32 l, u32 C, u32 series count, then per series:
///   u32 id length, id bytes, u8 split, u64 meta-window count N,
///   i64 origins[N*l], f64 inputs[N*l*delta*C] (window-major, row-major),
///   f64 labels[N*l].
struct MetaWindowSet {
    int delta = 0;
    int k = 0;
    int l = 1;
    int channels = 0;

    struct SeriesBlock {
        std::string id;
        Split split = Split::train;
        std::vector<MetaWindow> meta_windows;
    };
    std::vector<SeriesBlock> series;

    /// All meta-windows ordered by (series, t_index).
    std::vector<MetaWindow> flattened() const;
    /// All labeled windows, flattened across meta-windows.
    std::vector<LabeledWindow> all_windows() const;
    /// Meta-windows grouped by series, for the meta-testing protocol.
    std::vector<std::vector<MetaWindow>> by_series() const;
};

void write_meta_window_set(const std::string& path, const MetaWindowSet& set,
                           std::uint64_t pipeline_hash);
MetaWindowSet read_meta_window_set(const std::string& path,
                                   std::uint64_t* pipeline_hash_out = nullptr);

/// Versioned checkpoint: named parameter tensors plus lineage hashes.
/// Loaders refuse hash mismatches.
struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<double> data;
};

struct Checkpoint {
    std::string model_tag;
    std::uint64_t model_hash = 0;
    std::uint64_t artifact_hash = 0;
    std::map<std::string, std::string> meta;
    std::vector<NamedTensor> tensors;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Tensor capture/restore through the parameter views. Restore requires
/// exactly matching names and sizes.
void capture_tensors(std::vector<ParamRef> refs, const std::string& prefix,
                     Checkpoint& out);
void restore_tensors(const Checkpoint& ckpt, const std::string& prefix,
                     std::vector<ParamRef> refs);

/// CSV ingestion: header row names the channels; one column is the target.
/// Empty cells and the tokens na/nan/null (any case) parse as NaN.
LongSeries series_from_csv(const std::string& path,
                           const std::string& target_column,
                           const std::string& id,
                           std::vector<std::string>* channel_names = nullptr);

/// Split manifest: two columns (series_id, split), tab or comma separated,
/// '#' comments allowed.
std::map<std::string, Split> read_split_manifest(const std::string& path);

/// Deterministic float formatting for result files.
std::string format_double(double v);

}  // namespace metatsr
