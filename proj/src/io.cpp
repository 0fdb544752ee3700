#include "metatsr/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace metatsr {

namespace {

constexpr char kWindowMagic[4] = {'M', 'T', 'W', '1'};
constexpr char kCheckpointMagic[4] = {'M', 'T', 'C', '1'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated binary file");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const auto n = read_pod<std::uint32_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataError("truncated binary file");
    return s;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open for reading: " + path);
    return is;
}

}  // namespace

std::vector<MetaWindow> MetaWindowSet::flattened() const {
    std::vector<MetaWindow> out;
    for (const auto& block : series)
        out.insert(out.end(), block.meta_windows.begin(),
                   block.meta_windows.end());
    return out;
}

std::vector<LabeledWindow> MetaWindowSet::all_windows() const {
    std::vector<LabeledWindow> out;
    for (const auto& block : series)
        for (const auto& mw : block.meta_windows)
            out.insert(out.end(), mw.windows.begin(), mw.windows.end());
    return out;
}

std::vector<std::vector<MetaWindow>> MetaWindowSet::by_series() const {
    std::vector<std::vector<MetaWindow>> out;
    for (const auto& block : series) out.push_back(block.meta_windows);
    return out;
}

void write_meta_window_set(const std::string& path, const MetaWindowSet& set,
                           std::uint64_t pipeline_hash) {
    auto os = open_out(path);
    os.write(kWindowMagic, 4);
    write_pod(os, kFormatVersion);
    write_pod(os, pipeline_hash);
    write_pod<std::uint32_t>(os, set.delta);
    write_pod<std::uint32_t>(os, set.k);
    write_pod<std::uint32_t>(os, set.l);
    write_pod<std::uint32_t>(os, set.channels);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(set.series.size()));
    for (const auto& block : set.series) {
        write_string(os, block.id);
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(block.split));
        write_pod<std::uint64_t>(os, block.meta_windows.size());
        for (const auto& mw : block.meta_windows)
            for (const auto& w : mw.windows)
                write_pod<std::int64_t>(os, w.origin_index);
        for (const auto& mw : block.meta_windows)
            for (const auto& w : mw.windows)
                for (long t = 0; t < w.inputs.rows(); ++t)
                    for (long c = 0; c < w.inputs.cols(); ++c)
                        write_pod<double>(os, w.inputs(t, c));
        for (const auto& mw : block.meta_windows)
            for (const auto& w : mw.windows) write_pod<double>(os, w.label);
    }
    if (!os) throw DataError("write failed: " + path);
}

MetaWindowSet read_meta_window_set(const std::string& path,
                                   std::uint64_t* pipeline_hash_out) {
    auto is = open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kWindowMagic, 4) != 0)
        throw DataError("not a meta-window file: " + path);
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataError("unsupported meta-window format version " +
                        std::to_string(version));
    const auto hash = read_pod<std::uint64_t>(is);
    if (pipeline_hash_out) *pipeline_hash_out = hash;

    MetaWindowSet set;
    set.delta = static_cast<int>(read_pod<std::uint32_t>(is));
    set.k = static_cast<int>(read_pod<std::uint32_t>(is));
    set.l = static_cast<int>(read_pod<std::uint32_t>(is));
    set.channels = static_cast<int>(read_pod<std::uint32_t>(is));
    const auto n_series = read_pod<std::uint32_t>(is);
    for (std::uint32_t si = 0; si < n_series; ++si) {
        MetaWindowSet::SeriesBlock block;
        block.id = read_string(is);
        block.split = static_cast<Split>(read_pod<std::uint8_t>(is));
        const auto n = read_pod<std::uint64_t>(is);
        std::vector<std::int64_t> origins(n * set.l);
        for (auto& o : origins) o = read_pod<std::int64_t>(is);
        std::vector<Matrix> inputs(n * set.l);
        for (auto& m : inputs) {
            m.resize(set.delta, set.channels);
            for (int t = 0; t < set.delta; ++t)
                for (int c = 0; c < set.channels; ++c)
                    m(t, c) = read_pod<double>(is);
        }
        std::vector<double> labels(n * set.l);
        for (auto& v : labels) v = read_pod<double>(is);

        block.meta_windows.resize(n);
        for (std::uint64_t t = 0; t < n; ++t) {
            MetaWindow& mw = block.meta_windows[t];
            mw.series_id = block.id;
            mw.t_index = static_cast<long>(t);
            mw.windows.resize(set.l);
            for (int i = 0; i < set.l; ++i) {
                LabeledWindow& w = mw.windows[i];
                const std::size_t idx = t * set.l + i;
                w.origin_index = origins[idx];
                w.inputs = std::move(inputs[idx]);
                w.label = labels[idx];
            }
        }
        set.series.push_back(std::move(block));
    }
    return set;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    auto os = open_out(path);
    os.write(kCheckpointMagic, 4);
    write_pod(os, kFormatVersion);
    write_pod(os, ckpt.model_hash);
    write_pod(os, ckpt.artifact_hash);
    write_string(os, ckpt.model_tag);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        write_string(os, k);
        write_string(os, v);
    }
    write_pod<std::uint32_t>(os,
                             static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        write_string(os, t.name);
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
        for (auto d : t.dims) write_pod<std::uint64_t>(os, d);
        for (double v : t.data) write_pod<double>(os, v);
    }
    if (!os) throw DataError("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    auto is = open_in(path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw DataError("not a checkpoint file: " + path);
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw DataError("unsupported checkpoint version " +
                        std::to_string(version));
    Checkpoint ckpt;
    ckpt.model_hash = read_pod<std::uint64_t>(is);
    ckpt.artifact_hash = read_pod<std::uint64_t>(is);
    ckpt.model_tag = read_string(is);
    const auto n_meta = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = read_string(is);
        ckpt.meta[k] = read_string(is);
    }
    const auto n_tensors = read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        NamedTensor t;
        t.name = read_string(is);
        const auto nd = read_pod<std::uint32_t>(is);
        std::uint64_t total = 1;
        for (std::uint32_t d = 0; d < nd; ++d) {
            t.dims.push_back(read_pod<std::uint64_t>(is));
            total *= t.dims.back();
        }
        t.data.resize(total);
        for (auto& v : t.data) v = read_pod<double>(is);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

void capture_tensors(std::vector<ParamRef> refs, const std::string& prefix,
                     Checkpoint& out) {
    for (const auto& r : refs) {
        NamedTensor t;
        t.name = prefix + r.name;
        t.dims = {r.size};
        t.data.assign(r.data, r.data + r.size);
        out.tensors.push_back(std::move(t));
    }
}

void restore_tensors(const Checkpoint& ckpt, const std::string& prefix,
                     std::vector<ParamRef> refs) {
    for (const auto& r : refs) {
        const std::string name = prefix + r.name;
        const NamedTensor* found = nullptr;
        for (const auto& t : ckpt.tensors)
            if (t.name == name) {
                found = &t;
                break;
            }
        if (!found) throw DataError("checkpoint missing tensor " + name);
        if (found->data.size() != r.size)
            throw DataError("checkpoint tensor size mismatch for " + name);
        std::memcpy(r.data, found->data.data(), r.size * sizeof(double));
    }
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.push_back("");
    return out;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_cell(const std::string& raw) {
    const std::string cell = trim(raw);
    if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::string lower;
    for (char c : cell) lower.push_back(static_cast<char>(std::tolower(c)));
    if (lower == "na" || lower == "nan" || lower == "null")
        return std::numeric_limits<double>::quiet_NaN();
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(cell, &pos);
    } catch (const std::exception&) {
        throw DataError("non-numeric CSV cell: '" + cell + "'");
    }
    if (pos != cell.size())
        throw DataError("non-numeric CSV cell: '" + cell + "'");
    return v;
}

}  // namespace

LongSeries series_from_csv(const std::string& path,
                           const std::string& target_column,
                           const std::string& id,
                           std::vector<std::string>* channel_names) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open CSV: " + path);
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty CSV: " + path);
    auto header = split_line(trim(line), ',');
    int target_idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (trim(header[i]) == target_column)
            target_idx = static_cast<int>(i);
    if (target_idx < 0)
        throw DataError("target column '" + target_column + "' not in " + path);
    if (channel_names) {
        channel_names->clear();
        for (std::size_t i = 0; i < header.size(); ++i)
            if (static_cast<int>(i) != target_idx)
                channel_names->push_back(trim(header[i]));
    }

    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (trim(line).empty()) continue;
        auto cells = split_line(line, ',');
        if (cells.size() != header.size())
            throw DataError("ragged CSV row in " + path);
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) row.push_back(parse_cell(c));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("CSV has no data rows: " + path);

    const int c_total = static_cast<int>(header.size());
    LongSeries s;
    s.id = id;
    s.channels.resize(static_cast<long>(rows.size()), c_total - 1);
    s.target.resize(static_cast<long>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        int out_c = 0;
        for (int c = 0; c < c_total; ++c) {
            if (c == target_idx)
                s.target(static_cast<long>(r)) = rows[r][c];
            else
                s.channels(static_cast<long>(r), out_c++) = rows[r][c];
        }
    }
    return s;
}

std::map<std::string, Split> read_split_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open split manifest: " + path);
    std::map<std::string, Split> out;
    std::string line;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const char sep = line.find('\t') != std::string::npos ? '\t' : ',';
        auto cells = split_line(line, sep);
        if (cells.size() != 2)
            throw DataError("manifest line needs 'series_id,split': " + line);
        out[trim(cells[0])] = split_from_string(trim(cells[1]));
    }
    if (out.empty()) throw DataError("empty split manifest: " + path);
    return out;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace metatsr
