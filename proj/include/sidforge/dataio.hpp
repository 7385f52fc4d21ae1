#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "sidforge/dataset.hpp"
#include "sidforge/metrics.hpp"
#include "sidforge/optimizer.hpp"
#include "sidforge/quantizer.hpp"

namespace sidforge {

enum class EmbeddingFormat { bin, tsv };

/// ".tsv" / ".txt" select the text format; anything else is binary.
inline EmbeddingFormat guess_embedding_format(const std::string& path) {
    auto ends_with = [&](const char* suffix) {
        const std::size_t n = std::strlen(suffix);
        return path.size() >= n && path.compare(path.size() - n, n, suffix) == 0;
    };
    return ends_with(".tsv") || ends_with(".txt") ? EmbeddingFormat::tsv : EmbeddingFormat::bin;
}

inline EmbeddingFormat parse_embedding_format(const std::string& s) {
    if (s == "bin") return EmbeddingFormat::bin;
    if (s == "tsv") return EmbeddingFormat::tsv;
    throw UsageError("unknown embedding format '" + s + "' (expected bin or tsv)");
}

namespace io_detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

/// Little-endian writer.
class ByteWriter {
public:
    void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    const std::string& bytes() const noexcept { return buf_; }

private:
    std::string buf_;
};

/// Little-endian reader; every read names the field it belongs to so truncation errors are
/// specific.
class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }

    void need(std::size_t n, const char* field) const {
        if (remaining() < n) {
            throw FormatError(field, "truncated at offset " + std::to_string(pos_) + ": need " +
                                         std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                                         " left");
        }
    }
    std::string_view raw(std::size_t n, const char* field) {
        need(n, field);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* field) { return static_cast<std::uint8_t>(raw(1, field)[0]); }
    std::uint32_t u32(const char* field) {
        const auto s = raw(4, field);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* field) {
        const auto s = raw(8, field);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
        return v;
    }
    float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
    double f64(const char* field) { return std::bit_cast<double>(u64(field)); }

private:
    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        start = end + 1;
    }
    return lines;
}

inline void check_id(const std::string& id, const char* field) {
    if (id.empty()) throw FormatError(field, "empty item id");
    if (id.find_first_of("\t\n\r") != std::string::npos) {
        throw FormatError(field, "item id '" + id + "' contains a tab or newline");
    }
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Embeddings

inline constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', '1'};

/// Binary: "EMB1", u32 N, u32 d, N*d float32 row-major (all little-endian); ids in path+".ids".
inline void save_embeddings_bin(const EmbeddingDataset& ds, const std::string& path) {
    io_detail::ByteWriter w;
    w.raw(kEmbeddingMagic, 4);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.dim()));
    for (float v : ds.matrix.values()) w.f32(v);
    io_detail::write_file(path, w.bytes());
    std::string ids;
    for (const auto& id : ds.ids) {
        io_detail::check_id(id, "ids");
        ids += id;
        ids += '\n';
    }
    io_detail::write_file(path + ".ids", ids);
}

/// Text: one line per item, "id<TAB>v1,v2,...".
inline void save_embeddings_tsv(const EmbeddingDataset& ds, const std::string& path) {
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        io_detail::check_id(ds.ids[i], "ids");
        out += ds.ids[i];
        out += '\t';
        const auto row = ds.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j > 0) out += ',';
            auto res = std::to_chars(buf, buf + sizeof buf, row[j]);
            out.append(buf, res.ptr);
        }
        out += '\n';
    }
    io_detail::write_file(path, out);
}

inline void save_embeddings(const EmbeddingDataset& ds, const std::string& path, EmbeddingFormat fmt) {
    if (fmt == EmbeddingFormat::bin) {
        save_embeddings_bin(ds, path);
    } else {
        save_embeddings_tsv(ds, path);
    }
}

namespace io_detail {

inline void finish_dataset(EmbeddingDataset& ds) {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < ds.ids.size(); ++i) {
        if (!seen.insert(ds.ids[i]).second) {
            throw FormatError("ids", "duplicate id '" + ds.ids[i] + "' at item " + std::to_string(i + 1));
        }
    }
}

}  // namespace io_detail

inline EmbeddingDataset load_embeddings_bin(const std::string& path) {
    const std::string bytes = io_detail::read_file(path);
    io_detail::ByteReader r(bytes);
    const auto magic = r.raw(4, "magic");
    if (std::memcmp(magic.data(), kEmbeddingMagic, 4) != 0) {
        throw FormatError("magic", "expected \"EMB1\" at offset 0");
    }
    const std::uint32_t n = r.u32("num_items");
    const std::uint32_t d = r.u32("dim");
    const std::uint64_t expected = static_cast<std::uint64_t>(n) * d * 4;
    if (r.remaining() < expected) {
        throw FormatError("values", "truncated: expected " + std::to_string(expected) + " bytes of float32 at offset " +
                                        std::to_string(r.offset()) + ", found " + std::to_string(r.remaining()));
    }
    if (r.remaining() > expected) {
        throw FormatError("values", std::to_string(r.remaining() - expected) + " trailing bytes after offset " +
                                        std::to_string(r.offset() + expected));
    }
    if (n > 0 && d == 0) throw FormatError("dim", "dimension 0 with " + std::to_string(n) + " items");
    std::vector<float> values(static_cast<std::size_t>(n) * d);
    for (std::size_t k = 0; k < values.size(); ++k) {
        const std::size_t off = r.offset();
        values[k] = r.f32("values");
        if (!std::isfinite(values[k])) {
            throw FormatError("values", "non-finite value at item " + std::to_string(k / d + 1) + ", component " +
                                            std::to_string(k % d + 1) + " (offset " + std::to_string(off) + ")");
        }
    }
    const std::string id_text = io_detail::read_file(path + ".ids");
    auto ids = io_detail::split_lines(id_text);
    if (ids.size() != n) {
        throw FormatError("ids", "sidecar '" + path + ".ids' has " + std::to_string(ids.size()) +
                                     " lines, expected " + std::to_string(n));
    }
    for (const auto& id : ids) io_detail::check_id(id, "ids");
    EmbeddingDataset ds;
    ds.ids = std::move(ids);
    ds.matrix = Matrix<float>(n, d, std::move(values));
    io_detail::finish_dataset(ds);
    return ds;
}

inline EmbeddingDataset load_embeddings_tsv(const std::string& path) {
    const auto lines = io_detail::split_lines(io_detail::read_file(path));
    std::vector<std::string> ids;
    std::vector<float> values;
    std::size_t dim = 0;
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const std::string& line = lines[ln];
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(ln + 1);
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("id", where + ": missing tab after item id");
        std::string id = line.substr(0, tab);
        if (id.empty()) throw FormatError("id", where + ": empty item id");
        std::size_t count = 0;
        const char* p = line.data() + tab + 1;
        const char* end = line.data() + line.size();
        while (true) {
            const char* comma = std::find(p, end, ',');
            float v = 0.0f;
            const auto res = std::from_chars(p, comma, v);
            if (res.ec != std::errc() || res.ptr != comma) {
                throw FormatError("values", where + ": cannot parse value " + std::to_string(count + 1));
            }
            if (!std::isfinite(v)) {
                throw FormatError("values", where + ": non-finite value " + std::to_string(count + 1));
            }
            values.push_back(v);
            ++count;
            if (comma == end) break;
            p = comma + 1;
        }
        if (ids.empty()) {
            dim = count;
        } else if (count != dim) {
            throw FormatError("values", where + ": ragged row with " + std::to_string(count) +
                                            " values, expected " + std::to_string(dim));
        }
        ids.push_back(std::move(id));
    }
    EmbeddingDataset ds;
    const std::size_t n = ids.size();
    ds.ids = std::move(ids);
    ds.matrix = Matrix<float>(n, dim, std::move(values));
    io_detail::finish_dataset(ds);
    return ds;
}

inline EmbeddingDataset load_embeddings(const std::string& path, EmbeddingFormat fmt) {
    return fmt == EmbeddingFormat::bin ? load_embeddings_bin(path) : load_embeddings_tsv(path);
}

inline EmbeddingDataset load_embeddings(const std::string& path) {
    return load_embeddings(path, guess_embedding_format(path));
}

// ---------------------------------------------------------------------------
// SID tables

/// TSV with header "#item_id<TAB>code_1 ... code_L<TAB>M=<M>" and one "id<TAB>c1...cL" row per item.
inline std::string format_sids(const SidTable& table) {
    std::string out = "#item_id";
    for (std::size_t l = 1; l <= table.num_layers; ++l) out += "\tcode_" + std::to_string(l);
    out += "\tM=" + std::to_string(table.codebook_size) + "\n";
    for (std::size_t i = 0; i < table.size(); ++i) {
        io_detail::check_id(table.ids[i], "ids");
        out += table.ids[i];
        for (auto c : table.sid(i)) {
            out += '\t';
            out += std::to_string(c);
        }
        out += '\n';
    }
    return out;
}

inline void save_sids(const SidTable& table, const std::string& path) {
    io_detail::write_file(path, format_sids(table));
}

inline SidTable load_sids(const std::string& path) {
    const auto lines = io_detail::split_lines(io_detail::read_file(path));
    if (lines.empty() || lines[0].rfind("#item_id", 0) != 0) {
        throw FormatError("header", "line 1: expected header starting with #item_id");
    }
    SidTable table;
    {
        std::vector<std::string> cols;
        std::stringstream ss(lines[0]);
        std::string col;
        while (std::getline(ss, col, '\t')) cols.push_back(col);
        if (cols.size() < 2 || cols.back().rfind("M=", 0) != 0) {
            throw FormatError("header", "line 1: missing trailing M=<codebook size> column");
        }
        for (std::size_t c = 1; c + 1 < cols.size(); ++c) {
            if (cols[c] != "code_" + std::to_string(c)) {
                throw FormatError("header", "line 1: expected column code_" + std::to_string(c) + ", found '" + cols[c] + "'");
            }
        }
        table.num_layers = cols.size() - 2;
        const std::string m_text = cols.back().substr(2);
        std::size_t m = 0;
        const auto res = std::from_chars(m_text.data(), m_text.data() + m_text.size(), m);
        if (res.ec != std::errc() || res.ptr != m_text.data() + m_text.size() || m == 0) {
            throw FormatError("header", "line 1: invalid codebook size '" + m_text + "'");
        }
        table.codebook_size = m;
    }
    std::unordered_set<std::string> seen;
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const std::string& line = lines[ln];
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(ln + 1);
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, '\t')) cols.push_back(col);
        if (cols.size() != table.num_layers + 1) {
            throw FormatError("codes", where + ": expected " + std::to_string(table.num_layers) + " codes, found " +
                                           std::to_string(cols.size() > 0 ? cols.size() - 1 : 0));
        }
        if (cols[0].empty()) throw FormatError("id", where + ": empty item id");
        if (!seen.insert(cols[0]).second) throw FormatError("id", where + ": duplicate item id '" + cols[0] + "'");
        table.ids.push_back(cols[0]);
        for (std::size_t c = 1; c < cols.size(); ++c) {
            std::uint32_t v = 0;
            const auto res = std::from_chars(cols[c].data(), cols[c].data() + cols[c].size(), v);
            if (res.ec != std::errc() || res.ptr != cols[c].data() + cols[c].size()) {
                throw FormatError("codes", where + ": invalid code '" + cols[c] + "'");
            }
            if (v >= table.codebook_size) {
                throw FormatError("codes", where + ": code " + std::to_string(v) + " >= M=" +
                                               std::to_string(table.codebook_size));
            }
            table.codes.push_back(v);
        }
    }
    return table;
}

// ---------------------------------------------------------------------------
// Metrics reports

namespace io_detail {
/// Rounds to 6 decimal places so values survive a text round trip within 1e-6.
inline double round6(double v) { return std::round(v * 1e6) / 1e6; }
}  // namespace io_detail

inline nlohmann::json report_to_json(const MetricsReport& r) {
    using nlohmann::json;
    auto opt = [](const std::optional<double>& v) -> json {
        return v ? json(io_detail::round6(*v)) : json(nullptr);
    };
    json usage = json::array();
    for (double u : r.usage_per_layer) usage.push_back(io_detail::round6(u));
    json j;
    j["sc"] = opt(r.sc);
    j["pd"] = opt(r.pd);
    j["collision_rate"] = io_detail::round6(r.collision_rate);
    j["gini"] = io_detail::round6(r.gini);
    j["usage_per_layer"] = usage;
    j["cluster_by"] = to_string(r.cluster_by);
    j["embedding_source"] = to_string(r.embedding_source);
    j["t"] = io_detail::round6(r.t);
    j["undefined_flags"] = r.undefined_flags;
    return j;
}

inline void save_report(const MetricsReport& r, const std::string& path) {
    io_detail::write_file(path, report_to_json(r).dump(2) + "\n");
}

inline MetricsReport load_report(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io_detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("json", e.what());
    }
    MetricsReport r;
    auto field = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw FormatError(key, "missing key");
        return j.at(key);
    };
    try {
        auto opt = [](const nlohmann::json& v) -> std::optional<double> {
            if (v.is_null()) return std::nullopt;
            return v.get<double>();
        };
        r.sc = opt(field("sc"));
        r.pd = opt(field("pd"));
        r.collision_rate = field("collision_rate").get<double>();
        r.gini = field("gini").get<double>();
        r.usage_per_layer = field("usage_per_layer").get<std::vector<double>>();
        r.cluster_by = parse_cluster_by(field("cluster_by").get<std::string>());
        r.embedding_source = parse_embedding_source(field("embedding_source").get<std::string>());
        r.t = field("t").get<double>();
        r.undefined_flags = field("undefined_flags").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("json", e.what());
    } catch (const UsageError& e) {
        throw FormatError("json", e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kCheckpointEnd = 0x21444e45;  // "END!"

/// Layout (little-endian): "SFCK", u8 version, u8 mode, u8 use_reference, u8 reserved,
/// u32 L, u32 M, u32 K, u32 d, u64 float count, f32 reference[d or 0], f32 codebooks[L*M*d],
/// u64 step, f64 beta1, beta2, eps, lr, weight_decay, clip_norm, u64 moment count,
/// f64 first[count], f64 second[count], u32 end marker.
inline std::string encode_checkpoint(const ModelParams<float>& params, const AdamWState& state) {
    params.validate();
    io_detail::ByteWriter w;
    w.raw(kCheckpointMagic, 4);
    w.u8(kCheckpointVersion);
    w.u8(static_cast<std::uint8_t>(params.mode));
    w.u8(params.use_reference ? 1 : 0);
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(params.config.num_layers));
    w.u32(static_cast<std::uint32_t>(params.config.codebook_size));
    w.u32(static_cast<std::uint32_t>(params.config.top_k));
    w.u32(static_cast<std::uint32_t>(params.config.embedding_dim));
    w.u64(params.parameter_count());
    for (float v : params.reference) w.f32(v);
    for (const auto& cb : params.codebooks) {
        for (float v : cb.values()) w.f32(v);
    }
    w.u64(state.step);
    w.f64(state.beta1);
    w.f64(state.beta2);
    w.f64(state.eps);
    w.f64(state.lr);
    w.f64(state.weight_decay);
    w.f64(state.clip_norm);
    if (state.first_moment.size() != state.second_moment.size()) {
        throw UsageError("checkpoint: optimizer moments differ in length");
    }
    w.u64(state.first_moment.size());
    for (double v : state.first_moment) w.f64(v);
    for (double v : state.second_moment) w.f64(v);
    w.u32(kCheckpointEnd);
    return w.bytes();
}

struct Checkpoint {
    ModelParams<float> params;
    AdamWState state;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    io_detail::ByteReader r(bytes);
    const auto magic = r.raw(4, "magic");
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("magic", "not a checkpoint (expected \"SFCK\")");
    }
    const std::uint8_t version = r.u8("version");
    if (version != kCheckpointVersion) throw UnsupportedVersionError(version, kCheckpointVersion);
    Checkpoint ck;
    const std::uint8_t mode = r.u8("mode");
    if (mode > 1) throw FormatError("mode", "unknown assignment mode " + std::to_string(mode));
    ck.params.mode = static_cast<AssignMode>(mode);
    const std::uint8_t use_ref = r.u8("use_reference");
    if (use_ref > 1) throw FormatError("use_reference", "expected 0 or 1");
    ck.params.use_reference = use_ref == 1;
    r.u8("reserved");
    auto& cfg = ck.params.config;
    cfg.num_layers = r.u32("num_layers");
    cfg.codebook_size = r.u32("codebook_size");
    cfg.top_k = r.u32("top_k");
    cfg.embedding_dim = r.u32("embedding_dim");
    try {
        cfg.validate();
    } catch (const UsageError& e) {
        throw FormatError("config", e.what());
    }
    const std::uint64_t count = r.u64("parameter_count");
    const std::uint64_t ref_len = ck.params.use_reference ? cfg.embedding_dim : 0;
    const std::uint64_t expected = ref_len + static_cast<std::uint64_t>(cfg.num_layers) * cfg.codebook_size * cfg.embedding_dim;
    if (count != expected) {
        throw FormatError("parameter_count", "header says " + std::to_string(count) + ", shape implies " +
                                                 std::to_string(expected));
    }
    r.need(count * 4, "parameters");
    ck.params.reference.resize(ref_len);
    for (auto& v : ck.params.reference) v = r.f32("reference");
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        Matrix<float> cb(cfg.codebook_size, cfg.embedding_dim);
        for (auto& v : cb.values()) v = r.f32("codebooks");
        ck.params.codebooks.push_back(std::move(cb));
    }
    auto& st = ck.state;
    st.step = r.u64("optimizer.step");
    st.beta1 = r.f64("optimizer.beta1");
    st.beta2 = r.f64("optimizer.beta2");
    st.eps = r.f64("optimizer.eps");
    st.lr = r.f64("optimizer.lr");
    st.weight_decay = r.f64("optimizer.weight_decay");
    st.clip_norm = r.f64("optimizer.clip_norm");
    const std::uint64_t moments = r.u64("optimizer.moment_count");
    if (moments != 0 && moments != count) {
        throw FormatError("optimizer.moment_count", "expected 0 or " + std::to_string(count) + ", found " +
                                                        std::to_string(moments));
    }
    r.need(moments * 16, "optimizer.moments");
    st.first_moment.resize(moments);
    st.second_moment.resize(moments);
    for (auto& v : st.first_moment) v = r.f64("optimizer.first_moment");
    for (auto& v : st.second_moment) v = r.f64("optimizer.second_moment");
    if (r.u32("end_marker") != kCheckpointEnd) throw FormatError("end_marker", "bad end marker");
    if (r.remaining() != 0) {
        throw FormatError("end_marker", std::to_string(r.remaining()) + " trailing bytes");
    }
    return ck;
}

inline void checkpoint_save(const ModelParams<float>& params, const AdamWState& state, const std::string& path) {
    io_detail::write_file(path, encode_checkpoint(params, state));
}

inline Checkpoint checkpoint_load(const std::string& path) {
    return decode_checkpoint(io_detail::read_file(path));
}

}  // namespace sidforge
