#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qder/error.hpp"
#include "qder/matrix.hpp"

namespace qder {

inline constexpr std::size_t kDefaultMaxSeqLen = 512;

/// Contextual token embeddings of one text, one row per token.
struct TokenMatrix {
    Matrix values;

    [[nodiscard]] std::size_t rows() const noexcept { return values.rows(); }
    [[nodiscard]] std::size_t dim() const noexcept { return values.cols(); }
    bool operator==(const TokenMatrix&) const = default;
};

/// Entity embeddings of one text. `values` may have zero rows.
struct EntitySet {
    std::vector<std::string> ids;
    Matrix values;

    [[nodiscard]] std::size_t rows() const noexcept { return values.rows(); }
    [[nodiscard]] std::size_t dim() const noexcept { return values.cols(); }
    [[nodiscard]] bool empty() const noexcept { return values.rows() == 0; }
    bool operator==(const EntitySet&) const = default;
};

/// A query or a document: identifier plus both embedding channels.
struct TextRecord {
    std::string id;
    TokenMatrix tokens;
    EntitySet entities;
    bool operator==(const TextRecord&) const = default;
};

using QueryRecord = TextRecord;
using DocumentRecord = TextRecord;

enum class RecordKind { query, document };

/// Records keyed by id. Ordered so that iteration (and anything derived from
/// it) is deterministic.
using RecordMap = std::map<std::string, TextRecord>;

struct Candidate {
    std::string query_id;
    std::string doc_id;
    double score = 0.0;
    std::uint32_t rank = 0;
    bool operator==(const Candidate&) const = default;
};

/// First-stage run: per query, candidates sorted by rank ascending.
using Run = std::map<std::string, std::vector<Candidate>>;

struct QrelEntry {
    std::string query_id;
    std::string doc_id;
    int grade = 0;
    bool operator==(const QrelEntry&) const = default;
};

using Qrels = std::vector<QrelEntry>;

/// query_id -> doc_id -> grade
using QrelsIndex = std::map<std::string, std::map<std::string, int>>;

inline QrelsIndex index_qrels(const Qrels& qrels) {
    QrelsIndex out;
    for (const auto& q : qrels) out[q.query_id][q.doc_id] = q.grade;
    return out;
}

struct ScoredDoc {
    std::string doc_id;
    double score = 0.0;
    bool operator==(const ScoredDoc&) const = default;
};

/// Ranked output per query, in emission order.
using Rankings = std::map<std::string, std::vector<ScoredDoc>>;

enum class CorpusFormat { ndjson, packed };

inline CorpusFormat format_from_path(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".bin" || ext == ".packed" || ext == ".qder") return CorpusFormat::packed;
    return CorpusFormat::ndjson;
}

struct Violation {
    std::string record_id;
    std::string message;
};

/// Checks a record against the data-model invariants. expected_dt / expected_de
/// of 0 skip the corresponding dimension check.
inline std::vector<Violation> validate_record(const TextRecord& record, std::size_t expected_dt,
                                              std::size_t expected_de,
                                              RecordKind kind = RecordKind::document,
                                              std::size_t max_seq_len = kDefaultMaxSeqLen) {
    std::vector<Violation> out;
    auto report = [&](std::string msg) { out.push_back({record.id, std::move(msg)}); };

    if (record.id.empty()) report("empty id");
    if (record.tokens.rows() == 0) report("token matrix has no rows");
    if (record.tokens.rows() > 0 && record.tokens.dim() == 0) report("token dimension is zero");
    if (record.tokens.rows() > 0 && expected_dt != 0 && record.tokens.dim() != expected_dt) {
        report("token dimension " + std::to_string(record.tokens.dim()) + " != expected " +
               std::to_string(expected_dt));
    }
    if (kind == RecordKind::document && record.tokens.rows() > max_seq_len) {
        report("document has " + std::to_string(record.tokens.rows()) +
               " tokens, above the maximum sequence length " + std::to_string(max_seq_len));
    }
    if (!all_finite(record.tokens.values.values())) report("non-finite value in token matrix");

    const auto& ent = record.entities;
    if (ent.rows() != ent.ids.size()) {
        report("entity matrix has " + std::to_string(ent.rows()) + " rows but " +
               std::to_string(ent.ids.size()) + " entity ids");
    }
    if (ent.rows() > 0 && expected_de != 0 && ent.dim() != expected_de) {
        report("entity dimension " + std::to_string(ent.dim()) + " != expected " +
               std::to_string(expected_de));
    }
    if (!all_finite(ent.values.values())) report("non-finite value in entity matrix");
    return out;
}

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path, bool binary = false) {
    std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

inline std::ofstream open_output(const std::filesystem::path& path, bool binary = false) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

inline void finish_output(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view text) {
    T value{};
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end) return std::nullopt;
    return value;
}

inline std::string location(const std::filesystem::path& path, std::size_t line) {
    return path.string() + ":" + std::to_string(line) + ": ";
}

/// Reads a JSON array of equal-length numeric arrays. Values are rounded
/// through float32, the on-disk precision.
inline Matrix json_matrix(const nlohmann::json& j, const char* field) {
    if (!j.is_array()) throw DataError(std::string("field '") + field + "' is not an array");
    if (j.empty()) return Matrix();
    const std::size_t cols = j.front().is_array() ? j.front().size() : 0;
    Matrix m(j.size(), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const auto& row = j[r];
        if (!row.is_array()) throw DataError(std::string("row of '") + field + "' is not an array");
        if (row.size() != cols) {
            throw DataError(std::string("ragged rows in '") + field + "'");
        }
        for (std::size_t c = 0; c < cols; ++c) {
            if (!row[c].is_number()) {
                throw DataError(std::string("non-numeric value in '") + field + "'");
            }
            m(r, c) = static_cast<double>(static_cast<float>(row[c].get<double>()));
        }
    }
    return m;
}

inline void append_float(std::string& out, double value) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<float>(value));
    (void)ec;
    out.append(buf, ptr);
}

inline void append_matrix(std::string& out, const Matrix& m) {
    out.push_back('[');
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (r) out.push_back(',');
        out.push_back('[');
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (c) out.push_back(',');
            append_float(out, m(r, c));
        }
        out.push_back(']');
    }
    out.push_back(']');
}

// Little-endian primitives for the packed format.
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, double v) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_string(std::string& out, std::string_view s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

/// Cursor over an in-memory byte buffer; every read is bounds-checked.
class ByteReader {
public:
    ByteReader(std::string bytes, std::string source)
        : bytes_(std::move(bytes)), source_(std::move(source)) {}

    [[nodiscard]] bool at_end() const noexcept { return pos_ >= bytes_.size(); }
    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }

    std::string_view take(std::size_t n) {
        if (bytes_.size() - pos_ < n) {
            throw DataError(source_ + ": truncated at byte " + std::to_string(pos_));
        }
        std::string_view out(bytes_.data() + pos_, n);
        pos_ += n;
        return out;
    }

    std::uint32_t u32() {
        auto b = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        auto b = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        return v;
    }

    double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string string() { return std::string(take(u32())); }

private:
    std::string bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline std::string read_all(const std::filesystem::path& path) {
    auto in = open_input(path, true);
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void write_all(const std::filesystem::path& path, std::string_view bytes, bool binary) {
    auto out = open_output(path, binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    finish_output(out, path);
}

}  // namespace detail

/// A record together with its position in the source file (line for NDJSON,
/// 1-based record index for packed).
struct SourcedRecord {
    TextRecord record;
    std::size_t position = 0;
};

struct RecordFile {
    std::size_t token_dim = 0;   // 0 if no record carried tokens
    std::size_t entity_dim = 0;  // 0 if no record carried entities
    std::vector<SourcedRecord> records;
};

inline constexpr char kPackedMagic[4] = {'Q', 'D', 'E', 'R'};
inline constexpr std::uint32_t kPackedVersion = 1;

/// Parses a record file without validating invariants; syntax errors throw
/// DataError with the offending line.
inline RecordFile read_record_file(const std::filesystem::path& path, CorpusFormat format) {
    RecordFile file;
    if (format == CorpusFormat::ndjson) {
        auto in = detail::open_input(path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                const auto j = nlohmann::json::parse(line);
                if (!j.is_object()) throw DataError("record is not a JSON object");
                for (const char* key : {"id", "tok", "ent_ids", "ent"}) {
                    if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
                }
                if (!j["id"].is_string()) throw DataError("field 'id' is not a string");
                TextRecord rec;
                rec.id = j["id"].get<std::string>();
                rec.tokens.values = detail::json_matrix(j["tok"], "tok");
                const auto& ids = j["ent_ids"];
                if (!ids.is_array()) throw DataError("field 'ent_ids' is not an array");
                for (const auto& id : ids) {
                    if (!id.is_string()) throw DataError("entity id is not a string");
                    rec.entities.ids.push_back(id.get<std::string>());
                }
                rec.entities.values = detail::json_matrix(j["ent"], "ent");
                if (file.token_dim == 0 && rec.tokens.rows() > 0) file.token_dim = rec.tokens.dim();
                if (file.entity_dim == 0 && rec.entities.rows() > 0) file.entity_dim = rec.entities.dim();
                file.records.push_back({std::move(rec), line_no});
            } catch (const nlohmann::json::exception& e) {
                throw DataError(detail::location(path, line_no) + "malformed JSON: " + e.what());
            } catch (const DataError& e) {
                throw DataError(detail::location(path, line_no) + e.what());
            }
        }
        return file;
    }

    detail::ByteReader reader(detail::read_all(path), path.string());
    if (reader.take(4) != std::string_view(kPackedMagic, 4)) {
        throw DataError(path.string() + ": bad magic, not a packed corpus");
    }
    const auto version = reader.u32();
    if (version != kPackedVersion) {
        throw DataError(path.string() + ": unsupported packed version " + std::to_string(version));
    }
    file.token_dim = reader.u32();
    file.entity_dim = reader.u32();
    std::size_t index = 0;
    while (!reader.at_end()) {
        ++index;
        TextRecord rec;
        rec.id = reader.string();
        const auto l = reader.u32();
        rec.tokens.values = Matrix(l, file.token_dim);
        for (double& v : rec.tokens.values.values()) v = reader.f32();
        const auto n = reader.u32();
        rec.entities.ids.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) rec.entities.ids.push_back(reader.string());
        rec.entities.values = Matrix(n, file.entity_dim);
        for (double& v : rec.entities.values.values()) v = reader.f32();
        file.records.push_back({std::move(rec), index});
    }
    return file;
}

/// Loads and validates a query or document file. Any invariant violation or
/// duplicate id is a DataError naming the line (or record index).
inline RecordMap load_records(const std::filesystem::path& path, CorpusFormat format, RecordKind kind,
                              std::size_t max_seq_len = kDefaultMaxSeqLen) {
    auto file = read_record_file(path, format);
    auto where = [&](std::size_t pos) {
        return format == CorpusFormat::ndjson ? detail::location(path, pos)
                                              : path.string() + ": record " + std::to_string(pos) + ": ";
    };
    RecordMap out;
    for (auto& [rec, pos] : file.records) {
        auto violations = validate_record(rec, file.token_dim, file.entity_dim, kind, max_seq_len);
        if (!violations.empty()) {
            throw DataError(where(pos) + violations.front().message);
        }
        if (rec.entities.empty()) rec.entities.values = Matrix(0, file.entity_dim);
        std::string id = rec.id;
        if (!out.emplace(id, std::move(rec)).second) {
            throw DataError(where(pos) + "duplicate id '" + id + "'");
        }
    }
    return out;
}

inline RecordMap load_corpus(const std::filesystem::path& path, CorpusFormat format) {
    return load_records(path, format, RecordKind::document);
}

inline RecordMap load_queries(const std::filesystem::path& path, CorpusFormat format) {
    return load_records(path, format, RecordKind::query);
}

inline std::string record_to_ndjson(const TextRecord& rec) {
    std::string line = "{\"id\":" + nlohmann::json(rec.id).dump() + ",\"tok\":";
    detail::append_matrix(line, rec.tokens.values);
    line += ",\"ent_ids\":";
    line += nlohmann::json(rec.entities.ids).dump();
    line += ",\"ent\":";
    detail::append_matrix(line, rec.entities.values);
    line += "}";
    return line;
}

inline void write_ndjson_records(const RecordMap& records, const std::filesystem::path& path) {
    std::string text;
    for (const auto& [id, rec] : records) {
        text += record_to_ndjson(rec);
        text += '\n';
    }
    detail::write_all(path, text, false);
}

inline void write_packed_records(const RecordMap& records, std::size_t token_dim, std::size_t entity_dim,
                                 const std::filesystem::path& path) {
    std::string bytes(kPackedMagic, 4);
    detail::put_u32(bytes, kPackedVersion);
    detail::put_u32(bytes, static_cast<std::uint32_t>(token_dim));
    detail::put_u32(bytes, static_cast<std::uint32_t>(entity_dim));
    for (const auto& [id, rec] : records) {
        if (rec.tokens.dim() != token_dim || (rec.entities.rows() > 0 && rec.entities.dim() != entity_dim)) {
            throw DataError("record '" + id + "' does not match packed header dimensions");
        }
        if (rec.entities.ids.size() != rec.entities.rows()) {
            throw DataError("record '" + id + "' has mismatched entity ids and rows");
        }
        detail::put_string(bytes, rec.id);
        detail::put_u32(bytes, static_cast<std::uint32_t>(rec.tokens.rows()));
        for (double v : rec.tokens.values.values()) detail::put_f32(bytes, v);
        detail::put_u32(bytes, static_cast<std::uint32_t>(rec.entities.rows()));
        for (const auto& eid : rec.entities.ids) detail::put_string(bytes, eid);
        for (double v : rec.entities.values.values()) detail::put_f32(bytes, v);
    }
    detail::write_all(path, bytes, true);
}

inline void write_records(const RecordMap& records, std::size_t token_dim, std::size_t entity_dim,
                          const std::filesystem::path& path, CorpusFormat format) {
    if (format == CorpusFormat::ndjson) {
        write_ndjson_records(records, path);
    } else {
        write_packed_records(records, token_dim, entity_dim, path);
    }
}

/// Parses a 6-column TREC run. Candidates per query are returned sorted by
/// rank; ranks must form 1..k without gaps or duplicates.
inline Run load_run(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    Run run;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto cols = detail::split_ws(line);
        if (cols.empty()) continue;
        const auto where = detail::location(path, line_no);
        if (cols.size() != 6) {
            throw DataError(where + "expected 6 columns, found " + std::to_string(cols.size()));
        }
        const auto rank = detail::parse_number<long long>(cols[3]);
        if (!rank || *rank < 1) throw DataError(where + "rank is not a positive integer");
        const auto score = detail::parse_number<double>(cols[4]);
        if (!score) throw DataError(where + "score is not numeric");
        if (!std::isfinite(*score)) throw DataError(where + "score is not finite");
        Candidate c{std::string(cols[0]), std::string(cols[2]), *score, static_cast<std::uint32_t>(*rank)};
        if (!seen.emplace(c.query_id, c.doc_id).second) {
            throw DataError(where + "duplicate entry for query '" + c.query_id + "' document '" + c.doc_id + "'");
        }
        run[c.query_id].push_back(std::move(c));
    }
    for (auto& [qid, cands] : run) {
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.rank < b.rank; });
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (cands[i].rank != i + 1) {
                throw DataError(path.string() + ": query '" + qid + "' ranks are not 1.." +
                                std::to_string(cands.size()));
            }
        }
    }
    return run;
}

/// Parses 4-column qrels. Negative grades are clamped to 0 and reported via
/// `warnings` when provided.
inline Qrels load_qrels(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr) {
    auto in = detail::open_input(path);
    Qrels qrels;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto cols = detail::split_ws(line);
        if (cols.empty()) continue;
        const auto where = detail::location(path, line_no);
        if (cols.size() != 4) {
            throw DataError(where + "expected 4 columns, found " + std::to_string(cols.size()));
        }
        auto grade = detail::parse_number<int>(cols[3]);
        if (!grade) throw DataError(where + "grade is not an integer");
        QrelEntry e{std::string(cols[0]), std::string(cols[2]), *grade};
        if (e.grade < 0) {
            if (warnings) warnings->push_back(where + "negative grade clamped to 0");
            e.grade = 0;
        }
        if (!seen.emplace(e.query_id, e.doc_id).second) {
            throw DataError(where + "duplicate judgment for query '" + e.query_id + "' document '" + e.doc_id + "'");
        }
        qrels.push_back(std::move(e));
    }
    return qrels;
}

/// Shortest decimal that parses back to the same double; integral values get
/// a trailing ".0".
inline std::string format_score(double score) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, score);
    (void)ec;
    std::string s(buf, ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

/// Orders by score descending, then doc_id ascending.
inline void sort_ranking(std::vector<ScoredDoc>& docs) {
    std::sort(docs.begin(), docs.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.doc_id < b.doc_id;
    });
}

inline std::string format_run(const Rankings& rankings, std::string_view tag) {
    std::string text;
    for (const auto& [qid, docs] : rankings) {
        auto sorted = docs;
        for (const auto& d : sorted) {
            if (!std::isfinite(d.score)) {
                throw DataError("non-finite score for query '" + qid + "' document '" + d.doc_id + "'");
            }
        }
        sort_ranking(sorted);
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            text += qid;
            text += " Q0 ";
            text += sorted[i].doc_id;
            text += ' ';
            text += std::to_string(i + 1);
            text += ' ';
            text += format_score(sorted[i].score);
            text += ' ';
            text += tag;
            text += '\n';
        }
    }
    return text;
}

inline void write_run(const Rankings& rankings, std::string_view tag, const std::filesystem::path& path) {
    detail::write_all(path, format_run(rankings, tag), false);
}

inline Rankings run_to_rankings(const Run& run) {
    Rankings out;
    for (const auto& [qid, cands] : run) {
        auto& docs = out[qid];
        docs.reserve(cands.size());
        for (const auto& c : cands) docs.push_back({c.doc_id, c.score});
    }
    return out;
}

inline Run rankings_to_run(const Rankings& rankings) {
    Run out;
    for (const auto& [qid, docs] : rankings) {
        auto sorted = docs;
        sort_ranking(sorted);
        auto& cands = out[qid];
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            cands.push_back({qid, sorted[i].doc_id, sorted[i].score, static_cast<std::uint32_t>(i + 1)});
        }
    }
    return out;
}

inline void write_qrels(const Qrels& qrels, const std::filesystem::path& path) {
    std::string text;
    for (const auto& q : qrels) {
        text += q.query_id + " 0 " + q.doc_id + " " + std::to_string(q.grade) + "\n";
    }
    detail::write_all(path, text, false);
}

}  // namespace qder
