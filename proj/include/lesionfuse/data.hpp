#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "lesionfuse/backbones.hpp"
#include "lesionfuse/random.hpp"
#include "lesionfuse/tensor.hpp"

namespace lesionfuse {

/// Malformed input data; the message carries row/column coordinates where applicable.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

enum class ColumnKind { numeric, categorical, boolean, label, id };
enum class MissingPolicy { zero, indicator, error };

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  std::vector<std::string> levels;  // categorical levels or class names for the label
  std::optional<double> min, max;   // optional accepted range for numeric values
  MissingPolicy missing = MissingPolicy::zero;
  bool operator==(const ColumnSpec&) const = default;

  /// Encoded width of this column (0 for the label and id columns).
  std::size_t encoded_width() const {
    std::size_t w = 0;
    switch (kind) {
      case ColumnKind::categorical: w = levels.size(); break;
      case ColumnKind::numeric:
      case ColumnKind::boolean: w = 1; break;
      case ColumnKind::label:
      case ColumnKind::id: return 0;
    }
    return w + (missing == MissingPolicy::indicator ? 1 : 0);
  }
  bool is_feature() const { return kind != ColumnKind::label && kind != ColumnKind::id; }
};

inline std::string to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::numeric: return "numeric";
    case ColumnKind::categorical: return "categorical";
    case ColumnKind::boolean: return "boolean";
    case ColumnKind::label: return "label";
    case ColumnKind::id: return "id";
  }
  return "?";
}

inline std::string to_string(MissingPolicy p) {
  switch (p) {
    case MissingPolicy::zero: return "zero";
    case MissingPolicy::indicator: return "indicator";
    case MissingPolicy::error: return "error";
  }
  return "?";
}

class MetadataSchema {
 public:
  MetadataSchema() = default;
  explicit MetadataSchema(std::vector<ColumnSpec> columns) : columns_(std::move(columns)) { validate(); }

  const std::vector<ColumnSpec>& columns() const { return columns_; }

  std::size_t label_index() const { return label_; }
  const ColumnSpec& label() const { return columns_[label_]; }
  const std::vector<std::string>& class_names() const { return label().levels; }
  std::size_t classes() const { return label().levels.size(); }
  std::optional<std::size_t> id_index() const { return id_; }

  /// Indices into columns() of the feature columns, in schema order.
  const std::vector<std::size_t>& feature_columns() const { return features_; }

  /// d_m = sum of categorical levels + numeric count + boolean count + missing indicators.
  std::size_t encoded_dim() const {
    std::size_t d = 0;
    for (const auto& c : columns_) d += c.encoded_width();
    return d;
  }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (columns_[i].name == name) return i;
    return std::nullopt;
  }

  bool operator==(const MetadataSchema& o) const { return columns_ == o.columns_; }

 private:
  void validate() {
    std::size_t labels = 0, ids = 0;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const auto& c = columns_[i];
      if (c.name.empty()) throw DataError("schema: column " + std::to_string(i) + " has no name");
      for (std::size_t j = 0; j < i; ++j)
        if (columns_[j].name == c.name) throw DataError("schema: duplicate column \"" + c.name + "\"");
      if ((c.kind == ColumnKind::categorical || c.kind == ColumnKind::label) && c.levels.empty())
        throw DataError("schema: column \"" + c.name + "\" needs at least one level");
      if (c.min && c.max && *c.min > *c.max) throw DataError("schema: column \"" + c.name + "\" has min > max");
      if (c.kind == ColumnKind::label) {
        label_ = i;
        ++labels;
      } else if (c.kind == ColumnKind::id) {
        id_ = i;
        ++ids;
      } else {
        features_.push_back(i);
      }
    }
    if (labels != 1) throw DataError("schema must have exactly one label column, found " + std::to_string(labels));
    if (ids > 1) throw DataError("schema may have at most one id column");
  }

  std::vector<ColumnSpec> columns_;
  std::size_t label_ = 0;
  std::optional<std::size_t> id_;
  std::vector<std::size_t> features_;
};

inline nlohmann::json schema_to_json(const MetadataSchema& schema) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : schema.columns()) {
    nlohmann::json j{{"name", c.name}, {"kind", to_string(c.kind)}, {"missing", to_string(c.missing)}};
    if (!c.levels.empty()) j["levels"] = c.levels;
    if (c.min) j["min"] = *c.min;
    if (c.max) j["max"] = *c.max;
    cols.push_back(j);
  }
  return {{"columns", cols}};
}

inline MetadataSchema schema_from_json(const nlohmann::json& j) {
  auto kind_of = [](const std::string& s) {
    for (auto k : {ColumnKind::numeric, ColumnKind::categorical, ColumnKind::boolean, ColumnKind::label, ColumnKind::id})
      if (to_string(k) == s) return k;
    throw DataError("schema: unknown column kind \"" + s + "\"");
  };
  auto policy_of = [](const std::string& s) {
    for (auto p : {MissingPolicy::zero, MissingPolicy::indicator, MissingPolicy::error})
      if (to_string(p) == s) return p;
    throw DataError("schema: unknown missing policy \"" + s + "\"");
  };
  if (!j.is_object() || !j.contains("columns") || !j["columns"].is_array())
    throw DataError("schema: expected an object with a \"columns\" array");
  std::vector<ColumnSpec> cols;
  for (const auto& c : j["columns"]) {
    for (auto it = c.begin(); it != c.end(); ++it)
      if (it.key() != "name" && it.key() != "kind" && it.key() != "levels" && it.key() != "min" &&
          it.key() != "max" && it.key() != "missing")
        throw DataError("schema: unknown key \"" + it.key() + "\"");
    try {
      ColumnSpec spec;
      spec.name = c.at("name").get<std::string>();
      spec.kind = kind_of(c.at("kind").get<std::string>());
      if (c.contains("levels")) spec.levels = c["levels"].get<std::vector<std::string>>();
      if (c.contains("min")) spec.min = c["min"].get<double>();
      if (c.contains("max")) spec.max = c["max"].get<double>();
      if (c.contains("missing")) spec.missing = policy_of(c["missing"].get<std::string>());
      cols.push_back(std::move(spec));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("schema: ") + e.what());
    }
  }
  return MetadataSchema(std::move(cols));
}

inline MetadataSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open schema file " + path.string());
  try {
    return schema_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("schema " + path.string() + ": " + e.what());
  }
}

/// The 21 clinical feature columns of the PAD-UFES-20 metadata plus the diagnosis label.
inline MetadataSchema pad_like_schema(MissingPolicy missing = MissingPolicy::zero) {
  const std::vector<std::string> ancestry{"BRAZIL", "GERMANY", "ITALY", "NETHERLANDS", "POLAND", "POMERANIA"};
  auto boolean = [&](std::string n) { return ColumnSpec{std::move(n), ColumnKind::boolean, {}, {}, {}, missing}; };
  auto categorical = [&](std::string n, std::vector<std::string> levels) {
    return ColumnSpec{std::move(n), ColumnKind::categorical, std::move(levels), {}, {}, missing};
  };
  auto numeric = [&](std::string n, double lo, double hi) {
    return ColumnSpec{std::move(n), ColumnKind::numeric, {}, lo, hi, missing};
  };
  return MetadataSchema({
      boolean("smoke"),
      boolean("drink"),
      categorical("background_father", ancestry),
      categorical("background_mother", ancestry),
      numeric("age", 0, 120),
      boolean("pesticide"),
      categorical("gender", {"FEMALE", "MALE"}),
      boolean("skin_cancer_history"),
      boolean("cancer_history"),
      boolean("has_piped_water"),
      boolean("has_sewage_system"),
      categorical("fitspatrick", {"1", "2", "3", "4", "5", "6"}),
      categorical("region", {"ABDOMEN", "ARM", "BACK", "CHEST", "EAR", "FACE", "FOOT", "FOREARM", "HAND", "LIP",
                             "NECK", "NOSE", "SCALP", "THIGH"}),
      numeric("diameter_1", 0, 100),
      numeric("diameter_2", 0, 100),
      boolean("itch"),
      boolean("grew"),
      boolean("hurt"),
      boolean("changed"),
      boolean("bleed"),
      boolean("elevation"),
      ColumnSpec{"diagnostic", ColumnKind::label, {"BCC", "SCC", "ACK", "SEK", "MEL", "NEV"}, {}, {}, MissingPolicy::error},
  });
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Raw value of a feature cell: numeric value, 0/1 for booleans, level index for
/// categoricals. nullopt when missing.
using Cell = std::optional<double>;

struct Sample {
  Tensor image;  // [C x H x W], or undefined for metadata-only data
  std::vector<Cell> metadata;
  int label = 0;
};

struct Dataset {
  MetadataSchema schema;
  std::vector<std::vector<Cell>> records;  // one entry per schema column (label/id cells unused)
  std::vector<int> labels;
  std::vector<std::string> groups;  // id column values, empty if the schema has none
  Tensor images;                    // [n x C x H x W] or undefined

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return schema.classes(); }
  const std::vector<std::string>& class_names() const { return schema.class_names(); }
  bool has_images() const { return images.defined(); }

  ImageShape image_shape() const {
    if (!has_images()) throw ContractError("dataset has no images");
    return {images.dim(1), images.dim(2), images.dim(3)};
  }

  Sample sample(std::size_t i) const {
    Sample s;
    s.metadata = records.at(i);
    s.label = labels.at(i);
    if (has_images()) {
      const std::size_t per = images.size() / size();
      std::vector<double> px(images.data().begin() + static_cast<long>(i * per),
                             images.data().begin() + static_cast<long>((i + 1) * per));
      s.image = Tensor({images.dim(1), images.dim(2), images.dim(3)}, std::move(px));
    }
    return s;
  }

  /// Images of the given rows as one [rows x C x H x W] tensor.
  Tensor gather_images(std::span<const std::size_t> rows) const {
    if (!has_images()) throw ContractError("dataset has no images");
    const std::size_t per = images.size() / size();
    std::vector<double> out(rows.size() * per);
    auto src = images.data();
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(src.data() + rows[r] * per, per, out.data() + r * per);
    return Tensor({rows.size(), images.dim(1), images.dim(2), images.dim(3)}, std::move(out));
  }

  bool operator==(const Dataset& o) const {
    if (!(schema == o.schema) || records != o.records || labels != o.labels || groups != o.groups) return false;
    if (has_images() != o.has_images()) return false;
    if (!has_images()) return true;
    return images.shape() == o.images.shape() &&
           std::equal(images.data().begin(), images.data().end(), o.images.data().begin());
  }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::optional<bool> parse_bool(const std::string& s) {
  static const std::pair<const char*, bool> table[] = {{"True", true},  {"true", true},   {"TRUE", true},
                                                       {"1", true},     {"yes", true},    {"False", false},
                                                       {"false", false}, {"FALSE", false}, {"0", false},
                                                       {"no", false}};
  for (const auto& [text, value] : table)
    if (s == text) return value;
  return std::nullopt;
}

}  // namespace detail

/// Parses a metadata CSV whose header matches the schema's column names in order.
/// Row numbers in errors are 1-based data rows (the header is row 0).
inline Dataset parse_csv_metadata(std::istream& in, const MetadataSchema& schema, const std::string& source = "csv") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && std::memcmp(line.data(), "\xEF\xBB\xBF", 3) == 0) line.erase(0, 3);
  auto header = detail::split_csv_line(line);
  const auto& cols = schema.columns();
  if (header.size() != cols.size())
    throw DataError(source + ": header has " + std::to_string(header.size()) + " columns, schema has " +
                    std::to_string(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    if (header[c] != cols[c].name)
      throw DataError(source + ": header column " + std::to_string(c) + " is \"" + header[c] + "\", schema expects \"" +
                      cols[c].name + "\"");

  Dataset ds;
  ds.schema = schema;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    auto cells = detail::split_csv_line(line);
    auto where = [&](std::size_t c) { return source + ": row " + std::to_string(row) + ", column \"" + cols[c].name + "\""; };
    if (cells.size() != cols.size())
      throw DataError(source + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, expected " + std::to_string(cols.size()));
    std::vector<Cell> record(cols.size());
    int label = -1;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& spec = cols[c];
      const std::string& text = cells[c];
      if (spec.kind == ColumnKind::id) {
        ds.groups.push_back(text);
        continue;
      }
      if (text.empty()) {
        if (spec.kind == ColumnKind::label) throw DataError(where(c) + ": missing label");
        if (spec.missing == MissingPolicy::error) throw DataError(where(c) + ": missing value not allowed");
        continue;
      }
      switch (spec.kind) {
        case ColumnKind::numeric: {
          double v = 0;
          std::size_t used = 0;
          try {
            v = std::stod(text, &used);
          } catch (const std::exception&) {
            used = 0;
          }
          if (used != text.size() || !std::isfinite(v))
            throw DataError(where(c) + ": cannot parse \"" + text + "\" as a number");
          if ((spec.min && v < *spec.min) || (spec.max && v > *spec.max))
            throw DataError(where(c) + ": value " + text + " outside the declared range");
          record[c] = v;
          break;
        }
        case ColumnKind::boolean: {
          auto b = detail::parse_bool(text);
          if (!b) throw DataError(where(c) + ": cannot parse \"" + text + "\" as a boolean");
          record[c] = *b ? 1.0 : 0.0;
          break;
        }
        case ColumnKind::categorical:
        case ColumnKind::label: {
          auto it = std::find(spec.levels.begin(), spec.levels.end(), text);
          if (it == spec.levels.end())
            throw DataError(where(c) + ": unknown " + std::string(spec.kind == ColumnKind::label ? "label" : "level") +
                            " \"" + text + "\"");
          const auto idx = static_cast<double>(it - spec.levels.begin());
          if (spec.kind == ColumnKind::label)
            label = static_cast<int>(idx);
          else
            record[c] = idx;
          break;
        }
        case ColumnKind::id: break;
      }
    }
    ds.records.push_back(std::move(record));
    ds.labels.push_back(label);
  }
  return ds;
}

inline Dataset load_csv_metadata(const std::filesystem::path& path, const MetadataSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metadata file " + path.string());
  return parse_csv_metadata(in, schema, path.string());
}

inline void write_csv_metadata(std::ostream& out, const Dataset& ds) {
  const auto& cols = ds.schema.columns();
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << detail::csv_escape(cols[c].name);
  out << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (c) out << ',';
      const auto& spec = cols[c];
      if (spec.kind == ColumnKind::label) {
        out << detail::csv_escape(spec.levels.at(static_cast<std::size_t>(ds.labels[r])));
        continue;
      }
      if (spec.kind == ColumnKind::id) {
        out << detail::csv_escape(ds.groups.at(r));
        continue;
      }
      const Cell& cell = ds.records[r][c];
      if (!cell) continue;
      switch (spec.kind) {
        case ColumnKind::numeric: out << detail::format_double(*cell); break;
        case ColumnKind::boolean: out << (*cell != 0 ? "True" : "False"); break;
        case ColumnKind::categorical: out << detail::csv_escape(spec.levels.at(static_cast<std::size_t>(*cell))); break;
        default: break;
      }
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Binary tensor files: "FBTS", u8 version, u32 rank, u32 dims[rank], f64 payload (LE)
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kTensorFileVersion = 1;

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("tensor file: truncated header");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("FBTS", 4);
  out.put(static_cast<char>(kTensorFileVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "FBTS", 4) != 0) throw DataError("tensor file: bad magic bytes");
  int version = in.get();
  if (version != kTensorFileVersion) throw DataError("tensor file: unsupported version " + std::to_string(version));
  const std::uint32_t rank = detail::get_u32(in);
  if (rank == 0 || rank > 16) throw DataError("tensor file: invalid rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_u32(in);
  detail::validate_shape(shape);
  std::vector<double> data(numel(shape));
  std::vector<unsigned char> raw(data.size() * 8);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DataError("tensor file: truncated payload");
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[i * 8 + b]) << (8 * b);
    std::memcpy(&data[i], &bits, 8);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_tensor(out, t);
  if (!out) throw IoError("write failed for " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tensor file " + path.string());
  return read_tensor(in);
}

/// Writes metadata.csv, schema.json and (when present) images.fbts into `dir`.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  {
    std::ofstream out(dir / "metadata.csv", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "metadata.csv").string());
    write_csv_metadata(out, ds);
  }
  {
    std::ofstream out(dir / "schema.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "schema.json").string());
    out << schema_to_json(ds.schema).dump(2) << '\n';
  }
  if (ds.has_images()) save_tensor(dir / "images.fbts", ds.images);
}

inline Dataset load_dataset(const std::filesystem::path& csv, const std::filesystem::path& schema_path,
                            const std::optional<std::filesystem::path>& images_path) {
  Dataset ds = load_csv_metadata(csv, load_schema(schema_path));
  if (images_path) {
    ds.images = load_tensor(*images_path);
    if (ds.images.rank() != 4 || ds.images.dim(0) != ds.size())
      throw DataError("image tensor " + images_path->string() + " has shape " + to_string(ds.images.shape()) +
                      ", expected [" + std::to_string(ds.size()) + " x C x H x W]");
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  auto images = dir / "images.fbts";
  return load_dataset(dir / "metadata.csv", dir / "schema.json",
                      std::filesystem::exists(images) ? std::optional(images) : std::nullopt);
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// One-hot categoricals, 0/1 booleans, min-max scaled numerics (statistics from the rows
/// passed to fit()), and optional missing indicators.
class MetadataEncoder {
 public:
  explicit MetadataEncoder(MetadataSchema schema) : schema_(std::move(schema)) {}

  MetadataEncoder& fit(const Dataset& ds, std::span<const std::size_t> rows) {
    ranges_.clear();
    warnings_.clear();
    for (auto c : schema_.feature_columns()) {
      if (schema_.columns()[c].kind != ColumnKind::numeric) continue;
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (auto r : rows)
        if (const auto& cell = ds.records.at(r)[c]) {
          lo = std::min(lo, *cell);
          hi = std::max(hi, *cell);
        }
      if (!(hi > lo)) {
        warnings_.push_back("numeric column \"" + schema_.columns()[c].name +
                            "\" has zero range in the fitting rows; encoded as 0");
        lo = hi = 0;
      }
      ranges_[c] = {lo, hi};
    }
    fitted_ = true;
    return *this;
  }

  std::size_t dim() const { return schema_.encoded_dim(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

  /// Min/max used for a numeric column (after fit()).
  std::pair<double, double> range(std::size_t column) const { return ranges_.at(column); }

  void encode_row(const std::vector<Cell>& record, double* out) const {
    for (std::size_t c = 0; c < schema_.columns().size(); ++c) {
      const auto& spec = schema_.columns()[c];
      if (!spec.is_feature()) continue;
      const Cell& cell = record[c];
      const std::size_t width = spec.encoded_width();
      std::fill_n(out, width, 0.0);
      if (cell) {
        switch (spec.kind) {
          case ColumnKind::categorical: out[static_cast<std::size_t>(*cell)] = 1.0; break;
          case ColumnKind::boolean: out[0] = *cell != 0 ? 1.0 : 0.0; break;
          case ColumnKind::numeric: {
            auto [lo, hi] = ranges_.at(c);
            out[0] = hi > lo ? (*cell - lo) / (hi - lo) : 0.0;
            break;
          }
          default: break;
        }
      } else if (spec.missing == MissingPolicy::indicator) {
        out[width - 1] = 1.0;
      } else if (spec.missing == MissingPolicy::error) {
        throw DataError("missing value in column \"" + spec.name + "\"");
      }
      out += width;
    }
  }

  Tensor transform(const Dataset& ds, std::span<const std::size_t> rows) const {
    if (!fitted_) throw ContractError("MetadataEncoder::transform before fit");
    const std::size_t d = dim();
    if (d == 0) throw DataError("schema has no feature columns to encode");
    std::vector<double> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) encode_row(ds.records.at(rows[i]), out.data() + i * d);
    return Tensor({rows.size(), d}, std::move(out));
  }

 private:
  MetadataSchema schema_;
  std::map<std::size_t, std::pair<double, double>> ranges_;
  std::vector<std::string> warnings_;
  bool fitted_ = false;
};

inline std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

/// Encodes every row with statistics fitted on the whole dataset.
inline Tensor encode_metadata(const Dataset& ds) {
  auto rows = all_rows(ds.size());
  return MetadataEncoder(ds.schema).fit(ds, rows).transform(ds, rows);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class SignalMode { image_only, metadata_only, both };

inline std::string to_string(SignalMode m) {
  switch (m) {
    case SignalMode::image_only: return "image-only";
    case SignalMode::metadata_only: return "metadata-only";
    case SignalMode::both: return "both";
  }
  return "?";
}

inline SignalMode parse_signal_mode(const std::string& s) {
  for (auto m : {SignalMode::image_only, SignalMode::metadata_only, SignalMode::both})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown signal mode \"" + s + "\"; valid modes: image-only, metadata-only, both");
}

struct SyntheticSpec {
  std::size_t n = 600;
  std::size_t classes = 6;
  ImageShape image{};
  SignalMode mode = SignalMode::both;
  double delta = 3.0;
  double missing_rate = 0.0;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  bool operator==(const SyntheticSpec&) const = default;
};

/// +/-1 class template over metadata columns: Sylvester-Hadamard row (class + 1),
/// column index j. Rows of a Hadamard matrix are mutually orthogonal, so classes differ
/// on about half the columns.
inline double metadata_template(std::size_t cls, std::size_t column) {
  return (__builtin_popcountll((cls + 1) & column) % 2 == 0) ? 1.0 : -1.0;
}

/// Class template over image channels: class k shifts channel k mod C by +1 or -1,
/// alternating sign every C classes and growing in magnitude after 2C classes.
inline double image_template(std::size_t cls, std::size_t channel, std::size_t channels) {
  if (cls % channels != channel) return 0.0;
  const double sign = (cls / channels) % 2 == 0 ? 1.0 : -1.0;
  return sign * (1.0 + static_cast<double>(cls / (2 * channels)));
}

/// Class-conditional Gaussian data shaped like PAD-UFES-20: per-class shifts of size
/// delta on image channel means and/or on a latent vector that drives the 21 clinical
/// columns (booleans by sign, categoricals by normal-quantile bucket, numerics by an
/// affine map clamped to the declared range).
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.n < spec.classes)
    throw ConfigError("synthetic data needs n >= classes (n=" + std::to_string(spec.n) + ", classes=" +
                      std::to_string(spec.classes) + ")");
  if (spec.n < spec.classes * spec.folds)
    throw ConfigError("synthetic data needs n >= classes * folds for stratification (n=" + std::to_string(spec.n) + ")");
  if (spec.missing_rate < 0 || spec.missing_rate >= 1) throw ConfigError("missing_rate must be in [0, 1)");

  MetadataSchema base = pad_like_schema(spec.missing_rate > 0 ? MissingPolicy::indicator : MissingPolicy::zero);
  std::vector<ColumnSpec> cols = base.columns();
  if (spec.classes != 6) {
    auto& label = cols[base.label_index()];
    label.levels.clear();
    for (std::size_t k = 0; k < spec.classes; ++k) label.levels.push_back("C" + std::to_string(k));
  }
  Dataset ds;
  ds.schema = MetadataSchema(cols);

  Rng rng(mix_seed(spec.seed, 0x5EED));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> labels(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) labels[i] = static_cast<int>(i % spec.classes);
  std::shuffle(labels.begin(), labels.end(), rng);

  const bool image_signal = spec.mode != SignalMode::metadata_only;
  const bool meta_signal = spec.mode != SignalMode::image_only;
  const auto& img = spec.image;
  const std::size_t per = img.channels * img.height * img.width, plane = img.height * img.width;
  std::vector<double> pixels(spec.n * per);

  const auto& features = ds.schema.feature_columns();
  for (std::size_t i = 0; i < spec.n; ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    for (std::size_t c = 0; c < img.channels; ++c) {
      const double shift = image_signal ? spec.delta * image_template(k, c, img.channels) : 0.0;
      double* p = pixels.data() + i * per + c * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] = shift + noise(rng);
    }
    std::vector<Cell> record(cols.size());
    for (std::size_t f = 0; f < features.size(); ++f) {
      const auto& col = cols[features[f]];
      const double z = (meta_signal ? spec.delta * metadata_template(k, f) : 0.0) + noise(rng);
      const bool missing = spec.missing_rate > 0 && unit(rng) < spec.missing_rate;
      if (missing) continue;
      switch (col.kind) {
        case ColumnKind::boolean: record[features[f]] = z > 0 ? 1.0 : 0.0; break;
        case ColumnKind::categorical: {
          const double phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
          const auto L = col.levels.size();
          record[features[f]] = static_cast<double>(std::min(L - 1, static_cast<std::size_t>(phi * static_cast<double>(L))));
          break;
        }
        case ColumnKind::numeric: {
          const double lo = *col.min, hi = *col.max;
          const double centre = col.name == "age" ? 50.0 : 15.0, spread = col.name == "age" ? 12.0 : 4.0;
          record[features[f]] = std::clamp(centre + spread * z, lo, hi);
          break;
        }
        default: break;
      }
    }
    ds.records.push_back(std::move(record));
  }
  ds.labels = std::move(labels);
  ds.images = Tensor({spec.n, img.channels, img.height, img.width}, std::move(pixels));
  return ds;
}

// ---------------------------------------------------------------------------
// Cross-validation folds and batching
// ---------------------------------------------------------------------------

struct FoldPlan {
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignment;  // fold index per sample

  std::vector<std::size_t> validation_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == fold) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> training_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != fold) out.push_back(i);
    return out;
  }
};

/// Stratified k-fold: within each class (seeded shuffle), samples are dealt round-robin
/// over the folds, continuing where the previous class stopped so fold sizes also stay
/// within one of each other.
inline FoldPlan stratified_kfold(std::span<const int> labels, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw ConfigError("negative label in fold planning");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t k = 0; k < by_class.size(); ++k)
    if (!by_class[k].empty() && by_class[k].size() < folds)
      throw ConfigError("class " + std::to_string(k) + " has " + std::to_string(by_class[k].size()) +
                        " samples, fewer than " + std::to_string(folds) + " folds");
  FoldPlan plan{folds, seed, std::vector<std::size_t>(labels.size(), 0)};
  Rng rng(mix_seed(seed, 0xF01D));
  std::size_t next = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (auto idx : members) {
      plan.assignment[idx] = next;
      next = (next + 1) % folds;
    }
  }
  return plan;
}

/// Group-aware variant: all samples sharing a group id land in the same fold. Groups are
/// placed largest first into the fold holding the fewest samples of the group's majority
/// class. Per-class balance is best effort.
inline FoldPlan grouped_stratified_kfold(std::span<const int> labels, std::span<const std::string> groups,
                                         std::size_t folds, std::uint64_t seed) {
  if (groups.size() != labels.size()) throw ConfigError("group column length does not match labels");
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
  if (members.size() < folds)
    throw ConfigError("only " + std::to_string(members.size()) + " groups for " + std::to_string(folds) + " folds");
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [name, rows] : members) order.push_back(&rows);
  Rng rng(mix_seed(seed, 0x6A0C));
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [](auto a, auto b) { return a->size() > b->size(); });

  const int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<std::vector<std::size_t>> per_class(folds, std::vector<std::size_t>(static_cast<std::size_t>(max_label + 1), 0));
  std::vector<std::size_t> sizes(folds, 0);
  FoldPlan plan{folds, seed, std::vector<std::size_t>(labels.size(), 0)};
  for (const auto* rows : order) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(max_label + 1), 0);
    for (auto r : *rows) ++counts[static_cast<std::size_t>(labels[r])];
    const auto major = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    std::size_t best = 0;
    for (std::size_t f = 1; f < folds; ++f)
      if (per_class[f][major] < per_class[best][major] ||
          (per_class[f][major] == per_class[best][major] && sizes[f] < sizes[best]))
        best = f;
    for (auto r : *rows) {
      plan.assignment[r] = best;
      ++per_class[best][static_cast<std::size_t>(labels[r])];
    }
    sizes[best] += rows->size();
  }
  return plan;
}

/// Seeded per-(seed, epoch) shuffle of `rows`, cut into batches; the last may be short.
inline std::vector<std::vector<std::size_t>> batch_iter(std::span<const std::size_t> rows, std::size_t batch_size,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(rows.begin(), rows.end());
  Rng rng(mix_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + static_cast<long>(i),
                         order.begin() + static_cast<long>(std::min(order.size(), i + batch_size)));
  return batches;
}

}  // namespace lesionfuse
