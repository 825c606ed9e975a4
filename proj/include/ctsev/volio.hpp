#pragma once

// Dataset ingestion: severity labels, manifests, volume storage formats and
// patient-level stratified splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ctsev/error.hpp"
#include "ctsev/png16.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/tensor.hpp"

namespace ctsev {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Severity labels

/// Clinician score in [1, 6].
class SeverityScore {
 public:
  explicit SeverityScore(int value) : value_(value) {
    if (value < 1 || value > 6) {
      throw LabelError("severity score " + std::to_string(value) + " outside [1,6]");
    }
  }
  int value() const noexcept { return value_; }
  friend bool operator==(SeverityScore, SeverityScore) = default;

 private:
  int value_;
};

enum class SeverityClass : int { Low = 0, Medium = 1, High = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<SeverityClass, kNumClasses> kAllClasses{
    SeverityClass::Low, SeverityClass::Medium, SeverityClass::High};

inline constexpr std::size_t index_of(SeverityClass c) noexcept {
  return static_cast<std::size_t>(c);
}

inline SeverityClass class_from_index(std::int64_t i) {
  if (i < 0 || i > 2) throw LabelError("class index " + std::to_string(i) + " outside {0,1,2}");
  return static_cast<SeverityClass>(i);
}

inline std::string class_name(SeverityClass c) {
  switch (c) {
    case SeverityClass::Low: return "low";
    case SeverityClass::Medium: return "medium";
    case SeverityClass::High: return "high";
  }
  return "?";
}

/// 1-2 -> Low, 3 -> Medium, 4-6 -> High.
inline SeverityClass map_severity(SeverityScore score) noexcept {
  const int v = score.value();
  if (v <= 2) return SeverityClass::Low;
  if (v == 3) return SeverityClass::Medium;
  return SeverityClass::High;
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { unassigned, train, test };

struct PatientRecord {
  std::string id;
  std::string volume_path;  // verbatim from the manifest
  SeverityScore score{1};
  Split split = Split::unassigned;

  SeverityClass severity() const noexcept { return map_severity(score); }
};

struct DatasetManifest {
  std::vector<PatientRecord> records;
  std::string source_note;
  /// Directory relative paths resolve against; empty means the CWD.
  fs::path base_dir;

  fs::path resolve(const PatientRecord& r) const {
    fs::path p(r.volume_path);
    if (p.is_absolute() || base_dir.empty()) return p;
    return base_dir / p;
  }

  std::vector<std::size_t> indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == s) out.push_back(i);
    }
    return out;
  }

  DatasetManifest subset(Split s) const {
    DatasetManifest m;
    m.source_note = source_note;
    m.base_dir = base_dir;
    for (const auto& r : records) {
      if (r.split == s) m.records.push_back(r);
    }
    return m;
  }
};

namespace detail {

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": malformed JSON (" + e.what() + ")");
  }
}

/// ConfigError naming the first key of `j` outside `allowed`.
inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed,
                                const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(what + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace detail

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "null";
}

/// Validates ids, scores and splits; every error names the offending record.
inline DatasetManifest parse_manifest(const json& doc) {
  if (!doc.is_object() || !doc.contains("records") || !doc["records"].is_array()) {
    throw FormatError("manifest: expected an object with a \"records\" array");
  }
  DatasetManifest m;
  if (doc.contains("source_note")) {
    if (!doc["source_note"].is_string()) throw FormatError("manifest: source_note must be a string");
    m.source_note = doc["source_note"].get<std::string>();
  }
  std::set<std::string> seen;
  std::size_t position = 0;
  for (const auto& r : doc["records"]) {
    const std::string where = "manifest record #" + std::to_string(position++);
    if (!r.is_object()) throw FormatError(where + ": not an object");
    if (!r.contains("id") || !r["id"].is_string() || r["id"].get<std::string>().empty()) {
      throw FormatError(where + ": missing or empty id");
    }
    PatientRecord rec;
    rec.id = r["id"].get<std::string>();
    const std::string who = "record '" + rec.id + "'";
    if (!seen.insert(rec.id).second) throw DuplicateIdError(who + ": duplicate id");
    if (!r.contains("path") || !r["path"].is_string()) throw FormatError(who + ": missing path");
    rec.volume_path = r["path"].get<std::string>();
    if (!r.contains("severity_score") || !r["severity_score"].is_number_integer()) {
      throw FormatError(who + ": severity_score must be an integer");
    }
    try {
      rec.score = SeverityScore(r["severity_score"].get<int>());
    } catch (LabelError& e) {
      e.add_context(who);
      throw;
    }
    if (r.contains("split") && !r["split"].is_null()) {
      const auto& s = r["split"];
      if (s == "train") {
        rec.split = Split::train;
      } else if (s == "test") {
        rec.split = Split::test;
      } else {
        throw FormatError(who + ": split must be \"train\", \"test\" or null");
      }
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

inline json manifest_to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) {
    json split = r.split == Split::unassigned ? json(nullptr) : json(to_string(r.split));
    records.push_back({{"id", r.id},
                       {"path", r.volume_path},
                       {"severity_score", r.score.value()},
                       {"split", split}});
  }
  return {{"records", records}, {"source_note", m.source_note}};
}

inline DatasetManifest load_manifest(const fs::path& path) {
  auto doc = detail::parse_json(detail::read_text(path), path.string());
  DatasetManifest m = parse_manifest(doc);
  m.base_dir = path.parent_path();
  return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  detail::write_text(path, manifest_to_json(m).dump(2) + "\n");
}

/// Rewrites relative volume paths so they resolve from `new_base`.
inline DatasetManifest relocated(const DatasetManifest& m, const fs::path& new_base) {
  DatasetManifest out = m;
  out.base_dir = new_base;
  const fs::path base = fs::absolute(new_base).lexically_normal();
  for (auto& r : out.records) {
    if (fs::path(r.volume_path).is_absolute()) continue;
    const fs::path target = fs::absolute(m.resolve(r)).lexically_normal();
    r.volume_path = target.lexically_relative(base).generic_string();
  }
  return out;
}

/// Patient counts per severity class (Low, Medium, High).
inline std::array<std::size_t, kNumClasses> class_histogram(const DatasetManifest& m) {
  std::array<std::size_t, kNumClasses> counts{};
  for (const auto& r : m.records) ++counts[index_of(r.severity())];
  return counts;
}

/// Patient-level stratified split. Per class, max(1, floor(f * n)) records go
/// to test; the choice is a seeded shuffle of the class's ids in sorted order,
/// so it does not depend on record order in the manifest.
inline DatasetManifest stratified_split(const DatasetManifest& manifest, double test_fraction,
                                        std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0,1)");
  }
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    by_class[index_of(manifest.records[i].severity())].push_back(i);
  }
  DatasetManifest out = manifest;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto& members = by_class[c];
    if (members.size() < 2) {
      throw InsufficientClassError("class '" + class_name(static_cast<SeverityClass>(c)) +
                                   "' has " + std::to_string(members.size()) +
                                   " patients; stratified split needs at least 2");
    }
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      return manifest.records[a].id < manifest.records[b].id;
    });
    Rng rng(hash_words({seed, 0x5b11u, c}));
    rng.shuffle(members);
    auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(members.size())));
    n_test = std::max<std::size_t>(n_test, 1);
    for (std::size_t j = 0; j < members.size(); ++j) {
      out.records[members[j]].split = j < n_test ? Split::test : Split::train;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Volumes

enum class IntensityUnit { HU, normalized };

inline std::string to_string(IntensityUnit u) { return u == IntensityUnit::HU ? "HU" : "normalized"; }

/// One patient scan: voxels [depth, height, width].
struct Volume {
  Tensor<double> voxels;
  IntensityUnit intensity_unit = IntensityUnit::normalized;
  std::optional<std::array<double, 3>> spacing_mm;  // (z, y, x)

  std::size_t depth() const { return voxels.extent(0); }
  std::size_t height() const { return voxels.extent(1); }
  std::size_t width() const { return voxels.extent(2); }

  static Volume make(Tensor<double> voxels, IntensityUnit unit) {
    if (voxels.rank() != 3) {
      throw ShapeError("volume must have rank 3, got shape " + shape_string(voxels.shape()));
    }
    return Volume{std::move(voxels), unit, std::nullopt};
  }
};

enum class VolumeFormat { slice_stack, raw };

inline constexpr const char* kRawFile = "volume.raw";
inline constexpr const char* kMetaFile = "meta.json";

inline std::string slice_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "slice_%04zu.png", index);
  return buf;
}

/// raw when the directory holds volume.raw, slice stack otherwise.
inline VolumeFormat detect_format(const fs::path& dir) {
  return fs::exists(dir / kRawFile) ? VolumeFormat::raw : VolumeFormat::slice_stack;
}

namespace detail {

inline std::size_t meta_extent(const json& meta, const char* key, const std::string& where) {
  if (!meta.contains(key) || !meta[key].is_number_integer() || meta[key].get<long long>() < 1) {
    throw FormatError(where + ": \"" + key + "\" must be a positive integer");
  }
  return meta[key].get<std::size_t>();
}

inline std::optional<std::array<double, 3>> meta_spacing(const json& meta, const std::string& where) {
  if (!meta.contains("spacing_mm") || meta["spacing_mm"].is_null()) return std::nullopt;
  const auto& s = meta["spacing_mm"];
  if (!s.is_array() || s.size() != 3) throw FormatError(where + ": spacing_mm must be [z,y,x] or null");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    out[i] = s[i].get<double>();
    if (!(out[i] > 0)) throw FormatError(where + ": spacing_mm entries must be positive");
  }
  return out;
}

inline std::optional<std::pair<double, double>> meta_rescale(const json& meta) {
  auto has = [&](const char* k) { return meta.contains(k) && meta[k].is_number(); };
  if (has("rescale_slope") && has("rescale_intercept")) {
    return std::make_pair(meta["rescale_slope"].get<double>(), meta["rescale_intercept"].get<double>());
  }
  return std::nullopt;
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                       std::uint32_t(p[3]) << 24;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline void write_f32_le(unsigned char* p, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  p[0] = bits & 0xff;
  p[1] = (bits >> 8) & 0xff;
  p[2] = (bits >> 16) & 0xff;
  p[3] = (bits >> 24) & 0xff;
}

inline Volume load_raw(const fs::path& dir) {
  const std::string where = dir.string();
  json meta = parse_json(read_text(dir / kMetaFile), (dir / kMetaFile).string());
  const std::size_t d = meta_extent(meta, "depth", where);
  const std::size_t h = meta_extent(meta, "height", where);
  const std::size_t w = meta_extent(meta, "width", where);
  const std::string bytes = read_text(dir / kRawFile);
  const std::size_t n = d * h * w;
  if (bytes.size() != n * 4) {
    throw SizeMismatchError(where + ": volume.raw holds " + std::to_string(bytes.size()) +
                            " bytes, meta implies " + std::to_string(n * 4));
  }
  std::vector<double> data(n);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < n; ++i) data[i] = read_f32_le(p + 4 * i);

  IntensityUnit unit = IntensityUnit::normalized;
  if (meta.contains("intensity_unit")) {
    const auto u = meta["intensity_unit"];
    if (u == "HU") {
      unit = IntensityUnit::HU;
    } else if (u != "normalized") {
      throw FormatError(where + ": intensity_unit must be \"HU\" or \"normalized\"");
    }
  }
  if (auto rescale = meta_rescale(meta)) {
    for (auto& v : data) v = v * rescale->first + rescale->second;
    unit = IntensityUnit::HU;
  }
  Volume v = Volume::make(Tensor<double>({d, h, w}, std::move(data)), unit);
  v.spacing_mm = meta_spacing(meta, where);
  return v;
}

inline Volume load_slice_stack(const fs::path& dir) {
  const std::string where = dir.string();
  json meta = parse_json(read_text(dir / kMetaFile), (dir / kMetaFile).string());
  const std::size_t declared = meta_extent(meta, "num_slices", where);
  const std::size_t h = meta_extent(meta, "height", where);
  const std::size_t w = meta_extent(meta, "width", where);

  std::set<std::size_t> indices;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.size() == 14 && name.rfind("slice_", 0) == 0 && name.substr(10) == ".png") {
      const std::string digits = name.substr(6, 4);
      if (std::all_of(digits.begin(), digits.end(), ::isdigit)) indices.insert(std::stoul(digits));
    }
  }
  if (ec) throw IoError("cannot list " + where + ": " + ec.message());
  std::size_t expected = 0;
  for (auto i : indices) {
    if (i != expected) {
      throw MissingSliceError(where + ": slice " + std::to_string(expected) + " is missing");
    }
    ++expected;
  }
  if (indices.size() != declared) {
    throw SizeMismatchError(where + ": meta declares " + std::to_string(declared) +
                            " slices, directory has " + std::to_string(indices.size()));
  }

  const auto rescale = meta_rescale(meta);
  std::vector<double> data;
  data.reserve(declared * h * w);
  for (std::size_t z = 0; z < declared; ++z) {
    auto img = png16::read((dir / slice_file_name(z)).string());
    if (img.height != h || img.width != w) {
      throw SizeMismatchError(where + ": " + slice_file_name(z) + " is " +
                              std::to_string(img.height) + "x" + std::to_string(img.width) +
                              ", meta says " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (auto px : img.pixels) {
      const double raw = px;
      data.push_back(rescale ? raw * rescale->first + rescale->second : raw);
    }
  }
  Volume v = Volume::make(Tensor<double>({declared, h, w}, std::move(data)),
                          rescale ? IntensityUnit::HU : IntensityUnit::normalized);
  v.spacing_mm = meta_spacing(meta, where);
  return v;
}

}  // namespace detail

inline Volume load_volume(const fs::path& dir, VolumeFormat format) {
  if (!fs::is_directory(dir)) throw IoError("volume directory not found: " + dir.string());
  return format == VolumeFormat::raw ? detail::load_raw(dir) : detail::load_slice_stack(dir);
}

inline Volume load_volume(const fs::path& dir) { return load_volume(dir, detect_format(dir)); }

/// Writes volume.raw (little-endian float32) and meta.json.
inline void save_volume_raw(const Volume& v, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto data = v.voxels.data();
  std::string bytes(data.size() * 4, '\0');
  auto* p = reinterpret_cast<unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < data.size(); ++i) detail::write_f32_le(p + 4 * i, static_cast<float>(data[i]));
  detail::write_text(dir / kRawFile, bytes);
  json meta = {{"depth", v.depth()},
               {"height", v.height()},
               {"width", v.width()},
               {"intensity_unit", to_string(v.intensity_unit)}};
  detail::write_text(dir / kMetaFile, meta.dump(2) + "\n");
}

/// Writes a 16-bit slice stack; stored = round((value - intercept) / slope),
/// clamped to [0, 65535].
inline void save_volume_slice_stack(const Volume& v, const fs::path& dir, double slope = 1.0,
                                    double intercept = -1024.0) {
  if (!(slope > 0)) throw ConfigError("rescale slope must be positive");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::size_t d = v.depth(), h = v.height(), w = v.width();
  for (std::size_t z = 0; z < d; ++z) {
    png16::Image img{h, w, std::vector<std::uint16_t>(h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
      const double s = std::round((v.voxels[z * h * w + i] - intercept) / slope);
      img.pixels[i] = static_cast<std::uint16_t>(std::clamp(s, 0.0, 65535.0));
    }
    png16::write((dir / slice_file_name(z)).string(), img);
  }
  json spacing = v.spacing_mm ? json(*v.spacing_mm) : json(nullptr);
  json meta = {{"num_slices", d},         {"height", h},
               {"width", w},              {"rescale_slope", slope},
               {"rescale_intercept", intercept}, {"spacing_mm", spacing}};
  detail::write_text(dir / kMetaFile, meta.dump(2) + "\n");
}

}  // namespace ctsev
