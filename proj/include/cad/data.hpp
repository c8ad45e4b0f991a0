#pragma once

// Segments, recordings, feature-file I/O and the synthetic classroom generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cad/errors.hpp"
#include "cad/matrix.hpp"
#include "json.hpp"

namespace cad {

using Json = nlohmann::json;

enum class Label : int { Teacher = 0, Student = 1 };

inline constexpr int kNumClasses = 2;

inline const char* label_name(Label l) { return l == Label::Teacher ? "Teacher" : "Student"; }
inline int label_index(Label l) { return static_cast<int>(l); }

struct Segment {
  std::size_t id = 0;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  std::vector<double> acoustic;
  std::vector<double> text;
  std::optional<Label> label;

  std::int64_t duration_ms() const { return end_ms - start_ms; }

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Recording {
  std::string id;
  std::size_t d_a = 0;
  std::size_t d_t = 0;
  std::vector<Segment> segments;

  std::size_t size() const { return segments.size(); }

  /// True when every segment carries a gold label.
  bool labeled() const {
    return std::all_of(segments.begin(), segments.end(),
                       [](const Segment& s) { return s.label.has_value(); });
  }

  /// Flagged for inference only: at least one segment lacks a label.
  bool inference_only() const { return !labeled(); }

  friend bool operator==(const Recording&, const Recording&) = default;
};

struct Dataset {
  std::size_t d_a = 0;
  std::size_t d_t = 0;
  std::vector<Recording> recordings;

  bool labeled() const {
    return std::all_of(recordings.begin(), recordings.end(),
                       [](const Recording& r) { return r.labeled(); });
  }
};

/// Throws DataError unless the recording satisfies every structural invariant.
inline void validate(const Recording& rec) {
  const std::string where = "recording '" + rec.id + "'";
  if (rec.segments.empty()) throw DataError(where + ": no segments");
  for (std::size_t i = 0; i < rec.segments.size(); ++i) {
    const Segment& s = rec.segments[i];
    const std::string seg = where + " segment " + std::to_string(i);
    if (s.id != i) throw DataError(seg + ": id " + std::to_string(s.id) + " out of sequence");
    if (s.end_ms <= s.start_ms) throw DataError(seg + ": end_ms must exceed start_ms");
    if (i > 0 && s.start_ms < rec.segments[i - 1].start_ms) {
      throw DataError(seg + ": timestamps not monotone");
    }
    if (s.acoustic.size() != rec.d_a) {
      throw DimensionError(seg + ": acoustic vector has " + std::to_string(s.acoustic.size()) +
                           " entries, header declares d_a=" + std::to_string(rec.d_a));
    }
    if (s.text.size() != rec.d_t) {
      throw DimensionError(seg + ": text vector has " + std::to_string(s.text.size()) +
                           " entries, header declares d_t=" + std::to_string(rec.d_t));
    }
    for (double v : s.acoustic)
      if (!std::isfinite(v)) throw DataError(seg + ": non-finite acoustic feature");
    for (double v : s.text)
      if (!std::isfinite(v)) throw DataError(seg + ": non-finite text feature");
  }
}

inline Matrix acoustic_matrix(const Recording& rec) {
  Matrix m(rec.size(), rec.d_a);
  for (std::size_t i = 0; i < rec.size(); ++i)
    std::copy(rec.segments[i].acoustic.begin(), rec.segments[i].acoustic.end(), m.row(i).begin());
  return m;
}

inline Matrix text_matrix(const Recording& rec) {
  Matrix m(rec.size(), rec.d_t);
  for (std::size_t i = 0; i < rec.size(); ++i)
    std::copy(rec.segments[i].text.begin(), rec.segments[i].text.end(), m.row(i).begin());
  return m;
}

/// Gold labels; throws when any segment is unlabeled.
inline std::vector<Label> gold_labels(const Recording& rec) {
  std::vector<Label> out;
  out.reserve(rec.size());
  for (const Segment& s : rec.segments) {
    if (!s.label) throw DataError("recording '" + rec.id + "': segment " + std::to_string(s.id) +
                                  " has no label");
    out.push_back(*s.label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature file format
// ---------------------------------------------------------------------------

inline Json to_json(const Recording& rec) {
  Json segs = Json::array();
  for (const Segment& s : rec.segments) {
    Json j = {{"id", s.id}, {"start_ms", s.start_ms}, {"end_ms", s.end_ms}};
    if (s.label) j["label"] = label_index(*s.label);
    j["a"] = s.acoustic;
    j["t"] = s.text;
    segs.push_back(std::move(j));
  }
  return Json{{"id", rec.id}, {"d_a", rec.d_a}, {"d_t", rec.d_t}, {"segments", std::move(segs)}};
}

namespace detail {

template <typename T>
T field(const Json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const Json::exception& e) {
    throw DataError(where + ": field '" + key + "' has wrong type (" + e.what() + ")");
  }
}

inline Label parse_label(const Json& j, const std::string& where) {
  if (j.is_number_integer()) {
    const int v = j.get<int>();
    if (v == 0) return Label::Teacher;
    if (v == 1) return Label::Student;
  } else if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "Teacher" || s == "T") return Label::Teacher;
    if (s == "Student" || s == "S") return Label::Student;
  }
  throw DataError(where + ": field 'label' must be 0 (Teacher) or 1 (Student)");
}

}  // namespace detail

inline Recording recording_from_json(const Json& doc, const std::string& source = "<json>") {
  if (!doc.is_object()) throw DataError(source + ": top level must be an object");
  Recording rec;
  rec.id = detail::field<std::string>(doc, "id", source);
  rec.d_a = detail::field<std::size_t>(doc, "d_a", source);
  rec.d_t = detail::field<std::size_t>(doc, "d_t", source);
  const Json& segs = detail::field<Json>(doc, "segments", source);
  if (!segs.is_array()) throw DataError(source + ": field 'segments' must be an array");
  rec.segments.reserve(segs.size());
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const std::string where = source + ": segments[" + std::to_string(i) + "]";
    const Json& js = segs[i];
    if (!js.is_object()) throw DataError(where + ": must be an object");
    Segment s;
    s.id = detail::field<std::size_t>(js, "id", where);
    s.start_ms = detail::field<std::int64_t>(js, "start_ms", where);
    s.end_ms = detail::field<std::int64_t>(js, "end_ms", where);
    if (auto it = js.find("label"); it != js.end() && !it->is_null()) {
      s.label = detail::parse_label(*it, where);
    }
    s.acoustic = detail::field<std::vector<double>>(js, "a", where);
    s.text = detail::field<std::vector<double>>(js, "t", where);
    rec.segments.push_back(std::move(s));
  }
  validate(rec);
  return rec;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temporary and renames, so a failed write never leaves
/// a partial file at `path`.
inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
    if (!out) throw DataError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline Recording load_recording(const std::filesystem::path& path) {
  return recording_from_json(parse_json_file(path), path.string());
}

inline void save_recording(const Recording& rec, const std::filesystem::path& path) {
  write_text_file(path, to_json(rec).dump());
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

inline constexpr const char* kDatasetManifest = "manifest.json";

/// Writes one file per recording plus a manifest carrying each file's split tag.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                         const std::vector<std::string>& split_tags) {
  if (split_tags.size() != ds.recordings.size()) {
    throw ContractError("save_dataset: one split tag per recording required");
  }
  std::filesystem::create_directories(dir);
  Json files = Json::array();
  for (std::size_t i = 0; i < ds.recordings.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "rec_%05zu.json", i);
    save_recording(ds.recordings[i], dir / name);
    files.push_back({{"file", name}, {"split", split_tags[i]}});
  }
  Json manifest = {{"format", "cad-dataset"}, {"version", 1},    {"d_a", ds.d_a},
                   {"d_t", ds.d_t},           {"files", files}};
  write_text_file(dir / kDatasetManifest, manifest.dump(2));
}

/// Loads a dataset directory; an empty `split` loads every listed file.
inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& split = "") {
  const std::filesystem::path mpath = dir / kDatasetManifest;
  const Json manifest = parse_json_file(mpath);
  Dataset ds;
  ds.d_a = detail::field<std::size_t>(manifest, "d_a", mpath.string());
  ds.d_t = detail::field<std::size_t>(manifest, "d_t", mpath.string());
  const Json& files = detail::field<Json>(manifest, "files", mpath.string());
  if (!files.is_array()) throw DataError(mpath.string() + ": 'files' must be an array");
  for (const Json& f : files) {
    const auto name = detail::field<std::string>(f, "file", mpath.string());
    const auto tag = f.value("split", std::string());
    if (!split.empty() && tag != split) continue;
    Recording rec = load_recording(dir / name);
    if (rec.d_a != ds.d_a || rec.d_t != ds.d_t) {
      throw DimensionError(name + ": dimensions " + std::to_string(rec.d_a) + "/" +
                           std::to_string(rec.d_t) + " disagree with manifest " +
                           std::to_string(ds.d_a) + "/" + std::to_string(ds.d_t));
    }
    ds.recordings.push_back(std::move(rec));
  }
  if (ds.recordings.empty()) {
    throw DataError(dir.string() + ": no recordings" +
                    (split.empty() ? std::string() : " with split '" + split + "'"));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct Split {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

/// Recording-level shuffle split. The train side gets round(fraction * n).
inline Split split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("split: train fraction must lie in (0, 1)");
  }
  const std::size_t n = ds.recordings.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(n)));
  if (n_train == 0 || n_train >= n) {
    throw DataError("split: " + std::to_string(n) + " recordings cannot yield two non-empty halves");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Split out;
  out.train.d_a = out.test.d_a = ds.d_a;
  out.train.d_t = out.test.d_t = ds.d_t;
  out.train_indices.assign(order.begin(), order.begin() + n_train);
  out.test_indices.assign(order.begin() + n_train, order.end());
  std::sort(out.train_indices.begin(), out.train_indices.end());
  std::sort(out.test_indices.begin(), out.test_indices.end());
  for (std::size_t i : out.train_indices) out.train.recordings.push_back(ds.recordings[i]);
  for (std::size_t i : out.test_indices) out.test.recordings.push_back(ds.recordings[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic classroom generator
// ---------------------------------------------------------------------------

/// Parameters of the synthetic classroom generator.
///
/// Each recording has its own teacher voice; student voices sit at distance
/// `cluster_separation` from it before unit normalization, so acoustic
/// vectors identify speakers within a recording but carry no global label
/// signal. Text vectors are label-conditioned except for an ambiguous
/// fraction drawn from the midpoint distribution. Labels follow a two-state
/// Markov chain whose stationary student probability is `student_ratio`.
struct GeneratorConfig {
  std::size_t n_recordings = 400;
  std::size_t mean_segments = 700;
  double student_ratio = 0.22;
  std::size_t n_student_voices = 4;
  double cluster_separation = 1.0;
  double acoustic_noise = 0.3;
  double text_ambiguity = 0.3;
  double text_separation = 3.0;
  double text_noise = 1.0;
  double mean_student_run = 2.0;  // segments
  double duration_log_mean = 8.0;  // log milliseconds
  double duration_log_sigma = 0.8;
  std::int64_t max_gap_ms = 400;
  std::size_t d_a = 256;
  std::size_t d_t = 300;
  std::uint64_t seed = 7;

  void validate() const {
    auto fail = [](const std::string& m) { throw ContractError("generator config: " + m); };
    if (n_recordings == 0) fail("n_recordings must be positive");
    if (mean_segments == 0) fail("mean_segments must be positive");
    if (!(student_ratio > 0.0 && student_ratio < 1.0)) fail("student_ratio must lie in (0, 1)");
    if (n_student_voices == 0) fail("n_student_voices must be positive");
    if (!(cluster_separation >= 0.0)) fail("cluster_separation must be nonnegative");
    if (!(acoustic_noise >= 0.0) || !(text_noise >= 0.0)) fail("noise must be nonnegative");
    if (!(text_ambiguity >= 0.0 && text_ambiguity <= 1.0)) fail("text_ambiguity must lie in [0, 1]");
    if (!(mean_student_run >= 1.0)) fail("mean_student_run must be at least 1");
    // The teacher->student switch probability must stay a probability.
    if (student_ratio / (1.0 - student_ratio) / mean_student_run > 1.0) {
      fail("student_ratio too high for mean_student_run");
    }
    if (!(duration_log_sigma >= 0.0)) fail("duration_log_sigma must be nonnegative");
    if (max_gap_ms < 0) fail("max_gap_ms must be nonnegative");
    if (d_a == 0 || d_t == 0) fail("feature dimensions must be positive");
  }
};

namespace detail {

inline std::vector<double> gaussian_vector(std::size_t d, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = stddev * nd(rng);
  return v;
}

inline void normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

inline std::vector<double> random_unit(std::size_t d, std::mt19937_64& rng) {
  auto v = gaussian_vector(d, 1.0, rng);
  normalize(v);
  return v;
}

}  // namespace detail

inline Dataset synthesize_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  // Text class means sit at +/- half the separation along one direction
  // around a shared random offset; ambiguous text uses the midpoint.
  const auto text_dir = detail::random_unit(cfg.d_t, rng);
  const auto text_offset = detail::gaussian_vector(cfg.d_t, 0.5, rng);
  auto text_mean = [&](double sign) {
    std::vector<double> m(cfg.d_t);
    for (std::size_t k = 0; k < cfg.d_t; ++k)
      m[k] = text_offset[k] + sign * 0.5 * cfg.text_separation * text_dir[k];
    return m;
  };
  const auto mean_teacher = text_mean(1.0);
  const auto mean_student = text_mean(-1.0);
  const auto mean_neutral = text_mean(0.0);

  const double p_student_to_teacher = 1.0 / cfg.mean_student_run;
  const double p_teacher_to_student =
      p_student_to_teacher * cfg.student_ratio / (1.0 - cfg.student_ratio);
  const double acoustic_coord_sd = cfg.acoustic_noise / std::sqrt(double(cfg.d_a));
  const auto lo = std::max<std::size_t>(1, cfg.mean_segments / 2);
  const auto hi = std::max<std::size_t>(lo, cfg.mean_segments + cfg.mean_segments / 2);
  std::uniform_int_distribution<std::size_t> length_dist(lo, hi);
  std::uniform_int_distribution<std::int64_t> gap_dist(0, cfg.max_gap_ms);
  std::lognormal_distribution<double> duration_dist(cfg.duration_log_mean, cfg.duration_log_sigma);

  Dataset ds;
  ds.d_a = cfg.d_a;
  ds.d_t = cfg.d_t;
  ds.recordings.reserve(cfg.n_recordings);
  for (std::size_t r = 0; r < cfg.n_recordings; ++r) {
    Recording rec;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05zu", r);
    rec.id = id;
    rec.d_a = cfg.d_a;
    rec.d_t = cfg.d_t;

    const auto teacher_center = detail::random_unit(cfg.d_a, rng);
    std::vector<std::vector<double>> student_centers;
    for (std::size_t v = 0; v < cfg.n_student_voices; ++v) {
      auto dir = detail::random_unit(cfg.d_a, rng);
      std::vector<double> c(cfg.d_a);
      for (std::size_t k = 0; k < cfg.d_a; ++k)
        c[k] = teacher_center[k] + cfg.cluster_separation * dir[k];
      student_centers.push_back(std::move(c));
    }
    std::uniform_int_distribution<std::size_t> voice_dist(0, cfg.n_student_voices - 1);

    const std::size_t n = length_dist(rng);
    bool student = uniform(rng) < cfg.student_ratio;
    std::size_t voice = voice_dist(rng);
    std::int64_t t = gap_dist(rng);
    rec.segments.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) {
        const bool was_student = student;
        student = student ? uniform(rng) >= p_student_to_teacher
                          : uniform(rng) < p_teacher_to_student;
        if (student && !was_student) voice = voice_dist(rng);
      }
      Segment s;
      s.id = i;
      s.label = student ? Label::Student : Label::Teacher;
      const auto dur = std::max<std::int64_t>(1, std::llround(duration_dist(rng)));
      s.start_ms = t;
      s.end_ms = t + dur;
      t = s.end_ms + gap_dist(rng);

      const auto& center = student ? student_centers[voice] : teacher_center;
      s.acoustic.resize(cfg.d_a);
      for (std::size_t k = 0; k < cfg.d_a; ++k)
        s.acoustic[k] = center[k] + acoustic_coord_sd * unit_normal(rng);
      detail::normalize(s.acoustic);

      const bool ambiguous = uniform(rng) < cfg.text_ambiguity;
      const auto& mean = ambiguous ? mean_neutral : (student ? mean_student : mean_teacher);
      s.text.resize(cfg.d_t);
      for (std::size_t k = 0; k < cfg.d_t; ++k)
        s.text[k] = mean[k] + cfg.text_noise * unit_normal(rng);
      rec.segments.push_back(std::move(s));
    }
    ds.recordings.push_back(std::move(rec));
  }
  return ds;
}

/// Fraction of total segment duration spoken by students, pooled over recordings.
inline double student_duration_share(const Dataset& ds) {
  double student = 0.0, total = 0.0;
  for (const Recording& r : ds.recordings)
    for (const Segment& s : r.segments) {
      total += double(s.duration_ms());
      if (s.label == Label::Student) student += double(s.duration_ms());
    }
  return total > 0.0 ? student / total : 0.0;
}

}  // namespace cad
