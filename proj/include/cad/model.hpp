#pragma once

// The full multimodal architecture, its five single-path baselines, the joint
// loss, prediction, and checkpoint serialization.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cad/attention.hpp"
#include "cad/autodiff.hpp"
#include "cad/data.hpp"
#include "cad/recurrent.hpp"

namespace cad {

enum class Architecture {
  FullMultimodal,
  AcousticOnly,
  TextOnly,
  SelfAttnAcoustic,
  SelfAttnText,
  ConcatFeatures,
};

inline constexpr Architecture kAllArchitectures[] = {
    Architecture::FullMultimodal,   Architecture::AcousticOnly, Architecture::TextOnly,
    Architecture::SelfAttnAcoustic, Architecture::SelfAttnText, Architecture::ConcatFeatures,
};

inline const char* architecture_tag(Architecture a) {
  switch (a) {
    case Architecture::FullMultimodal: return "full";
    case Architecture::AcousticOnly: return "acoustic-only";
    case Architecture::TextOnly: return "text-only";
    case Architecture::SelfAttnAcoustic: return "self-attn-acoustic";
    case Architecture::SelfAttnText: return "self-attn-text";
    case Architecture::ConcatFeatures: return "concat";
  }
  return "?";
}

inline Architecture parse_architecture(std::string_view tag) {
  for (Architecture a : kAllArchitectures)
    if (tag == architecture_tag(a)) return a;
  throw ContractError("unknown architecture tag '" + std::string(tag) + "'");
}

struct ModelConfig {
  std::size_t d_a = 256;
  std::size_t d_t = 300;
  std::size_t d_q = 64;
  std::size_t d_v = 64;
  std::size_t d_b = 100;
  std::size_t fcn_hidden = 128;
  std::size_t n_classes = 2;
  double beta = 10.0;
  Architecture architecture = Architecture::FullMultimodal;
  std::uint64_t seed = 1;

  void validate() const {
    if (d_a == 0 || d_t == 0 || d_q == 0 || d_v == 0 || d_b == 0 || fcn_hidden == 0) {
      throw ContractError("model config: dimensions must be positive");
    }
    if (n_classes != 2) throw ContractError("model config: n_classes must be 2");
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
      throw ContractError("model config: beta must be finite and nonnegative");
    }
  }

  /// Only the full architecture produces the acoustic/text score matrix the
  /// regularizer acts on.
  bool uses_regularizer() const { return architecture == Architecture::FullMultimodal; }

  std::size_t encoder_input() const {
    return architecture == Architecture::FullMultimodal ? 2 * d_v : d_q;
  }
};

inline Json to_json(const ModelConfig& c) {
  return Json{{"d_a", c.d_a},
              {"d_t", c.d_t},
              {"d_q", c.d_q},
              {"d_v", c.d_v},
              {"d_b", c.d_b},
              {"fcn_hidden", c.fcn_hidden},
              {"n_classes", c.n_classes},
              {"beta", c.beta},
              {"architecture", architecture_tag(c.architecture)},
              {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& where) {
  ModelConfig c;
  c.d_a = detail::field<std::size_t>(j, "d_a", where);
  c.d_t = detail::field<std::size_t>(j, "d_t", where);
  c.d_q = detail::field<std::size_t>(j, "d_q", where);
  c.d_v = detail::field<std::size_t>(j, "d_v", where);
  c.d_b = detail::field<std::size_t>(j, "d_b", where);
  c.fcn_hidden = detail::field<std::size_t>(j, "fcn_hidden", where);
  c.n_classes = detail::field<std::size_t>(j, "n_classes", where);
  c.beta = detail::field<double>(j, "beta", where);
  try {
    c.architecture = parse_architecture(detail::field<std::string>(j, "architecture", where));
  } catch (const ContractError& e) {
    throw DataError(where + ": " + e.what());
  }
  c.seed = detail::field<std::uint64_t>(j, "seed", where);
  return c;
}

/// Configuration plus every trainable matrix. Parameter shapes are a
/// function of the configuration alone.
class CadModel {
 public:
  CadModel(ModelConfig config, ParameterStore params)
      : config_(std::move(config)), params_(std::move(params)) {}

  const ModelConfig& config() const { return config_; }
  const ParameterStore& parameters() const { return params_; }
  ParameterStore& parameters() { return params_; }

 private:
  ModelConfig config_;
  ParameterStore params_;
};

namespace detail {

inline Matrix uniform_init(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double r = 1.0 / std::sqrt(double(rows));
  std::uniform_real_distribution<double> u(-r, r);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = u(rng);
  return m;
}

}  // namespace detail

/// Builds any architecture from its configuration. Architectures without the
/// multimodal score matrix have beta forced to 0.
inline CadModel build_model(ModelConfig cfg) {
  cfg.validate();
  if (!cfg.uses_regularizer()) cfg.beta = 0.0;
  std::mt19937_64 rng(cfg.seed);
  ParameterStore ps;
  switch (cfg.architecture) {
    case Architecture::FullMultimodal:
      ps.add("attn.w_a", detail::uniform_init(cfg.d_a, cfg.d_q, rng));
      ps.add("attn.w_t", detail::uniform_init(cfg.d_t, cfg.d_v, rng));
      break;
    case Architecture::AcousticOnly:
      ps.add("input.w", detail::uniform_init(cfg.d_a, cfg.d_q, rng));
      break;
    case Architecture::TextOnly:
      ps.add("input.w", detail::uniform_init(cfg.d_t, cfg.d_q, rng));
      break;
    case Architecture::SelfAttnAcoustic:
      ps.add("selfattn.w", detail::uniform_init(cfg.d_a, cfg.d_q, rng));
      break;
    case Architecture::SelfAttnText:
      ps.add("selfattn.w", detail::uniform_init(cfg.d_t, cfg.d_q, rng));
      break;
    case Architecture::ConcatFeatures:
      ps.add("input.w", detail::uniform_init(cfg.d_a + cfg.d_t, cfg.d_q, rng));
      break;
  }
  init_lstm(ps, "lstm.fwd", cfg.encoder_input(), cfg.d_b, rng);
  init_lstm(ps, "lstm.bwd", cfg.encoder_input(), cfg.d_b, rng);
  ps.add("head.w1", detail::uniform_init(2 * cfg.d_b, cfg.fcn_hidden, rng));
  ps.add("head.b1", Matrix(1, cfg.fcn_hidden));
  ps.add("head.w2", detail::uniform_init(cfg.fcn_hidden, cfg.n_classes, rng));
  ps.add("head.b2", Matrix(1, cfg.n_classes));
  return CadModel(std::move(cfg), std::move(ps));
}

/// Baseline of the given kind sharing every other setting with `base`.
inline CadModel build_baseline(ModelConfig base, Architecture arch) {
  base.architecture = arch;
  return build_model(std::move(base));
}

struct ForwardResult {
  Var probabilities;                        // N x 2
  std::optional<AttentionOutput> attention;  // set for attention paths
};

/// Runs the configured path. For the full model: acoustic-keyed attention,
/// residual concatenation of fused and projected text rows, BiLSTM, two-layer
/// ReLU head, row softmax.
inline ForwardResult forward(const CadModel& model, const BoundParameters& p, Var x_a, Var x_t,
                             const Mask* mask = nullptr) {
  const ModelConfig& cfg = model.config();
  if (x_a.cols() != cfg.d_a || x_t.cols() != cfg.d_t) {
    throw DimensionError("forward: features " + x_a.value().shape() + " / " +
                         x_t.value().shape() + " do not match model d_a=" +
                         std::to_string(cfg.d_a) + ", d_t=" + std::to_string(cfg.d_t));
  }
  if (x_a.rows() != x_t.rows()) throw DimensionError("forward: modality row counts differ");
  if (mask != nullptr && mask->length() != x_a.rows()) {
    throw DimensionError("forward: mask length mismatch");
  }

  ForwardResult out;
  Var encoder_in;
  switch (cfg.architecture) {
    case Architecture::FullMultimodal: {
      AttentionOutput att = multimodal_attention(x_a, x_t, {p["attn.w_a"], p["attn.w_t"]}, mask);
      encoder_in = concat_cols(att.fused, att.values);
      out.attention = att;
      break;
    }
    case Architecture::AcousticOnly:
      encoder_in = matmul(x_a, p["input.w"]);
      break;
    case Architecture::TextOnly:
      encoder_in = matmul(x_t, p["input.w"]);
      break;
    case Architecture::SelfAttnAcoustic:
    case Architecture::SelfAttnText: {
      Var x = cfg.architecture == Architecture::SelfAttnAcoustic ? x_a : x_t;
      AttentionOutput att = self_attention_full(x, p["selfattn.w"], mask);
      encoder_in = att.fused;
      out.attention = att;
      break;
    }
    case Architecture::ConcatFeatures:
      encoder_in = matmul(concat_cols(x_a, x_t), p["input.w"]);
      break;
  }

  Var encoded = bilstm_forward(bind_lstm(p, "lstm.fwd"), bind_lstm(p, "lstm.bwd"), encoder_in, mask);
  Var hidden = relu(add_row_broadcast(matmul(encoded, p["head.w1"]), p["head.b1"]));
  Var logits = add_row_broadcast(matmul(hidden, p["head.w2"]), p["head.b2"]);
  out.probabilities = row_softmax(logits);
  return out;
}

struct LossTerms {
  Var total;
  Var classification;  // mean binary cross-entropy over valid segments
  Var regularizer;     // cross-type attention mass / valid segments
};

inline constexpr double kProbabilityClamp = 1e-12;

/// total = classification + beta * regularizer.
inline LossTerms loss(const CadModel& model, const ForwardResult& fr, std::span<const Label> labels,
                      const Mask* mask = nullptr) {
  Var probs = fr.probabilities;
  Tape& tape = probs.tape();
  const std::size_t n = probs.rows();
  if (labels.size() != n) {
    throw DataError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                    " segments");
  }
  const double n_valid = double(valid_count(mask, n));
  if (n_valid == 0.0) throw ContractError("loss: no valid segments");

  Matrix w_student(n, 1), w_teacher(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_valid(mask, i)) continue;
    (labels[i] == Label::Student ? w_student : w_teacher)(i, 0) = 1.0 / n_valid;
  }
  Var p_student = slice_cols(probs, 1, 1);
  Var log_p = log_clamped(p_student, kProbabilityClamp, 1.0 - kProbabilityClamp);
  Var log_not_p =
      log_clamped(affine(p_student, -1.0, 1.0), kProbabilityClamp, 1.0 - kProbabilityClamp);
  Var likelihood = add(weighted_sum(log_p, std::move(w_student)),
                       weighted_sum(log_not_p, std::move(w_teacher)));
  Var classification = scale(likelihood, -1.0);

  Var regularizer;
  if (model.config().uses_regularizer() && fr.attention) {
    regularizer = scale(attention_regularizer(fr.attention->scores, labels, mask), 1.0 / n_valid);
  } else {
    regularizer = tape.constant(Matrix(1, 1));
  }
  Var total = add(classification, scale(regularizer, model.config().beta));
  return {total, classification, regularizer};
}

struct Prediction {
  Matrix probabilities;  // N x 2
  std::vector<Label> labels;
};

/// Student only when strictly more probable; ties go to Teacher.
inline Label decide(double p_teacher, double p_student) {
  return p_student > p_teacher ? Label::Student : Label::Teacher;
}

inline Prediction predict(const CadModel& model, const Matrix& x_a, const Matrix& x_t,
                          const Mask* mask = nullptr) {
  Tape tape;
  BoundParameters bound(tape, model.parameters(), false);
  ForwardResult fr = forward(model, bound, tape.constant(x_a), tape.constant(x_t), mask);
  Prediction out{fr.probabilities.value(), {}};
  out.labels.reserve(out.probabilities.rows());
  for (std::size_t i = 0; i < out.probabilities.rows(); ++i)
    out.labels.push_back(decide(out.probabilities(i, 0), out.probabilities(i, 1)));
  return out;
}

inline Prediction predict(const CadModel& model, const Recording& rec) {
  return predict(model, acoustic_matrix(rec), text_matrix(rec));
}

inline std::vector<Label> predict_labels(const CadModel& model, const Recording& rec) {
  const ModelConfig& cfg = model.config();
  if (rec.d_a != cfg.d_a || rec.d_t != cfg.d_t) {
    throw DimensionError("predict: recording '" + rec.id + "' has d_a=" + std::to_string(rec.d_a) +
                         ", d_t=" + std::to_string(rec.d_t) + " but model expects " +
                         std::to_string(cfg.d_a) + "/" + std::to_string(cfg.d_t));
  }
  if (rec.segments.empty()) throw DataError("predict: recording '" + rec.id + "' is empty");
  return predict(model, rec).labels;
}

/// Copy of the recording with every segment labeled by the model.
inline Recording predict_sequence(const CadModel& model, const Recording& rec) {
  const std::vector<Label> labels = predict_labels(model, rec);
  Recording out = rec;
  for (std::size_t i = 0; i < out.size(); ++i) out.segments[i].label = labels[i];
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json + <dir>/weights.bin (little-endian f64)
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointManifest = "manifest.json";
inline constexpr const char* kCheckpointBlob = "weights.bin";

namespace detail {

inline void append_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline double read_le(const std::string& in, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b)
    bits |= std::uint64_t(static_cast<unsigned char>(in[offset + b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save_checkpoint(const CadModel& model, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::string blob;
  Json tensors = Json::array();
  for (const Parameter& p : model.parameters()) {
    tensors.push_back({{"name", p.name},
                       {"rows", p.value.rows()},
                       {"cols", p.value.cols()},
                       {"offset", blob.size()}});
    for (double v : p.value.data()) detail::append_le(blob, v);
  }
  Json manifest = {{"format", "cad-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"config", to_json(model.config())},
                   {"blob", kCheckpointBlob},
                   {"blob_bytes", blob.size()},
                   {"tensors", tensors}};

  const fs::path staging = dir.string() + ".partial";
  fs::remove_all(staging);
  fs::create_directories(staging);
  {
    std::ofstream out(staging / kCheckpointBlob, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw DataError("cannot write checkpoint blob under " + staging.string());
  }
  write_text_file(staging / kCheckpointManifest, manifest.dump(2));
  fs::remove_all(dir);
  fs::rename(staging, dir);
}

inline CadModel load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path mpath = dir / kCheckpointManifest;
  const std::string where = mpath.string();
  const Json manifest = parse_json_file(mpath);
  if (manifest.value("format", std::string()) != "cad-checkpoint") {
    throw DataError(where + ": not a checkpoint manifest");
  }
  const int version = detail::field<int>(manifest, "version", where);
  if (version != kCheckpointVersion) {
    throw DataError(where + ": checkpoint version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig cfg = model_config_from_json(detail::field<Json>(manifest, "config", where), where);
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw DataError(where + ": " + e.what());
  }
  const std::string blob =
      read_text_file(dir / detail::field<std::string>(manifest, "blob", where));
  if (blob.size() != detail::field<std::size_t>(manifest, "blob_bytes", where)) {
    throw DataError(where + ": weight blob truncated or padded (" + std::to_string(blob.size()) +
                    " bytes)");
  }

  CadModel model = build_model(cfg);
  ParameterStore& ps = model.parameters();
  const Json& tensors = detail::field<Json>(manifest, "tensors", where);
  if (!tensors.is_array() || tensors.size() != ps.size()) {
    throw DataError(where + ": tensor registry does not match architecture '" +
                    architecture_tag(cfg.architecture) + "'");
  }
  for (const Json& t : tensors) {
    const auto name = detail::field<std::string>(t, "name", where);
    const auto rows = detail::field<std::size_t>(t, "rows", where);
    const auto cols = detail::field<std::size_t>(t, "cols", where);
    const auto offset = detail::field<std::size_t>(t, "offset", where);
    if (!ps.contains(name)) throw DataError(where + ": unexpected tensor '" + name + "'");
    Matrix& m = ps.at(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw DataError(where + ": tensor '" + name + "' has shape " +
                      Matrix::shape_string(rows, cols) + ", configuration implies " + m.shape());
    }
    if (offset + 8 * m.size() > blob.size()) {
      throw DataError(where + ": tensor '" + name + "' runs past end of weight blob");
    }
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = detail::read_le(blob, offset + 8 * i);
  }
  return model;
}

}  // namespace cad
