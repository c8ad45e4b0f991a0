#pragma once

// Adam optimization over shuffled, padded batches of recordings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cad/autodiff.hpp"
#include "cad/data.hpp"
#include "cad/model.hpp"
#include "cad/parallel.hpp"

namespace cad {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  AdamConfig adam;
  std::uint64_t seed = 1;
  /// Recordings longer than this are cut into consecutive chunks before
  /// batching; attention then stays within a chunk.
  std::optional<std::size_t> max_sequence_length;
  std::size_t threads = 1;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ContractError("train config: learning rate must be finite and nonnegative");
    }
    if (batch_size == 0 || epochs == 0) throw ContractError("train config: counts must be positive");
    if (max_sequence_length && *max_sequence_length == 0) {
      throw ContractError("train config: max_sequence_length must be positive");
    }
  }
};

class AdamState {
 public:
  explicit AdamState(const ParameterStore& params) {
    for (const Parameter& p : params) {
      m_.emplace_back(p.value.rows(), p.value.cols());
      v_.emplace_back(p.value.rows(), p.value.cols());
    }
  }

  std::size_t step() const { return t_; }
  const Matrix& first_moment(std::size_t i) const { return m_[i]; }
  const Matrix& second_moment(std::size_t i) const { return v_[i]; }

  friend void adam_step(AdamState& state, ParameterStore& params, const std::vector<Matrix>& grads,
                        double lr, const AdamConfig& cfg);

 private:
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

/// One bias-corrected Adam update of every parameter. Nothing is modified if
/// any gradient entry is non-finite.
inline void adam_step(AdamState& state, ParameterStore& params, const std::vector<Matrix>& grads,
                      double lr, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size() || state.m_.size() != params.size()) {
    throw ContractError("adam_step: gradient/state count does not match parameters");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix::require_same_shape(params[p].value, grads[p], "adam_step");
    if (!grads[p].all_finite()) {
      throw NumericError("adam_step: non-finite gradient for parameter " + params[p].name);
    }
  }
  ++state.t_;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t_));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& w = params[p].value;
    Matrix& m = state.m_[p];
    Matrix& v = state.v_[p];
    const Matrix& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One recording zero-padded to its batch's longest sequence.
struct PaddedRecording {
  Matrix acoustic;
  Matrix text;
  std::vector<Label> labels;  // padding positions hold Teacher and are masked
  Mask mask;
  std::size_t source = 0;  // index into the dataset
};

struct Batch {
  std::vector<PaddedRecording> items;
  std::size_t max_length = 0;
};

inline PaddedRecording pad_recording(const Recording& rec, std::size_t length,
                                     std::size_t source = 0) {
  if (length < rec.size()) throw ContractError("pad_recording: length shorter than recording");
  PaddedRecording out;
  out.acoustic = Matrix(length, rec.d_a);
  out.text = Matrix(length, rec.d_t);
  out.labels.assign(length, Label::Teacher);
  const std::vector<Label> gold = gold_labels(rec);
  for (std::size_t i = 0; i < rec.size(); ++i) {
    std::copy(rec.segments[i].acoustic.begin(), rec.segments[i].acoustic.end(),
              out.acoustic.row(i).begin());
    std::copy(rec.segments[i].text.begin(), rec.segments[i].text.end(), out.text.row(i).begin());
    out.labels[i] = gold[i];
  }
  out.mask = Mask::prefix(rec.size(), length);
  out.source = source;
  return out;
}

/// Shuffles recordings under `seed` and groups them into padded batches.
inline std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size,
                                       std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("make_batches: batch size must be positive");
  std::vector<std::size_t> order(ds.recordings.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    Batch b;
    for (std::size_t k = start; k < end; ++k)
      b.max_length = std::max(b.max_length, ds.recordings[order[k]].size());
    for (std::size_t k = start; k < end; ++k)
      b.items.push_back(pad_recording(ds.recordings[order[k]], b.max_length, order[k]));
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Cuts every recording into consecutive pieces of at most `max_length` segments.
inline Dataset chunk_recordings(const Dataset& ds, std::size_t max_length) {
  Dataset out;
  out.d_a = ds.d_a;
  out.d_t = ds.d_t;
  for (const Recording& rec : ds.recordings) {
    if (rec.size() <= max_length) {
      out.recordings.push_back(rec);
      continue;
    }
    for (std::size_t start = 0, part = 0; start < rec.size(); start += max_length, ++part) {
      Recording piece;
      piece.id = rec.id + "#" + std::to_string(part);
      piece.d_a = rec.d_a;
      piece.d_t = rec.d_t;
      const std::size_t end = std::min(rec.size(), start + max_length);
      for (std::size_t i = start; i < end; ++i) {
        Segment s = rec.segments[i];
        s.id = i - start;
        piece.segments.push_back(std::move(s));
      }
      out.recordings.push_back(std::move(piece));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossValue {
  double total = 0.0;
  double classification = 0.0;
  double regularizer = 0.0;
  std::vector<Matrix> grads;  // store order; empty unless requested
};

/// Loss of one (possibly padded) recording on its own tape.
inline LossValue recording_loss(const CadModel& model, const Matrix& x_a, const Matrix& x_t,
                                std::span<const Label> labels, const Mask* mask,
                                bool with_grads) {
  Tape tape;
  BoundParameters bound(tape, model.parameters(), with_grads);
  ForwardResult fr = forward(model, bound, tape.constant(x_a), tape.constant(x_t), mask);
  LossTerms terms = loss(model, fr, labels, mask);
  LossValue out{terms.total.value()(0, 0), terms.classification.value()(0, 0),
                terms.regularizer.value()(0, 0), {}};
  if (with_grads) {
    tape.backward(terms.total);
    out.grads = bound.gradients();
  }
  return out;
}

inline LossValue recording_loss(const CadModel& model, const Recording& rec, bool with_grads) {
  const std::vector<Label> labels = gold_labels(rec);
  return recording_loss(model, acoustic_matrix(rec), text_matrix(rec), labels, nullptr,
                        with_grads);
}

/// Mean of per-recording losses; gradients are reduced in item order.
inline LossValue batch_loss(const CadModel& model, const Batch& batch, bool with_grads,
                            std::size_t threads = 1) {
  if (batch.items.empty()) throw ContractError("batch_loss: empty batch");
  std::vector<LossValue> parts(batch.items.size());
  parallel_for(batch.items.size(), threads, [&](std::size_t i) {
    const PaddedRecording& item = batch.items[i];
    parts[i] = recording_loss(model, item.acoustic, item.text, item.labels, &item.mask, with_grads);
  });
  const double inv = 1.0 / double(parts.size());
  LossValue out;
  for (LossValue& part : parts) {
    out.total += part.total;
    out.classification += part.classification;
    out.regularizer += part.regularizer;
    if (!with_grads) continue;
    if (out.grads.empty()) {
      out.grads = std::move(part.grads);
    } else {
      for (std::size_t p = 0; p < out.grads.size(); ++p) out.grads[p] += part.grads[p];
    }
  }
  out.total *= inv;
  out.classification *= inv;
  out.regularizer *= inv;
  for (Matrix& g : out.grads)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double total = 0.0;
  double classification = 0.0;
  double regularizer = 0.0;

  friend bool operator==(const BatchRecord&, const BatchRecord&) = default;
};

/// One JSON object per line.
inline std::string format_record(const BatchRecord& r) {
  return Json{{"epoch", r.epoch},
              {"batch", r.batch},
              {"total", r.total},
              {"L_c", r.classification},
              {"R_alpha", r.regularizer}}
      .dump();
}

using ProgressSink = std::function<void(const BatchRecord&)>;

struct FitResult {
  std::vector<BatchRecord> history;
};

/// Raised when a batch loss turns non-finite; the model has been restored to
/// the parameters of the last finite step.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1));
}

inline FitResult fit(CadModel& model, const Dataset& train, const TrainConfig& cfg,
                     const ProgressSink& sink = {}) {
  cfg.validate();
  if (!train.labeled()) throw DataError("fit: training data must be fully labeled");
  if (train.d_a != model.config().d_a || train.d_t != model.config().d_t) {
    throw DimensionError("fit: dataset dimensions " + std::to_string(train.d_a) + "/" +
                         std::to_string(train.d_t) + " do not match model");
  }
  const Dataset data =
      cfg.max_sequence_length ? chunk_recordings(train, *cfg.max_sequence_length) : train;

  AdamState adam(model.parameters());
  FitResult result;
  ParameterStore last_good = model.parameters();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch));
    for (std::size_t b = 0; b < batches.size(); ++b) {
      LossValue lv;
      try {
        lv = batch_loss(model, batches[b], true, cfg.threads);
      } catch (const NumericError& e) {
        model.parameters() = last_good;
        throw DivergenceError("fit: diverged at epoch " + std::to_string(epoch) + " batch " +
                              std::to_string(b) + ": " + e.what());
      }
      if (!std::isfinite(lv.total)) {
        model.parameters() = last_good;
        throw DivergenceError("fit: non-finite loss at epoch " + std::to_string(epoch) +
                              " batch " + std::to_string(b));
      }
      BatchRecord rec{epoch, b, lv.total, lv.classification, lv.regularizer};
      result.history.push_back(rec);
      if (sink) sink(rec);
      last_good = model.parameters();
      adam_step(adam, model.parameters(), lv.grads, cfg.learning_rate, cfg.adam);
    }
  }
  return result;
}

}  // namespace cad
