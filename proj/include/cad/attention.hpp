#pragma once

// Acoustic-keyed attention over text values, the single-modality
// self-attention used by baselines, and the cross-type attention penalty.

#include <cmath>
#include <span>
#include <string>

#include "cad/autodiff.hpp"
#include "cad/data.hpp"

namespace cad {

/// Projection matrices bound on a tape: w_a is d_a x d_q, w_t is d_t x d_v.
struct AttentionParams {
  Var w_a;
  Var w_t;
};

struct Projections {
  Var query;  // same node as key
  Var key;
  Var value;
};

struct AttentionOutput {
  Var scores;  // N x N, row-stochastic over valid columns
  Var fused;   // N x d_v
  Var values;  // N x d_v
};

namespace detail {

inline void require_projection(const Var& x, const Var& w, const char* what) {
  if (x.cols() != w.rows()) {
    throw DimensionError(std::string(what) + ": features " + x.value().shape() +
                         " do not match projection " + w.value().shape());
  }
}

// softmax(Q K^T / sqrt(d_q)) with Q = K = projected.
inline Var scaled_scores(Var projected, const Mask* mask) {
  const double d_q = double(projected.cols());
  Var logits = scale(matmul(projected, transpose(projected)), 1.0 / std::sqrt(d_q));
  return row_softmax(logits, mask);
}

}  // namespace detail

inline Projections project(Var x_a, Var x_t, const AttentionParams& p) {
  detail::require_projection(x_a, p.w_a, "project (acoustic)");
  detail::require_projection(x_t, p.w_t, "project (text)");
  if (x_a.rows() != x_t.rows()) {
    throw DimensionError("project: acoustic " + x_a.value().shape() + " and text " +
                         x_t.value().shape() + " row counts differ");
  }
  Var q = matmul(x_a, p.w_a);
  return {q, q, matmul(x_t, p.w_t)};
}

/// Every segment queries every valid segment of the same recording, itself
/// included, by acoustic similarity; the scores mix projected text values.
inline AttentionOutput multimodal_attention(Var x_a, Var x_t, const AttentionParams& p,
                                            const Mask* mask = nullptr) {
  const Projections proj = project(x_a, x_t, p);
  Var scores = detail::scaled_scores(proj.query, mask);
  return {scores, matmul(scores, proj.value), proj.value};
}

/// Q = K = V = x * proj.
inline AttentionOutput self_attention_full(Var x, Var proj, const Mask* mask = nullptr) {
  detail::require_projection(x, proj, "self_attention");
  Var projected = matmul(x, proj);
  Var scores = detail::scaled_scores(projected, mask);
  return {scores, matmul(scores, projected), projected};
}

inline Var self_attention(Var x, Var proj, const Mask* mask = nullptr) {
  return self_attention_full(x, proj, mask).fused;
}

/// Constant weights selecting score entries whose row and column labels
/// differ, over valid positions only.
inline Matrix cross_type_indicator(std::span<const Label> labels, const Mask* mask = nullptr) {
  const std::size_t n = labels.size();
  Matrix w(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_valid(mask, i)) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (is_valid(mask, j) && labels[i] != labels[j]) w(i, j) = 1.0;
  }
  return w;
}

/// Sum of attention mass between segments of different activity types.
/// Bounded by the number of valid rows.
inline Var attention_regularizer(Var scores, std::span<const Label> labels,
                                 const Mask* mask = nullptr) {
  const std::size_t n = scores.rows();
  if (scores.cols() != n) throw DimensionError("attention_regularizer: scores must be square");
  if (labels.size() != n) {
    throw DimensionError("attention_regularizer: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " positions");
  }
  if (mask != nullptr && mask->length() != n) {
    throw DimensionError("attention_regularizer: mask length mismatch");
  }
  return weighted_sum(scores, cross_type_indicator(labels, mask));
}

}  // namespace cad
