#pragma once

// Standard LSTM (no peepholes, no projection) and a bidirectional layer that
// runs each direction over the valid positions of a masked sequence.
//
// Gate layout in the 4*d_b wide weight blocks: input, forget, cell, output.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cad/autodiff.hpp"

namespace cad {

/// One direction's weights bound on a tape.
struct LstmParams {
  Var w_ih;  // d_in x 4d_b
  Var w_hh;  // d_b x 4d_b
  Var bias;  // 1 x 4d_b

  std::size_t hidden() const { return w_hh.rows(); }
  std::size_t input() const { return w_ih.rows(); }
};

/// Adds `<prefix>.w_ih`, `.w_hh` and `.bias` with uniform(-1/sqrt(d_b), 1/sqrt(d_b))
/// weights and forget-gate bias 1.
inline void init_lstm(ParameterStore& store, const std::string& prefix, std::size_t d_in,
                      std::size_t d_b, std::mt19937_64& rng) {
  const double r = 1.0 / std::sqrt(double(d_b));
  std::uniform_real_distribution<double> u(-r, r);
  Matrix w_ih(d_in, 4 * d_b), w_hh(d_b, 4 * d_b), bias(1, 4 * d_b);
  for (std::size_t i = 0; i < w_ih.size(); ++i) w_ih[i] = u(rng);
  for (std::size_t i = 0; i < w_hh.size(); ++i) w_hh[i] = u(rng);
  for (std::size_t j = d_b; j < 2 * d_b; ++j) bias(0, j) = 1.0;
  store.add(prefix + ".w_ih", std::move(w_ih));
  store.add(prefix + ".w_hh", std::move(w_hh));
  store.add(prefix + ".bias", std::move(bias));
}

inline LstmParams bind_lstm(const BoundParameters& bound, const std::string& prefix) {
  return {bound[prefix + ".w_ih"], bound[prefix + ".w_hh"], bound[prefix + ".bias"]};
}

struct LstmState {
  Var h;
  Var c;
};

namespace detail {

// One step given the input contribution x*W_ih + b already computed.
inline LstmState lstm_step_from_preactivation(const LstmParams& p, Var x_part, Var h_prev,
                                              Var c_prev) {
  const std::size_t d_b = p.hidden();
  Var gates = add(x_part, matmul(h_prev, p.w_hh));
  Var i = sigmoid(slice_cols(gates, 0, d_b));
  Var f = sigmoid(slice_cols(gates, d_b, d_b));
  Var g = tanh(slice_cols(gates, 2 * d_b, d_b));
  Var o = sigmoid(slice_cols(gates, 3 * d_b, d_b));
  Var c = add(mul(f, c_prev), mul(i, g));
  Var h = mul(o, tanh(c));
  return {h, c};
}

}  // namespace detail

inline LstmState lstm_cell_step(const LstmParams& p, Var x, Var h_prev, Var c_prev) {
  const std::size_t d_b = p.hidden();
  if (x.rows() != 1 || x.cols() != p.input()) {
    throw DimensionError("lstm_cell_step: input " + x.value().shape() + " for weights " +
                         p.w_ih.value().shape());
  }
  if (h_prev.rows() != 1 || h_prev.cols() != d_b || c_prev.rows() != 1 || c_prev.cols() != d_b) {
    throw DimensionError("lstm_cell_step: state must be 1x" + std::to_string(d_b));
  }
  Var x_part = add(matmul(x, p.w_ih), p.bias);
  return detail::lstm_step_from_preactivation(p, x_part, h_prev, c_prev);
}

namespace detail {

// Runs one direction over the valid positions in `order`; returns N x d_b
// with zero rows at skipped positions.
inline Var lstm_sweep(const LstmParams& p, Var x, const std::vector<std::size_t>& order) {
  Tape& tape = x.tape();
  const std::size_t n = x.rows(), d_b = p.hidden();
  Var pre = add_row_broadcast(matmul(x, p.w_ih), p.bias);
  LstmState state{tape.constant(Matrix(1, d_b)), tape.constant(Matrix(1, d_b))};
  std::vector<std::pair<std::size_t, Var>> rows;
  rows.reserve(order.size());
  for (std::size_t pos : order) {
    state = lstm_step_from_preactivation(p, slice_row(pre, pos), state.h, state.c);
    rows.emplace_back(pos, state.h);
  }
  return assemble_rows(tape, n, d_b, rows);
}

}  // namespace detail

/// Output row i is [h_fwd(i); h_bwd(i)]; padded rows are zero.
inline Var bilstm_forward(const LstmParams& fwd, const LstmParams& bwd, Var x,
                          const Mask* mask = nullptr) {
  const std::size_t n = x.rows();
  if (n == 0) throw DimensionError("bilstm_forward: empty sequence");
  if (x.cols() != fwd.input() || x.cols() != bwd.input()) {
    throw DimensionError("bilstm_forward: input width " + std::to_string(x.cols()) +
                         " does not match weights");
  }
  if (fwd.hidden() != bwd.hidden()) {
    throw DimensionError("bilstm_forward: direction hidden sizes differ");
  }
  if (mask != nullptr && mask->length() != n) {
    throw DimensionError("bilstm_forward: mask length mismatch");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i)
    if (is_valid(mask, i)) order.push_back(i);
  if (order.empty()) throw ContractError("bilstm_forward: no valid positions");
  Var forward = detail::lstm_sweep(fwd, x, order);
  std::reverse(order.begin(), order.end());
  Var backward = detail::lstm_sweep(bwd, x, order);
  return concat_cols(forward, backward);
}

}  // namespace cad
