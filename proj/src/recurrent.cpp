#include "crt/recurrent.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace crt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

void require_shape(const Tensor& t, const Shape& shape, const char* name) {
  if (t.shape() != shape) {
    throw DimensionError(std::string("GRU parameter ") + name + " has shape " + shape_str(t.shape()) +
                         ", expected " + shape_str(shape));
  }
}

RowMat skew_from_free(std::span<const double> free, std::size_t d) {
  RowMat a = RowMat::Zero(d, d);
  std::size_t k = 0;
  for (std::size_t i = 1; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j, ++k) {
      a(i, j) = free[k];
      a(j, i) = -free[k];
    }
  }
  return a;
}

Tensor row_of(const Tensor& t, std::size_t r) {
  if (t.empty()) return t;
  const std::size_t cols = t.cols();
  if (r >= t.rows()) throw IndexError("trace row " + std::to_string(r) + " out of range");
  const auto v = t.values();
  return Tensor(Shape{cols}, std::vector<double>(v.begin() + r * cols, v.begin() + (r + 1) * cols));
}

}  // namespace

void GruParams::validate() const {
  const std::size_t d_in = w_r.rows();
  const std::size_t d_h = b_r.size();
  const Shape in_shape{d_in, d_h};
  const Shape rec_shape{d_h, d_h};
  const Shape bias_shape{d_h};
  require_shape(w_r, in_shape, "W_r");
  require_shape(w_u, in_shape, "W_u");
  require_shape(w_c, in_shape, "W_c");
  require_shape(u_r, rec_shape, "U_r");
  require_shape(u_u, rec_shape, "U_u");
  require_shape(b_r, bias_shape, "b_r");
  require_shape(b_u, bias_shape, "b_u");
  require_shape(b_c, bias_shape, "b_c");
  if (kind == CellKind::Ncgru) {
    if (!cayley) throw ContractError("NCGRU parameters need Cayley free parameters");
    require_shape(cayley->free, Shape{d_h * (d_h - 1) / 2}, "A_free");
    require_shape(cayley->signs, bias_shape, "D");
    if (!u_c.empty()) require_shape(u_c, rec_shape, "U_c");
  } else {
    if (cayley) throw ContractError("GRU parameters must not carry Cayley parameters");
    require_shape(u_c, rec_shape, "U_c");
  }
}

GateTrace GateTrace::row(std::size_t r) const {
  return GateTrace{row_of(update, r), row_of(reset, r), row_of(candidate, r), row_of(hidden, r),
                   row_of(hidden_prev, r)};
}

GruParams init_gru(CellKind kind, std::size_t input_size, std::size_t hidden_size, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  GruParams p;
  p.kind = kind;
  p.w_r = Tensor::uniform({input_size, hidden_size}, bound, rng);
  p.w_u = Tensor::uniform({input_size, hidden_size}, bound, rng);
  p.w_c = Tensor::uniform({input_size, hidden_size}, bound, rng);
  p.u_r = Tensor::uniform({hidden_size, hidden_size}, bound, rng);
  p.u_u = Tensor::uniform({hidden_size, hidden_size}, bound, rng);
  p.b_r = Tensor::zeros({hidden_size});
  p.b_u = Tensor::zeros({hidden_size});
  p.b_c = Tensor::zeros({hidden_size});
  if (kind == CellKind::Gru) {
    p.u_c = Tensor::uniform({hidden_size, hidden_size}, bound, rng);
  } else {
    CayleyParams c;
    c.free = Tensor::uniform({hidden_size * (hidden_size - 1) / 2}, 0.01, rng);
    std::bernoulli_distribution coin(0.5);
    std::vector<double> signs(hidden_size);
    for (double& s : signs) s = coin(rng) ? 1.0 : -1.0;
    c.signs = Tensor({hidden_size}, std::move(signs));
    p.cayley = std::move(c);
  }
  return p;
}

Tensor cayley_orthogonal(const Tensor& free, const Tensor& signs) {
  if (signs.rank() != 1) throw DimensionError("Cayley signs must be a vector");
  const std::size_t d = signs.size();
  if (free.rank() != 1 || free.size() != d * (d - 1) / 2) {
    throw DimensionError("Cayley free parameters " + shape_str(free.shape()) + " do not fit d_h = " +
                         std::to_string(d));
  }
  for (double s : signs.values()) {
    if (s != 1.0 && s != -1.0) throw ContractError("Cayley diagonal entries must be +1 or -1");
  }
  const RowMat a = skew_from_free(free.values(), d);
  const RowMat eye = RowMat::Identity(d, d);
  const Eigen::PartialPivLU<RowMat> lu(eye + a);
  const RowMat inv = lu.inverse();
  const RowMat base = inv * (eye - a);  // (I + A)^-1 (I - A)
  if (!base.allFinite()) throw std::runtime_error("Cayley solve failed");
  const Eigen::Map<const Eigen::VectorXd> dvec(signs.data(), static_cast<Eigen::Index>(d));
  RowMat u = base * dvec.asDiagonal();
  std::vector<double> values(u.data(), u.data() + d * d);
  if (!free.tracked()) return Tensor({d, d}, std::move(values));

  // d(base) = -(I+A)^-1 dA (I + base), so for G = dL/dU:
  // dL/dA = -(I+A)^-T (G D) (I + base)^T, then fold the skew structure.
  return free.tape()->record(
      {d, d}, std::move(values), {free.node()},
      [free, signs, inv, base, d](std::span<const double> g, Tape& t) {
        const ConstMap gm(g.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
        const Eigen::Map<const Eigen::VectorXd> dvec(signs.data(), static_cast<Eigen::Index>(d));
        const RowMat g_base = gm * dvec.asDiagonal();
        const RowMat rhs = g_base * (RowMat::Identity(d, d) + base).transpose();
        const RowMat g_a = -inv.transpose() * rhs;
        auto gf = t.grad_buffer(free.node());
        std::size_t k = 0;
        for (std::size_t i = 1; i < d; ++i) {
          for (std::size_t j = 0; j < i; ++j, ++k) gf[k] += g_a(i, j) - g_a(j, i);
        }
      });
}

GruParams resolve_candidate(const GruParams& p) {
  if (p.kind == CellKind::Gru || !p.u_c.empty()) return p;
  if (!p.cayley) throw ContractError("NCGRU parameters need Cayley free parameters");
  GruParams out = p;
  out.u_c = cayley_orthogonal(p.cayley->free, p.cayley->signs);
  return out;
}

GruStep gru_step(const GruParams& params, const Tensor& x, const Tensor& h_prev) {
  const GruParams p = resolve_candidate(params);
  if (x.cols() != p.w_r.rows() || h_prev.cols() != p.u_r.rows() || x.rows() != h_prev.rows()) {
    throw DimensionError("gru_step: input " + shape_str(x.shape()) + " / state " + shape_str(h_prev.shape()) +
                         " do not match parameters [" + std::to_string(p.w_r.rows()) + " -> " +
                         std::to_string(p.u_r.rows()) + "]");
  }
  // r_t = sigma(W_r x + U_r h + b_r), u_t = sigma(W_u x + U_u h + b_u)
  const Tensor r = sigmoid(add_row_bias(add(matmul(x, p.w_r), matmul(h_prev, p.u_r)), p.b_r));
  const Tensor u = sigmoid(add_row_bias(add(matmul(x, p.w_u), matmul(h_prev, p.u_u)), p.b_u));
  // c_t = tanh(W_c x + U_c (r_t . h) + b_c)
  const Tensor c = tanh(add_row_bias(add(matmul(x, p.w_c), matmul(hadamard(r, h_prev), p.u_c)), p.b_c));
  // h_t = (1 - u_t) . h + u_t . c_t
  const Tensor h = add(hadamard(affine(u, -1.0, 1.0), h_prev), hadamard(u, c));
  return GruStep{h, GateTrace{u.detach(), r.detach(), c.detach(), h.detach(), h_prev.detach()}};
}

std::vector<Tensor> rnn_scan_steps(const GruParams& params, std::span<const Tensor> inputs, const Tensor& h0,
                                   std::vector<GateTrace>* traces) {
  if (inputs.empty()) throw ContractError("rnn_scan over an empty sequence");
  const GruParams p = resolve_candidate(params);
  std::vector<Tensor> states;
  states.reserve(inputs.size());
  Tensor h = h0;
  for (const Tensor& x : inputs) {
    GruStep step = gru_step(p, x, h);
    h = step.hidden;
    states.push_back(h);
    if (traces != nullptr) traces->push_back(std::move(step.trace));
  }
  return states;
}

ScanResult rnn_scan(const GruParams& p, const Tensor& xs, const Tensor& h0) {
  if (xs.empty() || xs.rank() != 2 || xs.rows() == 0) throw ContractError("rnn_scan needs n >= 1 input rows");
  if (h0.rank() != 1) throw DimensionError("rnn_scan initial state must be a vector");
  std::vector<Tensor> inputs;
  inputs.reserve(xs.rows());
  for (std::size_t t = 0; t < xs.rows(); ++t) inputs.push_back(reshape(rows_slice(xs, t, t + 1), {xs.cols()}));
  ScanResult out;
  const std::vector<Tensor> states = rnn_scan_steps(p, inputs, h0, &out.traces);
  out.hidden_states = rows_concat(states);
  out.last = states.back();
  return out;
}

double orthogonality_error(const Tensor& u) {
  if (u.rank() != 2 || u.rows() != u.cols()) {
    throw DimensionError("orthogonality_error needs a square matrix, got " + shape_str(u.shape()));
  }
  const ConstMap m(u.data(), u.rows(), u.cols());
  return (m.transpose() * m - RowMat::Identity(u.rows(), u.cols())).norm();
}

}  // namespace crt
