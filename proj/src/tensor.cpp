#include "crt/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

namespace crt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

#ifdef NDEBUG
std::atomic<bool> g_finite_check{false};
#else
std::atomic<bool> g_finite_check{true};
#endif

ConstMap view(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }

MutMap grad_view(Tape& tape, const Tensor& t) {
  return MutMap(tape.grad_buffer(t.node()).data(), t.rows(), t.cols());
}

// Common tape of the operands, or nullptr when none is tracked.
Tape* common_tape(std::initializer_list<const Tensor*> operands) {
  Tape* tape = nullptr;
  for (const Tensor* t : operands) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw ContractError("operands are recorded on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

void check_finite(const std::vector<double>& values, const char* op) {
  if (!g_finite_check.load(std::memory_order_relaxed)) return;
  for (double v : values) {
    if (std::isnan(v)) throw NumericError(std::string("NaN produced by ") + op);
  }
}

Tensor finish(Tape* tape, Shape shape, std::vector<double> values, std::vector<std::size_t> parents,
              Tape::Backward backward) {
  if (tape == nullptr) return Tensor(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), std::move(parents), std::move(backward));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_nonempty(const Tensor& a, const char* op) {
  if (a.empty()) throw ContractError(std::string(op) + ": empty tensor");
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return Shape{rows, cols}; }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
}

}  // namespace

// Shapes and errors ---------------------------------------------------------

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

VocabularyError::VocabularyError(std::size_t id, std::size_t vocab_size)
    : std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(vocab_size)),
      id_(id),
      vocab_size_(vocab_size) {}

void set_finite_check(bool enabled) { g_finite_check.store(enabled); }
bool finite_check_enabled() { return g_finite_check.load(); }

// Tensor --------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_size(shape_) != values.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return filled(std::move(shape), 1.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vec(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(matrix_shape(r, c), std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> values(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) values[i * n + i] = 1.0;
  return Tensor(matrix_shape(n, n), std::move(values));
}

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values));
}

std::size_t Tensor::rows() const { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw DimensionError("matrix view of rank-" + std::to_string(shape_.size()) + " tensor");
}

std::span<const double> Tensor::values() const& {
  if (!values_) return {};
  return {values_->data(), values_->size()};
}

double Tensor::at(std::size_t i) const {
  if (i >= size()) throw IndexError("flat index " + std::to_string(i) + " out of range");
  return (*values_)[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (row >= rows() || col >= cols()) {
    throw IndexError("index (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                     shape_str(shape_));
  }
  return (*values_)[row * cols() + col];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
  return (*values_)[0];
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.tape_ = nullptr;
  out.node_ = 0;
  return out;
}

std::vector<double> Tensor::to_vector() const {
  if (!values_) return {};
  return *values_;
}

// Tape ----------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
  require_nonempty(value, "leaf");
  return record(value.shape(), value.to_vector(), {}, nullptr);
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::vector<std::size_t> parents,
                    Backward backward) {
  const std::size_t id = nodes_.size();
  for (std::size_t p : parents) {
    if (p >= id) throw ContractError("tape parent does not precede its child");
  }
  Tensor out(shape, std::move(values));
  out.tape_ = this;
  out.node_ = id;
  nodes_.push_back(Node{std::move(shape), std::move(parents), std::move(backward)});
  return out;
}

std::span<double> Tape::grad_buffer(std::size_t node) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& g = grads_.at(node);
  if (g.empty()) g.assign(shape_size(nodes_[node].shape), 0.0);
  return {g.data(), g.size()};
}

void Tape::backward(const Tensor& root) {
  if (!root.tracked() || root.tape() != this) {
    throw ContractError("backward root is not recorded on this tape");
  }
  if (root.size() != 1) {
    throw ContractError("backward root must be scalar, got " + shape_str(root.shape()));
  }
  grads_.assign(nodes_.size(), {});
  grad_buffer(root.node())[0] = 1.0;
  for (std::size_t i = root.node() + 1; i-- > 0;) {
    if (grads_[i].empty() || !nodes_[i].backward) continue;
    nodes_[i].backward(std::span<const double>(grads_[i].data(), grads_[i].size()), *this);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape() != this) throw ContractError("tensor is not recorded on this tape");
  if (t.node() < grads_.size() && !grads_[t.node()].empty()) {
    return Tensor(t.shape(), grads_[t.node()]);
  }
  return Tensor::zeros(t.shape());
}

// Elementwise ---------------------------------------------------------------

Tensor apply_unary(UnaryKind kind, const Tensor& a) {
  require_nonempty(a, "apply_unary");
  const auto x = a.values();
  std::vector<double> y(x.size());
  switch (kind) {
    case UnaryKind::Sigmoid:
      std::transform(x.begin(), x.end(), y.begin(), stable_sigmoid);
      break;
    case UnaryKind::Tanh:
      std::transform(x.begin(), x.end(), y.begin(), [](double v) { return std::tanh(v); });
      break;
    case UnaryKind::Negate:
      std::transform(x.begin(), x.end(), y.begin(), [](double v) { return -v; });
      break;
    case UnaryKind::Exp:
      std::transform(x.begin(), x.end(), y.begin(), [](double v) { return std::exp(v); });
      break;
    case UnaryKind::Relu:
      std::transform(x.begin(), x.end(), y.begin(), [](double v) { return v > 0 ? v : 0.0; });
      break;
    case UnaryKind::Gelu:
      std::transform(x.begin(), x.end(), y.begin(), gelu);
      break;
  }
  check_finite(y, "apply_unary");
  Tape* tape = common_tape({&a});
  if (!tape) return Tensor(a.shape(), std::move(y));
  auto out = std::make_shared<std::vector<double>>(y);
  return tape->record(a.shape(), std::move(y), {a.node()},
                      [kind, a, out](std::span<const double> g, Tape& t) {
                        auto ga = t.grad_buffer(a.node());
                        const auto x = a.values();
                        const auto& y = *out;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          double d = 0.0;
                          switch (kind) {
                            case UnaryKind::Sigmoid: d = y[i] * (1.0 - y[i]); break;
                            case UnaryKind::Tanh: d = 1.0 - y[i] * y[i]; break;
                            case UnaryKind::Negate: d = -1.0; break;
                            case UnaryKind::Exp: d = y[i]; break;
                            case UnaryKind::Relu: d = x[i] > 0 ? 1.0 : 0.0; break;
                            case UnaryKind::Gelu: d = gelu_grad(x[i]); break;
                          }
                          ga[i] += g[i] * d;
                        }
                      });
}

Tensor apply_binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  require_nonempty(a, "apply_binary");
  require_nonempty(b, "apply_binary");
  require_same_shape(a, b, "apply_binary");
  const auto x = a.values();
  const auto z = b.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    switch (kind) {
      case BinaryKind::Add: y[i] = x[i] + z[i]; break;
      case BinaryKind::Sub: y[i] = x[i] - z[i]; break;
      case BinaryKind::Hadamard: y[i] = x[i] * z[i]; break;
    }
  }
  Tape* tape = common_tape({&a, &b});
  std::vector<std::size_t> parents;
  if (a.tracked()) parents.push_back(a.node());
  if (b.tracked()) parents.push_back(b.node());
  return finish(tape, a.shape(), std::move(y), std::move(parents),
                [kind, a, b](std::span<const double> g, Tape& t) {
                  if (a.tracked()) {
                    auto ga = t.grad_buffer(a.node());
                    const auto z = b.values();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      ga[i] += kind == BinaryKind::Hadamard ? g[i] * z[i] : g[i];
                    }
                  }
                  if (b.tracked()) {
                    auto gb = t.grad_buffer(b.node());
                    const auto x = a.values();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      switch (kind) {
                        case BinaryKind::Add: gb[i] += g[i]; break;
                        case BinaryKind::Sub: gb[i] -= g[i]; break;
                        case BinaryKind::Hadamard: gb[i] += g[i] * x[i]; break;
                      }
                    }
                  }
                });
}

Tensor affine(const Tensor& a, double scale, double shift) {
  require_nonempty(a, "affine");
  std::vector<double> y(a.size());
  const auto x = a.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = scale * x[i] + shift;
  Tape* tape = common_tape({&a});
  return finish(tape, a.shape(), std::move(y), {a.node()},
                [a, scale](std::span<const double> g, Tape& t) {
                  auto ga = t.grad_buffer(a.node());
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
                });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_nonempty(a, "add_row_bias");
  require_nonempty(bias, "add_row_bias");
  if (bias.rank() != 1 || bias.size() != a.cols() || a.rank() > 2) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  }
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  std::vector<double> y = a.to_vector();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bv[c];
  }
  Tape* tape = common_tape({&a, &bias});
  std::vector<std::size_t> parents;
  if (a.tracked()) parents.push_back(a.node());
  if (bias.tracked()) parents.push_back(bias.node());
  return finish(tape, a.shape(), std::move(y), std::move(parents),
                [a, bias, rows, cols](std::span<const double> g, Tape& t) {
                  if (a.tracked()) {
                    auto ga = t.grad_buffer(a.node());
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  }
                  if (bias.tracked()) {
                    auto gb = t.grad_buffer(bias.node());
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                    }
                  }
                });
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.size());
  for (double& m : mask) m = keep(rng) ? scale : 0.0;
  return hadamard(a, Tensor(a.shape(), std::move(mask)));
}

// Linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_nonempty(a, "matmul");
  require_nonempty(b, "matmul");
  if (a.rank() > 2 || a.rank() == 0 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t p = b.cols();
  std::vector<double> y(m * p);
  MutMap(y.data(), m, p).noalias() = view(a) * view(b);
  Shape shape = a.rank() == 1 ? Shape{p} : matrix_shape(m, p);
  Tape* tape = common_tape({&a, &b});
  std::vector<std::size_t> parents;
  if (a.tracked()) parents.push_back(a.node());
  if (b.tracked()) parents.push_back(b.node());
  return finish(tape, std::move(shape), std::move(y), std::move(parents),
                [a, b, m, p](std::span<const double> g, Tape& t) {
                  ConstMap gm(g.data(), m, p);
                  if (a.tracked()) grad_view(t, a).noalias() += gm * view(b).transpose();
                  if (b.tracked()) grad_view(t, b).noalias() += view(a).transpose() * gm;
                });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_nonempty(a, "matmul_nt");
  require_nonempty(b, "matmul_nt");
  if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.rows();
  const std::size_t p = b.rows();
  std::vector<double> y(m * p);
  MutMap(y.data(), m, p).noalias() = view(a) * view(b).transpose();
  Tape* tape = common_tape({&a, &b});
  std::vector<std::size_t> parents;
  if (a.tracked()) parents.push_back(a.node());
  if (b.tracked()) parents.push_back(b.node());
  return finish(tape, matrix_shape(m, p), std::move(y), std::move(parents),
                [a, b, m, p](std::span<const double> g, Tape& t) {
                  ConstMap gm(g.data(), m, p);
                  if (a.tracked()) grad_view(t, a).noalias() += gm * view(b);
                  if (b.tracked()) grad_view(t, b).noalias() += gm.transpose() * view(a);
                });
}

Tensor transpose(const Tensor& a) {
  require_nonempty(a, "transpose");
  if (a.rank() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> y(m * n);
  MutMap(y.data(), n, m) = view(a).transpose();
  Tape* tape = common_tape({&a});
  return finish(tape, matrix_shape(n, m), std::move(y), {a.node()},
                [a, m, n](std::span<const double> g, Tape& t) {
                  grad_view(t, a) += ConstMap(g.data(), n, m).transpose();
                });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_nonempty(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tape* tape = common_tape({&a});
  return finish(tape, std::move(shape), a.to_vector(), {a.node()},
                [a](std::span<const double> g, Tape& t) {
                  auto ga = t.grad_buffer(a.node());
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
}

// Reductions ----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_nonempty(a, "sum");
  const auto x = a.values();
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  Tape* tape = common_tape({&a});
  return finish(tape, Shape{}, {total}, {a.node()}, [a](std::span<const double> g, Tape& t) {
    auto ga = t.grad_buffer(a.node());
    for (double& v : ga) v += g[0];
  });
}

Tensor softmax_rows(const Tensor& a, const Tensor* mask) {
  require_nonempty(a, "softmax_rows");
  if (a.rank() > 2) throw DimensionError("softmax_rows needs a matrix, got " + shape_str(a.shape()));
  if (mask != nullptr) require_same_shape(a, *mask, "softmax_rows mask");
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  const auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double row_max = -std::numeric_limits<double>::infinity();
    bool attendable = mask == nullptr;
    for (std::size_t c = 0; c < cols; ++c) {
      double v = x[base + c];
      if (mask != nullptr) {
        const double m = mask->values()[base + c];
        if (m > 0.5 * kMaskSentinel) attendable = true;
        v += m;
      }
      y[base + c] = v;
      row_max = std::max(row_max, v);
    }
    if (!attendable) {
      throw ContractError("softmax_rows: row " + std::to_string(r) + " has no attendable position");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[base + c] = std::exp(y[base + c] - row_max);
      total += y[base + c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[base + c] /= total;
  }
  Tape* tape = common_tape({&a});
  if (!tape) return Tensor(a.shape(), std::move(y));
  auto out = std::make_shared<std::vector<double>>(y);
  return tape->record(a.shape(), std::move(y), {a.node()},
                      [a, out, rows, cols](std::span<const double> g, Tape& t) {
                        auto ga = t.grad_buffer(a.node());
                        const auto& p = *out;
                        for (std::size_t r = 0; r < rows; ++r) {
                          const std::size_t base = r * cols;
                          double dot = 0.0;
                          for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * p[base + c];
                          for (std::size_t c = 0; c < cols; ++c) {
                            ga[base + c] += p[base + c] * (g[base + c] - dot);
                          }
                        }
                      });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  require_nonempty(a, "layer_norm");
  const std::size_t rows = a.rows();
  const std::size_t d = a.cols();
  if (a.rank() > 2 || d < 2) throw DimensionError("layer_norm needs width >= 2, got " + shape_str(a.shape()));
  if (gain.rank() != 1 || gain.size() != d || bias.rank() != 1 || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(a.shape()));
  }
  const auto x = a.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x[base + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x[base + c] - mean) * (x[base + c] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (x[base + c] - mean) * inv;
      (*xhat)[base + c] = h;
      y[base + c] = h * gv[c] + bv[c];
    }
  }
  Tape* tape = common_tape({&a, &gain, &bias});
  std::vector<std::size_t> parents;
  for (const Tensor* t : {&a, &gain, &bias}) {
    if (t->tracked()) parents.push_back(t->node());
  }
  return finish(tape, a.shape(), std::move(y), std::move(parents),
                [a, gain, bias, xhat, inv_std, rows, d](std::span<const double> g, Tape& t) {
                  const auto gv = gain.values();
                  const auto& h = *xhat;
                  if (gain.tracked()) {
                    auto gg = t.grad_buffer(gain.node());
                    for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * h[i];
                  }
                  if (bias.tracked()) {
                    auto gb = t.grad_buffer(bias.node());
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                  }
                  if (!a.tracked()) return;
                  auto ga = t.grad_buffer(a.node());
                  const double dd = static_cast<double>(d);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * d;
                    double sum_gh = 0.0;
                    double sum_ghh = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double gh = g[base + c] * gv[c];
                      sum_gh += gh;
                      sum_ghh += gh * h[base + c];
                    }
                    const double inv = (*inv_std)[r];
                    for (std::size_t c = 0; c < d; ++c) {
                      const double gh = g[base + c] * gv[c];
                      ga[base + c] += inv / dd * (dd * gh - sum_gh - h[base + c] * sum_ghh);
                    }
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
  require_nonempty(logits, "cross_entropy");
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (logits.rank() > 2 || targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  for (TokenId id : targets) {
    if (id >= vocab) throw VocabularyError(id, vocab);
  }
  const auto x = logits.values();
  auto probs = std::make_shared<std::vector<double>>(x.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * vocab;
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < vocab; ++c) row_max = std::max(row_max, x[base + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(x[base + c] - row_max);
      (*probs)[base + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) (*probs)[base + c] /= z;
    total += std::log(z) + row_max - x[base + targets[r]];
  }
  const double loss = total / static_cast<double>(rows);
  Tape* tape = common_tape({&logits});
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  return finish(tape, Shape{}, {loss}, {logits.node()},
                [logits, probs, tgt = std::move(tgt), rows, vocab](std::span<const double> g, Tape& t) {
                  auto gl = t.grad_buffer(logits.node());
                  const double scale = g[0] / static_cast<double>(rows);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * vocab;
                    for (std::size_t c = 0; c < vocab; ++c) gl[base + c] += scale * (*probs)[base + c];
                    gl[base + tgt[r]] -= scale;
                  }
                });
}

// Row plumbing --------------------------------------------------------------

Tensor rows_concat(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return rows_concat(std::span<const Tensor>(parts));
}

Tensor rows_concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("rows_concat of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  Tape* tape = nullptr;
  std::vector<std::size_t> parents;
  for (const Tensor& p : parts) {
    require_nonempty(p, "rows_concat");
    if (p.rank() > 2 || p.cols() != cols) {
      throw DimensionError("rows_concat: width mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.rows();
    if (p.tracked()) {
      if (tape != nullptr && tape != p.tape()) throw ContractError("operands are recorded on different tapes");
      tape = p.tape();
      parents.push_back(p.node());
    }
  }
  std::vector<double> y;
  y.reserve(rows * cols);
  for (const Tensor& p : parts) y.insert(y.end(), p.values().begin(), p.values().end());
  std::vector<Tensor> kept(parts.begin(), parts.end());
  return finish(tape, matrix_shape(rows, cols), std::move(y), std::move(parents),
                [kept = std::move(kept)](std::span<const double> g, Tape& t) {
                  std::size_t offset = 0;
                  for (const Tensor& p : kept) {
                    if (p.tracked()) {
                      auto gp = t.grad_buffer(p.node());
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
                    }
                    offset += p.size();
                  }
                });
}

Tensor rows_slice(const Tensor& a, std::size_t from, std::size_t to) {
  require_nonempty(a, "rows_slice");
  if (from >= to || to > a.rows()) {
    throw IndexError("rows_slice [" + std::to_string(from) + ", " + std::to_string(to) + ") outside " +
                     std::to_string(a.rows()) + " rows");
  }
  const std::size_t cols = a.cols();
  const auto x = a.values();
  std::vector<double> y(x.begin() + from * cols, x.begin() + to * cols);
  Tape* tape = common_tape({&a});
  return finish(tape, matrix_shape(to - from, cols), std::move(y), {a.node()},
                [a, from, cols](std::span<const double> g, Tape& t) {
                  auto ga = t.grad_buffer(a.node());
                  for (std::size_t i = 0; i < g.size(); ++i) ga[from * cols + i] += g[i];
                });
}

Tensor cols_concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("cols_concat of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  Tape* tape = nullptr;
  std::vector<std::size_t> parents;
  for (const Tensor& p : parts) {
    require_nonempty(p, "cols_concat");
    if (p.rank() > 2 || p.rows() != rows) {
      throw DimensionError("cols_concat: height mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    cols += p.cols();
    if (p.tracked()) {
      if (tape != nullptr && tape != p.tape()) throw ContractError("operands are recorded on different tapes");
      tape = p.tape();
      parents.push_back(p.node());
    }
  }
  std::vector<double> y(rows * cols);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data() + r * w, w, y.data() + r * cols + offset);
    }
    offset += w;
  }
  std::vector<Tensor> kept(parts.begin(), parts.end());
  return finish(tape, matrix_shape(rows, cols), std::move(y), std::move(parents),
                [kept = std::move(kept), rows, cols](std::span<const double> g, Tape& t) {
                  std::size_t offset = 0;
                  for (const Tensor& p : kept) {
                    const std::size_t w = p.cols();
                    if (p.tracked()) {
                      auto gp = t.grad_buffer(p.node());
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * cols + offset + c];
                      }
                    }
                    offset += w;
                  }
                });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_nonempty(a, "gather_rows");
  if (indices.empty()) throw ContractError("gather_rows with no indices");
  const std::size_t cols = a.cols();
  for (std::size_t i : indices) {
    if (i >= a.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(i) + " outside " + std::to_string(a.rows()) +
                       " rows");
    }
  }
  std::vector<double> y(indices.size() * cols);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(a.data() + indices[k] * cols, cols, y.data() + k * cols);
  }
  Tape* tape = common_tape({&a});
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return finish(tape, matrix_shape(indices.size(), cols), std::move(y), {a.node()},
                [a, idx = std::move(idx), cols](std::span<const double> g, Tape& t) {
                  auto ga = t.grad_buffer(a.node());
                  for (std::size_t k = 0; k < idx.size(); ++k) {
                    for (std::size_t c = 0; c < cols; ++c) ga[idx[k] * cols + c] += g[k * cols + c];
                  }
                });
}

Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids) {
  require_nonempty(table, "embedding_lookup");
  if (table.rank() != 2) throw DimensionError("embedding table must be a matrix");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= table.rows()) throw VocabularyError(ids[k], table.rows());
    rows[k] = ids[k];
  }
  return gather_rows(table, rows);
}

// Verification --------------------------------------------------------------

double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  if (step <= 0.0) throw ContractError("grad_check step must be positive");
  Tape tape;
  const Tensor input = tape.leaf(x);
  const Tensor out = f(input);
  if (out.size() != 1) throw ContractError("grad_check needs a scalar-valued function");
  std::vector<double> analytic(x.size(), 0.0);
  if (out.tracked()) {
    tape.backward(out);
    analytic = tape.grad(input).to_vector();
  }
  std::vector<double> probe = x.to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + step;
    const double plus = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved - step;
    const double minus = f(Tensor(x.shape(), probe)).item();
    probe[i] = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

double spectral_norm(const Tensor& a, std::size_t max_iters, double tol) {
  if (max_iters == 0) throw ContractError("spectral_norm needs at least one iteration");
  require_nonempty(a, "spectral_norm");
  const ConstMap m = view(a);
  if (m.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  const auto n = m.cols();
  // Fixed, non-symmetric start so no singular direction is systematically missed.
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 0.37 * std::sin(1.0 + 1.7 * static_cast<double>(i));
  v.normalize();
  double sigma = (m * v).norm();
  for (std::size_t it = 0; it < max_iters; ++it) {
    Eigen::VectorXd w = m.transpose() * (m * v);
    const double wn = w.norm();
    if (wn == 0.0) break;
    v = w / wn;
    const double next = (m * v).norm();
    const double change = std::abs(next - sigma);
    sigma = next;
    if (change < tol) break;
  }
  return sigma;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  return worst;
}

}  // namespace crt
