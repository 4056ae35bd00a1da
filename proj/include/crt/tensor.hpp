#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crt {

using Shape = std::vector<std::size_t>;
using TokenId = std::uint32_t;
using Rng = std::mt19937_64;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for token ids outside the vocabulary; carries the offending id.
class VocabularyError : public std::out_of_range {
 public:
  VocabularyError(std::size_t id, std::size_t vocab_size);
  std::size_t id() const noexcept { return id_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

 private:
  std::size_t id_;
  std::size_t vocab_size_;
};

/// Large negative additive mask entry. Used instead of -inf so that a
/// row-max-stabilised softmax never evaluates inf - inf.
inline constexpr double kMaskSentinel = -1e9;

class Tape;

/// Dense row-major array of doubles. Values are immutable and shared between
/// copies; a tensor produced by a recorded op also names its node on a tape.
///
/// Rank 0 and rank 1 tensors behave as a single row wherever an op needs a
/// matrix view (rows() == 1).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vec(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor uniform(Shape shape, double bound, Rng& rng);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_ ? values_->size() : 0; }
  bool empty() const noexcept { return !values_; }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const&;
  /// On a temporary, a copy: a span would dangle (e.g. in a range-for).
  std::vector<double> values() const&& { return to_vector(); }
  const double* data() const { return values_->data(); }
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t node() const noexcept { return node_; }

  /// Same values, no tape node.
  Tensor detach() const;
  std::vector<double> to_vector() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

/// Define-by-run gradient tape. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted. A tape must outlive every
/// tensor that refers to it.
class Tape {
 public:
  using Backward = std::function<void(std::span<const double> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable input holding a copy of `value`'s data.
  Tensor leaf(const Tensor& value);

  Tensor record(Shape shape, std::vector<double> values, std::vector<std::size_t> parents,
                Backward backward);

  /// Gradient accumulator of `node`, allocated as zeros on first access.
  std::span<double> grad_buffer(std::size_t node);

  /// Reverse sweep from a scalar root. Clears gradients from earlier sweeps.
  void backward(const Tensor& root);

  /// Accumulated gradient of `t`; zeros when `t` was not reached.
  Tensor grad(const Tensor& t) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::size_t>& parents(std::size_t node) const { return nodes_.at(node).parents; }

 private:
  struct Node {
    Shape shape;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Elementwise operations --------------------------------------------------

enum class UnaryKind { Sigmoid, Tanh, Negate, Exp, Relu, Gelu };
enum class BinaryKind { Add, Sub, Hadamard };

Tensor apply_unary(UnaryKind kind, const Tensor& a);
Tensor apply_binary(BinaryKind kind, const Tensor& a, const Tensor& b);

inline Tensor sigmoid(const Tensor& a) { return apply_unary(UnaryKind::Sigmoid, a); }
inline Tensor tanh(const Tensor& a) { return apply_unary(UnaryKind::Tanh, a); }
inline Tensor negate(const Tensor& a) { return apply_unary(UnaryKind::Negate, a); }
inline Tensor exp(const Tensor& a) { return apply_unary(UnaryKind::Exp, a); }
inline Tensor add(const Tensor& a, const Tensor& b) { return apply_binary(BinaryKind::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return apply_binary(BinaryKind::Sub, a, b); }
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  return apply_binary(BinaryKind::Hadamard, a, b);
}

/// scale * a + shift, elementwise.
Tensor affine(const Tensor& a, double scale, double shift = 0.0);

/// Adds a [d] bias to every row of a [m x d] (or [d]) tensor. The only
/// broadcasting case supported anywhere.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// Linear algebra ----------------------------------------------------------

/// [m x k] * [k x p] -> [m x p]. A rank-1 [k] left operand yields a rank-1 [p].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T for a [m x k], b [p x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions and normalisation ---------------------------------------------

Tensor sum(const Tensor& a);

/// Row-wise softmax with an optional additive mask (0 or kMaskSentinel).
Tensor softmax_rows(const Tensor& a, const Tensor* mask = nullptr);

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean over rows of -log softmax(logits)[target], natural log.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets);

// Row plumbing -------------------------------------------------------------

Tensor rows_concat(const Tensor& a, const Tensor& b);
Tensor rows_concat(std::span<const Tensor> parts);
Tensor rows_slice(const Tensor& a, std::size_t from, std::size_t to);
Tensor cols_concat(std::span<const Tensor> parts);
/// Row gather; duplicate indices accumulate in backward.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids);

// Verification utilities ---------------------------------------------------

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Max relative error between tape gradient and central differences, with
/// denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const ScalarFn& f, const Tensor& x, double step = 1e-5);

/// Largest singular value by power iteration on a^T a.
double spectral_norm(const Tensor& a, std::size_t max_iters = 1000, double tol = 1e-10);

/// Largest elementwise absolute difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Runtime NaN check on op outputs. Off unless enabled (on by default in debug builds).
void set_finite_check(bool enabled);
bool finite_check_enabled();

}  // namespace crt
