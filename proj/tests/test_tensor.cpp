#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "crt/tensor.hpp"

using namespace crt;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double bound = 1.0) {
  return Tensor::uniform({r, c}, bound, rng);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(a, Tensor::identity(2)).to_vector(), a.to_vector());
}

TEST(Matmul, RowTimesColumn) {
  const Tensor y = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(y.at(0, 0), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  const Tensor b = random_matrix(3, 3, rng);
  const Tensor a = random_matrix(3, 3, rng);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b), 1e-6);
}

TEST(Unary, FixedPoints) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(crt::tanh(Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Unary, SigmoidSymmetry) {
  Rng rng(5);
  const Tensor x = Tensor::uniform({50}, 6.0, rng);
  const Tensor s = add(sigmoid(x), sigmoid(negate(x)));
  for (double v : s.values()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Binary, Identities) {
  Rng rng(7);
  const Tensor a = random_matrix(3, 4, rng);
  EXPECT_EQ(hadamard(a, Tensor::ones({3, 4})).to_vector(), a.to_vector());
  for (double v : sub(a, a).values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(hadamard(Tensor::vec({1, 2}), Tensor::vec({3, 4})).to_vector(), (std::vector<double>{3, 8}));
}

TEST(Binary, ShapeMismatchIsAnError) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(add_row_bias(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
}

TEST(Softmax, ClosedForms) {
  EXPECT_EQ(softmax_rows(Tensor::matrix({{0, 0}})).to_vector(), (std::vector<double>{0.5, 0.5}));
  const Tensor p = softmax_rows(Tensor::matrix({{std::log(2.0), 0.0}}));
  EXPECT_NEAR(p.at(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p.at(0, 1), 1.0 / 3.0, 1e-15);
  const Tensor mask = Tensor::matrix({{0.0, kMaskSentinel}});
  const Tensor q = softmax_rows(Tensor::matrix({{5.0, 123.0}}), &mask);
  EXPECT_EQ(q.to_vector(), (std::vector<double>{1.0, 0.0}));
}

TEST(Softmax, FullyMaskedRowIsRejected) {
  const Tensor mask = Tensor::matrix({{0.0, 0.0}, {kMaskSentinel, kMaskSentinel}});
  try {
    softmax_rows(Tensor::zeros({2, 2}), &mask);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("no attendable position"), std::string::npos);
  }
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = softmax_rows(random_matrix(5, 7, rng, 30.0));
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.at(r, c), 0.0);
        total += p.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(LayerNorm, ClosedForms) {
  const Tensor gain = Tensor::ones({2});
  const Tensor bias = Tensor::zeros({2});
  for (double v : layer_norm(Tensor::matrix({{3, 3}}), gain, bias).values()) EXPECT_EQ(v, 0.0);
  const Tensor y = layer_norm(Tensor::matrix({{1, -1}}), gain, bias);
  EXPECT_NEAR(y.at(0, 0), 1.0, 1e-5);
  EXPECT_NEAR(y.at(0, 1), -1.0, 1e-5);
}

TEST(LayerNorm, RowsHaveZeroMean) {
  Rng rng(13);
  const Tensor x = random_matrix(6, 9, rng, 10.0);
  const Tensor y = layer_norm(x, Tensor::uniform({9}, 2.0, rng), Tensor::zeros({9}));
  const Tensor plain = layer_norm(x, Tensor::ones({9}), Tensor::zeros({9}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < 9; ++c) mean += plain.at(r, c);
    EXPECT_NEAR(mean / 9.0, 0.0, 1e-12);
  }
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 1}), Tensor::ones({1}), Tensor::zeros({1})), DimensionError);
}

TEST(Rows, ConcatAndSliceAreInverse) {
  Rng rng(17);
  const Tensor memory = random_matrix(1, 4, rng);
  const Tensor segment = random_matrix(5, 4, rng);
  const Tensor both = rows_concat(memory, segment);
  EXPECT_EQ(both.rows(), 6u);
  EXPECT_EQ(rows_slice(both, 0, 1).to_vector(), memory.to_vector());
  EXPECT_EQ(rows_slice(both, 1, 6).to_vector(), segment.to_vector());
  EXPECT_THROW(rows_slice(both, 3, 7), IndexError);
  EXPECT_THROW(rows_slice(both, 3, 3), IndexError);
}

TEST(Rows, SliceGradientScattersOnes) {
  Rng rng(19);
  const Tensor a = random_matrix(2, 3, rng);
  Tape tape;
  const Tensor la = tape.leaf(a);
  const Tensor lb = tape.leaf(random_matrix(4, 3, rng));
  tape.backward(sum(rows_slice(rows_concat(la, lb), 2, 6)));
  for (double v : tape.grad(lb).values()) EXPECT_EQ(v, 1.0);
  for (double v : tape.grad(la).values()) EXPECT_EQ(v, 0.0);
}

TEST(Embedding, LookupAndAccumulation) {
  Rng rng(23);
  const Tensor table = random_matrix(4, 3, rng);
  const std::vector<TokenId> twice = {0, 0};
  const Tensor rows = embedding_lookup(table, twice);
  EXPECT_EQ(rows_slice(rows, 0, 1).to_vector(), rows_slice(table, 0, 1).to_vector());
  EXPECT_EQ(rows_slice(rows, 1, 2).to_vector(), rows_slice(table, 0, 1).to_vector());
  const std::vector<TokenId> all = {0, 1, 2, 3};
  EXPECT_EQ(embedding_lookup(table, all).to_vector(), table.to_vector());

  Tape tape;
  const Tensor lt = tape.leaf(table);
  tape.backward(sum(embedding_lookup(lt, twice)));
  const Tensor g = tape.grad(lt);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(g.at(0, c), 2.0);
    for (std::size_t r = 1; r < 4; ++r) EXPECT_EQ(g.at(r, c), 0.0);
  }
}

TEST(Embedding, BadIdCarriesTheId) {
  const std::vector<TokenId> ids = {1, 9};
  try {
    embedding_lookup(Tensor::zeros({4, 2}), ids);
    FAIL() << "expected VocabularyError";
  } catch (const VocabularyError& e) {
    EXPECT_EQ(e.id(), 9u);
  }
}

TEST(CrossEntropy, UniformAndSaturated) {
  const std::vector<TokenId> targets = {3, 7};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 10}), targets).item(), std::log(10.0), 1e-15);
  std::vector<double> logits(10, 0.0);
  logits[4] = 1000.0;
  const std::vector<TokenId> hit = {4};
  EXPECT_NEAR(cross_entropy(Tensor({1, 10}, logits), hit).item(), 0.0, 1e-12);
  const std::vector<TokenId> bad = {10};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 10}), bad), VocabularyError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(29);
  const Tensor w = random_matrix(4, 6, rng);
  const std::vector<TokenId> t = {1, 5, 0};
  const Tensor x = random_matrix(3, 4, rng);
  EXPECT_LT(grad_check([&](const Tensor& v) { return cross_entropy(matmul(v, w), t); }, x), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor& v) { return cross_entropy(matmul(x, v), t); }, w), 1e-4);
}

TEST(Backward, SumGivesOnesAndRootSeed) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::zeros({2, 3}));
  const Tensor s = sum(x);
  tape.backward(s);
  for (double v : tape.grad(x).values()) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(tape.grad(s).item(), 1.0);
}

TEST(Backward, ReusedNodeAccumulates) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vec({1.5, -2.0}));
  tape.backward(sum(hadamard(x, x)));
  EXPECT_EQ(tape.grad(x).to_vector(), (std::vector<double>{3.0, -4.0}));
}

TEST(Backward, NonScalarRootIsRejected) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::zeros({2}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, UnreachedNodesReportZero) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::ones({3}));
  const Tensor unused = tape.leaf(Tensor::ones({2}));
  tape.backward(sum(x));
  for (double v : tape.grad(unused).values()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SiblingOrderDoesNotChangeGradients) {
  Rng rng(31);
  const Tensor a = random_matrix(3, 3, rng);
  const Tensor b = random_matrix(3, 3, rng);
  auto run = [&](bool swap) {
    Tape tape;
    const Tensor x = tape.leaf(a);
    const Tensor left = matmul(x, b);
    const Tensor right = crt::tanh(hadamard(x, x));
    const Tensor total = swap ? add(sum(right), sum(left)) : add(sum(left), sum(right));
    tape.backward(total);
    return tape.grad(x);
  };
  EXPECT_LE(max_abs_diff(run(false), run(true)), 1e-15);
}

TEST(GradCheck, EveryDifferentiableOpAtRandomPoints) {
  Rng rng(37);
  const Tensor mask = Tensor::matrix({{0, kMaskSentinel, 0}, {0, 0, 0}, {kMaskSentinel, 0, 0}});
  const Tensor gain = Tensor::uniform({3}, 1.0, rng);
  const Tensor bias = Tensor::uniform({3}, 1.0, rng);
  const Tensor other = Tensor::uniform({3, 3}, 1.0, rng);
  const Tensor weights = Tensor::uniform({3, 3}, 1.0, rng);
  const std::vector<TokenId> ids = {2, 0, 2};
  const std::vector<TokenId> targets = {1, 2, 0};
  const std::vector<std::size_t> gather = {2, 0, 2, 1};
  const std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"sigmoid", [&](const Tensor& x) { return sum(hadamard(sigmoid(x), weights)); }},
      {"tanh", [&](const Tensor& x) { return sum(hadamard(crt::tanh(x), weights)); }},
      {"negate", [&](const Tensor& x) { return sum(hadamard(negate(x), weights)); }},
      {"exp", [&](const Tensor& x) { return sum(hadamard(crt::exp(x), weights)); }},
      {"gelu", [&](const Tensor& x) { return sum(hadamard(apply_unary(UnaryKind::Gelu, x), weights)); }},
      {"add", [&](const Tensor& x) { return sum(hadamard(add(x, other), weights)); }},
      {"sub", [&](const Tensor& x) { return sum(hadamard(sub(other, x), weights)); }},
      {"hadamard", [&](const Tensor& x) { return sum(hadamard(hadamard(x, other), weights)); }},
      {"affine", [&](const Tensor& x) { return sum(hadamard(affine(x, -2.5, 1.0), weights)); }},
      {"bias", [&](const Tensor& x) { return sum(hadamard(add_row_bias(other, reshape(rows_slice(x, 0, 1), {3})), weights)); }},
      {"matmul_nt", [&](const Tensor& x) { return sum(hadamard(matmul_nt(x, other), weights)); }},
      {"transpose", [&](const Tensor& x) { return sum(hadamard(transpose(x), weights)); }},
      {"softmax", [&](const Tensor& x) { return sum(hadamard(softmax_rows(x, &mask), weights)); }},
      {"layer_norm", [&](const Tensor& x) { return sum(hadamard(layer_norm(x, gain, bias), weights)); }},
      {"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, targets); }},
      {"embedding", [&](const Tensor& x) { return sum(hadamard(embedding_lookup(x, ids), weights)); }},
      {"gather", [&](const Tensor& x) { return sum(matmul(gather_rows(x, gather), weights)); }},
      {"cols_concat", [&](const Tensor& x) {
         const std::vector<Tensor> parts = {x, other};
         return sum(matmul(cols_concat(parts), rows_concat(weights, weights)));
       }},
  };
  for (const auto& [name, f] : cases) {
    for (int point = 0; point < 10; ++point) {
      const Tensor x = Tensor::uniform({3, 3}, 1.5, rng);
      EXPECT_LT(grad_check(f, x), 1e-4) << name << " at point " << point;
    }
  }
}

TEST(SpectralNorm, KnownValues) {
  EXPECT_NEAR(spectral_norm(Tensor::identity(5)), 1.0, 1e-12);
  EXPECT_NEAR(spectral_norm(Tensor::matrix({{3, 0}, {0, 1}})), 3.0, 1e-10);
  EXPECT_EQ(spectral_norm(Tensor::zeros({3, 2})), 0.0);
}

TEST(SpectralNorm, AgreesWithSvd) {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = Tensor::uniform({6, 4}, 1.0, rng);
    Eigen::MatrixXd m(6, 4);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 4; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a.at(r, c);
    }
    const double exact = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
    EXPECT_NEAR(spectral_norm(a), exact, 1e-6);
  }
}

TEST(GradCheck, SumIsExact) {
  Rng rng(43);
  EXPECT_LT(grad_check([](const Tensor& x) { return sum(x); }, Tensor::uniform({4, 4}, 1.0, rng)), 1e-9);
}
