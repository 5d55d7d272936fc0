#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"
#include "oracle_helpers.hpp"

using namespace nestrq;

TEST_CASE("matmul identity and hand cases") {
  const Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor ia = matmul(I, a);
  CHECK(ia.values() == std::vector<double>{1, 2, 3, 4});

  const Tensor row = Tensor::from({1, 2}, {1, 2});
  const Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).value() == 11.0);
}

TEST_CASE("matmul gradient of sum equals ones * b^T and matches finite differences") {
  Rng rng(7);
  Tensor a = Tensor::zeros({3, 4}, true);
  Tensor b = Tensor::zeros({4, 2}, true);
  for (auto& v : a.values()) v = rng.normal();
  for (auto& v : b.values()) v = rng.normal();

  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(matmul(a, b));
    tape.backward(loss);
  }
  // d(sum(AB))/dA = ones(3x2) * B^T.
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (int j = 0; j < 2; ++j) expect += b.at(k, j);
      CHECK(oracle::rel_err(a.grad()[static_cast<std::size_t>(i) * 4 + k], expect) < 1e-12);
    }

  const auto report = oracle::fd_check([&] { return sum(matmul(a, b)); }, {a, b}, 10, Rng(17));
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("matmul associativity on small random instances") {
  Rng rng(3);
  Tensor a = Tensor::zeros({3, 5});
  Tensor b = Tensor::zeros({5, 4});
  Tensor c = Tensor::zeros({4, 2});
  for (auto* t : {&a, &b, &c})
    for (auto& v : t->values()) v = rng.normal();
  const Tensor left = matmul(matmul(a, b), c);
  const Tensor right = matmul(a, matmul(b, c));
  for (std::size_t i = 0; i < left.size(); ++i)
    CHECK(std::abs(left.values()[i] - right.values()[i]) < 1e-9);
}

TEST_CASE("conv1d_depthwise identity kernels") {
  Rng rng(11);
  Tensor x = Tensor::zeros({6, 3});
  for (auto& v : x.values()) v = rng.normal();

  const Tensor k_sym = Tensor::from({3, 3}, {0, 0, 0, 1, 1, 1, 0, 0, 0});
  CHECK(conv1d_depthwise(x, k_sym, Padding::kSymmetric).values() == x.values());

  const Tensor k_causal = Tensor::from({1, 3}, {1, 1, 1});
  CHECK(conv1d_depthwise(x, k_causal, Padding::kCausal).values() == x.values());
}

TEST_CASE("conv1d_depthwise causal pair-sum example") {
  const Tensor x = Tensor::from({4, 1}, {1, 2, 3, 4});
  const Tensor k = Tensor::from({2, 1}, {1, 1});
  const Tensor y = conv1d_depthwise(x, k, Padding::kCausal);
  CHECK(y.values() == std::vector<double>{1, 3, 5, 7});
}

TEST_CASE("conv1d_depthwise rejects even symmetric kernels") {
  const Tensor x = Tensor::zeros({4, 1});
  const Tensor k = Tensor::zeros({2, 1});
  CHECK_THROWS_AS(conv1d_depthwise(x, k, Padding::kSymmetric), ConfigError);
}

TEST_CASE("conv1d_depthwise gradient matches finite differences") {
  Rng rng(23);
  Tensor x = Tensor::zeros({7, 2}, true);
  Tensor k = Tensor::zeros({3, 2}, true);
  for (auto* t : {&x, &k})
    for (auto& v : t->values()) v = rng.normal();
  for (auto padding : {Padding::kSymmetric, Padding::kCausal}) {
    const auto report = oracle::fd_check(
        [&] { return sum(mul(conv1d_depthwise(x, k, padding), conv1d_depthwise(x, k, padding))); },
        {x, k}, 12, Rng(29));
    CHECK(report.max_rel_err < 1e-6);
  }
}

TEST_CASE("softmax of all-zero row is uniform") {
  const Tensor x = Tensor::zeros({1, 4});
  const Tensor y = softmax_rows(x);
  for (double v : y.values()) CHECK(v == 0.25);
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
  Rng rng(31);
  Tensor x = Tensor::zeros({5, 9});
  for (auto& v : x.values()) v = rng.normal(0.0, 3.0);
  const Tensor y = softmax_rows(x);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 9; ++j) {
      const double p = y.at(i, j);
      CHECK(p > 0.0);
      CHECK(p < 1.0);
      s += p;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("masked softmax zeroes disallowed entries and matches finite differences") {
  Rng rng(37);
  Tensor x = Tensor::zeros({4, 4}, true);
  for (auto& v : x.values()) v = rng.normal();
  BoolMatrix mask = BoolMatrix::filled(4, 4, false);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j <= i; ++j) mask.set(i, j, true);

  const Tensor y = softmax_rows_masked(x, mask);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) {
      if (j > i) CHECK(y.at(i, j) == 0.0);
      s += y.at(i, j);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  const auto report = oracle::fd_check(
      [&] { return sum(mul(softmax_rows_masked(x, mask), softmax_rows_masked(x, mask))); }, {x},
      16, Rng(41));
  CHECK(report.max_rel_err < 1e-6);

  BoolMatrix empty_row = BoolMatrix::filled(2, 2, true);
  empty_row.set(1, 0, false);
  empty_row.set(1, 1, false);
  CHECK_THROWS_AS(softmax_rows_masked(Tensor::zeros({2, 2}), empty_row), NumericError);
}

TEST_CASE("cross_entropy of uniform logits equals ln V") {
  const int V = 1024;
  const Tensor logits = Tensor::zeros({3, V});
  const Tensor loss = cross_entropy(logits, {5, 900, 0});
  CHECK(std::abs(loss.value() - std::log(1024.0)) < 1e-12);
}

TEST_CASE("cross_entropy errors") {
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 4}), std::vector<int>{}), DomainError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 4}), {4}), DomainError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 4}), {0}), ShapeError);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
  Rng rng(43);
  Tensor logits = Tensor::zeros({4, 6}, true);
  for (auto& v : logits.values()) v = rng.normal();
  const std::vector<int> targets{2, 0, 5, 3};
  for (auto reduction : {Reduction::kMean, Reduction::kSum}) {
    const auto report = oracle::fd_check([&] { return cross_entropy(logits, targets, reduction); },
                                         {logits}, 16, Rng(47));
    CHECK(report.max_rel_err < 1e-6);
  }
}

TEST_CASE("layer_norm gradient vs central finite differences on 2x8 input") {
  Rng rng(53);
  Tensor x = Tensor::zeros({2, 8}, true);
  Tensor gain = Tensor::zeros({1, 8}, true);
  Tensor bias = Tensor::zeros({1, 8}, true);
  for (auto& v : x.values()) v = rng.normal();
  for (auto& v : gain.values()) v = 1.0 + 0.1 * rng.normal();
  for (auto& v : bias.values()) v = 0.1 * rng.normal();
  const auto report = oracle::fd_check(
      [&] { return sum(mul(layer_norm(x, gain, bias), layer_norm(x, gain, bias))); },
      {x, gain, bias}, 8, Rng(59));
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(61);
  Tensor x = Tensor::zeros({3, 5}, true);
  Tensor y = Tensor::zeros({3, 5}, true);
  for (auto* t : {&x, &y})
    for (auto& v : t->values()) v = rng.normal();

  struct Case {
    const char* name;
    std::function<Tensor()> forward;
  };
  const std::vector<Case> cases{
      {"add", [&] { return sum(mul(add(x, y), add(x, y))); }},
      {"sub", [&] { return sum(mul(sub(x, y), sub(x, y))); }},
      {"mul", [&] { return sum(mul(mul(x, y), mul(x, y))); }},
      {"scale", [&] { return sum(scale(mul(x, x), 2.5)); }},
      {"div_scalar", [&] { return sum(div_scalar(mul(x, x), 3.0)); }},
      {"sigmoid", [&] { return sum(mul(sigmoid(x), y)); }},
      {"swish", [&] { return sum(mul(swish(x), y)); }},
      {"mean", [&] { return mean(mul(x, y)); }},
      {"transpose", [&] { return sum(mul(transpose(x), transpose(y))); }},
  };
  for (const auto& c : cases) {
    INFO(c.name);
    const auto report = oracle::fd_check(c.forward, {x, y}, 10, Rng(67));
    CHECK(report.max_rel_err < 1e-6);
  }
}

TEST_CASE("glu and structural op gradients match finite differences") {
  Rng rng(71);
  Tensor x = Tensor::zeros({5, 6}, true);
  for (auto& v : x.values()) v = rng.normal();

  auto quad = [](const Tensor& t) { return sum(mul(t, t)); };
  const auto g1 = oracle::fd_check([&] { return quad(glu(x)); }, {x}, 12, Rng(73));
  CHECK(g1.max_rel_err < 1e-6);
  const auto g2 = oracle::fd_check([&] { return quad(gather_windows(x, 3, 2, 1)); }, {x}, 12,
                                   Rng(79));
  CHECK(g2.max_rel_err < 1e-6);
  const auto g3 = oracle::fd_check([&] { return quad(slice_rows(x, 1, 4)); }, {x}, 12, Rng(83));
  CHECK(g3.max_rel_err < 1e-6);
  const auto g4 = oracle::fd_check([&] { return quad(select_rows(x, {4, 0, 2})); }, {x}, 12,
                                   Rng(89));
  CHECK(g4.max_rel_err < 1e-6);
  const auto g5 = oracle::fd_check([&] { return quad(slice_cols(x, 2, 3)); }, {x}, 12, Rng(97));
  CHECK(g5.max_rel_err < 1e-6);
  const auto g6 = oracle::fd_check(
      [&] { return quad(concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 4)})); }, {x}, 12,
      Rng(101));
  CHECK(g6.max_rel_err < 1e-6);
  const auto g7 = oracle::fd_check(
      [&] { return quad(add_rowvec(x, slice_rows(x, 0, 1))); }, {x}, 12, Rng(103));
  CHECK(g7.max_rel_err < 1e-6);
}

TEST_CASE("backward of sum gives ones; backward of sum of squares gives 2x") {
  Tensor x = Tensor::from({1, 3}, {1, 2, 3}, true);
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(x));
  }
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  x.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward rejects non-scalar loss and double consumption") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  const Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), UsageError);
  const Tensor loss = sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), UsageError);
}

TEST_CASE("rng reproducibility: identical first 10k draws for seed 1234") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.uniform() == b.uniform());
}

TEST_CASE("rng forks are label-keyed and independent of call order") {
  Rng root(99);
  Rng f1 = root.fork("mask");
  Rng f2 = root.fork("data");
  Rng f1_again = Rng(99).fork("mask");
  CHECK(f1.uniform() == f1_again.uniform());
  CHECK(root.fork("mask").uniform() != f2.uniform());
}

TEST_CASE("rng uniform_int is inclusive and in range") {
  Rng rng(5);
  bool saw_lo = false, saw_hi = false;
  for (int i = 0; i < 2000; ++i) {
    const auto v = rng.uniform_int(3, 7);
    REQUIRE(v >= 3);
    REQUIRE(v <= 7);
    saw_lo |= v == 3;
    saw_hi |= v == 7;
  }
  CHECK(saw_lo);
  CHECK(saw_hi);
}

TEST_CASE("rng normal moments and xavier support") {
  Rng rng(6);
  double m = 0.0, m2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    m += v;
    m2 += v * v;
  }
  m /= n;
  m2 /= n;
  CHECK(std::abs(m) < 0.01);
  CHECK(std::abs(m2 - 1.0) < 0.02);

  const double limit = std::sqrt(6.0 / (10 + 14));
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.xavier_uniform(10, 14);
    REQUIRE(std::abs(v) <= limit);
  }
}
