#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "snt/kernels.hpp"
#include "snt/tensor.hpp"

using namespace snt;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, bool rg = true,
                     double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (double& x : data) x = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), rg);
}

}  // namespace

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(nullptr, eye, m);
  CHECK(out.data() == std::vector<double>{1, 2, 3, 4});

  Tensor row = Tensor::from_data({1, 2}, {1, 0});
  Tensor col = Tensor::from_data({2, 1}, {0, 5});
  CHECK(matmul(nullptr, row, col).value() == 0.0);

  Tensor wide = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK_THROWS_WITH_AS(matmul(nullptr, wide, m), doctest::Contains("[2x3]"),
                       ContractError);
  CHECK_THROWS_WITH_AS(matmul(nullptr, wide, m), doctest::Contains("[2x2]"),
                       ContractError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Tensor a = random_tensor({3, 4}, 7);
  Tensor b = random_tensor({4, 2}, 8);
  Tape tape;
  Tensor loss = sum_all(&tape, matmul(&tape, a, b));
  tape.backward(loss);

  auto f = [&] { return sum_all(nullptr, matmul(nullptr, a, b)).value(); };
  CHECK(oracle::max_rel_err(a.grad(), oracle::finite_diff(a, f)) < 1e-6);
  CHECK(oracle::max_rel_err(b.grad(), oracle::finite_diff(b, f)) < 1e-6);
}

TEST_CASE("log_softmax values and stability") {
  Tensor x = Tensor::from_data({1, 4}, {0, 0, 0, 0});
  Tensor y = log_softmax(nullptr, x);
  for (double v : y.data()) CHECK(v == doctest::Approx(std::log(0.25)));

  Tensor big = Tensor::from_data({1, 2}, {1000.0, 0.0});
  Tensor yb = log_softmax(nullptr, big);
  CHECK(std::isfinite(yb.data()[0]));
  CHECK(yb.data()[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(yb.data()[1] == doctest::Approx(-1000.0));

  Tensor bad = Tensor::from_data({1, 2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS(log_softmax(nullptr, bad), NumericError);
}

TEST_CASE("log_softmax slices exponentiate to one") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({5, 7}, seed, false, 3.0);
    Tensor y = log_softmax(nullptr, x);
    for (int r = 0; r < 5; ++r) {
      double s = 0.0;
      for (int j = 0; j < 7; ++j) s += std::exp(y.data()[r * 7 + j]);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("log_softmax gradient vs finite differences") {
  Tensor x = random_tensor({1, 7}, 21);
  Tape tape;
  // Weighted sum keeps the probe non-symmetric.
  Tensor w = random_tensor({1, 7}, 22, false);
  Tensor loss = sum_all(&tape, mul(&tape, log_softmax(&tape, x), w));
  tape.backward(loss);
  auto f = [&] {
    return sum_all(nullptr, mul(nullptr, log_softmax(nullptr, x), w)).value();
  };
  CHECK(oracle::max_rel_err(x.grad(), oracle::finite_diff(x, f)) < 1e-6);
}

TEST_CASE("backward analytic and disconnected cases") {
  Tensor x = Tensor::from_data({3}, {1, -2, 3}, true);
  Tape tape;
  Tensor loss = sum_all(&tape, mul(&tape, x, x));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2, -4, 6});

  // Constant loss: nothing receives gradient.
  Tensor c = Tensor::scalar(5.0);
  Tensor probe = Tensor::from_data({2}, {1, 1}, true);
  Tape tape2;
  tape2.backward(c);
  CHECK_FALSE(probe.has_grad());

  CHECK_THROWS_AS(tape2.backward(probe), ContractError);
}

TEST_CASE("two-layer FFN composite gradient") {
  Tensor x = random_tensor({2, 5}, 31, false);
  Tensor w1 = random_tensor({5, 8}, 32, true, 0.5);
  Tensor b1 = random_tensor({8}, 33, true, 0.1);
  Tensor w2 = random_tensor({8, 4}, 34, true, 0.5);
  Tensor b2 = random_tensor({4}, 35, true, 0.1);

  auto run = [&](Tape* tp) {
    Tensor h = relu(tp, add_bias(tp, matmul(tp, x, w1), b1));
    Tensor logits = add_bias(tp, matmul(tp, h, w2), b2);
    Tensor lp = log_softmax(tp, logits);
    // NLL of class 1 for row 0 and class 3 for row 1.
    Tensor picked = gather(tp, lp, {1, 7});
    return affine(tp, sum_all(tp, picked), -1.0, 0.0);
  };

  Tape tape;
  Tensor loss = run(&tape);
  tape.backward(loss);
  auto f = [&] { return run(nullptr).value(); };
  for (Tensor* p : {&w1, &b1, &w2, &b2}) {
    CHECK(oracle::max_rel_err(p->grad(), oracle::finite_diff(*p, f)) < 1e-4);
  }
}

TEST_CASE("finite differences across the op set") {
  for (uint64_t seed = 1; seed <= 100; ++seed) {
    Tensor a = random_tensor({3, 6}, seed * 11);
    Tensor b = random_tensor({3, 6}, seed * 11 + 1);
    Tensor bias = random_tensor({6}, seed * 11 + 2);
    Tensor gam = random_tensor({6}, seed * 11 + 3, true, 0.3);
    Tensor bet = random_tensor({6}, seed * 11 + 4, true, 0.3);
    Tensor table = random_tensor({5, 4}, seed * 11 + 5);
    Tensor u = random_tensor({2, 6}, seed * 11 + 6);

    auto graph = [&](Tape* tp) {
      Tensor t1 = mul(tp, sigmoid_op(tp, a), tanh_op(tp, b));
      Tensor t2 = add_bias(tp, t1, bias);
      Tensor t3 = layer_norm(tp, t2, gam, bet);
      Tensor t4 = relu(tp, slice_cols(tp, t3, 1, 4));
      Tensor t5 = concat_rows(tp, {t4, embedding(tp, table, {0, 2, 4})});
      Tensor t6 = logaddexp(tp, a, b);
      Tensor t7 = pairwise_sum(tp, t6, u);
      Tensor t8 = add(tp, sum_all(tp, t5), sum_all(tp, exp_op(tp, affine(tp, t7, 0.1, 0.0))));
      Tensor t9 = gather(tp, reshape(tp, t7, {6, 6}), {0, 7, 14});
      return add(tp, t8, sum_all(tp, t9));
    };

    Tape tape;
    tape.backward(graph(&tape));
    auto f = [&] { return graph(nullptr).value(); };
    for (Tensor* p : {&a, &b, &bias, &gam, &bet, &table, &u}) {
      CHECK(oracle::max_rel_err(p->grad(), oracle::finite_diff(*p, f)) < 1e-4);
    }
  }
}

TEST_CASE("backward is deterministic and replayable") {
  auto run_once = [](uint64_t seed) {
    Tensor a = random_tensor({4, 4}, seed);
    Tensor b = random_tensor({4, 4}, seed + 1);
    Tape tape;
    Tensor loss =
        sum_all(&tape, relu(&tape, matmul(&tape, a, matmul(&tape, a, b))));
    tape.backward(loss);
    return std::make_pair(a.grad(), b.grad());
  };
  auto [ga1, gb1] = run_once(99);
  auto [ga2, gb2] = run_once(99);
  CHECK(ga1 == ga2);  // bit-identical
  CHECK(gb1 == gb2);

  // Same graph, fresh tape, grads accumulate to exactly twice the value.
  Tensor a = random_tensor({4, 4}, 99);
  Tensor b = random_tensor({4, 4}, 100);
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    Tensor loss = sum_all(&tape, matmul(&tape, a, b));
    tape.backward(loss);
  }
  Tape tape;
  Tensor loss = sum_all(&tape, matmul(&tape, a, b));
  GradMap one;
  tape.backward(loss, one);
  const std::vector<double>* g1 = one.find(a);
  REQUIRE(g1 != nullptr);
  for (size_t i = 0; i < g1->size(); ++i) {
    CHECK(std::abs(a.grad()[i] - 2.0 * (*g1)[i]) < 1e-12);
  }
}

TEST_CASE("tape records in topological order") {
  Tensor a = random_tensor({2, 2}, 5);
  Tape tape;
  Tensor h = matmul(&tape, a, a);
  Tensor out = sum_all(&tape, add(&tape, h, h));
  (void)out;
  // Every node's output must appear after the nodes producing its inputs;
  // since recording is eager, creation ids are ascending through the tape.
  uint64_t last = 0;
  for (const auto& node : tape.nodes()) {
    CHECK(node.output->id >= last);
    last = node.output->id;
  }
}

TEST_CASE("gradmap merge and fold are order-stable") {
  Tensor w = random_tensor({3, 3}, 42);
  GradMap total;
  for (int u = 0; u < 3; ++u) {
    Tape tape;
    Tensor loss = sum_all(&tape, matmul(&tape, random_tensor({2, 3}, 50 + u, false), w));
    GradMap per;
    tape.backward(loss, per, 0.5);
    total.merge_from(per);
  }
  total.fold_into_grads();
  CHECK(w.has_grad());
}

TEST_CASE("dropout mask is seeded and scaled") {
  Tensor m1 = dropout_mask({10, 10}, 0.3, 777);
  Tensor m2 = dropout_mask({10, 10}, 0.3, 777);
  CHECK(m1.data() == m2.data());
  for (double v : m1.data()) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.7)));
  }
  Tensor full = dropout_mask({4}, 0.0, 1);
  CHECK(full.data() == std::vector<double>{1, 1, 1, 1});
  CHECK_THROWS_AS(dropout_mask({2}, 1.0, 1), ContractError);

  // The mask participates as a constant factor.
  Tensor x = random_tensor({10, 10}, 11);
  Tape tape;
  Tensor loss = sum_all(&tape, mul(&tape, x, m1));
  tape.backward(loss);
  auto f = [&] { return sum_all(nullptr, mul(nullptr, x, m1)).value(); };
  CHECK(oracle::max_rel_err(x.grad(), oracle::finite_diff(x, f)) < 1e-6);
}

TEST_CASE("sliced matmul matches explicit slicing bit for bit") {
  Tensor a = random_tensor({5, 8}, 61, false);
  Tensor w = random_tensor({8, 12}, 62, false);
  for (int c : {1, 5, 12}) {
    Tensor via_slice = matmul(nullptr, a, slice_cols(nullptr, w, 0, c));
    Tensor via_view = matmul_cols(nullptr, a, w, c);
    CHECK(via_slice.data() == via_view.data());
  }
  Tensor h = random_tensor({5, 6}, 63, false);
  Tensor w2 = random_tensor({8, 3}, 64, false);
  // First 6 rows of w2's 8.
  std::vector<double> sub(w2.data().begin(), w2.data().begin() + 18);
  Tensor w2_cut = Tensor::from_data({6, 3}, sub);
  CHECK(matmul_rows(nullptr, h, w2, 6).data() ==
        matmul(nullptr, h, w2_cut).data());
}

TEST_CASE("kernel variants are bit-identical") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist;
  for (int trial = 0; trial < 6; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 40);
    const int k = 1 + static_cast<int>(rng() % 40);
    const int n = 1 + static_cast<int>(rng() % 40);
    std::vector<double> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n);
    for (double& x : a) x = dist(rng);
    for (double& x : b) x = dist(rng);
    std::vector<double> c1(static_cast<size_t>(m) * n, 0.5);
    std::vector<double> c2 = c1;
    kernels::gemm_serial(a.data(), k, b.data(), n, c1.data(), n, m, k, n, true);
    kernels::gemm_omp(a.data(), k, b.data(), n, c2.data(), n, m, k, n, true);
    CHECK(c1 == c2);

    std::vector<double> d1(static_cast<size_t>(k) * n, 0.0), d2 = d1;
    std::vector<double> g(static_cast<size_t>(m) * n);
    for (double& x : g) x = dist(rng);
    kernels::gemm_tn_serial(a.data(), k, g.data(), n, d1.data(), n, m, k, n);
    kernels::gemm_tn_omp(a.data(), k, g.data(), n, d2.data(), n, m, k, n);
    CHECK(d1 == d2);

    std::vector<double> e1(static_cast<size_t>(m) * k, 0.0), e2 = e1;
    kernels::gemm_nt_serial(g.data(), n, b.data(), n, e1.data(), k, m, k, n);
    kernels::gemm_nt_omp(g.data(), n, b.data(), n, e2.data(), k, m, k, n);
    CHECK(e1 == e2);
  }
}
