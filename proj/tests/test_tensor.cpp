#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "ipa/rng.hpp"
#include "ipa/tensor.hpp"

using namespace ipa;

namespace {

std::vector<double> random_values(size_t n, uint64_t seed, double lo = -2.0,
                                  double hi = 2.0) {
  CounterRng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

}  // namespace

TEST_CASE("matmul identity and small product") {
  Graph<double> g;
  auto eye = g.constant({2, 2}, {1, 0, 0, 1});
  auto a = g.constant({2, 2}, {1, 2, 3, 4});
  auto p = matmul(eye, a);
  CHECK(p.values() == std::vector<double>{1, 2, 3, 4});

  auto r = matmul(g.constant({1, 2}, {1, 2}), g.constant({2, 1}, {3, 4}));
  CHECK(r.item() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Graph<double> g;
  auto a = g.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = g.constant({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("grad of sum(A*B) wrt A equals ones*B^T") {
  auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    return reduce_sum(matmul(in[0], in[1]));
  };
  std::vector<GradCheckInput<double>> in{{{2, 3}, random_values(6, 1)},
                                         {{3, 2}, random_values(6, 2)}};
  CHECK(grad_check<double>(f, in, 1e-5) <= 1e-6);

  // Closed form: dA = ones(2,2) * B^T.
  Graph<double> g;
  auto a = g.input({2, 3}, random_values(6, 3), true);
  auto b = g.constant({3, 2}, random_values(6, 4));
  auto y = reduce_sum(matmul(a, b));
  g.backward(y);
  auto da = g.grad(a);
  const auto& bv = b.values();
  for (int i = 0; i < 2; ++i)
    for (int k = 0; k < 3; ++k)
      CHECK(da[static_cast<size_t>(i * 3 + k)] ==
            doctest::Approx(bv[static_cast<size_t>(k * 2)] +
                            bv[static_cast<size_t>(k * 2 + 1)])
                .epsilon(1e-9));
}

TEST_CASE("batched matmul broadcasts a rank-2 operand") {
  Graph<double> g;
  auto a = g.constant({2, 1, 2}, {1, 2, 3, 4});
  auto b = g.constant({2, 2}, {1, 0, 0, 1});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1, 2});
  CHECK(c.values() == a.values());
}

TEST_CASE("log_softmax basics") {
  Graph<double> g;
  auto y = log_softmax(g.constant({2}, {0, 0}), 0);
  CHECK(y.values()[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-12));

  auto z = log_softmax(g.constant({2}, {1000, 0}), 0);
  CHECK(z.values()[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(z.values()[1] == doctest::Approx(-1000.0).epsilon(1e-9));

  auto r = log_softmax(g.constant({5}, random_values(5, 7)), 0);
  double s = 0;
  for (double v : r.values()) s += std::exp(v);
  CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm basics and gradient") {
  Graph<double> g;
  auto gain = g.constant({3}, {1, 1, 1});
  auto bias = g.constant({3}, {0, 0, 0});
  auto c = layer_norm(g.constant({1, 3}, {5, 5, 5}), gain, bias, 1e-5);
  for (double v : c.values()) CHECK(v == doctest::Approx(0.0));

  auto gain2 = g.constant({2}, {1, 1});
  auto bias2 = g.constant({2}, {0, 0});
  auto two = layer_norm(g.constant({1, 2}, {1, 3}), gain2, bias2, 1e-5);
  CHECK(two.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(two.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

  auto f = [](Graph<double>& gr, const std::vector<Tensor<double>>& in) {
    auto y = layer_norm(in[0], in[1], in[2], 1e-5);
    return reduce_sum(mul(y, y));
  };
  std::vector<GradCheckInput<double>> in{{{2, 4}, random_values(8, 11)},
                                         {{4}, random_values(4, 12, 0.5, 1.5)},
                                         {{4}, random_values(4, 13)}};
  CHECK(grad_check<double>(f, in, 1e-5) <= 1e-5);
}

TEST_CASE("backward analytic cases") {
  Graph<double> g;
  auto x = g.input({2}, {1, 2}, true);
  auto loss = reduce_sum(mul(x, x));
  g.backward(loss);
  CHECK(g.grad(x) == std::vector<double>{2, 4});

  // Constant seed has no grad path.
  Graph<double> g2;
  auto c = g2.constant({1}, {3});
  auto y = scale(c, 2.0);
  CHECK_THROWS_AS(g2.backward(y), std::invalid_argument);

  // Non-scalar seed.
  Graph<double> g3;
  auto v = g3.input({2}, {1, 2}, true);
  CHECK_THROWS_AS(g3.backward(v), std::invalid_argument);
}

TEST_CASE("backward twice is bit-identical") {
  Graph<double> g;
  auto x = g.input({3}, random_values(3, 21), true);
  auto y = reduce_sum(exp(mul(x, x)));
  g.backward(y);
  auto g1 = g.grad(x);
  g.backward(y);
  CHECK(g.grad(x) == g1);
}

TEST_CASE("composite matmul->log_softmax->pick gradient") {
  auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    auto lp = log_softmax(matmul(in[0], in[1]), -1);
    auto pick = slice(slice(lp, 0, 1, 1), 1, 2, 1);
    return reshape(pick, {1});
  };
  std::vector<GradCheckInput<double>> in{{{3, 4}, random_values(12, 31)},
                                         {{4, 4}, random_values(16, 32)}};
  CHECK(grad_check<double>(f, in, 1e-5) <= 1e-5);
}

TEST_CASE("every primitive passes finite differences at 64-bit") {
  using In = std::vector<GradCheckInput<double>>;
  const double tol = 1e-4;

  auto sq = [](Graph<double>& g, Tensor<double> t) {
    return reduce_sum(mul(t, t));
  };

  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, add(in[0], in[1]));
            },
            In{{{2, 3}, random_values(6, 41)}, {{3}, random_values(3, 42)}},
            1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, mul(in[0], in[1]));
            },
            In{{{2, 3}, random_values(6, 43)}, {{3}, random_values(3, 44)}},
            1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, scale(in[0], 1.7));
            },
            In{{{4}, random_values(4, 45)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, matmul(in[0], in[1]));
            },
            In{{{2, 2, 3}, random_values(12, 46)},
               {{2, 3, 2}, random_values(12, 47)}},
            1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, transpose(in[0]));
            },
            In{{{2, 3}, random_values(6, 48)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, reshape(in[0], {3, 2}));
            },
            In{{{2, 3}, random_values(6, 49)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, concat(std::vector<Tensor<double>>{in[0], in[1]}, 0));
            },
            In{{{1, 3}, random_values(3, 50)}, {{2, 3}, random_values(6, 51)}},
            1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, slice(in[0], 1, 1, 2));
            },
            In{{{2, 4}, random_values(8, 52)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return reduce_sum(in[0]);
            },
            In{{{2, 3}, random_values(6, 53)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, reduce_sum(in[0], 0, false));
            },
            In{{{3, 2}, random_values(6, 54)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, reduce_mean(in[0], 1, true));
            },
            In{{{3, 4}, random_values(12, 55)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return reduce_sum(exp(in[0]));
            },
            In{{{5}, random_values(5, 56)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return reduce_sum(log(in[0]));
            },
            In{{{5}, random_values(5, 57, 0.5, 2.0)}}, 1e-6) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, log_softmax(in[0], 1));
            },
            In{{{2, 4}, random_values(8, 58)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, embedding_lookup(in[0], {0, 2, 2}));
            },
            In{{{3, 4}, random_values(12, 59)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, dropout(in[0], 0.4, 99));
            },
            In{{{4, 4}, random_values(16, 60)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              std::vector<uint8_t> m(6, 0);
              m[1] = m[4] = 1;
              return sq(g, masked_fill(in[0], m, 0.5));
            },
            In{{{2, 3}, random_values(6, 61)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, logsumexp(in[0], 1, true));
            },
            In{{{3, 4}, random_values(12, 62)}}, 1e-5) <= tol);
  CHECK(grad_check<double>(
            [&](Graph<double>& g, const std::vector<Tensor<double>>& in) {
              return sq(g, relu(in[0]));
            },
            In{{{7}, {-1.5, -0.3, 0.2, 1.1, -2.0, 0.7, 1.9}}}, 1e-5) <= tol);
}

TEST_CASE("grad_check on sum of squares is near exact") {
  auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    return reduce_sum(mul(in[0], in[0]));
  };
  std::vector<GradCheckInput<double>> in{{{6}, random_values(6, 71)}};
  CHECK(grad_check<double>(f, in, 1e-5) <= 1e-8);
}

TEST_CASE("grad_check flags a deliberately wrong gradient rule") {
  // Custom op with a broken adjoint (factor 3 instead of 2 for x^2).
  auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    const Tensor<double>& x = in[0];
    std::vector<double> out(x.values());
    for (double& v : out) v = v * v;
    int32_t xid = x.id();
    auto bad = g.emit(x.shape(), std::move(out), {xid},
                      [xid](Graph<double>& gr, const Node<double>& n) {
                        auto& p = gr.node(xid);
                        if (!p.requires_grad || p.grad.empty()) return;
                        for (size_t i = 0; i < n.grad.size(); ++i)
                          p.grad[i] += n.grad[i] * 3.0 * p.values[i];
                      },
                      "bad_square");
    return reduce_sum(bad);
  };
  std::vector<GradCheckInput<double>> in{{{4}, random_values(4, 81, 0.5, 2.0)}};
  CHECK(grad_check<double>(f, in, 1e-5) > 1e-2);
}

TEST_CASE("grad_check rejects bad eps and propagates non-finite errors") {
  auto f = [](Graph<double>& g, const std::vector<Tensor<double>>& in) {
    return reduce_sum(log(in[0]));
  };
  std::vector<GradCheckInput<double>> in{{{2}, {0.5, 1.0}}};
  CHECK_THROWS_AS(grad_check<double>(f, in, 0.0), std::invalid_argument);
  // log of a negative value -> non-finite, surfaced immediately.
  std::vector<GradCheckInput<double>> bad{{{2}, {-0.5, 1.0}}};
  CHECK_THROWS_AS(grad_check<double>(f, bad, 1e-5), std::runtime_error);
}

TEST_CASE("dropout is seed deterministic and train-scaled") {
  Graph<double> g;
  auto x = g.constant({100}, std::vector<double>(100, 1.0));
  auto a = dropout(x, 0.5, 1234);
  auto b = dropout(x, 0.5, 1234);
  CHECK(a.values() == b.values());
  for (double v : a.values()) CHECK((v == 0.0 || v == 2.0));
}

TEST_CASE("tensors are rejected across graphs") {
  Graph<double> g1, g2;
  auto a = g1.constant({1}, {1.0});
  auto b = g2.constant({1}, {1.0});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
}
