#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "zeros/tensor.hpp"

using namespace zeros;
using T = Tensor<double>;

TEST_CASE("matmul identity and hand arithmetic") {
  T eye = T::from({2, 2}, {1, 0, 0, 1});
  T b = T::from({2, 2}, {5, 6, 7, 8});
  T c = matmul(eye, b);
  for (Index i = 0; i < 4; ++i) CHECK(c.data()[i] == b.data()[i]);

  // [[1,2],[3,4]] * [[5,6],[7,8]]: row-by-column by hand.
  T a = T::from({2, 2}, {1, 2, 3, 4});
  T d = matmul(a, b);
  CHECK(d.at(0, 0) == doctest::Approx(19));
  CHECK(d.at(0, 1) == doctest::Approx(22));
  CHECK(d.at(1, 0) == doctest::Approx(43));
  CHECK(d.at(1, 1) == doctest::Approx(50));
}

TEST_CASE("matmul shape mismatch") {
  T a = T::zeros({2, 3});
  T b = T::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("map_unary point values") {
  CHECK(sigmoid(T::scalar(0.0)).value() == doctest::Approx(0.5));
  CHECK(exp(T::scalar(0.0)).value() == doctest::Approx(1.0));
  CHECK(tanh(T::scalar(1.0)).value() == doctest::Approx(std::tanh(1.0)).epsilon(1e-15));
  CHECK(tanh(T::scalar(1.0)).value() == doctest::Approx(0.761594).epsilon(1e-6));
}

TEST_CASE("map_unary domain violations") {
  CHECK_THROWS_AS(log(T::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(T::from({1}, {-1.0})), DomainError);
  CHECK_THROWS_AS(sqrt(T::from({1}, {-0.5})), DomainError);
  CHECK_THROWS_AS(reciprocal(T::from({2}, {1.0, 0.0})), DomainError);
  CHECK(sqrt(T::from({1}, {0.0})).at(0) == 0.0);
}

TEST_CASE("reduce sum/mean/max") {
  CHECK(reduce(T::from({3}, {1, 2, 3}), 0, Reduce::sum).value() == doctest::Approx(6));
  CHECK(reduce(T::from({2}, {2, 4}), 0, Reduce::mean).value() == doctest::Approx(3));
  auto [m, arg] = reduce_max_arg(T::from({3}, {-1, 5, 2}), 0);
  CHECK(m.value() == doctest::Approx(5));
  CHECK(arg[0] == 1);
  CHECK_THROWS_AS(reduce(T::zeros({3}), 1, Reduce::sum), ShapeError);
}

TEST_CASE("reduce over matrix axes") {
  T x = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
  T r1 = reduce(x, 1, Reduce::sum);
  CHECK(r1.at(0) == doctest::Approx(6));
  CHECK(r1.at(1) == doctest::Approx(15));
  T r0 = reduce(x, 0, Reduce::mean);
  CHECK(r0.at(0) == doctest::Approx(2.5));
  CHECK(r0.at(2) == doctest::Approx(4.5));
}

TEST_CASE("cumsum") {
  T a = cumsum(T::from({3}, {1, 1, 1}), 0);
  CHECK(a.at(0) == 1);
  CHECK(a.at(1) == 2);
  CHECK(a.at(2) == 3);
  T b = cumsum(T::from({3}, {1, -1, 2}), 0);
  CHECK(b.at(0) == 1);
  CHECK(b.at(1) == 0);
  CHECK(b.at(2) == 2);
  T e = cumsum(T::zeros({0}), 0);
  CHECK(e.numel() == 0);
  CHECK_THROWS_AS(cumsum(T::zeros({3}), 2), ShapeError);
}

TEST_CASE("cumsum last element equals reduce sum") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    T x = T::uniform({17}, rng, -1, 1);
    const double last = cumsum(x, 0).at(16);
    const double total = reduce(x, 0, Reduce::sum).value();
    CHECK(std::abs(last - total) <= 1e-12 * std::max(1.0, std::abs(total)));
  }
}

TEST_CASE("softmax_rows") {
  T u = softmax_rows(T::from({1, 2}, {0, 0}));
  CHECK(u.at(0, 0) == doctest::Approx(0.5));
  CHECK(u.at(0, 1) == doctest::Approx(0.5));

  // Closed form: exp(0)=1, exp(ln 3)=3.
  T p = softmax_rows(T::from({1, 2}, {0.0, std::log(3.0)}));
  CHECK(p.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  BoolMat mask{1, 2, {1, 0}};
  T m = softmax_rows(T::from({1, 2}, {0, 0}), &mask);
  CHECK(m.at(0, 0) == 1.0);
  CHECK(m.at(0, 1) == 0.0);

  BoolMat none{1, 2, {0, 0}};
  CHECK_THROWS_AS(softmax_rows(T::from({1, 2}, {0, 0}), &none), DomainError);
}

TEST_CASE("softmax rows sum to one for any finite logits") {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    T x = T::uniform({4, 9}, rng, -300, 300);
    T p = softmax_rows(x);
    for (Index r = 0; r < 4; ++r) {
      double s = 0;
      for (Index c = 0; c < 9; ++c) s += p.at(r, c);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm") {
  T gain = T::from({3}, {1, 1, 1});
  T bias = T::zeros({3});
  T y = layer_norm(T::from({1, 3}, {5, 5, 5}), gain, bias, 1e-5);
  for (Index j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(0.0));

  T g2 = T::from({2}, {1, 1});
  T b2 = T::zeros({2});
  T y2 = layer_norm(T::from({1, 2}, {1, -1}), g2, b2, 1e-12);
  CHECK(y2.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));

  T zg = T::zeros({2});
  T bb = T::from({2}, {3, -2});
  T y3 = layer_norm(T::from({1, 2}, {0.3, 0.9}), zg, bb, 1e-5);
  CHECK(y3.at(0, 0) == doctest::Approx(3.0));
  CHECK(y3.at(0, 1) == doctest::Approx(-2.0));

  CHECK_THROWS_AS(layer_norm(T::zeros({1, 2}), zg, bb, 0.0), ContractError);
}

TEST_CASE("backward basics") {
  T x = T::from({3}, {0.5, -1.0, 2.0}).set_requires_grad();
  backward(reduce(x, 0, Reduce::sum));
  for (Index i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));

  T y = T::from({2}, {1, 2}).set_requires_grad();
  backward(reduce(square(y), 0, Reduce::sum));
  CHECK(y.grad()[0] == doctest::Approx(2.0));
  CHECK(y.grad()[1] == doctest::Approx(4.0));

  T c = T::scalar(3.0).set_requires_grad();
  backward(mul_scalar_t(sigmoid(T::scalar(0.0)), c));
  CHECK(c.grad()[0] == doctest::Approx(0.5));

  T bad = T::from({2}, {1, 2}).set_requires_grad();
  CHECK_THROWS_AS(backward(add_scalar(bad, 1.0)), ContractError);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Rng rng(3);
    T x = T::uniform({4, 4}, rng, -1, 1).set_requires_grad();
    T y = T::uniform({4, 4}, rng, -1, 1);
    backward(reduce_all(square(matmul(tanh(x), y)), Reduce::sum));
    std::vector<double> g(x.grad().data(), x.grad().data() + x.numel());
    return g;
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("finite_diff_check on simple functions") {
  Rng rng(5);
  T x = T::uniform({6}, rng, -1, 1).set_requires_grad().set_name("x");
  auto quad = [&] { return reduce(square(x), 0, Reduce::sum); };
  auto rep = finite_diff_check<double>(quad, {x}, 1e-5, 1e-7);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err <= 1e-7);

  T y = T::uniform({4}, rng, -1, 1).set_requires_grad();
  auto constant = [&] { return mul_scalar(reduce(y, 0, Reduce::sum), 0.0); };
  auto rep2 = finite_diff_check<double>(constant, {y}, 1e-5, 1e-9);
  CHECK(rep2.pass);
  CHECK(rep2.max_rel_err == 0.0);
}

TEST_CASE("gradients of composed ops match central differences") {
  Rng rng(17);
  T a = T::uniform({3, 4}, rng, -1, 1).set_requires_grad().set_name("a");
  T w = T::uniform({4, 5}, rng, -1, 1).set_requires_grad().set_name("w");
  T g = T::uniform({5}, rng, 0.5, 1.5).set_requires_grad().set_name("g");
  T b = T::uniform({5}, rng, -0.5, 0.5).set_requires_grad().set_name("b");
  T v = T::uniform({3}, rng, -1, 1).set_requires_grad().set_name("v");
  T t = T::scalar(0.7).set_requires_grad().set_name("t");

  auto loss = [&] {
    T h = layer_norm(tanh(matmul(a, w)), g, b, 1e-5);
    T s = softmax_rows(h);
    T r = scale_rows(add_rowvec(s, b), v);
    T z = cumsum(mul(r, sigmoid(h)), 0);
    T q = rowwise_dot(z, add_scalar_t(h, t));
    return add_scalar_t(reduce_all(square(q), Reduce::mean), t);
  };
  auto rep = finite_diff_check<double>(loss, {a, w, g, b, v, t}, 1e-6, 1e-5);
  INFO("max rel err " << rep.max_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("gradients of scan, slicing and embedding ops") {
  Rng rng(23);
  T q = T::uniform({5, 3}, rng, -1, 1).set_requires_grad().set_name("q");
  T k = T::uniform({5, 3}, rng, -1, 1).set_requires_grad().set_name("k");
  T v = T::uniform({5, 4}, rng, -1, 1).set_requires_grad().set_name("v");
  auto scan_loss = [&] { return reduce_all(square(causal_linear_scan(q, k, v)), Reduce::sum); };
  auto rep = finite_diff_check<double>(scan_loss, {q, k, v}, 1e-6, 1e-6);
  INFO("max rel err " << rep.max_rel_err);
  CHECK(rep.pass);

  T table = T::uniform({7, 4}, rng, -1, 1).set_requires_grad().set_name("table");
  std::vector<Index> ids{3, 0, 6, 3};
  auto emb_loss = [&] {
    T e = embedding(table, ids);
    T s = slice_cols(e, 1, 2);
    T c = concat_cols(std::vector<T>{s, neg(s)});
    return reduce_all(square(matmul(transpose(c), e)), Reduce::sum);
  };
  auto rep2 = finite_diff_check<double>(emb_loss, {table}, 1e-6, 1e-6);
  INFO("max rel err " << rep2.max_rel_err);
  CHECK(rep2.pass);
}

TEST_CASE("cross_entropy gradient and values") {
  Rng rng(31);
  T logits = T::uniform({4, 6}, rng, -1, 1).set_requires_grad().set_name("logits");
  std::vector<Index> labels{1, 4, 0, 2};
  std::vector<std::uint8_t> mask{1, 1, 0, 1};
  auto loss = [&] { return cross_entropy(logits, labels, mask); };
  auto rep = finite_diff_check<double>(loss, {logits}, 1e-6, 1e-6);
  INFO("max rel err " << rep.max_rel_err);
  CHECK(rep.pass);

  // Uniform logits: mean NLL is ln(V) regardless of labels.
  T flat = T::zeros({3, 8});
  std::vector<Index> lab{0, 5, 7};
  std::vector<std::uint8_t> all{1, 1, 1};
  CHECK(cross_entropy(flat, lab, all).value() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

  std::vector<std::uint8_t> nada{0, 0, 0};
  CHECK(cross_entropy(flat, lab, nada).value() == 0.0);
}

TEST_CASE("non-finite outputs are rejected when checks are on") {
  T big = T::full({2}, 1e308);
  CHECK_THROWS_AS(add(big, big), NumericError);
  {
    FiniteCheckGuard off(false);
    T inf = add(big, big);
    CHECK(std::isinf(inf.at(0)));
  }
}

TEST_CASE("ops are bit-deterministic across reruns") {
  auto run = [] {
    Rng rng(42);
    T x = T::gaussian({8, 8}, rng, 1.0);
    T y = softmax_rows(matmul(x, transpose(x)));
    std::vector<double> out(y.data(), y.data() + y.numel());
    return out;
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}
