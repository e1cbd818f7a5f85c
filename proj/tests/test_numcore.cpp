#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "hmeta/checkpoint.hpp"
#include "hmeta/errors.hpp"
#include "hmeta/graph.hpp"
#include "hmeta/optim.hpp"
#include "hmeta/rng.hpp"
#include "hmeta/tensor.hpp"
#include "hmeta/tensor_ops.hpp"

#include "fd_check.hpp"

using namespace hmeta;

TEST_CASE("rng streams are deterministic and well ranged") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(sum / 20000.0 == doctest::Approx(0.5).epsilon(0.02));

  for (int i = 0; i < 5000; ++i) {
    const std::uint64_t k = r.uniform_int(7);
    CHECK(k < 7);
  }

  double mean = 0.0, m2 = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    mean += z;
    m2 += z * z;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.02);
  CHECK(m2 / n == doctest::Approx(1.0).epsilon(0.03));

  // child streams differ from the parent and from each other
  Rng base(123);
  Rng c0 = base.split(0);
  Rng c1 = base.split(1);
  CHECK(c0.next_u64() != c1.next_u64());
}

TEST_CASE("tensor basics") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);

  Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(0, 1) == 2.0);
  CHECK(m.shape_str() == "[2,2]");

  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), ShapeError);
  CHECK_THROWS_AS(m.reshaped({3, 3}), ShapeError);
  CHECK(m.reshaped({4}).shape() == std::vector<std::int64_t>{4});

  Tensor s = Tensor::scalar(2.5);
  CHECK(s.item() == 2.5);
  CHECK_THROWS_AS(m.item(), ShapeError);

  t.at(0, 0) = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul oracle values") {
  Tensor i2 = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});

  Tensor ii = ops::matmul(i2, i2);
  CHECK(ii.at(0, 0) == 1.0);
  CHECK(ii.at(0, 1) == 0.0);
  CHECK(ii.at(1, 0) == 0.0);
  CHECK(ii.at(1, 1) == 1.0);

  Tensor ai = ops::matmul(a, i2);
  for (int i = 0; i < 4; ++i) CHECK(ai[i] == a[i]);

  Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  Tensor c = ops::matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(19));
  CHECK(c.at(0, 1) == doctest::Approx(22));
  CHECK(c.at(1, 0) == doctest::Approx(43));
  CHECK(c.at(1, 1) == doctest::Approx(50));

  CHECK_THROWS_AS(ops::matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax oracle values and invariants") {
  Tensor u = ops::softmax(Tensor::row({1, 1, 1}));
  for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor v = ops::softmax(Tensor::row({0.0, std::log(2.0)}));
  CHECK(v[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));

  Tensor big = ops::softmax(Tensor::row({1000, 1000}));
  CHECK(big[0] == 0.5);
  CHECK(big[1] == 0.5);

  Rng r(3);
  Tensor x = Tensor::randn({4, 7}, r);
  Tensor y = ops::softmax(x);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += y.at(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  Tensor xs = x;
  for (double& e : xs.values()) e += 17.25;
  Tensor ys = ops::softmax(xs);
  for (int i = 0; i < 28; ++i) CHECK(std::abs(ys[i] - y[i]) <= 1e-12);
}

TEST_CASE("layer_norm oracle values and invariants") {
  Tensor g1 = Tensor::row({1, 1});
  Tensor b0 = Tensor::row({0, 0});

  Tensor c = ops::layer_norm(Tensor::row({4, 4}), g1, b0);
  CHECK(c[0] == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(c[1] == doctest::Approx(0.0).epsilon(1e-10));

  Tensor n = ops::layer_norm(Tensor::row({1, 3}), g1, b0);
  CHECK(n[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(n[1] == doctest::Approx(1.0).epsilon(1e-4));

  Tensor g0 = Tensor::row({0, 0});
  Tensor bc = Tensor::row({2.5, 2.5});
  Tensor k = ops::layer_norm(Tensor::row({-3, 9}), g0, bc);
  CHECK(k[0] == 2.5);
  CHECK(k[1] == 2.5);

  Rng r(11);
  Tensor x = Tensor::randn({6, 16}, r);
  Tensor gain = Tensor::full({16}, 1.0);
  Tensor bias = Tensor::zeros({16});
  Tensor y = ops::layer_norm(x, gain, bias);
  for (int i = 0; i < 6; ++i) {
    double mu = 0.0, var = 0.0;
    for (int j = 0; j < 16; ++j) mu += y.at(i, j);
    mu /= 16;
    for (int j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    var /= 16;
    CHECK(std::abs(mu) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward analytic oracles") {
  ParamRegistry reg;
  Rng r(5);
  Parameter& w = reg.create_init("w", Tensor::randn({3, 2}, r));

  SUBCASE("sum of W x gives outer structure") {
    Tensor xv = Tensor::matrix({{2.0}, {-1.5}});
    reg.zero_grads();
    Graph g;
    Val loss = g.sum_all(g.matmul(g.leaf(w), g.constant(xv)));
    g.backward(loss);
    for (int i = 0; i < 3; ++i) {
      CHECK(w.grad.at(i, 0) == doctest::Approx(2.0));
      CHECK(w.grad.at(i, 1) == doctest::Approx(-1.5));
    }
  }

  SUBCASE("constant loss gives zero gradients") {
    reg.zero_grads();
    Graph g;
    Val loss = g.scale(g.sum_all(g.leaf(w)), 0.0);
    g.backward(loss);
    for (double v : w.grad.values()) CHECK(v == 0.0);
  }

  SUBCASE("squared norm gives 2W") {
    reg.zero_grads();
    Graph g;
    Val lw = g.leaf(w);
    g.backward(g.sum_all(g.mul(lw, lw)));
    for (std::int64_t i = 0; i < w.value.size(); ++i)
      CHECK(w.grad[i] == doctest::Approx(2.0 * w.value[i]));
  }

  SUBCASE("non-scalar loss rejected") {
    Graph g;
    CHECK_THROWS_AS(g.backward(g.leaf(w)), ContractError);
  }

  SUBCASE("repeated backward replays identically") {
    reg.zero_grads();
    Graph g;
    Val lw = g.leaf(w);
    Val loss = g.mean_all(g.gelu(g.mul(lw, lw)));
    g.backward(loss);
    Tensor first = w.grad;
    reg.zero_grads();
    g.backward(loss);
    for (std::int64_t i = 0; i < first.size(); ++i)
      CHECK(w.grad[i] == first[i]);
  }
}

TEST_CASE("finite differences per op") {
  using hmeta::testing::fd_check;
  Rng r(17);

  auto check = [&](const std::function<Val(Graph&)>& build, ParamRegistry& reg) {
    auto rep = fd_check(reg, build);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_err < 1e-4);
  };

  SUBCASE("elementwise chain") {
    ParamRegistry reg;
    Parameter& a = reg.create_init("a", Tensor::randn({4, 3}, r, 0.7));
    Parameter& b = reg.create_init("b", Tensor::randn({4, 3}, r, 0.7));
    check(
        [&](Graph& g) {
          Val la = g.leaf(a), lb = g.leaf(b);
          Val x = g.add(g.mul(la, lb), g.scale(lb, 0.3));
          Val y = g.sub(x, g.neg(la));
          return g.mean_all(g.add_scalar(y, 0.1));
        },
        reg);
  }

  SUBCASE("nonlinearities") {
    ParamRegistry reg;
    Parameter& a = reg.create_init("a", Tensor::randn({5, 4}, r, 0.8));
    check(
        [&](Graph& g) {
          Val la = g.leaf(a);
          Val y = g.gelu(la);
          y = g.add(y, g.tanh(la));
          y = g.add(y, g.sigmoid(la));
          y = g.add(y, g.exp(g.scale(la, 0.3)));
          return g.mean_all(y);
        },
        reg);
  }

  SUBCASE("min and clamp") {
    ParamRegistry reg;
    Parameter& a = reg.create_init("a", Tensor::randn({6, 2}, r));
    Parameter& b = reg.create_init("b", Tensor::randn({6, 2}, r));
    check(
        [&](Graph& g) {
          Val y = g.vmin(g.leaf(a), g.leaf(b));
          return g.mean_all(g.clamp(y, -0.9, 0.9));
        },
        reg);
  }

  SUBCASE("matmul and bias") {
    ParamRegistry reg;
    Parameter& w = reg.create_init("w", Tensor::randn({3, 4}, r, 0.5));
    Parameter& b = reg.create_init("b", Tensor::randn({4}, r, 0.5));
    Tensor xv = Tensor::randn({5, 3}, r);
    check(
        [&](Graph& g) {
          Val y = g.add_bias(g.matmul(g.constant(xv), g.leaf(w)), g.leaf(b));
          return g.mean_all(g.mul(y, y));
        },
        reg);
  }

  SUBCASE("batched matmuls") {
    ParamRegistry reg;
    Parameter& a = reg.create_init("a", Tensor::randn({2, 3, 4}, r, 0.5));
    Parameter& b = reg.create_init("b", Tensor::randn({2, 4, 3}, r, 0.5));
    check(
        [&](Graph& g) {
          Val la = g.leaf(a), lb = g.leaf(b);
          Val nn = g.bmm_nn(la, lb);                 // [2,3,3]
          Val nt = g.bmm_nt(la, g.reshape(lb, {2, 3, 4}));  // [2,3,3]
          return g.mean_all(g.mul(nn, nt));
        },
        reg);
  }

  SUBCASE("shape plumbing") {
    ParamRegistry reg;
    Parameter& a = reg.create_init("a", Tensor::randn({2, 3, 8}, r, 0.6));
    Parameter& v = reg.create_init("v", Tensor::randn({6}, r, 0.6));
    Tensor weight = Tensor::randn({2, 3, 8}, r);
    check(
        [&](Graph& g) {
          Val la = g.leaf(a);
          Val sh = g.split_heads(la, 2);      // [4,3,4]
          Val mh = g.merge_heads(sh, 2);      // [2,3,8]
          Val cat = g.concat_last(mh, la);    // [2,3,16]
          Val rows = g.concat_rows(cat, cat); // [4,3,16]
          Val last = g.take_last(rows);       // [4,16]
          Val bro = g.broadcast_row(g.leaf(v), 4);  // [4,6]
          Val both = g.concat_last(last, bro);
          Val w = g.constant(weight.reshaped({2 * 3 * 8}));
          (void)w;
          return g.add(g.mean_all(g.mul(both, both)),
                       g.mean_all(g.mul(la, g.constant(weight))));
        },
        reg);
  }

  SUBCASE("masked softmax and layer norm") {
    ParamRegistry reg;
    Parameter& s = reg.create_init("s", Tensor::randn({4, 3, 5}, r));
    Parameter& gn = reg.create_init("g", Tensor::randn({5}, r, 0.3));
    Parameter& bs = reg.create_init("b", Tensor::randn({5}, r, 0.3));
    Tensor mask = Tensor::zeros({2, 5});  // two heads per mask row
    mask.at(0, 1) = 1;
    mask.at(0, 3) = 1;
    mask.at(0, 4) = 1;
    for (int j = 0; j < 5; ++j) mask.at(1, j) = 1;
    Tensor weight = Tensor::randn({4, 3, 5}, r);
    check(
        [&](Graph& g) {
          Val sm = g.softmax_masked(g.leaf(s), g.constant(mask));
          Val ln = g.layer_norm(sm, g.leaf(gn), g.leaf(bs));
          return g.mean_all(g.mul(ln, g.constant(weight)));
        },
        reg);
  }

  SUBCASE("positional add and reductions") {
    ParamRegistry reg;
    Parameter& x = reg.create_init("x", Tensor::randn({2, 4, 6}, r));
    Tensor mask = Tensor::zeros({2, 4});
    mask.at(0, 2) = 1;
    mask.at(0, 3) = 1;
    for (int t = 0; t < 4; ++t) mask.at(1, t) = 1;
    Tensor table = Tensor::randn({4, 6}, r);
    check(
        [&](Graph& g) {
          Val y = g.add_positional(g.leaf(x), g.constant(mask), table);
          Val srow = g.sum_last(y);  // [2,4]
          return g.add(g.mean_all(g.mul(srow, srow)), g.scale(g.sum_all(y), 0.01));
        },
        reg);
  }
}

TEST_CASE("masked softmax zeroes masked keys exactly") {
  Graph g;
  Tensor scores = Tensor::zeros({1, 1, 4});
  scores[0] = 3.0;
  scores[1] = -2.0;
  scores[2] = 100.0;  // masked out, must not leak
  scores[3] = 1.0;
  Tensor mask = Tensor::zeros({1, 4});
  mask.at(0, 0) = 1;
  mask.at(0, 1) = 1;
  mask.at(0, 3) = 1;
  Val y = g.softmax_masked(g.constant(scores), g.constant(mask));
  const Tensor& v = g.value(y);
  CHECK(v[2] == 0.0);
  double s = v[0] + v[1] + v[3];
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  // matches a plain softmax over the surviving keys
  Tensor ref = ops::softmax(Tensor::row({3.0, -2.0, 1.0}));
  CHECK(v[0] == doctest::Approx(ref[0]).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(ref[1]).epsilon(1e-12));
  CHECK(v[3] == doctest::Approx(ref[2]).epsilon(1e-12));

  Tensor empty_mask = Tensor::zeros({1, 4});
  Graph g2;
  CHECK_THROWS_AS(
      g2.softmax_masked(g2.constant(scores), g2.constant(empty_mask)),
      ContractError);
}

TEST_CASE("adam oracle behavior") {
  ParamRegistry reg;
  Parameter& w = reg.create_init("w", Tensor::row({1.0, -2.0, 0.5}));
  OptimState st = make_optim_state(reg, 0.01);

  SUBCASE("zero gradient leaves parameters unchanged") {
    reg.zero_grads();
    adam_step(reg, st);
    CHECK(w.value[0] == 1.0);
    CHECK(w.value[1] == -2.0);
    CHECK(w.value[2] == 0.5);
  }

  SUBCASE("first step moves by about lr in the gradient sign direction") {
    reg.zero_grads();
    w.grad[0] = 0.7;
    w.grad[1] = -3.0;
    w.grad[2] = 1e-3;
    adam_step(reg, st);
    // after bias correction the first step is lr * g/sqrt(g^2) = lr * sign(g)
    CHECK(w.value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-4));
    CHECK(w.value[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-4));
    CHECK(w.value[2] == doctest::Approx(0.5 - 0.01).epsilon(1e-2));
  }

  SUBCASE("constant gradient moves monotonically") {
    double prev = w.value[0];
    for (int i = 0; i < 2; ++i) {
      reg.zero_grads();
      w.grad.fill(1.0);
      adam_step(reg, st);
      CHECK(w.value[0] < prev);
      prev = w.value[0];
    }
  }

  SUBCASE("non-finite result aborts with the parameter named") {
    reg.zero_grads();
    w.grad[1] = std::nan("");
    CHECK_THROWS_WITH_AS(adam_step(reg, st),
                         doctest::Contains("parameter 'w'"), NumericError);
  }
}

TEST_CASE("gradient clipping and norms") {
  ParamRegistry reg;
  Parameter& a = reg.create_init("a", Tensor::row({3.0, 0.0}));
  Parameter& b = reg.create_init("b", Tensor::row({0.0, 4.0}));
  a.grad[0] = 3.0;
  b.grad[1] = 4.0;
  CHECK(reg.grad_norm() == doctest::Approx(5.0));
  reg.clip_grad_norm(1.0);
  CHECK(reg.grad_norm() == doctest::Approx(1.0));
  CHECK(a.grad[0] == doctest::Approx(0.6));
  CHECK(b.grad[1] == doctest::Approx(0.8));
  // under the cap nothing changes
  reg.clip_grad_norm(10.0);
  CHECK(a.grad[0] == doctest::Approx(0.6));
}

TEST_CASE("checkpoint round trip and validation") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "hmeta_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  ParamRegistry reg;
  Rng r(9);
  reg.create_init("enc.w", Tensor::randn({4, 3}, r));
  reg.create_init("enc.b", Tensor::randn({3}, r));
  save_checkpoint(path, reg);

  // mutate, reload, expect bitwise restoration
  Tensor w_orig = reg.all()[0]->value;
  reg.all()[0]->value.fill(0.0);
  load_checkpoint(path, reg);
  for (std::int64_t i = 0; i < w_orig.size(); ++i)
    CHECK(reg.all()[0]->value[i] == w_orig[i]);

  CHECK(fs::exists(path + ".json"));

  ParamRegistry other;
  other.create_init("enc.w", Tensor::zeros({4, 3}));
  other.create_init("different", Tensor::zeros({3}));
  CHECK_THROWS_AS(load_checkpoint(path, other), ConfigError);

  ParamRegistry fewer;
  fewer.create_init("enc.w", Tensor::zeros({4, 3}));
  CHECK_THROWS_AS(load_checkpoint(path, fewer), ConfigError);

  ParamRegistry wrong_shape;
  wrong_shape.create_init("enc.w", Tensor::zeros({4, 3}));
  wrong_shape.create_init("enc.b", Tensor::zeros({4}));
  CHECK_THROWS_AS(load_checkpoint(path, wrong_shape), ConfigError);

  // corrupt the magic
  {
    std::FILE* f = std::fopen(path.c_str(), "r+b");
    REQUIRE(f);
    std::fputc('X', f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path, reg), ConfigError);
  fs::remove_all(dir);
}
