#include <doctest.h>
#include <omp.h>

#include <cstdio>
#include <functional>

#include "core/rng.hpp"
#include "core/tape.hpp"
#include "fd_util.hpp"

using namespace pgns;

namespace {

Tensor<double> rand_tensor(int r, int c, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor<double> t(r, c);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Runs one graph-builder twice: once for the analytic gradient via backward,
// once inside a finite-difference loop over the flattened parameter vector.
void check_against_fd(const std::function<VarId(Tape<double>&, VarId)>& build, const Tensor<double>& p0,
                      double tol = 1e-5, double h = 1e-4) {
  ParamStore<double> store;
  store.add("p", p0);
  Tape<double> tape;
  VarId loss = build(tape, tape.param(store, "p"));
  auto grads = tape.backward(loss);
  REQUIRE(grads.count("p") == 1);

  auto eval = [&](const std::vector<double>& x) {
    ParamStore<double> s2;
    Tensor<double> p(p0.rows(), p0.cols(), x);
    s2.add("p", p);
    Tape<double> t2;
    return t2.val(build(t2, t2.param(s2, "p"))).value();
  };
  auto fdg = fd::grad(eval, p0.data, h);
  CHECK(fd::max_rel_err(grads["p"].data, fdg) < tol);
}

}  // namespace

TEST_CASE("backward: identity of a scalar parameter") {
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(1.7));
  Tape<double> tape;
  VarId p = tape.param(store, "p");
  auto grads = tape.backward(p);
  CHECK(grads["p"].value() == 1.0);
}

TEST_CASE("backward: sum(p*p) against finite differences") {
  Tensor<double> p0(1, 3, {1.0, 2.0, 3.0});
  check_against_fd([](Tape<double>& t, VarId p) { return t.sum(t.mul(p, p)); }, p0, 1e-6, 1e-5);
  // And the closed form.
  ParamStore<double> store;
  store.add("p", p0);
  Tape<double> tape;
  VarId p = tape.param(store, "p");
  auto grads = tape.backward(tape.sum(tape.mul(p, p)));
  CHECK(grads["p"].data[0] == doctest::Approx(2.0));
  CHECK(grads["p"].data[1] == doctest::Approx(4.0));
  CHECK(grads["p"].data[2] == doctest::Approx(6.0));
}

TEST_CASE("backward: unreachable parameter maps to zero") {
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(2.0));
  store.add("q", Tensor<double>::scalar(5.0));
  Tape<double> tape;
  VarId p = tape.param(store, "p");
  VarId q = tape.param(store, "q");
  (void)q;
  auto grads = tape.backward(tape.square(p));
  REQUIRE(grads.count("q") == 1);
  CHECK(grads["q"].value() == 0.0);
  CHECK(grads["p"].value() == doctest::Approx(4.0));
}

TEST_CASE("backward: non-scalar loss rejected") {
  ParamStore<double> store;
  store.add("p", Tensor<double>(2, 2));
  Tape<double> tape;
  VarId p = tape.param(store, "p");
  CHECK_THROWS_AS((void)tape.backward(p), Error);
}

TEST_CASE("backward: NaN diagnostic names the offending primitive") {
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(-1.0));
  Tape<double> tape;
  VarId p = tape.param(store, "p");
  VarId bad = tape.log_op(p);  // log of a negative value
  VarId loss = tape.sum(bad);
  try {
    (void)tape.backward(loss);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
}

TEST_CASE("primitive gradients match central finite differences") {
  Rng rng(99, 1);
  using B = std::function<VarId(Tape<double>&, VarId)>;
  struct Case {
    const char* name;
    B build;
    double lo, hi;
  };
  // Each case maps a {3,4} parameter through one primitive (plus a fixed
  // random cotangent via mul+sum) so every element gets a distinct gradient.
  Tensor<double> cot(3, 4);
  for (auto& v : cot.data) v = rng.uniform(0.3, 1.7);
  auto weighted_sum = [cot](Tape<double>& t, VarId x) { return t.sum(t.mul(x, t.constant(cot))); };

  std::vector<Case> cases = {
      {"add", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.add(p, t.constant(cot))); }, -2, 2},
      {"sub", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.sub(t.constant(cot), p)); }, -2, 2},
      {"mul", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.mul(p, t.constant(cot))); }, -2, 2},
      {"div_num", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.div(p, t.constant(cot))); }, -2, 2},
      {"div_den", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.div(t.constant(cot), p)); }, 0.4, 2},
      {"neg", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.neg(p)); }, -2, 2},
      {"scale", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.scale(p, -1.37)); }, -2, 2},
      {"add_scalar", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.add_scalar(p, 0.4)); }, -2, 2},
      {"sigmoid", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.sigmoid_op(p)); }, -2, 2},
      {"softplus_b1", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.softplus_op(p, 1.0)); }, -2, 2},
      {"softplus_b100", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.softplus_op(p, 100.0)); }, 0.05, 2},
      {"exp", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.exp_op(p)); }, -2, 2},
      {"log", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.log_op(p)); }, 0.4, 2},
      {"abs", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.abs_op(p)); }, 0.1, 2},
      {"square", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.square(p)); }, -2, 2},
      {"sqrt", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.sqrt_op(p)); }, 0.4, 2},
      {"sin", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.sin_op(p)); }, -2, 2},
      {"cos", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.cos_op(p)); }, -2, 2},
      {"relu", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.relu(p)); }, 0.1, 2},
      {"clamp_min", [&](Tape<double>& t, VarId p) { return weighted_sum(t, t.clamp_min(p, 0.6)); }, 0.8, 2},
      {"sum", [&](Tape<double>& t, VarId p) { return t.sum(p); }, -2, 2},
      {"mean", [&](Tape<double>& t, VarId p) { return t.mean(p); }, -2, 2},
      {"row_sum", [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.row_sum(p))); }, -2, 2},
      {"row_mean", [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.row_mean(p))); }, -2, 2},
      {"row_norm", [&](Tape<double>& t, VarId p) { return t.sum(t.row_norm(p)); }, 0.3, 2},
      {"slice_pad",
       [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.pad_cols(t.slice_cols(p, 1, 2), 1, 1))); }, -2, 2},
      {"reshape", [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.reshape(p, 4, 3))); }, -2, 2},
      {"seg_sum", [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.seg_sum_rows(p, 3))); }, -2, 2},
      {"cumprod", [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.cumprod_exclusive(p))); }, 0.3, 1.4},
      {"gather",
       [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.gather_rows(p, {0, 2, 1, 2}))); }, -2, 2},
      {"concat",
       [&](Tape<double>& t, VarId p) { return t.sum(t.square(t.concat_cols({p, t.square(p), p}))); }, -2, 2},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    check_against_fd(c.build, rand_tensor(3, 4, rng, c.lo, c.hi));
  }
}

TEST_CASE("matmul gradients, all transpose combinations") {
  Rng rng(7, 2);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      CAPTURE(ta);
      CAPTURE(tb);
      // p plays A (and also feeds B through a constant) so both slots get
      // checked with distinct shapes.
      Tensor<double> b0 = rand_tensor(tb ? 5 : 4, tb ? 4 : 5, rng);
      check_against_fd(
          [=](Tape<double>& t, VarId p) {
            VarId b = t.constant(b0);
            return t.sum(t.square(t.matmul(p, b, ta, tb)));
          },
          rand_tensor(ta ? 4 : 3, ta ? 3 : 4, rng));
      Tensor<double> a0 = rand_tensor(ta ? 4 : 3, ta ? 3 : 4, rng);
      check_against_fd(
          [=](Tape<double>& t, VarId p) {
            VarId a = t.constant(a0);
            return t.sum(t.square(t.matmul(a, p, ta, tb)));
          },
          rand_tensor(tb ? 5 : 4, tb ? 4 : 5, rng));
    }
  }
}

TEST_CASE("broadcast ops: row/col vector gradients") {
  Rng rng(13, 3);
  Tensor<double> m0 = rand_tensor(3, 4, rng);
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.add_rowvec(t.constant(m0), p))); },
      rand_tensor(1, 4, rng));
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.add_colvec(t.constant(m0), p))); },
      rand_tensor(3, 1, rng));
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.mul_colvec(t.constant(m0), p))); },
      rand_tensor(3, 1, rng));
  Tensor<double> col0 = rand_tensor(3, 1, rng);
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.mul_colvec(p, t.constant(col0)))); }, m0);
  // scale_var: both the tensor and the scalar side.
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.scale_var(t.constant(m0), p))); },
      Tensor<double>::scalar(0.8));
  check_against_fd(
      [=](Tape<double>& t, VarId p) { return t.sum(t.square(t.scale_var(p, t.constant(Tensor<double>::scalar(0.8))))); },
      m0);
}

TEST_CASE("bilerp gradient w.r.t. pixel coordinates") {
  Tensor<double> img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) img.at(y, x) = std::sin(0.4 * x) + 0.5 * std::cos(0.3 * y);
  Rng rng(5, 4);
  Tensor<double> uv(6, 2);
  for (int r = 0; r < 6; ++r) {
    // Keep away from texel-cell boundaries so the FD step stays in one cell.
    uv.at(r, 0) = 1.0 + int(rng.below(13)) + 0.37;
    uv.at(r, 1) = 1.0 + int(rng.below(13)) + 0.63;
  }
  check_against_fd(
      [&img](Tape<double>& t, VarId p) { return t.sum(t.square(t.bilerp(p, &img))); }, uv, 1e-5, 1e-5);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(21, 5);
  Tensor<double> p0 = rand_tensor(2, 3, rng);
  auto run = [&](double a, double b) {
    ParamStore<double> store;
    store.add("p", p0);
    Tape<double> t;
    VarId p = t.param(store, "p");
    VarId l1 = t.sum(t.square(p));
    VarId l2 = t.sum(t.sin_op(p));
    VarId loss = t.add(t.scale(l1, a), t.scale(l2, b));
    return t.backward(loss)["p"];
  };
  auto g1 = run(1, 0), g2 = run(0, 1), gc = run(2.5, -1.25);
  for (size_t i = 0; i < g1.size(); ++i)
    CHECK(gc.data[i] == doctest::Approx(2.5 * g1.data[i] - 1.25 * g2.data[i]).epsilon(1e-12));
}

TEST_CASE("determinism: identical seeds give bitwise-identical gradients") {
  auto run = [] {
    Rng rng(42, 6);
    Tensor<double> p0 = rand_tensor(8, 5, rng);
    Tensor<double> w0 = rand_tensor(5, 7, rng);
    ParamStore<double> store;
    store.add("p", p0);
    store.add("w", w0);
    Tape<double> t;
    VarId h = t.softplus_op(t.matmul(t.param(store, "p"), t.param(store, "w")), 10.0);
    VarId loss = t.mean(t.square(h));
    auto g = t.backward(loss);
    return std::make_pair(t.val(loss).value(), g);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  for (auto& [k, v] : g1) {
    for (size_t i = 0; i < v.size(); ++i) CHECK(v.data[i] == g2[k].data[i]);
  }
}

TEST_CASE("parallel matmul blocks are bitwise stable across thread counts") {
  Rng rng(3, 7);
  Tensor<double> a = rand_tensor(512, 300, rng);
  Tensor<double> b = rand_tensor(300, 256, rng);
  Tensor<double> c1(512, 256), c2(512, 256);
  int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  matmul_block(c1, a, b, false, false, false);
  omp_set_num_threads(2);
  matmul_block(c2, a, b, false, false, false);
  omp_set_num_threads(saved);
  for (size_t i = 0; i < c1.size(); ++i) REQUIRE(c1.data[i] == c2.data[i]);
}

TEST_CASE("differentiable spatial gradient: linear field") {
  Tape<double> t;
  Tensor<double> x0(4, 3, {0.1, 0.2, 0.3, -0.5, 0.4, 0.0, 1.0, -1.0, 0.5, 0.0, 0.0, 0.0});
  Tensor<double> v0(3, 1, {0.6, 0.8, 0.0});  // unit vector
  VarId x = t.constant(x0);
  VarId f = t.matmul(x, t.constant(v0));
  VarId g = t.gradient(f, x);
  for (int r = 0; r < 4; ++r) {
    CHECK(t.val(g).at(r, 0) == doctest::Approx(0.6));
    CHECK(t.val(g).at(r, 1) == doctest::Approx(0.8));
    CHECK(t.val(g).at(r, 2) == doctest::Approx(0.0));
  }
}

TEST_CASE("differentiable spatial gradient: quadratic field against FD") {
  Tape<double> t;
  Tensor<double> x0(1, 3, {1.0, 0.0, 0.0});
  VarId x = t.constant(x0);
  VarId f = t.row_sum(t.square(x));  // ||x||^2
  VarId g = t.gradient(f, x);
  CHECK(t.val(g).at(0, 0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(t.val(g).at(0, 1) == doctest::Approx(0.0));
  CHECK(t.val(g).at(0, 2) == doctest::Approx(0.0));
}

TEST_CASE("gradient() fails for a variable from another tape") {
  Tape<double> t1, t2;
  VarId x = t2.constant(Tensor<double>(2, 3));
  VarId y = t1.constant(Tensor<double>::scalar(1.0));
  (void)x;
  CHECK_THROWS_AS((void)t1.gradient(y, VarId(55)), Error);
}

TEST_CASE("eikonal of a unit linear field is zero with zero parameter gradient") {
  ParamStore<double> store;
  store.add("v", Tensor<double>(3, 1, {0.0, 1.0, 0.0}));
  Tape<double> t;
  Rng rng(11, 8);
  VarId x = t.constant(rand_tensor(16, 3, rng, -1, 1));
  VarId f = t.matmul(x, t.param(store, "v"));
  VarId g = t.gradient(f, x);
  VarId eik = t.mean(t.square(t.add_scalar(t.row_norm(g), -1.0)));
  CHECK(t.val(eik).value() == doctest::Approx(0.0));
  auto grads = t.backward(eik);
  for (double gv : grads["v"].data) CHECK(gv == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("second order: parameter gradient of spatial-gradient norm against FD") {
  // f(x) = softplus(x W) . u ; checks that backward through gradient() agrees
  // with finite differences of the eikonal-style loss w.r.t. W.
  Rng rng(31, 9);
  Tensor<double> x0 = rand_tensor(5, 3, rng, -1, 1);
  Tensor<double> u0 = rand_tensor(4, 1, rng, 0.2, 1.0);
  check_against_fd(
      [=](Tape<double>& t, VarId w) {
        VarId x = t.constant(x0);
        VarId h = t.softplus_op(t.matmul(x, w), 2.0);
        VarId f = t.matmul(h, t.constant(u0));
        VarId g = t.gradient(f, x);
        return t.mean(t.square(t.add_scalar(t.row_norm(g), -1.0)));
      },
      rand_tensor(3, 4, rng, -0.8, 0.8), 2e-5, 1e-5);
}

TEST_CASE("optimizer: zero gradient leaves parameters unchanged") {
  ParamStore<double> store;
  store.add("p", Tensor<double>(2, 2, {1, 2, 3, 4}));
  std::map<std::string, Tensor<double>> grads;
  grads["p"] = Tensor<double>(2, 2);
  store.adam_step(grads, 1e-2);
  CHECK(store.step_count() == 1);
  CHECK(store.get("p").data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("optimizer: constant gradient drives a scalar against its sign") {
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(0.0));
  double prev = 0.0;
  for (int i = 0; i < 50; ++i) {
    std::map<std::string, Tensor<double>> grads;
    grads["p"] = Tensor<double>::scalar(3.0);
    store.adam_step(grads, 1e-2);
    double cur = store.get("p").value();
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("optimizer: quadratic bowl converges to the minimum") {
  ParamStore<double> store;
  store.add("p", Tensor<double>::scalar(0.0));
  int steps = 0;
  for (; steps < 2000; ++steps) {
    Tape<double> t;
    VarId p = t.param(store, "p");
    VarId loss = t.square(t.add_scalar(p, -3.0));
    auto grads = t.backward(loss);
    store.adam_step(grads, 1e-2);
    if (std::abs(store.get("p").value() - 3.0) < 1e-3) break;
  }
  CHECK(std::abs(store.get("p").value() - 3.0) < 1e-3);
  CHECK(steps < 2000);
}

TEST_CASE("optimizer: shape mismatch is fatal") {
  ParamStore<double> store;
  store.add("p", Tensor<double>(2, 2));
  std::map<std::string, Tensor<double>> grads;
  grads["p"] = Tensor<double>(1, 4);
  CHECK_THROWS_AS(store.adam_step(grads, 1e-2), Error);
}

TEST_CASE("checkpoint: save/load round trip is exact and resumes moments") {
  Rng rng(17, 10);
  ParamStore<double> a;
  a.add("w", rand_tensor(3, 5, rng));
  a.add("b", rand_tensor(1, 5, rng));
  // Run a few steps so moments are non-trivial.
  for (int i = 0; i < 3; ++i) {
    std::map<std::string, Tensor<double>> g;
    g["w"] = rand_tensor(3, 5, rng, -0.1, 0.1);
    g["b"] = rand_tensor(1, 5, rng, -0.1, 0.1);
    a.adam_step(g, 1e-3);
  }
  std::string path = "/tmp/pgns_test_ckpt.ckpt";
  a.save(path);

  ParamStore<double> b;
  b.add("w", Tensor<double>(3, 5));
  b.add("b", Tensor<double>(1, 5));
  b.load(path);
  CHECK(b.step_count() == a.step_count());
  CHECK(b.get("w").data == a.get("w").data);
  CHECK(b.get("b").data == a.get("b").data);

  // One more identical step on both must stay bitwise equal.
  std::map<std::string, Tensor<double>> g;
  g["w"] = rand_tensor(3, 5, rng, -0.1, 0.1);
  g["b"] = rand_tensor(1, 5, rng, -0.1, 0.1);
  a.adam_step(g, 1e-3);
  b.adam_step(g, 1e-3);
  CHECK(b.get("w").data == a.get("w").data);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: unknown parameter and bad magic rejected") {
  Rng rng(18, 11);
  ParamStore<double> a;
  a.add("w", rand_tensor(2, 2, rng));
  std::string path = "/tmp/pgns_test_ckpt2.ckpt";
  a.save(path);
  ParamStore<double> b;
  b.add("other", Tensor<double>(2, 2));
  CHECK_THROWS_AS(b.load(path), Error);
  std::remove(path.c_str());
}
