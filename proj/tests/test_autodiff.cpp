#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ndtpr/autodiff.hpp"

using namespace ndtpr;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("softmax of uniform logits", "[autodiff]") {
  Tape tape;
  const Var y = tape.softmax(tape.input(Tensor({3}, {0, 0, 0})));
  for (double v : tape.val(y).data) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and stay in (0,1)", "[autodiff]") {
  Rng rng(5);
  Tape tape;
  const Var y = tape.softmax(tape.input(random_tensor(rng, {7, 11}, -30, 30)));
  const Tensor& t = tape.val(y);
  for (int i = 0; i < 7; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 11; ++j) {
      CHECK(t(i, j) > 0.0);
      CHECK(t(i, j) < 1.0);
      sum += t(i, j);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("layernorm of a constant vector is zero", "[autodiff]") {
  Tape tape;
  const Var y = tape.layernorm(tape.input(Tensor({4}, {2.5, 2.5, 2.5, 2.5})));
  for (double v : tape.val(y).data) CHECK(v == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("matmul identity", "[autodiff]") {
  Rng rng(6);
  const Tensor x = random_tensor(rng, {3, 3});
  Tensor eye({3, 3});
  eye(0, 0) = eye(1, 1) = eye(2, 2) = 1.0;
  Tape tape;
  const Var y = tape.matmul(tape.input(eye), tape.input(x));
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    CHECK(tape.val(y).data[i] == Catch::Approx(x.data[i]).margin(1e-15));
  }
}

TEST_CASE("matmul rejects shape mismatch with both shapes named", "[autodiff]") {
  Tape tape;
  const Var a = tape.input(Tensor({2, 3}));
  const Var b = tape.input(Tensor({4, 5}));
  CHECK_THROWS_WITH(tape.matmul(a, b), "matmul: incompatible shapes [2,3] x [4,5]");
}

TEST_CASE("backward of sum of squares", "[autodiff]") {
  Tape tape;
  const Var x = tape.input(Tensor({3}, {1, 2, 3}));
  const Var loss = tape.sum(tape.mul(x, x));
  tape.backward(loss);
  CHECK(tape.val(loss).data[0] == Catch::Approx(14.0));
  const Tensor& g = tape.grad(x);
  CHECK(g.data[0] == Catch::Approx(2.0));
  CHECK(g.data[1] == Catch::Approx(4.0));
  CHECK(g.data[2] == Catch::Approx(6.0));
}

TEST_CASE("backward requires scalar loss and runs once", "[autodiff]") {
  Tape tape;
  const Var x = tape.input(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(tape.backward(x), Error);

  Tape tape2;
  const Var y = tape2.sum(tape2.input(Tensor({2}, {1, 2})));
  tape2.backward(y);
  CHECK_THROWS_AS(tape2.backward(y), Error);
}

TEST_CASE("grad_check passes for identity and matmul-sum", "[autodiff]") {
  Rng rng(7);
  const double err_id = grad_check(
      [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); },
      {random_tensor(rng, {5})});
  CHECK(err_id < 1e-10);

  const double err_mm = grad_check(
      [](Tape& t, const std::vector<Var>& v) { return t.sum(t.matmul(v[0], v[1])); },
      {random_tensor(rng, {4, 3}), random_tensor(rng, {3, 5})});
  CHECK(err_mm < 1e-4);
}

TEST_CASE("every op passes grad_check over five seeds", "[autodiff]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor(rng, {4, 6});
    const Tensor b = random_tensor(rng, {4, 6});
    const Tensor row = random_tensor(rng, {6});
    const Tensor col4 = random_tensor(rng, {4});
    const Tensor w = random_tensor(rng, {6, 3});

    const auto check = [&](const char* name, auto&& fn, std::vector<Tensor> inputs) {
      const double err = grad_check(fn, std::move(inputs), 1e-5, 0, seed);
      INFO(name << " seed " << seed);
      CHECK(err < 1e-4);
    };

    check("matmul", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.matmul(v[0], v[1]));
    }, {a, w});
    check("matmul_tt", [](Tape& t, const std::vector<Var>& v) {
      const Var m = t.matmul(v[0], v[1], true, true);
      return t.sum(t.mul(m, m));
    }, {random_tensor(rng, {4, 6}), random_tensor(rng, {3, 4})});
    check("matmul_nt", [](Tape& t, const std::vector<Var>& v) {
      const Var m = t.matmul(v[0], v[1], false, true);
      return t.sum(t.mul(m, m));
    }, {a, b});
    check("add_broadcast", [](Tape& t, const std::vector<Var>& v) {
      const Var s = t.add(v[0], v[1]);
      return t.sum(t.mul(s, s));
    }, {a, row});
    check("sub", [](Tape& t, const std::vector<Var>& v) {
      const Var s = t.sub(v[0], v[1]);
      return t.sum(t.mul(s, s));
    }, {a, b});
    check("mul_broadcast", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(v[0], v[1]));
    }, {a, row});
    check("scale_rows", [](Tape& t, const std::vector<Var>& v) {
      const Var s = t.scale_rows(v[0], v[1]);
      return t.sum(t.mul(s, s));
    }, {a, col4});
    check("concat_slice_transpose", [](Tape& t, const std::vector<Var>& v) {
      const Var c = t.concat_cols({v[0], v[1]});
      const Var s = t.transpose(t.slice_cols(c, 3, 6));
      return t.sum(t.mul(s, s));
    }, {a, b});
    check("relu", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.relu(v[0]));
    }, {a});
    check("softmax", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(t.softmax(v[0]), v[1]));
    }, {a, b});
    check("layernorm", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(t.layernorm(v[0]), v[1]));
    }, {a, b});
    check("l2normalize", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(t.l2normalize(v[0]), v[1]));
    }, {a, b});
    check("sum_axis0", [](Tape& t, const std::vector<Var>& v) {
      const Var s = t.sum_axis0(v[0]);
      return t.sum(t.mul(s, s));
    }, {a});
    check("max_axis0", [](Tape& t, const std::vector<Var>& v) {
      const Var s = t.max_axis0(v[0]);
      return t.sum(t.mul(s, s));
    }, {a});
    check("mean_minmax", [](Tape& t, const std::vector<Var>& v) {
      return t.add(t.mean(v[0]), t.add(t.reduce_min(v[0]), t.reduce_max(v[0])));
    }, {a});
    check("sqrt", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.sqrt_op(t.affine(t.mul(v[0], v[0]), 1.0, 0.5)));
    }, {a});
    check("reshape_stack", [](Tape& t, const std::vector<Var>& v) {
      const Var flat = t.reshape(v[0], {24});
      const Var s1 = t.sum(flat);
      const Var s2 = t.reduce_max(flat);
      const Var st = t.stack_scalars({s1, s2});
      return t.sum(t.mul(st, st));
    }, {a});
    check("congruence3", [](Tape& t, const std::vector<Var>& v) {
      return t.sum(t.mul(t.congruence3(v[0], v[1]), v[2]));
    }, {random_tensor(rng, {5, 6}), random_tensor(rng, {3, 3}),
        random_tensor(rng, {5, 6})});

    Tensor run_mean({6}), run_var = Tensor::full({6}, 1.0);
    check("batchnorm_train", [&run_mean, &run_var](Tape& t, const std::vector<Var>& v) {
      const Var y = t.batchnorm(v[0], v[1], v[2], &run_mean, &run_var, true, false);
      return t.sum(t.mul(y, v[3]));
    }, {a, random_tensor(rng, {6}, 0.5, 1.5), row, b});
    Tensor run_mean2 = random_tensor(rng, {6});
    Tensor run_var2 = random_tensor(rng, {6}, 0.5, 2.0);
    check("batchnorm_eval", [&run_mean2, &run_var2](Tape& t, const std::vector<Var>& v) {
      const Var y = t.batchnorm(v[0], v[1], v[2], &run_mean2, &run_var2, false, false);
      return t.sum(t.mul(y, v[3]));
    }, {a, random_tensor(rng, {6}, 0.5, 1.5), row, b});

    check("softmax_sq_composite", [](Tape& t, const std::vector<Var>& v) {
      const Var d = t.sub(t.softmax(v[0]), v[1]);
      return t.sum(t.mul(d, d));
    }, {a, b});
  }
}

TEST_CASE("dropout is identity in eval mode and for p=0", "[autodiff]") {
  Rng rng(9);
  const Tensor x = random_tensor(rng, {8, 8});
  Tape tape(/*seed=*/3, /*step=*/1);
  const Var in = tape.input(x);
  const Var eval_out = tape.dropout(in, 0.5, /*train=*/false);
  CHECK(eval_out.id == in.id);  // exactly identity, no new node
  const Var p0 = tape.dropout(in, 0.0, /*train=*/true);
  CHECK(p0.id == in.id);
}

TEST_CASE("dropout masks are deterministic in (seed, step)", "[autodiff]") {
  Rng rng(10);
  const Tensor x = random_tensor(rng, {16, 16});
  const auto run = [&](std::uint64_t seed, std::uint64_t step) {
    Tape tape(seed, step);
    const Var y = tape.dropout(tape.input(x), 0.3, true);
    return tape.val(y).data;
  };
  CHECK(run(1, 0) == run(1, 0));
  CHECK(run(1, 0) != run(1, 1));
  CHECK(run(1, 0) != run(2, 0));

  // Inverted scaling: surviving entries are x/(1-p).
  const auto out = run(7, 0);
  int kept = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] != 0.0) {
      CHECK(out[i] == Catch::Approx(x.data[i] / 0.7));
      ++kept;
    }
  }
  CHECK(kept > 120);
  CHECK(kept < 230);
}

TEST_CASE("dropout gradient respects the mask", "[autodiff]") {
  Rng rng(11);
  Tensor x = random_tensor(rng, {6, 6});
  for (double& v : x.data) {
    if (v == 0.0) v = 0.5;
  }
  Tape tape(/*seed=*/5, /*step=*/2);
  const Var in = tape.input(x);
  const Var y = tape.dropout(in, 0.4, true);
  const Var loss = tape.sum(y);
  tape.backward(loss);
  const Tensor& g = tape.grad(in);
  const Tensor& yv = tape.val(y);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (yv.data[i] == 0.0) {
      CHECK(g.data[i] == 0.0);
    } else {
      CHECK(g.data[i] == Catch::Approx(1.0 / 0.6));
    }
  }
}

TEST_CASE("identical graphs and seeds are bitwise deterministic", "[autodiff]") {
  const auto run = [] {
    Rng rng(123);
    Tape tape(/*seed=*/9, /*step=*/4);
    const Var x = tape.input(random_tensor(rng, {10, 10}));
    const Var w = tape.input(random_tensor(rng, {10, 10}));
    Var h = tape.relu(tape.matmul(x, w));
    h = tape.dropout(h, 0.2, true);
    h = tape.softmax(h);
    const Var loss = tape.sum(tape.mul(h, h));
    tape.backward(loss);
    return std::make_pair(tape.val(loss).data[0], tape.grad(x).data);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
