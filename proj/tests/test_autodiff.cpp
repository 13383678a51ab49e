#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "conecraft/autodiff.hpp"

using namespace conecraft;

namespace {

Mat randn(int r, int c, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

// Central finite differences of a scalar function of one matrix input,
// compared coordinate-by-coordinate against the tape gradient.
template <typename Fn>
void check_grad(const Mat& x0, Fn fn, double h = 1e-6, double tol = 1e-6) {
  Tape t;
  Var x = t.leaf(x0, true);
  Var loss = fn(t, x);
  t.backward(loss);
  Mat g = t.grad(x);

  for (int i = 0; i < x0.rows(); ++i) {
    for (int j = 0; j < x0.cols(); ++j) {
      Mat xp = x0, xm = x0;
      xp(i, j) += h;
      xm(i, j) -= h;
      Tape tp, tm;
      double fp = tp.sval(fn(tp, tp.leaf(xp, false)));
      double fm = tm.sval(fn(tm, tm.leaf(xm, false)));
      double fd = (fp - fm) / (2 * h);
      REQUIRE_THAT(g(i, j), Catch::Matchers::WithinAbs(fd, tol) ||
                                Catch::Matchers::WithinRel(fd, 1e-4));
    }
  }
}

// sum of all entries as a scalar node, via ce-free ops
Var sum_all(Tape& t, Var m) {
  const Mat& v = t.val(m);
  Var ones_l = t.constant(Mat::Ones(1, v.rows()));
  Var ones_r = t.constant(Mat::Ones(v.cols(), 1));
  return t.matmul(t.matmul(ones_l, m), ones_r);
}

}  // namespace

TEST_CASE("matmul/add/scale/cmul gradients match finite differences") {
  Mat a = randn(3, 4, 1);
  check_grad(a, [](Tape& t, Var x) {
    Var b = t.constant(randn(4, 3, 2));
    Var y = t.matmul(x, b);                       // 3x3
    Var z = t.add(t.scale(y, 0.7), t.cmul(y, y));  // elementwise
    return sum_all(t, z);
  });
}

TEST_CASE("matmul_nt, slice_cols, hcat, row gradients") {
  Mat a = randn(4, 6, 3);
  check_grad(a, [](Tape& t, Var x) {
    Var l = t.slice_cols(x, 0, 3);
    Var r = t.slice_cols(x, 3, 3);
    Var s = t.matmul_nt(l, r);  // 4x4
    Var h = t.hcat({l, r});
    Var p = t.matmul_nt(h, h);
    return t.add(sum_all(t, s), t.row(sum_all(t, p), 0));
  });
}

TEST_CASE("gelu and rms_norm gradients") {
  Mat a = randn(3, 5, 4);
  check_grad(a, [](Tape& t, Var x) {
    Var g = t.constant(randn(1, 5, 5).array().abs().matrix() + 0.5 * Mat::Ones(1, 5));
    return sum_all(t, t.cmul(t.gelu(x), t.rms_norm(x, g)));
  });
}

TEST_CASE("rms_norm gain gradient") {
  Mat g0 = randn(1, 5, 6);
  check_grad(g0, [](Tape& t, Var g) {
    Var x = t.constant(randn(3, 5, 7));
    return sum_all(t, t.rms_norm(x, g));
  });
}

TEST_CASE("causal softmax rows sum to 1 and mask the future") {
  Tape t;
  Var s = t.leaf(randn(4, 4, 8), true);
  Var p = t.causal_softmax(s);
  const Mat& pv = t.val(p);
  for (int i = 0; i < 4; ++i) {
    REQUIRE_THAT(pv.row(i).sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));
    for (int j = i + 1; j < 4; ++j) REQUIRE(pv(i, j) == 0.0);
  }
}

TEST_CASE("causal softmax gradient") {
  Mat a = randn(4, 4, 9);
  check_grad(a, [](Tape& t, Var x) {
    Var w = t.constant(randn(4, 4, 10));
    return sum_all(t, t.cmul(t.causal_softmax(x), w));
  });
}

TEST_CASE("normalize/ablate/add_dir/dot gradients") {
  Mat r = randn(5, 1, 11);
  check_grad(r, [](Tape& t, Var raw) {
    Var rhat = t.normalize_vec(raw);
    Var x = t.constant(randn(3, 5, 12));
    Var abl = t.ablate_rows(x, rhat);
    Var added = t.add_dir_rows(x, rhat, 1.7);
    Var d = t.dot(rhat, t.constant(randn(5, 1, 13)));
    return t.add(t.add(sum_all(t, abl), sum_all(t, added)), d);
  });
}

TEST_CASE("ablate_rows X-gradient") {
  Mat x = randn(3, 5, 14);
  check_grad(x, [](Tape& t, Var xv) {
    Mat r = randn(5, 1, 15);
    Var rhat = t.normalize_vec(t.constant(r));
    return sum_all(t, t.ablate_rows(xv, rhat));
  });
}

TEST_CASE("restricted_yes_prob value and gradient") {
  Tape t;
  Mat row(1, 4);
  row << 1.0, 2.0, 1.0 + std::log(3.0), 0.0;
  Var l = t.leaf(row, true);
  Var p = t.restricted_yes_prob(l, 2, 0);
  REQUIRE_THAT(t.sval(p), Catch::Matchers::WithinAbs(0.75, 1e-12));

  Mat l0 = randn(1, 4, 16);
  check_grad(l0, [](Tape& t2, Var x) {
    return t2.neg_log(t2.restricted_yes_prob(x, 2, 0));
  });
}

TEST_CASE("kl_const_ref value and gradient") {
  // p0=(0.5,0.5), q=(0.9,0.1): KL = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
  Tape t;
  Mat logits(1, 2);
  logits << std::log(0.9), std::log(0.1);
  Vec p0(2);
  p0 << 0.5, 0.5;
  double expect = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  REQUIRE_THAT(t.sval(t.kl_const_ref(t.constant(logits), p0)),
               Catch::Matchers::WithinAbs(expect, 1e-12));
  REQUIRE_THAT(expect, Catch::Matchers::WithinAbs(0.5108, 5e-4));

  Mat l0 = randn(1, 5, 17);
  Vec ref(5);
  ref << 0.1, 0.3, 0.2, 0.25, 0.15;
  check_grad(l0, [&](Tape& t2, Var x) { return t2.kl_const_ref(x, ref); });
}

TEST_CASE("ce_rows value matches hand softmax and gradient checks") {
  Mat l0 = randn(3, 6, 18);
  std::vector<int> targets{2, 0, 5};
  std::vector<double> w{1.0, 2.0, 0.5};
  check_grad(l0, [&](Tape& t, Var x) { return t.ce_rows(x, targets, w); });

  Tape t;
  Var loss = t.ce_rows(t.constant(l0), targets, w);
  double expect = 0.0, wsum = 0.0;
  for (int i = 0; i < 3; ++i) {
    double mx = l0.row(i).maxCoeff();
    double z = (l0.row(i).array() - mx).exp().sum();
    expect += w[i] * -(l0(i, targets[i]) - mx - std::log(z));
    wsum += w[i];
  }
  REQUIRE_THAT(t.sval(loss), Catch::Matchers::WithinAbs(expect / wsum, 1e-12));
}

TEST_CASE("gather_rows routes gradients to the right rows") {
  Mat table = randn(5, 3, 19);
  check_grad(table, [](Tape& t, Var x) {
    return sum_all(t, t.gather_rows(x, {4, 0, 0, 2}));
  });
}

TEST_CASE("smul gradient flows to both operands") {
  Mat s0 = Mat::Constant(1, 1, 1.3);
  check_grad(s0, [](Tape& t, Var s) {
    Var a = t.constant(randn(2, 3, 20));
    return sum_all(t, t.smul(a, s));
  });
}
