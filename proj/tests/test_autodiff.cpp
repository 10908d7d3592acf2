// SPDX-License-Identifier: Apache-2.0
#include <functional>

#include <catch_amalgamated.hpp>

#include "motifdiff/autodiff.hpp"
#include "motifdiff/common.hpp"

using namespace motifdiff;
using ad::Mat;
using ad::Tape;
using ad::Val;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

// Finite-difference check of d(scalar f(x))/dx for a single matrix input.
void check_gradient(const std::function<Val(Tape&, Val)>& f, const Mat& x,
                    double tol = 1e-6) {
  Tape tape;
  Val in = tape.param(x);
  Val out = f(tape, in);
  REQUIRE(tape.val(out).size() == 1);
  tape.backward(out);
  Mat analytic = tape.grad(in);

  const double h = 1e-6;
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) {
      Mat xp = x, xm = x;
      xp(i, j) += h;
      xm(i, j) -= h;
      Tape tp, tm;
      double fp = tp.val(f(tp, tp.param(xp)))(0, 0);
      double fm = tm.val(f(tm, tm.param(xm)))(0, 0);
      double numeric = (fp - fm) / (2 * h);
      INFO("entry (" << i << "," << j << "): analytic " << analytic(i, j) << " numeric "
                     << numeric);
      CHECK(std::abs(analytic(i, j) - numeric) <
            tol * std::max({1.0, std::abs(analytic(i, j)), std::abs(numeric)}));
    }
  }
}

}  // namespace

TEST_CASE("tape op gradients match finite differences") {
  Rng rng(314159);
  Mat x = random_mat(rng, 3, 4);
  Mat w = random_mat(rng, 4, 3);
  Mat row = random_mat(rng, 1, 4);

  SECTION("matmul + sum") {
    check_gradient([&](Tape& t, Val in) { return t.sum(t.matmul(in, t.constant(w))); }, x);
  }
  SECTION("hadamard and add") {
    Mat c = random_mat(rng, 3, 4);
    check_gradient(
        [&](Tape& t, Val in) { return t.sum(t.mul(t.add(in, t.constant(c)), in)); }, x);
  }
  SECTION("broadcast row ops") {
    check_gradient(
        [&](Tape& t, Val in) {
          Val r = t.constant(row);
          return t.sum(t.mul_rows(t.add_rows(in, r), r));
        },
        x);
    // gradient w.r.t. the row operand
    check_gradient(
        [&](Tape& t, Val in) {
          Val base = t.constant(x);
          return t.sum(t.mul_rows(t.add_rows(base, in), in));
        },
        row);
  }
  SECTION("silu") {
    check_gradient([&](Tape& t, Val in) { return t.sum(t.silu(in)); }, x);
  }
  SECTION("log and exp") {
    Mat pos = (x.array().abs() + 0.5).matrix();
    check_gradient([&](Tape& t, Val in) { return t.sum(t.log(in)); }, pos);
    check_gradient([&](Tape& t, Val in) { return t.sum(t.exp(t.scale(in, 0.3))); }, x);
  }
  SECTION("layernorm") {
    Mat weights = random_mat(rng, 3, 4);
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.mul(t.layernorm_rows(in), t.constant(weights)));
        },
        x, 1e-5);
  }
  SECTION("softmax rows") {
    Mat weights = random_mat(rng, 3, 4);
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.mul(t.softmax_rows(in), t.constant(weights)));
        },
        x, 1e-5);
  }
  SECTION("normalize rows") {
    Mat pos = (x.array().abs() + 0.2).matrix();
    Mat weights = random_mat(rng, 3, 4);
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.mul(t.normalize_rows(in), t.constant(weights)));
        },
        pos, 1e-5);
  }
  SECTION("clamp, minimum") {
    // keep entries away from the clamp kinks
    Mat y = x;
    check_gradient(
        [&](Tape& t, Val in) {
          Val c = t.clamp(in, -0.7, 0.7);
          return t.sum(t.minimum(c, t.constant(Mat::Constant(3, 4, 0.31))));
        },
        y, 1e-5);
  }
  SECTION("hcat and block") {
    Mat side = random_mat(rng, 3, 2);
    check_gradient(
        [&](Tape& t, Val in) {
          Val cat = t.hcat(in, t.constant(side));
          return t.sum(t.block(cat, 1, 2, 2, 3));
        },
        x);
  }
  SECTION("gather and mean subset") {
    check_gradient(
        [&](Tape& t, Val in) {
          Val g = t.gather_entries(in, {{0, 1}, {2, 3}, {0, 1}});
          Val m = t.mean_rows_subset(in, {0, 2});
          return t.add(t.sum(g), t.sum(m));
        },
        x);
  }
  SECTION("gather blocks") {
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.gather_blocks(in, {{0, 0}, {1, 2}, {0, 2}}, 2));
        },
        x);
  }
  SECTION("sym pair average") {
    Mat sq = random_mat(rng, 3, 6);  // n = 3, d = 2
    Mat weights = random_mat(rng, 3, 6);
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.mul(t.sym_pair_avg(in, 3, 2), t.constant(weights)));
        },
        sq);
  }
  SECTION("transpose and scale") {
    Mat side = random_mat(rng, 3, 2);
    check_gradient(
        [&](Tape& t, Val in) {
          return t.sum(t.matmul(t.transpose(in), t.constant(side)));
        },
        x);
  }
}

TEST_CASE("composed two-layer network gradient") {
  Rng rng(2718);
  Mat x = random_mat(rng, 2, 5);
  Mat w1 = random_mat(rng, 5, 4, 0.5);
  Mat b1 = random_mat(rng, 1, 4, 0.1);
  Mat w2 = random_mat(rng, 4, 3, 0.5);

  auto network = [&](Tape& t, Val w1v) {
    Val h = t.silu(t.add_rows(t.matmul(t.constant(x), w1v), t.constant(b1)));
    Val logits = t.matmul(h, t.constant(w2));
    Val p = t.softmax_rows(logits);
    Val picked = t.gather_entries(p, {{0, 1}, {1, 2}});
    return t.scale(t.sum(t.log(picked)), -0.5);
  };
  check_gradient(network, w1, 1e-5);
}

TEST_CASE("gradients accumulate across reuse") {
  // y = sum(x*x + x) uses the same leaf twice.
  Mat x = Mat::Constant(2, 2, 3.0);
  Tape tape;
  Val in = tape.param(x);
  Val out = tape.sum(tape.add(tape.mul(in, in), in));
  tape.backward(out);
  CHECK(tape.grad(in).isApprox(Mat::Constant(2, 2, 7.0), 1e-12));
}
