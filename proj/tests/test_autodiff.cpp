#include <functional>

#include "doctest.h"
#include "eva/autodiff.hpp"
#include "eva/la_core.hpp"
#include "helpers.hpp"

using namespace eva;
using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

using Graph = std::function<Var(Tape&, std::vector<Var>&)>;

Mat uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// Contracts the graph output with a fixed random weight so every output
/// entry contributes to the scalar.
double evaluate(const Graph& f, const std::vector<Mat>& inputs, const Mat& probe) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.constant(m));
  const Var out = f(tape, vars);
  return (out.value().array() * probe.array()).sum();
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input entry.
double check_gradients(const Graph& f, std::vector<Mat> inputs, std::uint64_t seed, double eps = 1e-6,
                       double floor = 1e-6) {
  Rng rng(seed);
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.variable(m));
  const Var out = f(tape, vars);
  const Mat probe = uniform(rng, out.rows(), out.cols());
  const Var loss = ad::sum(ad::mul(out, tape.constant(probe)));
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Mat analytic = tape.grad(vars[n].id);
    REQUIRE(analytic.rows() == inputs[n].rows());
    REQUIRE(analytic.cols() == inputs[n].cols());
    for (Eigen::Index i = 0; i < inputs[n].size(); ++i) {
      const double keep = inputs[n].data()[i];
      inputs[n].data()[i] = keep + eps;
      const double up = evaluate(f, inputs, probe);
      inputs[n].data()[i] = keep - eps;
      const double down = evaluate(f, inputs, probe);
      inputs[n].data()[i] = keep;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  }
  return worst;
}

/// Direct nested-loop convolution of one C x H x W image.
Mat naive_conv(const Mat& x, const Mat& w, const Mat& b, int cin, int h, int wd, int k, int pad) {
  const int cout = static_cast<int>(w.rows());
  Mat y = Mat::Zero(x.rows(), cout * h * wd);
  for (Eigen::Index n = 0; n < x.rows(); ++n)
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j) {
          double acc = b(0, o);
          for (int c = 0; c < cin; ++c)
            for (int di = 0; di < k; ++di)
              for (int dj = 0; dj < k; ++dj) {
                const int si = i + di - pad, sj = j + dj - pad;
                if (si < 0 || sj < 0 || si >= h || sj >= wd) continue;
                acc += w(o, (c * k + di) * k + dj) * x(n, (c * h + si) * wd + sj);
              }
          y(n, (o * h + i) * wd + j) = acc;
        }
  return y;
}

/// Scatter definition of a kernel-4, stride-2, padding-1 transposed conv.
Mat naive_conv_t(const Mat& x, const Mat& w, const Mat& b, int cin, int h, int wd) {
  const int cout = static_cast<int>(b.cols()), H = 2 * h, W = 2 * wd;
  Mat y = Mat::Zero(x.rows(), cout * H * W);
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    for (int o = 0; o < cout; ++o)
      for (int i = 0; i < H * W; ++i) y(n, o * H * W + i) = b(0, o);
    for (int c = 0; c < cin; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j)
          for (int o = 0; o < cout; ++o)
            for (int di = 0; di < 4; ++di)
              for (int dj = 0; dj < 4; ++dj) {
                const int oi = 2 * i - 1 + di, oj = 2 * j - 1 + dj;
                if (oi < 0 || oj < 0 || oi >= H || oj >= W) continue;
                y(n, (o * H + oi) * W + oj) += x(n, (c * h + i) * wd + j) * w(c, (o * 4 + di) * 4 + dj);
              }
  }
  return y;
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("elementwise and linear ops") {
    Rng rng(1);
    const Mat a = uniform(rng, 3, 4), b = uniform(rng, 3, 4), c = uniform(rng, 4, 2), row = uniform(rng, 1, 4);
    auto run = [&](const Graph& f, std::vector<Mat> in) { return check_gradients(f, std::move(in), 17); };
    CHECK(run([](Tape&, auto& v) { return ad::matmul(v[0], v[1]); }, {a, c}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::add(v[0], v[1]); }, {a, b}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::sub(v[0], v[1]); }, {a, b}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::mul(v[0], v[1]); }, {a, b}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::add_row(v[0], v[1]); }, {a, row}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::mul_row(v[0], v[1]); }, {a, row}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::scale(v[0], -2.5); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::neg(v[0]); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::tanh(v[0]); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::exp(v[0]); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::sigmoid(v[0]); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::silu(v[0]); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::relu_sq(v[0]); }, {a}) < 1e-6);
  }

  TEST_CASE("structural ops") {
    Rng rng(2);
    const Mat a = uniform(rng, 5, 3), b = uniform(rng, 2, 3), row = uniform(rng, 1, 6);
    const std::vector<int> idx{4, 0, 4, 2};
    auto run = [&](const Graph& f, std::vector<Mat> in) { return check_gradients(f, std::move(in), 18); };
    CHECK(run([](Tape&, auto& v) { return ad::token_shift(v[0]); }, {a}) < 1e-7);
    CHECK(run([&](Tape&, auto& v) { return ad::gather_rows(v[0], idx); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) {
            const std::vector<Var> parts{v[0], v[1], v[0]};
            return ad::concat_rows(parts);
          }, {a, b}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::slice_cols(v[0], 1, 2); }, {a}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::element(v[0], 4); }, {row}) < 1e-7);
    CHECK(run([](Tape&, auto& v) { return ad::sum(v[0]); }, {a}) < 1e-7);
  }

  TEST_CASE("normalization ops") {
    Rng rng(3);
    const Mat x = uniform(rng, 4, 8, -2, 3), s = uniform(rng, 1, 8), o = uniform(rng, 1, 8);
    CHECK(check_gradients([](Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }, {x, s, o}, 19) < 1e-6);
    CHECK(check_gradients([](Tape&, auto& v) { return ad::group_norm(v[0], 2); }, {x}, 20) < 1e-6);
  }

  TEST_CASE("normalization forward matches the core kernels") {
    Rng rng(4);
    const Mat x = uniform(rng, 4, 8), s = uniform(rng, 1, 8), o = uniform(rng, 1, 8);
    Tape tape;
    const Var y = ad::layer_norm(tape.constant(x), tape.constant(s), tape.constant(o));
    CHECK(y.value().isApprox(la::layer_norm(x, la::LayerNormParams<double>{s, o}), 1e-14));
  }

  TEST_CASE("losses") {
    Rng rng(5);
    const Mat a = uniform(rng, 3, 3), target = uniform(rng, 3, 3);
    CHECK(check_gradients([&](Tape&, auto& v) { return ad::mse(v[0], target); }, {a}, 21) < 1e-7);
    Tape tape;
    const Var m = ad::mse(tape.constant(a), target);
    CHECK(m.value()(0, 0) == doctest::Approx((a - target).squaredNorm() / 9.0));
    const Mat l1 = Mat::Constant(1, 1, 0.7), l2 = Mat::Constant(1, 1, 1.9), s = uniform(rng, 1, 2);
    CHECK(check_gradients([](Tape&, auto& v) {
            const std::vector<Var> losses{v[0], v[1]};
            return ad::uncertainty_total(losses, v[2]);
          }, {l1, l2, s}, 22) < 1e-7);
  }

  TEST_CASE("convolution matches the direct definition") {
    Rng rng(6);
    const int cin = 3, h = 5, w = 4;
    const Mat x = uniform(rng, 2, cin * h * w);
    const Mat k3 = uniform(rng, 4, cin * 9), b3 = uniform(rng, 1, 4);
    const Mat k1 = uniform(rng, 2, cin), b1 = uniform(rng, 1, 2);
    Tape tape;
    const Var y3 = ad::conv2d(tape.constant(x), tape.constant(k3), tape.constant(b3), cin, h, w, 3, 1);
    CHECK(y3.value().isApprox(naive_conv(x, k3, b3, cin, h, w, 3, 1), 1e-13));
    const Var y1 = ad::conv2d(tape.constant(x), tape.constant(k1), tape.constant(b1), cin, h, w, 1, 0);
    CHECK(y1.value().isApprox(naive_conv(x, k1, b1, cin, h, w, 1, 0), 1e-13));
    CHECK_THROWS(ad::conv2d(tape.constant(x), tape.constant(k3), tape.constant(b3), cin, h, w, 3, 0));
    CHECK(check_gradients([&](Tape&, auto& v) { return ad::conv2d(v[0], v[1], v[2], cin, h, w, 3, 1); },
                          {x, k3, b3}, 23) < 1e-6);
  }

  TEST_CASE("transposed convolution matches the scatter definition") {
    Rng rng(7);
    const int cin = 2, cout = 3, h = 3, w = 2;
    const Mat x = uniform(rng, 2, cin * h * w), k = uniform(rng, cin, cout * 16), b = uniform(rng, 1, cout);
    Tape tape;
    const Var y = ad::conv_transpose2x(tape.constant(x), tape.constant(k), tape.constant(b), cin, h, w);
    REQUIRE(y.cols() == cout * 4 * h * w);
    CHECK(y.value().isApprox(naive_conv_t(x, k, b, cin, h, w), 1e-13));
    CHECK(check_gradients([&](Tape&, auto& v) { return ad::conv_transpose2x(v[0], v[1], v[2], cin, h, w); },
                          {x, k, b}, 24, 1e-4) < 1e-6);
  }

  TEST_CASE("token mixing matches the recurrence and differentiates across scan chunks") {
    Rng rng(8);
    const int T = 70, D = 4;
    const Mat r = uniform(rng, T, D), k = uniform(rng, T, D), v = uniform(rng, T, D);
    const Mat w = uniform(rng, T, D, 0.6, 0.99), u = uniform(rng, 1, D);
    Tape tape;
    const Var y = ad::wkv(tape.constant(r), tape.constant(k), tape.constant(v), tape.constant(w), tape.constant(u), 2);
    HeadStates<double> s(2, 2);
    CHECK(max_relative_deviation(y.value(), la::tm_recurrent(r, k, v, w, u, s)) < 1e-12);
    CHECK(check_gradients([](Tape&, auto& in) { return ad::wkv(in[0], in[1], in[2], in[3], in[4], 2); },
                          {r, k, v, w, u}, 25) < 1e-5);
  }

  TEST_CASE("state snapshots match the recurrence and differentiate") {
    Rng rng(9);
    const int T = 70, D = 6;
    const Mat k = uniform(rng, T, D), v = uniform(rng, T, D), w = uniform(rng, T, D, 0.6, 0.99);
    const std::vector<int> cps{0, 5, 5, 64, 70};
    Tape tape;
    const Var s = ad::state_snapshots(tape.constant(k), tape.constant(v), tape.constant(w), 3, 2, cps);
    REQUIRE(s.rows() == 5);
    REQUIRE(s.cols() == 2 * 4);
    HeadStates<double> ref(3, 2);
    int t = 0;
    for (std::size_t j = 0; j < cps.size(); ++j) {
      for (; t < cps[j]; ++t)
        for (int h = 0; h < 3; ++h)
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              ref.at(h, a, b) = w(t, 2 * h + a) * ref.at(h, a, b) + k(t, 2 * h + a) * v(t, 2 * h + b);
      for (int i = 0; i < 8; ++i) CHECK(s.value()(j, i) == doctest::Approx(ref.data[i]).epsilon(1e-12));
    }
    CHECK(check_gradients([&](Tape&, auto& in) { return ad::state_snapshots(in[0], in[1], in[2], 3, 2, cps); },
                          {k, v, w}, 26, 1e-4) < 1e-5);
  }

  TEST_CASE("unreached leaves get zero gradients") {
    Tape tape;
    const Var a = tape.variable(Mat::Ones(2, 2));
    const Var b = tape.variable(Mat::Ones(3, 1));
    tape.backward(ad::sum(a));
    CHECK(tape.grad(a.id) == Mat::Ones(2, 2));
    CHECK(tape.grad(b.id) == Mat::Zero(3, 1));
    CHECK_THROWS(tape.backward(a));
  }
}
