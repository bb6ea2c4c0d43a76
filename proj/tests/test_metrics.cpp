#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "sqat/metrics.hpp"
#include "sqat/rng.hpp"
#include "oracles.hpp"

using namespace sqat;

namespace {

std::string random_string(Rng& rng, int max_len) {
  const int len = rng.uniform_int(0, max_len);
  std::string s;
  for (int i = 0; i < len; ++i) {
    s.push_back(static_cast<char>('a' + rng.uniform_int(0, 3)));
  }
  return s;
}

}  // namespace

TEST_CASE("cer basics") {
  CHECK(cer("abc", "abc") == 0.0);
  CHECK(cer("abc", "axc") == doctest::Approx(1.0 / 3.0));
  CHECK(cer("a", "abc") == 2.0);  // two insertions against a 1-char reference
  CHECK_THROWS_AS(cer("", "abc"), std::invalid_argument);
}

TEST_CASE("edit costs match distance and reference length") {
  const EditCosts c = edit_costs("kitten", "sitting");
  CHECK(c.distance() == levenshtein("kitten", "sitting"));
  CHECK(c.distance() == 3);
  CHECK(c.reference_length == 6);
  CHECK(c.cer() == doctest::Approx(0.5));

  const EditCosts ins = edit_costs("a", "abc");
  CHECK(ins.insertions == 2);
  CHECK(ins.deletions == 0);
  CHECK(ins.substitutions == 0);
  CHECK(ins.cer() == 2.0);
}

TEST_CASE("levenshtein matches the exhaustive recursive oracle") {
  Rng rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string a = random_string(rng, 8);
    const std::string b = random_string(rng, 8);
    CHECK(levenshtein(a, b) == testing::edit_distance_recursive(a, b));
    const EditCosts c = edit_costs(a, b);
    CHECK(c.distance() == levenshtein(a, b));
  }
}

TEST_CASE("distance symmetry and triangle inequality") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::string a = random_string(rng, 10);
    const std::string b = random_string(rng, 10);
    CHECK(levenshtein(a, b) == levenshtein(b, a));
  }
  for (int trial = 0; trial < 300; ++trial) {
    const std::string a = random_string(rng, 8);
    const std::string b = random_string(rng, 8);
    const std::string c = random_string(rng, 8);
    CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
  }
}

TEST_CASE("evaluation grids") {
  const auto ug = untargeted_grid();
  REQUIRE(ug.size() == 100);
  CHECK(ug.front() == 0.0);
  CHECK(ug.back() == doctest::Approx(99.0 / 1e4));
  const auto tg = targeted_grid();
  REQUIRE(tg.size() == 130);
  CHECK(tg.front() == 0.0);
  CHECK(tg.back() == doctest::Approx(390.0 / 1e5));
  for (size_t i = 1; i < ug.size(); ++i) CHECK(ug[i] > ug[i - 1]);
  for (size_t i = 1; i < tg.size(); ++i) CHECK(tg[i] > tg[i - 1]);
}

TEST_CASE("scaled image arithmetic") {
  Image x(2, 2);
  x << 1.0, 2.0, 3.0, 4.0;

  // epsilon 0 returns the image bit-for-bit and tolerates zero-norm deltas
  const Image z = Image::Zero(2, 2);
  CHECK(scaled_image(x, z, 0.0).isApprox(x, 0.0));
  CHECK_THROWS_AS(scaled_image(x, z, 0.5), std::invalid_argument);

  // delta = x itself at eps 0.5 evaluates 1.5x elementwise
  const Image s = scaled_image(x, x, 0.5);
  CHECK(s.isApprox(1.5 * x, 1e-15));

  // doubling epsilon doubles the additive perturbation exactly
  Image d(2, 2);
  d << 0.5, -0.25, 0.0, 1.0;
  const Image p1 = scaled_image(x, d, 0.01) - x;
  const Image p2 = scaled_image(x, d, 0.02) - x;
  CHECK(p2.isApprox(2.0 * p1, 1e-14));
}

namespace {

// Affine instance on 2x3 "images": 10 positions; position 5's argmax flips
// from class 0 to class 1 once the scaled perturbation is large enough.
testing::AffineModel make_flip_model() {
  const int rows = 2, cols = 3, n = rows * cols, v = 4, T = 10;
  std::vector<Eigen::MatrixXd> a(T, Eigen::MatrixXd::Zero(v, n));
  std::vector<Eigen::VectorXd> b(T, Eigen::VectorXd::Zero(v));
  for (int t = 0; t < T; ++t) b[t][0] = 1.0;  // class 0 wins everywhere
  a[5].row(1) = Eigen::RowVectorXd::Constant(n, 1.0);  // flips position 5
  b[5][1] = -2.0;  // ...once the perturbed pixel sum clears the margin
  return testing::AffineModel(std::move(a), std::move(b), rows, cols);
}

}  // namespace

TEST_CASE("untargeted sweep on the affine flip model") {
  const auto model = make_flip_model();
  Image x(2, 3);
  x << .1, .2, .3, .4, .5, .6;
  Perturbation delta;
  delta.delta = Image::Constant(2, 3, 1.0);
  delta.l2_norm = delta.delta.norm();

  SUBCASE("grid {0} gives mean CER 0") {
    const SweepCurve c = sweep_untargeted(model, {x}, {delta}, {0.0});
    REQUIRE(c.values.size() == 1);
    CHECK(c.values[0] == 0.0);
  }

  SUBCASE("two-point curve matches the edit-distance oracle") {
    // at eps*, position 5 crosses: logit_1 = eps*||x||/||d|| * d.sum-dir...
    // pick eps large enough that class 1 logit (= sum of pixels) exceeds 1.
    const double eps = 1.0;
    const SweepCurve c = sweep_untargeted(model, {x}, {delta}, {0.0, eps});
    REQUIRE(c.values.size() == 2);
    CHECK(c.values[0] == 0.0);
    const std::string orig = model.charset().decode(model.decode(x).seq);
    const auto ev = scaled_eval(model, x, delta, eps);
    const int oracle = testing::edit_distance_recursive(orig, ev.text);
    CHECK(oracle == 1);  // exactly one substituted character
    CHECK(c.values[1] ==
          doctest::Approx(static_cast<double>(oracle) / orig.size()));
  }
}

TEST_CASE("success ratio curve semantics") {
  const auto model = make_flip_model();
  Image x(2, 3);
  x << .1, .2, .3, .4, .5, .6;
  Perturbation delta;
  delta.delta = Image::Constant(2, 3, 1.0);
  delta.l2_norm = delta.delta.norm();

  // target nobody reaches -> all-zero curve
  {
    const SweepCurve c = success_ratio_curve(model, {x}, {delta},
                                             {"zzzzzzzz"}, {0.0, 0.5, 1.0});
    for (double v : c.values) CHECK(v == 0.0);
  }

  // success first appears at the grid point where the flip happens, then
  // the cumulative curve stays at 1
  {
    const std::string flipped_text = [&] {
      return scaled_eval(model, x, delta, 2.0).text;
    }();
    const SweepCurve c = success_ratio_curve(
        model, {x}, {delta}, {flipped_text}, {0.0, 0.001, 2.0, 3.0});
    CHECK(c.values[0] == 0.0);
    CHECK(c.values[1] == 0.0);
    CHECK(c.values[2] == 1.0);
    CHECK(c.values[3] == 1.0);
    for (size_t i = 1; i < c.values.size(); ++i) {
      CHECK(c.values[i] >= c.values[i - 1]);
    }
  }

  // native-scale mode evaluates once at the emitted size
  {
    Perturbation big;
    big.delta = Image::Constant(2, 3, 10.0);
    big.l2_norm = big.delta.norm();
    const std::string text =
        model.charset().decode(model.decode(x + big.delta).seq);
    const double native_eps = big.delta.norm() / x.norm();
    const SweepCurve c = success_ratio_curve(model, {x}, {big}, {text},
                                             {0.001, native_eps * 2.0}, true);
    CHECK(c.values[0] == 0.0);  // native size exceeds the first grid point
    CHECK(c.values[1] == 1.0);
  }
}

TEST_CASE("curve csv round trip") {
  SweepCurve c;
  c.grid = {0.0, 0.1, 0.2};
  c.values = {0.0, 0.5, 1.0};
  c.metric_kind = "success_ratio";
  c.n_images = 7;
  const std::string path = "test_out_curve.csv";
  write_curve_csv(path, c);
  const SweepCurve r = read_curve_csv(path);
  CHECK(r.grid == c.grid);
  CHECK(r.values == c.values);
  CHECK(r.metric_kind == c.metric_kind);
  CHECK(r.n_images == c.n_images);
}
