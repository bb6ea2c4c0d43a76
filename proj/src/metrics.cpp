#include "sqat/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sqat {

int levenshtein(const std::string& a, const std::string& b) {
  const size_t m = a.size(), n = b.size();
  std::vector<int> prev(n + 1), cur(n + 1);
  for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= m; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= n; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

EditCosts edit_costs(const std::string& reference,
                     const std::string& hypothesis) {
  const size_t m = reference.size(), n = hypothesis.size();
  std::vector<std::vector<int>> d(m + 1, std::vector<int>(n + 1));
  for (size_t i = 0; i <= m; ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= n; ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= m; ++i) {
    for (size_t j = 1; j <= n; ++j) {
      const int sub = d[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  }
  EditCosts costs;
  costs.reference_length = static_cast<int>(m);
  // Backtrack one optimal script; the (S,D,I) split may be ambiguous but the
  // total always equals the distance.
  size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[i][j] == d[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1)) {
      if (reference[i - 1] != hypothesis[j - 1]) ++costs.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++costs.deletions;
      --i;
    } else {
      ++costs.insertions;
      --j;
    }
  }
  return costs;
}

double cer(const std::string& reference, const std::string& hypothesis) {
  if (reference.empty()) {
    throw std::invalid_argument("cer: empty reference");
  }
  return static_cast<double>(levenshtein(reference, hypothesis)) /
         static_cast<double>(reference.size());
}

Image scaled_image(const Image& x, const Image& delta, double epsilon) {
  if (epsilon == 0.0) return x;
  const double dn = delta.norm();
  if (dn == 0.0) {
    throw std::invalid_argument("scaled_image: zero-norm delta with epsilon != 0");
  }
  return x + (epsilon * x.norm() / dn) * delta;
}

ScaledEval scaled_eval(const SeqLogitModel& model, const Image& x,
                       const Perturbation& delta, double epsilon) {
  const Decoded d = model.decode(scaled_image(x, delta.delta, epsilon));
  return {model.charset().decode(d.seq), d.seq};
}

std::vector<double> untargeted_grid() {
  std::vector<double> g;
  g.reserve(100);
  for (int n = 0; n < 100; ++n) g.push_back(n / 1e4);
  return g;
}

std::vector<double> targeted_grid() {
  std::vector<double> g;
  g.reserve(130);
  for (int n = 0; n < 100; ++n) g.push_back(n / 1e5);
  for (int n = 100; n <= 390; n += 10) g.push_back(n / 1e5);
  return g;
}

SweepCurve sweep_untargeted(const SeqLogitModel& model,
                            const std::vector<Image>& images,
                            const std::vector<Perturbation>& deltas,
                            const std::vector<double>& grid,
                            const std::vector<int>& ids) {
  if (images.size() != deltas.size()) {
    throw std::invalid_argument("sweep_untargeted: one delta per image required");
  }
  SweepCurve curve;
  curve.grid = grid;
  curve.metric_kind = "mean_cer";
  curve.n_images = static_cast<int>(images.size());
  curve.values.assign(grid.size(), 0.0);
  for (size_t i = 0; i < images.size(); ++i) {
    const int id = ids.empty() ? static_cast<int>(i) : ids[i];
    const Decoded clean = model.decode(images[i]);
    const std::string original = model.charset().decode(clean.seq);
    for (size_t k = 0; k < grid.size(); ++k) {
      const ScaledEval ev = scaled_eval(model, images[i], deltas[i], grid[k]);
      const double c = cer(original, ev.text);
      curve.values[k] += c;
      curve.records.push_back({id, grid[k], c, -1.0});
    }
  }
  if (!images.empty()) {
    for (double& v : curve.values) v /= static_cast<double>(images.size());
  }
  return curve;
}

SweepCurve success_ratio_curve(const SeqLogitModel& model,
                               const std::vector<Image>& images,
                               const std::vector<Perturbation>& deltas,
                               const std::vector<std::string>& targets,
                               const std::vector<double>& grid,
                               bool native_scale_only,
                               const std::vector<int>& ids) {
  if (images.size() != deltas.size() || images.size() != targets.size()) {
    throw std::invalid_argument("success_ratio_curve: mismatched lengths");
  }
  SweepCurve curve;
  curve.grid = grid;
  curve.metric_kind = "success_ratio";
  curve.n_images = static_cast<int>(images.size());
  curve.values.assign(grid.size(), 0.0);

  // first_success[i] = smallest evaluated epsilon with CER 0 (or +inf)
  std::vector<double> first_success(images.size(),
                                    std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < images.size(); ++i) {
    const int id = ids.empty() ? static_cast<int>(i) : ids[i];
    if (native_scale_only) {
      // degenerate one-point grid: the perturbation at emitted size
      const double native_eps =
          deltas[i].delta.norm() / std::max(1e-300, images[i].norm());
      const Decoded d = model.decode(images[i] + deltas[i].delta);
      const double c = cer(targets[i], model.charset().decode(d.seq));
      if (c == 0.0) first_success[i] = native_eps;
      curve.records.push_back({id, native_eps, -1.0, c});
      continue;
    }
    for (double eps : grid) {
      const ScaledEval ev = scaled_eval(model, images[i], deltas[i], eps);
      const double c = cer(targets[i], ev.text);
      curve.records.push_back({id, eps, -1.0, c});
      if (c == 0.0) {
        first_success[i] = eps;
        break;  // cumulative curve only needs the first success
      }
    }
  }
  for (size_t k = 0; k < grid.size(); ++k) {
    int hits = 0;
    for (double f : first_success) {
      if (f <= grid[k]) ++hits;
    }
    curve.values[k] =
        images.empty() ? 0.0 : static_cast<double>(hits) / images.size();
  }
  return curve;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

void write_curve_csv(const std::string& path, const SweepCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epsilon,value,n_images,metric_kind\n";
  for (size_t k = 0; k < curve.grid.size(); ++k) {
    out << fmt_double(curve.grid[k]) << "," << fmt_double(curve.values[k])
        << "," << curve.n_images << "," << curve.metric_kind << "\n";
  }
}

SweepCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open curve csv: " + path);
  SweepCurve curve;
  std::string line;
  std::getline(in, line);
  if (line != "epsilon,value,n_images,metric_kind") {
    throw std::runtime_error("bad curve csv header in " + path);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string eps, value, n, kind;
    std::getline(ss, eps, ',');
    std::getline(ss, value, ',');
    std::getline(ss, n, ',');
    std::getline(ss, kind, ',');
    curve.grid.push_back(std::stod(eps));
    curve.values.push_back(std::stod(value));
    curve.n_images = std::stoi(n);
    curve.metric_kind = kind;
  }
  return curve;
}

}  // namespace sqat
