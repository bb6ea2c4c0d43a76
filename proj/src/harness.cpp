#include "sqat/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "sqat/attacks.hpp"
#include "sqat/dataset.hpp"
#include "sqat/metrics.hpp"
#include "sqat/rng.hpp"

namespace fs = std::filesystem;

namespace sqat {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

namespace {

struct KeyBinding {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
T parse_number(const std::string& v) {
  std::stringstream ss(v);
  T out{};
  ss >> out;
  if (ss.fail()) throw std::invalid_argument("bad numeric value: " + v);
  return out;
}

const std::map<std::string, KeyBinding>& bindings() {
  static const std::map<std::string, KeyBinding> map = [] {
    std::map<std::string, KeyBinding> b;
    const auto num = [&b](const std::string& key, auto getter) {
      using Field = std::remove_reference_t<decltype(*getter(std::declval<ExperimentConfig*>()))>;
      b[key] = KeyBinding{
          [getter](ExperimentConfig& c, const std::string& v) {
            *getter(&c) = parse_number<Field>(v);
          },
          [getter](const ExperimentConfig& c) {
            Field f = *getter(const_cast<ExperimentConfig*>(&c));
            if constexpr (std::is_floating_point_v<Field>) {
              return fmt_double(f);
            } else {
              return std::to_string(f);
            }
          }};
    };
    const auto str = [&b](const std::string& key, auto getter) {
      b[key] = KeyBinding{
          [getter](ExperimentConfig& c, const std::string& v) { *getter(&c) = v; },
          [getter](const ExperimentConfig& c) {
            return *getter(const_cast<ExperimentConfig*>(&c));
          }};
    };
    num("dataset.n_train", [](ExperimentConfig* c) { return &c->n_train; });
    num("dataset.n_test", [](ExperimentConfig* c) { return &c->n_test; });
    num("dataset.seed", [](ExperimentConfig* c) { return &c->dataset_seed; });
    num("train.epochs", [](ExperimentConfig* c) { return &c->train.epochs; });
    num("train.batch_size", [](ExperimentConfig* c) { return &c->train.batch_size; });
    num("train.lr", [](ExperimentConfig* c) { return &c->train.lr; });
    num("train.weight_decay", [](ExperimentConfig* c) { return &c->train.weight_decay; });
    num("train.clip_norm", [](ExperimentConfig* c) { return &c->train.clip_norm; });
    num("train.warmup_steps", [](ExperimentConfig* c) { return &c->train.warmup_steps; });
    num("train.seed", [](ExperimentConfig* c) { return &c->train.seed; });
    str("attack.method", [](ExperimentConfig* c) { return &c->method; });
    str("attack.mode", [](ExperimentConfig* c) { return &c->mode; });
    num("attack.n_images", [](ExperimentConfig* c) { return &c->n_images; });
    num("attack.seed", [](ExperimentConfig* c) { return &c->attack_seed; });
    num("attack.target_rank", [](ExperimentConfig* c) { return &c->target_rank; });
    num("attack.jobs", [](ExperimentConfig* c) { return &c->jobs; });
    num("attack.cw_c", [](ExperimentConfig* c) { return &c->cw_c; });
    num("attack.cw_eta", [](ExperimentConfig* c) { return &c->cw_eta; });
    num("attack.cw_max_iters", [](ExperimentConfig* c) { return &c->cw_max_iters; });
    num("attack.cw_lr", [](ExperimentConfig* c) { return &c->cw_lr; });
    num("attack.cw_weight_decay", [](ExperimentConfig* c) { return &c->cw_weight_decay; });
    num("attack.cw_patience", [](ExperimentConfig* c) { return &c->cw_patience; });
    num("attack.be_alpha", [](ExperimentConfig* c) { return &c->be_alpha; });
    num("attack.be_iterations", [](ExperimentConfig* c) { return &c->be_iterations; });
    num("attack.be_margin", [](ExperimentConfig* c) { return &c->be_margin; });
    num("attack.deepfool_top_amount", [](ExperimentConfig* c) { return &c->deepfool_top_amount; });
    num("attack.deepfool_max_iters", [](ExperimentConfig* c) { return &c->deepfool_max_iters; });
    str("output.dir", [](ExperimentConfig* c) { return &c->out_dir; });
    return b;
  }();
  return map;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    }
    const std::string key = section + "." + trim(line.substr(0, eq));
    cfg.apply_override(key, trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void ExperimentConfig::apply_override(const std::string& dotted_key,
                                      const std::string& value) {
  const auto it = bindings().find(dotted_key);
  if (it == bindings().end()) {
    throw std::invalid_argument("unknown config key: " + dotted_key);
  }
  it->second.set(*this, value);
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  std::string section;
  for (const auto& [key, binding] : bindings()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + binding.get(*this) + "\n";
  }
  return out;
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a(to_text()); }

double ExperimentConfig::effective_cw_c() const {
  if (cw_c >= 0.0) return cw_c;
  return mode == "targeted" ? 15.0 : 0.05;
}

double ExperimentConfig::effective_cw_eta() const {
  if (cw_eta >= 0.0) return cw_eta;
  return mode == "targeted" ? 0.002 : 2e-5;
}

int ExperimentConfig::effective_cw_max_iters() const {
  if (cw_max_iters >= 0) return cw_max_iters;
  return mode == "targeted" ? 50 : 30;
}

std::string ExperimentConfig::resolved_out_dir() const {
  if (!out_dir.empty() && out_dir.front() == '/') return out_dir;
  if (const char* root = std::getenv("SQAT_OUTPUT_ROOT")) {
    return std::string(root) + "/" + out_dir;
  }
  return out_dir;
}

// ---------------------------------------------------------------------------
// Blobs

void write_delta_blob(const std::string& path, const Image& delta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  std::vector<double> buf(static_cast<size_t>(delta.size()));
  size_t at = 0;
  for (Eigen::Index r = 0; r < delta.rows(); ++r) {
    for (Eigen::Index c = 0; c < delta.cols(); ++c) buf[at++] = delta(r, c);
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Image read_delta_blob(const std::string& path, int rows, int cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open blob: " + path);
  std::vector<double> buf(static_cast<size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated blob: " + path);
  Image m(rows, cols);
  size_t at = 0;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = buf[at++];
  }
  return m;
}

// ---------------------------------------------------------------------------
// Train stage

TrainOutputs run_train(const ExperimentConfig& cfg) {
  const std::string run_dir = cfg.resolved_out_dir();
  fs::create_directories(run_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(cfg.n_train, cfg.n_test, cfg.dataset_seed);
  write_manifest(run_dir + "/dataset_manifest.csv", ds);

  TrainReport report;
  const Model model = train(ds, cfg.train, &report);

  TrainOutputs out;
  out.run_dir = run_dir;
  out.model_path = run_dir + "/model.sqat";
  out.report_path = run_dir + "/train_report.csv";
  out.report = report;
  model.save(out.model_path);

  {
    std::ofstream rep(out.report_path);
    rep << "metric,value\n";
    rep << "train_cer," << fmt_double(report.train_cer) << "\n";
    rep << "test_cer," << fmt_double(report.test_cer) << "\n";
    rep << "final_train_loss," << fmt_double(report.final_train_loss) << "\n";
    rep << "steps," << report.steps << "\n";
    rep << "config_hash," << cfg.hash() << "\n";
  }
  {
    std::ofstream ini(run_dir + "/config.ini");
    ini << cfg.to_text();
  }
  const auto dt = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  std::ofstream(run_dir + "/timing.txt", std::ios::app)
      << "train_seconds " << dt << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Attack stage

namespace {

struct ImageJob {
  int id = 0;
  Image image;
  std::string orig_text;
  std::vector<int> orig_seq;
};

struct JobResult {
  Perturbation pert;
  std::string target_text;
  int target_position = -1;
  int target_class = -1;
};

JobResult attack_one(const ExperimentConfig& cfg, const Model& model,
                     const ImageJob& job) {
  JobResult res;
  const Charset& cs = model.charset();
  const Decoded clean = model.decode(job.image);
  const bool targeted = cfg.mode == "targeted";

  AttackTarget target;
  if (targeted) {
    // single-token target: a uniformly random content position is pushed to
    // the rank-th logit class of its row
    const int rows = static_cast<int>(clean.logits.rows());
    const int content =
        ends_with_eos(clean.seq, cs) ? rows - 1 : rows;  // exclude eos row
    if (content < 1) {
      throw std::runtime_error("image " + std::to_string(job.id) +
                               ": output too short to target");
    }
    Rng rng = Rng(cfg.attack_seed).child(static_cast<std::uint64_t>(job.id));
    const int pos = static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(content)));
    const int cls = select_target(clean.logits.row(pos), cfg.target_rank);
    target.labels = clean.seq;
    target.labels[static_cast<size_t>(pos) + 1] = cls;
    target.changed_position = pos;
    res.target_text = cs.decode(target.labels);
    res.target_position = pos;
    res.target_class = cls;
  } else {
    target.labels = clean.seq;
  }

  if (cfg.method == "fgsm") {
    res.pert = targeted ? fgsm_targeted(model, job.image, target)
                        : fgsm_untargeted(model, job.image);
  } else if (cfg.method == "deepfool") {
    res.pert = deepfool(model, job.image, cfg.deepfool_top_amount,
                        cfg.deepfool_max_iters);
  } else if (cfg.method == "be") {
    if (!targeted) {
      throw std::invalid_argument("backward_error runs in targeted mode only");
    }
    BackwardErrorOptions opts;
    opts.alpha = cfg.be_alpha;
    opts.iterations = cfg.be_iterations;
    opts.margin = cfg.be_margin;
    res.pert = backward_error(model, job.image, target, opts);
  } else if (cfg.method == "cw") {
    CwOptions opts;
    opts.mode = targeted ? CwMode::targeted : CwMode::untargeted;
    opts.c = cfg.effective_cw_c();
    opts.eta = cfg.effective_cw_eta();
    opts.max_iters = cfg.effective_cw_max_iters();
    opts.lr = cfg.cw_lr;
    opts.weight_decay = cfg.cw_weight_decay;
    opts.patience = cfg.cw_patience;
    opts.seed = Rng(cfg.attack_seed)
                    .child(static_cast<std::uint64_t>(job.id))
                    .next_u64();
    res.pert = cw_attack(model, job.image, target, opts);
  } else {
    throw std::invalid_argument("unknown attack method: " + cfg.method);
  }
  return res;
}

}  // namespace

AttackOutputs run_attack(const ExperimentConfig& cfg,
                         const std::string& model_path) {
  const Model model = Model::load(model_path);
  const std::string run_dir = cfg.resolved_out_dir();
  const std::string dir = run_dir + "/attack/" + cfg.method + "_" + cfg.mode;
  fs::create_directories(dir);

  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(cfg.n_train, cfg.n_test, cfg.dataset_seed);
  const int n = std::min<int>(cfg.n_images, static_cast<int>(ds.test.size()));

  std::vector<ImageJob> jobs(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    jobs[static_cast<size_t>(j)].id = cfg.n_train + j;
    jobs[static_cast<size_t>(j)].image = ds.test[static_cast<size_t>(j)].image;
  }

  std::vector<JobResult> results(static_cast<size_t>(n));
  const int workers = std::max(1, std::min(cfg.jobs, n == 0 ? 1 : n));
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= n) return;
          results[static_cast<size_t>(i)] =
              attack_one(cfg, model, jobs[static_cast<size_t>(i)]);
        }
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AttackOutputs out;
  out.dir = dir;
  out.manifest_path = dir + "/manifest.csv";
  out.runrecord_path = dir + "/runrecord.csv";
  out.n_images = n;

  std::ofstream manifest(out.manifest_path);
  manifest << "id,file,bytes,norm,method,converged\n";
  std::ofstream record(out.runrecord_path);
  record << "id,method,mode,converged,l2_norm,iterations,skipped_positions,"
            "orig_text,target_text,target_position,target_class\n";
  for (int i = 0; i < n; ++i) {
    const auto& job = jobs[static_cast<size_t>(i)];
    const auto& res = results[static_cast<size_t>(i)];
    const std::string file = "delta_" + std::to_string(job.id) + ".f64";
    write_delta_blob(dir + "/" + file, res.pert.delta);
    const auto bytes =
        static_cast<std::uint64_t>(res.pert.delta.size()) * sizeof(double);
    manifest << job.id << "," << file << "," << bytes << ","
             << fmt_double(res.pert.l2_norm) << "," << res.pert.method << ","
             << (res.pert.converged ? 1 : 0) << "\n";
    const Decoded clean = model.decode(job.image);
    record << job.id << "," << cfg.method << "," << cfg.mode << ","
           << (res.pert.converged ? 1 : 0) << ","
           << fmt_double(res.pert.l2_norm) << "," << res.pert.iterations << ","
           << res.pert.skipped_positions << ","
           << model.charset().decode(clean.seq) << "," << res.target_text
           << "," << res.target_position << "," << res.target_class << "\n";
  }
  manifest.close();
  record.close();

  {
    std::ofstream ini(dir + "/attack_config.ini");
    ini << cfg.to_text();
    std::ofstream info(dir + "/run_info.csv");
    info << "key,value\n";
    info << "config_hash," << cfg.hash() << "\n";
    info << "method," << cfg.method << "\n";
    info << "mode," << cfg.mode << "\n";
    info << "n_images," << n << "\n";
    info << "model_path," << model_path << "\n";
  }
  const auto dt = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
  std::ofstream(run_dir + "/timing.txt", std::ios::app)
      << "attack_" << cfg.method << "_" << cfg.mode << "_seconds " << dt
      << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Sweep stage

namespace {

struct ManifestRow {
  int id = 0;
  std::string file;
  std::uint64_t bytes = 0;
  double norm = 0.0;
  std::string method;
  bool converged = false;
};

std::vector<ManifestRow> read_manifest_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing manifest: " + path);
  std::string line;
  std::getline(in, line);
  if (line != "id,file,bytes,norm,method,converged") {
    throw std::runtime_error("bad manifest header: " + path);
  }
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestRow r;
    std::string field;
    std::getline(ss, field, ',');
    r.id = std::stoi(field);
    std::getline(ss, r.file, ',');
    std::getline(ss, field, ',');
    r.bytes = std::stoull(field);
    std::getline(ss, field, ',');
    r.norm = std::stod(field);
    std::getline(ss, r.method, ',');
    std::getline(ss, field, ',');
    r.converged = field == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

std::map<int, std::string> read_targets(const std::string& runrecord_path) {
  std::ifstream in(runrecord_path);
  if (!in) throw std::runtime_error("missing runrecord: " + runrecord_path);
  std::string line;
  std::getline(in, line);
  std::map<int, std::string> targets;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    // columns: id,method,mode,converged,l2_norm,iterations,skipped,orig,target,...
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 9) continue;
    targets[std::stoi(fields[0])] = fields[8];
  }
  return targets;
}

void write_records_csv(const std::string& path, const SweepCurve& curve) {
  std::ofstream out(path);
  out << "image_id,epsilon,cer_vs_original,cer_vs_target\n";
  for (const auto& r : curve.records) {
    out << r.image_id << "," << fmt_double(r.epsilon) << ","
        << (r.cer_vs_original < 0 ? "" : fmt_double(r.cer_vs_original)) << ","
        << (r.cer_vs_target < 0 ? "" : fmt_double(r.cer_vs_target)) << "\n";
  }
}

}  // namespace

std::vector<std::string> run_sweep(const std::string& run_dir) {
  const ExperimentConfig cfg = ExperimentConfig::load(run_dir + "/config.ini");
  const Model model = Model::load(run_dir + "/model.sqat");
  const Dataset ds = generate_dataset(cfg.n_train, cfg.n_test, cfg.dataset_seed);

  const std::string attack_root = run_dir + "/attack";
  if (!fs::is_directory(attack_root)) {
    throw std::runtime_error("no attack runs under " + run_dir);
  }
  const std::string sweep_dir = run_dir + "/sweeps";
  fs::create_directories(sweep_dir);

  std::vector<std::string> attack_dirs;
  for (const auto& entry : fs::directory_iterator(attack_root)) {
    if (entry.is_directory()) attack_dirs.push_back(entry.path().string());
  }
  std::sort(attack_dirs.begin(), attack_dirs.end());

  std::vector<std::string> written;
  for (const std::string& dir : attack_dirs) {
    const ExperimentConfig acfg =
        ExperimentConfig::load(dir + "/attack_config.ini");
    const auto rows = read_manifest_rows(dir + "/manifest.csv");

    std::vector<Image> images;
    std::vector<Perturbation> deltas;
    std::vector<int> ids;
    std::vector<std::string> target_texts;
    const auto targets = acfg.mode == "targeted"
                             ? read_targets(dir + "/runrecord.csv")
                             : std::map<int, std::string>{};
    for (const auto& row : rows) {
      if (row.norm == 0.0) continue;  // degenerate delta cannot be scaled
      const int test_index = row.id - cfg.n_train;
      if (test_index < 0 || test_index >= static_cast<int>(ds.test.size())) {
        throw std::runtime_error("manifest id outside test split: " +
                                 std::to_string(row.id));
      }
      const Image& img = ds.test[static_cast<size_t>(test_index)].image;
      if (acfg.mode != "targeted" &&
          model.charset().decode(model.decode(img).seq).empty()) {
        // an empty clean transcription has no CER reference
        std::cerr << "sweep: skipping image " << row.id
                  << " (empty clean decode)\n";
        continue;
      }
      images.push_back(img);
      Perturbation p;
      p.delta = read_delta_blob(dir + "/" + row.file, kImageHeight, kImageWidth);
      p.l2_norm = p.delta.norm();
      p.method = row.method;
      p.converged = row.converged;
      deltas.push_back(std::move(p));
      ids.push_back(row.id);
      if (acfg.mode == "targeted") {
        const auto it = targets.find(row.id);
        if (it == targets.end()) {
          throw std::runtime_error("no target recorded for image " +
                                   std::to_string(row.id));
        }
        target_texts.push_back(it->second);
      }
    }

    const std::string tag = acfg.method + "_" + acfg.mode;
    SweepCurve curve;
    std::string curve_path;
    if (acfg.mode == "targeted") {
      curve = success_ratio_curve(model, images, deltas, target_texts,
                                  targeted_grid(), acfg.method == "cw", ids);
      curve_path = sweep_dir + "/sweep_targeted_" + acfg.method + ".csv";
    } else {
      curve = sweep_untargeted(model, images, deltas, untargeted_grid(), ids);
      curve_path = sweep_dir + "/sweep_untargeted_" + acfg.method + ".csv";
    }
    write_curve_csv(curve_path, curve);
    write_records_csv(sweep_dir + "/records_" + tag + ".csv", curve);
    written.push_back(curve_path);
  }
  return written;
}

// ---------------------------------------------------------------------------
// Report stage

void run_report(const std::vector<std::string>& sweep_csvs,
                const std::string& out_csv, const std::string& summary_path) {
  if (sweep_csvs.empty()) {
    throw std::invalid_argument("report: at least one sweep csv required");
  }
  struct Entry {
    std::string method;
    SweepCurve curve;
  };
  std::vector<Entry> entries;
  for (const std::string& path : sweep_csvs) {
    Entry e;
    e.curve = read_curve_csv(path);
    std::string stem = fs::path(path).stem().string();
    for (const std::string prefix : {"sweep_untargeted_", "sweep_targeted_", "sweep_"}) {
      if (stem.rfind(prefix, 0) == 0) {
        stem = stem.substr(prefix.size());
        break;
      }
    }
    e.method = stem;
    entries.push_back(std::move(e));
  }

  // grids must agree within a metric kind
  for (size_t i = 0; i < entries.size(); ++i) {
    for (size_t j = i + 1; j < entries.size(); ++j) {
      if (entries[i].curve.metric_kind != entries[j].curve.metric_kind) continue;
      if (entries[i].curve.grid != entries[j].curve.grid) {
        throw std::runtime_error("inconsistent grids across sweep inputs");
      }
    }
  }

  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("cannot open for writing: " + out_csv);
  out << "method,epsilon,value\n";
  for (const auto& e : entries) {
    for (size_t k = 0; k < e.curve.grid.size(); ++k) {
      out << e.method << "," << fmt_double(e.curve.grid[k]) << ","
          << fmt_double(e.curve.values[k]) << "\n";
    }
  }

  std::ofstream summary(summary_path);
  if (!summary) throw std::runtime_error("cannot open for writing: " + summary_path);
  std::vector<const Entry*> ratio, mean_cer;
  for (const auto& e : entries) {
    (e.curve.metric_kind == "success_ratio" ? ratio : mean_cer).push_back(&e);
  }
  const auto by_endpoint_desc = [](const Entry* a, const Entry* b) {
    const double va = a->curve.values.back(), vb = b->curve.values.back();
    if (va != vb) return va > vb;
    return a->method < b->method;
  };
  std::sort(ratio.begin(), ratio.end(), by_endpoint_desc);
  if (!ratio.empty()) {
    summary << "success ratio at grid endpoint (epsilon = "
            << fmt_double(ratio.front()->curve.grid.back()) << "):\n";
    for (const Entry* e : ratio) {
      summary << "  " << e->method << ": " << fmt_double(e->curve.values.back())
              << "\n";
    }
  }
  std::sort(mean_cer.begin(), mean_cer.end(), [](const Entry* a, const Entry* b) {
    const double va = *std::max_element(a->curve.values.begin(), a->curve.values.end());
    const double vb = *std::max_element(b->curve.values.begin(), b->curve.values.end());
    if (va != vb) return va > vb;
    return a->method < b->method;
  });
  if (!mean_cer.empty()) {
    if (!ratio.empty()) summary << "\n";
    summary << "max mean CER over the sweep grid:\n";
    for (const Entry* e : mean_cer) {
      const auto it =
          std::max_element(e->curve.values.begin(), e->curve.values.end());
      const size_t k = static_cast<size_t>(it - e->curve.values.begin());
      summary << "  " << e->method << ": " << fmt_double(*it) << " (epsilon "
              << fmt_double(e->curve.grid[k]) << ")\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Verification helpers

int verify_attack_dir(const std::string& run_dir, const std::string& attack_dir) {
  const ExperimentConfig cfg = ExperimentConfig::load(run_dir + "/config.ini");
  const ExperimentConfig acfg =
      ExperimentConfig::load(attack_dir + "/attack_config.ini");
  const Model model = Model::load(run_dir + "/model.sqat");
  const Dataset ds = generate_dataset(cfg.n_train, cfg.n_test, cfg.dataset_seed);
  const auto rows = read_manifest_rows(attack_dir + "/manifest.csv");
  const auto targets = acfg.mode == "targeted"
                           ? read_targets(attack_dir + "/runrecord.csv")
                           : std::map<int, std::string>{};
  int checked = 0;
  for (const auto& row : rows) {
    const std::string path = attack_dir + "/" + row.file;
    if (!fs::exists(path) || fs::file_size(path) != row.bytes) {
      throw std::runtime_error("manifest integrity violation for " + row.file);
    }
    const Image delta = read_delta_blob(path, kImageHeight, kImageWidth);
    if (acfg.mode == "targeted" && row.converged) {
      const Image& x = ds.test[static_cast<size_t>(row.id - cfg.n_train)].image;
      const Decoded d = model.decode(x + delta);
      const std::string text = model.charset().decode(d.seq);
      if (text != targets.at(row.id)) {
        throw std::runtime_error(
            "converged perturbation does not reproduce its target (image " +
            std::to_string(row.id) + ")");
      }
    }
    ++checked;
  }
  return checked;
}

}  // namespace sqat
