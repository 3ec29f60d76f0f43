// Acceptance runner: prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails.
//
//   acceptance [--criteria 1,2,...] [--work DIR] [--verbose]
//
// Criteria 7 and 8 train 500-step runs on the 40-volume toy split. Each
// finished cell is appended to a CSV in the work directory together with a
// fingerprint of its configuration and data; later invocations with the same
// fingerprint reuse the row instead of retraining.

#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "c3s3/check.hpp"
#include "c3s3/trainer.hpp"
#include "c3s3/volumes.hpp"

namespace fs = std::filesystem;
using namespace c3s3;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool verbose = false;

void dump(const check::SuiteResult& r) {
  if (!verbose && r.passed()) return;
  check::print_table(stderr, {r}, verbose);
}

Outcome from_suite(const check::SuiteResult& r, const std::string& extra = {}) {
  dump(r);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: %zu instances, %zu failures, %.1fs", r.name.c_str(), r.instances, r.failures,
                r.seconds);
  Outcome o{r.passed(), buf};
  if (!extra.empty()) o.detail += "; " + extra;
  if (!r.errors.empty()) o.detail += "; first failure: " + r.errors.front();
  return o;
}

check::Options full_options() { return check::Options::full(); }

// --- 1 ---------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto r = check::gradient_suite(full_options());
  Outcome o = from_suite(r);
  if (r.seconds >= 300.0) {
    o.pass = false;
    o.detail += "; exceeded the 5 minute budget";
  }
  return o;
}

// --- 6 ---------------------------------------------------------------------

std::vector<std::string> rows_of(const std::string& log) {
  std::vector<std::string> rows;
  std::istringstream in(log);
  std::string line;
  while (std::getline(in, line)) rows.push_back(line);
  return rows;
}

std::string run_log(TrainState& state, const DataSplit& split) {
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  train(state, split, hooks);
  return log.str();
}

bool same_parameters(TrainState& x, TrainState& y) {
  const auto px = x.parameter_list(), py = y.parameter_list();
  if (px.size() != py.size()) return false;
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (px[i]->numel() != py[i]->numel()) return false;
    if (std::memcmp(px[i]->data().data(), py[i]->data().data(), px[i]->numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

Outcome determinism(const fs::path& work) {
  const DataSplit split = generate_split(12, {16, 16, 16}, 0.25, 0.25, 3);
  TrainingConfig cfg;
  cfg.steps = 10;
  cfg.seed = 11;

  TrainState first(cfg), second(cfg);
  const std::string log1 = run_log(first, split), log2 = run_log(second, split);
  if (log1 != log2) return {false, "two fixed-seed 10-step runs produced different loss logs"};
  if (!same_parameters(first, second)) return {false, "two fixed-seed runs ended with different parameters"};

  TrainingConfig half = cfg;
  half.steps = 5;
  TrainState broken(half);
  const std::string head = run_log(broken, split);
  const fs::path dir = work / "determinism_checkpoint";
  fs::remove_all(dir);
  checkpoint(broken, dir);
  TrainState resumed = resume(dir);
  resumed.config.steps = cfg.steps;
  const std::string tail = run_log(resumed, split);

  const auto full_rows = rows_of(log1), head_rows = rows_of(head), tail_rows = rows_of(tail);
  if (head_rows.size() != 5 || tail_rows.size() != 5 || full_rows.size() != 10) {
    return {false, "unexpected log lengths"};
  }
  for (std::size_t i = 0; i < 5; ++i) {
    if (head_rows[i] != full_rows[i]) return {false, "pre-checkpoint step " + std::to_string(i) + " differs"};
    if (tail_rows[i] != full_rows[5 + i]) {
      return {false, "post-resume step " + std::to_string(5 + i) + " differs: " + tail_rows[i] + " vs " +
                         full_rows[5 + i]};
    }
  }
  if (!same_parameters(resumed, first)) return {false, "resumed run ended with different parameters"};
  return {true, "10-step logs identical across runs; 5 post-resume steps and final parameters identical"};
}

// --- 7 and 8 ---------------------------------------------------------------

constexpr std::size_t kToySteps = 500;
constexpr double kMinGapDice = 0.02;
constexpr double kGridBudgetSeconds = 4.0 * 3600.0;

TrainingConfig toy_config() {
  TrainingConfig cfg;
  cfg.steps = kToySteps;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 1e-3;
  return cfg;
}

const DataSplit& toy_split() {
  // 40 volumes at 32^3: 20 test, then 4 labeled and 16 unlabeled.
  static const DataSplit split = generate_split(40, {32, 32, 32}, 0.2, 0.5, 0);
  return split;
}

std::uint64_t data_fingerprint(const DataSplit& split) {
  std::uint64_t h = fnv1a64("", 0);
  for (const auto& s : split.test) {
    h = fnv1a64(s.image.voxels.data(), s.image.voxels.size() * sizeof(float), h);
    h = fnv1a64(s.label.voxels.data(), s.label.voxels.size(), h);
  }
  for (const auto& s : split.labeled) {
    h = fnv1a64(s.image.voxels.data(), s.image.voxels.size() * sizeof(float), h);
    h = fnv1a64(s.label.voxels.data(), s.label.voxels.size(), h);
  }
  for (const auto& v : split.unlabeled) h = fnv1a64(v.voxels.data(), v.voxels.size() * sizeof(float), h);
  return h;
}

struct CachedCell {
  double dice = 0.0, seconds = 0.0;
  std::string row;
};

// Cells keyed by id; rows from a different fingerprint are ignored.
class CellCache {
 public:
  CellCache(fs::path path, std::string fingerprint) : path_(std::move(path)), fingerprint_(std::move(fingerprint)) {
    std::ifstream in(path_);
    std::string line;
    if (!std::getline(in, line) || line != "# " + fingerprint_) return;
    std::getline(in, line);  // column header
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() < 15 || f[6] != "ok") continue;
      cells_[f[0]] = {std::stod(f[8]), std::stod(f[14]), line};
    }
  }

  const CachedCell* find(const std::string& id) const {
    auto it = cells_.find(id);
    return it == cells_.end() ? nullptr : &it->second;
  }

  void store(const CellResult& r) {
    std::ostringstream row;
    write_ablation_row(row, r);
    std::string line = row.str();
    line.pop_back();
    if (r.ok) cells_[r.cell.id] = {r.best.dice, r.seconds, line};
    // Rewrite the file so it only ever holds this fingerprint's rows.
    const fs::path tmp = path_.string() + ".tmp";
    {
      std::ofstream out(tmp);
      out << "# " << fingerprint_ << '\n';
      write_ablation_header(out);
      for (const auto& [id, c] : cells_) out << c.row << '\n';
    }
    fs::rename(tmp, path_);
  }

 private:
  fs::path path_;
  std::string fingerprint_;
  std::map<std::string, CachedCell> cells_;
};

struct GridRun {
  std::map<std::string, CachedCell> cells;
  std::vector<std::string> failures;
  double seconds = 0.0;  // training time summed over cells, cached or not
};

GridRun run_grid(const AblationGrid& grid, CellCache& cache) {
  GridRun out;
  for (const auto& cell : grid.cells()) {
    const CachedCell* hit = cache.find(cell.id);
    if (!hit) {
      std::fprintf(stderr, "training %s ...\n", cell.id.c_str());
      AblationGrid one{{cell.flags}, {cell.alpha}, {cell.seed}};
      const auto results = run_ablation(toy_config(), one, toy_split());
      const CellResult& r = results.front();
      if (!r.ok) {
        out.failures.push_back(cell.id + ": " + r.error);
        continue;
      }
      cache.store(r);
      hit = cache.find(cell.id);
      std::fprintf(stderr, "  dice %.4f in %.0fs\n", hit->dice, hit->seconds);
    }
    out.cells[cell.id] = *hit;
    out.seconds += hit->seconds;
  }
  return out;
}

CellCache open_cache(const fs::path& work, const char* name) {
  char fp[64];
  std::snprintf(fp, sizeof fp, "data %016llx", static_cast<unsigned long long>(data_fingerprint(toy_split())));
  const std::string fingerprint = std::string(fp) + " config " + config_to_json(toy_config()).dump();
  return CellCache(work / name, fingerprint);
}

Outcome module_ablation(const fs::path& work) {
  CellCache cache = open_cache(work, "ablation_cells.csv");
  AblationGrid grid{AblationGrid::module_rows(), {toy_config().weights.alpha}, {0, 1, 2}};
  const GridRun run = run_grid(grid, cache);
  if (!run.failures.empty()) return {false, "cell failed: " + run.failures.front()};

  // Mean best-backbone Dice per module row over the three seeds.
  std::vector<double> mean;
  for (const auto& f : grid.flags) {
    AblationGrid row{{f}, grid.alphas, grid.seeds};
    double s = 0.0;
    for (const auto& c : row.cells()) s += run.cells.at(c.id).dice;
    mean.push_back(s / static_cast<double>(grid.seeds.size()));
  }
  const double none = mean[0], odcl = mean[1], dcc = mean[2], full = mean[3];
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "mean Dice: none %.4f, ODCL %.4f, DCC %.4f, full %.4f; gap %+.2f points; grid %.2f h", none, odcl,
                dcc, full, 100.0 * (full - none), run.seconds / 3600.0);
  std::vector<std::string> why;
  if (!(full >= odcl && full >= dcc)) why.push_back("full below a single-module row");
  if (!(odcl >= none && dcc >= none)) why.push_back("a single-module row below the baseline");
  if (!(full - none >= kMinGapDice)) why.push_back("gap under 2 points");
  if (!(run.seconds < kGridBudgetSeconds)) why.push_back("grid over 4 h");
  std::string detail = buf;
  for (const auto& w : why) detail += "; " + w;
  return {why.empty(), detail};
}

Outcome alpha_sweep(const fs::path& work) {
  CellCache cache = open_cache(work, "ablation_cells.csv");
  AblationGrid grid{{AblationFlags{}}, {0.0, 0.5, 0.8, 1.0}, {0}};
  const GridRun run = run_grid(grid, cache);
  if (!run.failures.empty()) return {false, "cell failed: " + run.failures.front()};
  std::string detail = "Dice by alpha:";
  double lo = 1.0, hi = 0.0;
  for (const auto& c : grid.cells()) {
    const double d = run.cells.at(c.id).dice;
    char buf[48];
    std::snprintf(buf, sizeof buf, " %.1f=%.4f", c.alpha, d);
    detail += buf;
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "; spread %.2f points", 100.0 * (hi - lo));
  return {true, detail + buf};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string criteria = "1,2,3,4,5,6,7,8";
  std::string work = "acceptance_work";
  app.add_option("--criteria", criteria, "Comma-separated criterion numbers")->capture_default_str();
  app.add_option("--work", work, "Directory for checkpoints and cached grid results")->capture_default_str();
  app.add_flag("--verbose", verbose, "Print suite notes");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  {
    std::stringstream ss(criteria);
    std::string part;
    while (std::getline(ss, part, ',')) {
      const int n = std::atoi(part.c_str());
      if (n < 1 || n > 8) {
        std::fprintf(stderr, "unknown criterion '%s'\n", part.c_str());
        return 2;
      }
      selected.insert(n);
    }
  }
  const fs::path work_dir(work);
  fs::create_directories(work_dir);

  const auto opts = full_options();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> all = {
      {"gradient oracle", [] { return gradient_oracle(); }},
      {"metric oracle", [&] { return from_suite(check::metric_suite(opts)); }},
      {"mask algebra", [&] { return from_suite(check::mask_suite(opts)); }},
      {"stop-gradient contract", [&] { return from_suite(check::stop_gradient_suite(opts)); }},
      {"contrastive closed form", [&] { return from_suite(check::contrastive_suite(opts)); }},
      {"determinism and resume", [&] { return determinism(work_dir); }},
      {"module ablation ordering", [&] { return module_ablation(work_dir); }},
      {"alpha sensitivity sweep", [&] { return alpha_sweep(work_dir); }},
  };

  int failed = 0;
  for (int n : selected) {
    const auto& [name, run] = all[static_cast<std::size_t>(n - 1)];
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%zu criteria, %d failed\n", selected.size(), failed);
  return failed ? 1 : 0;
}
