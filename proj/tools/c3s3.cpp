// c3s3: dataset generation, training, evaluation, ablation grids and oracle
// checks for the dual-backbone semi-supervised segmenter.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure (NaN),
// 5 oracle failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "c3s3/check.hpp"
#include "c3s3/goldens.hpp"
#include "c3s3/trainer.hpp"
#include "c3s3/volumes.hpp"

namespace fs = std::filesystem;
using namespace c3s3;

namespace {

constexpr const char* kVersion = "0.1.0";

int code(ExitCode c) { return static_cast<int>(c); }

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

TrainingConfig load_config(const fs::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
  return config_from_json(j);
}

Extent3 parse_shape(const std::string& s) {
  Extent3 e{};
  std::stringstream ss(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw ConfigError("--shape takes three extents D,H,W");
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(part, &used);
    } catch (const std::exception&) {
      throw ConfigError("--shape: '" + part + "' is not an integer");
    }
    if (used != part.size() || v <= 0) throw ConfigError("--shape: extents must be positive integers");
    e[i++] = static_cast<std::size_t>(v);
  }
  if (i != 3) throw ConfigError("--shape takes three extents D,H,W");
  return e;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw ConfigError("'" + part + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(std::stod(part));
    } catch (const std::exception&) {
      throw ConfigError("'" + part + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

void write_metrics(const fs::path& path, const EvaluationReport& report) {
  auto out = open_out(path);
  write_evaluation_csv(out, report);
}

void print_summary(const EvaluationReport& r) {
  auto line = [](const char* tag, const MetricSummary& s) {
    std::printf("%-8s dice %.4f  jaccard %.4f  hd95 %s  asd %s\n", tag, s.dice, s.jaccard,
                format_metric(s.hd95).c_str(), format_metric(s.asd).c_str());
  };
  line("A", r.summary_a());
  line("B", r.summary_b());
  line(r.best == Winner::A ? "best(A)" : "best(B)", r.summary_best());
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t count = 40;
  std::string shape = "32,32,32";
  double labeled_frac = 0.2;
  double test_frac = 0.25;
  std::uint64_t seed = 0;
};

int run_gen_data(const GenDataArgs& a) {
  const Extent3 shape = parse_shape(a.shape);
  const auto sizes = split_sizes(a.count, a.labeled_frac, a.test_frac);
  const DataSplit split = generate_split(a.count, shape, a.labeled_frac, a.test_frac, a.seed);
  save_split(a.out, split);
  std::printf("wrote %zu volumes to %s: %zu test, %zu labeled, %zu unlabeled\n", a.count, a.out.c_str(), sizes.test,
              sizes.labeled, sizes.unlabeled);
  return 0;
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::size_t checkpoint_every = 0;
};

int run_train(const TrainArgs& a) {
  const TrainingConfig cfg = load_config(a.config);
  const DataSplit split = load_split(a.data);
  if (split.test.empty()) throw DataError(a.data + ": split has no test samples to evaluate");

  TrainState state = a.resume.empty() ? TrainState(cfg) : resume(a.resume);
  if (!a.resume.empty()) {
    // A resumed run may extend the step budget; everything else must match.
    TrainingConfig expected = cfg;
    expected.steps = state.config.steps;
    if (config_to_json(expected) != config_to_json(state.config)) {
      throw ConfigError("--config differs from the checkpoint's configuration in more than 'steps'");
    }
    if (cfg.steps < state.step) {
      throw ConfigError("checkpoint is at step " + std::to_string(state.step) + ", beyond the configured " +
                        std::to_string(cfg.steps) + " steps");
    }
    state.config.steps = cfg.steps;
  }

  const fs::path out_dir(a.out);
  fs::create_directories(out_dir);
  auto log = open_out(out_dir / "train_log.csv");
  write_log_header(log, state.config);

  TrainHooks hooks;
  hooks.log = &log;
  hooks.on_step = [&](const StepRecord& r) {
    if (a.checkpoint_every > 0 && (r.step + 1) % a.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu", r.step + 1);
      checkpoint(state, out_dir / "checkpoints" / name);
    }
    if ((r.step + 1) % 50 == 0) {
      std::fprintf(stderr, "step %zu total %.5f seg %.5f winner %s\n", r.step + 1, r.total, r.seg,
                   winner_name(r.winner));
    }
  };
  hooks.on_eval = [&](const TrainState& s) {
    const auto report = evaluate(s, split.test);
    char name[48];
    std::snprintf(name, sizeof name, "metrics_step_%06zu.csv", s.step);
    write_metrics(out_dir / name, report);
  };
  train(state, split, hooks);
  log.flush();

  checkpoint(state, out_dir / "checkpoint");
  const auto report = evaluate(state, split.test);
  write_metrics(out_dir / "metrics.csv", report);
  print_summary(report);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out;
};

int run_eval(const EvalArgs& a) {
  const TrainState state = resume(a.checkpoint);
  const DataSplit split = load_split(a.data);
  const auto report = evaluate(state, split.test);
  if (a.out.empty()) {
    write_evaluation_csv(std::cout, report);
  } else {
    write_metrics(a.out, report);
    print_summary(report);
  }
  return 0;
}

struct AblateArgs {
  std::string config, data, out;
  std::string grid = "modules";
  std::string seeds = "0,1,2";
  std::string alphas = "0,0.5,0.8,1";
};

int run_ablate(const AblateArgs& a) {
  const TrainingConfig base = load_config(a.config);
  const DataSplit split = load_split(a.data);
  AblationGrid grid;
  grid.seeds = parse_u64_list(a.seeds);
  if (a.grid == "modules") {
    grid.flags = AblationGrid::module_rows();
    grid.alphas = {base.weights.alpha};
  } else if (a.grid == "alpha") {
    grid.flags = {base.ablation};
    grid.alphas = parse_double_list(a.alphas);
  } else {
    throw ConfigError("--grid must be 'modules' or 'alpha'");
  }
  const fs::path out(a.out);
  auto csv = open_out(out);
  write_ablation_header(csv);
  std::size_t failed = 0;
  run_ablation(base, grid, split, [&](const CellResult& r) {
    write_ablation_row(csv, r);
    csv.flush();
    failed += !r.ok;
    std::fprintf(stderr, "%s: %s\n", r.cell.id.c_str(),
                 r.ok ? ("dice " + format_metric(r.best.dice)).c_str() : ("failed: " + r.error).c_str());
  });
  std::printf("wrote %s (%zu cells, %zu failed)\n", out.string().c_str(), grid.cells().size(), failed);
  return 0;
}

struct CheckArgs {
  bool quick = false, full = false, verbose = false;
  std::string fault;
};

int run_check(const CheckArgs& a) {
  if (a.quick == a.full) throw ConfigError("check needs exactly one of --quick or --full");
  if (a.fault == "relu") {
    debug::injected_fault = debug::Fault::relu_backward_sign;
  } else if (a.fault == "conv") {
    debug::injected_fault = debug::Fault::conv_weight_grad_sign;
  } else if (!a.fault.empty()) {
    throw ConfigError("--inject-fault must be 'relu' or 'conv'");
  }
  const auto results = check::run_all(a.full ? check::Options::full() : check::Options::quick());
  check::print_table(stdout, results, a.verbose || a.full);
  for (const auto& r : results) {
    if (!r.passed()) return code(ExitCode::oracle);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-backbone semi-supervised volumetric segmentation"};
  app.require_subcommand(0, 1);
  bool version = false;
  app.add_flag("--version", version, "Print version and golden-value hash as JSON");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-data",
      "Generate a synthetic split. Partition rule: test = floor(test_frac * count); the remaining "
      "train volumes give labeled = floor(labeled_frac * train) and unlabeled = the rest. "
      "Example: --count 40 --labeled-frac 0.2 --test-frac 0.25 gives 10 test, 6 labeled, 24 unlabeled.");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of volumes")->capture_default_str();
  gen_cmd->add_option("--shape", gen.shape, "Volume extents D,H,W (each >= 16)")->capture_default_str();
  gen_cmd->add_option("--labeled-frac", gen.labeled_frac, "Labeled fraction of the train part, in (0, 1)")
      ->capture_default_str();
  gen_cmd->add_option("--test-frac", gen.test_frac, "Test fraction of all volumes, in [0, 1)")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train both backbones; writes train_log.csv, checkpoint/, metrics.csv");
  train_cmd->add_option("--config", tr.config, "Training config JSON")->required();
  train_cmd->add_option("--data", tr.data, "Split directory from gen-data")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--resume", tr.resume, "Checkpoint directory to continue from");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every,
                        "Also write checkpoints/step_NNNNNN every N steps (0 = off)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", ev.data, "Split directory")->required();
  eval_cmd->add_option("--out", ev.out, "Metrics CSV (stdout if omitted)");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train one run per grid cell and write a metrics CSV");
  ablate_cmd->add_option("--config", ab.config, "Base training config JSON")->required();
  ablate_cmd->add_option("--data", ab.data, "Split directory")->required();
  ablate_cmd->add_option("--out", ab.out, "Output CSV")->required();
  ablate_cmd->add_option("--grid", ab.grid, "'modules' ({+-contrastive} x {+-competition}) or 'alpha'")
      ->capture_default_str();
  ablate_cmd->add_option("--seeds", ab.seeds, "Comma-separated seeds")->capture_default_str();
  ablate_cmd->add_option("--alphas", ab.alphas, "Comma-separated alpha values for --grid alpha")
      ->capture_default_str();

  CheckArgs ck;
  auto* check_cmd = app.add_subcommand("check", "Run the oracle suites and print a pass/fail table");
  check_cmd->add_flag("--quick", ck.quick, "Small instance counts");
  check_cmd->add_flag("--full", ck.full, "Full instance counts with per-suite notes");
  check_cmd->add_flag("--verbose", ck.verbose, "Print per-case notes in --quick mode too");
  check_cmd->add_option("--inject-fault", ck.fault, "Corrupt a backward rule first: relu | conv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : code(ExitCode::usage);
  }

  try {
    if (version) {
      const nlohmann::json v = {{"name", "c3s3"},
                                {"version", kVersion},
                                {"golden_hash", [] {
                                   char buf[20];
                                   std::snprintf(buf, sizeof buf, "%016llx",
                                                 static_cast<unsigned long long>(golden::golden_hash()));
                                   return std::string(buf);
                                 }()},
                                {"goldens", golden::golden_text()}};
      std::printf("%s\n", v.dump().c_str());
      return 0;
    }
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*ablate_cmd) return run_ablate(ab);
    if (*check_cmd) return run_check(ck);
    std::fputs(app.help().c_str(), stdout);
    return code(ExitCode::usage);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure in %s: %s\n", e.component().c_str(), e.what());
    return code(ExitCode::numeric);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return code(ExitCode::usage);
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return code(ExitCode::data);
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return code(ExitCode::data);
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return code(ExitCode::data);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
