// Acceptance runner: one PASS/FAIL line per criterion, on the desk-scale
// recipe below. The pretrained base is cached per config hash under the
// directory given as the first argument, so reruns skip pretraining.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "edlab/cli.hpp"
#include "edlab/config.hpp"
#include "gradcheck.hpp"

using namespace edlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

int g_pass = 0, g_fail = 0;

void verdict(const std::string& name, bool ok, const std::string& detail) {
  (ok ? g_pass : g_fail) += 1;
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

// The desk-scale recipe. Everything else is the config default.
const std::vector<std::string> kRecipe = {
    "model.n_layers=6",       "model.d_model=64",        "model.n_heads=4",         "model.d_mlp=256",
    "model.max_seq_len=32",   "data.n_entities=300",     "data.n_relations=5",      "data.n_facts=1500",
    "data.n_edits=1000",      "data.n_probe_facts=200",  "pretrain.epochs=40",      "pretrain.lr=0.003",
    "pretrain.threshold=1.0", "edit.location=layer5.FULL_MLP", "edit.lr=0.0003",    "seed=7"};

// Editing budgets per criterion.
constexpr int kBfEpochs = 150;
constexpr int kBatchStudyEdits = 200;
constexpr int kBatchStudyEpochs = 20;
constexpr int kStreamEpochs = 60;
// BF stops once the training set is this accurate; past it, batch-1 runs drift back down.
constexpr double kBfStop = 0.95;
constexpr int kHermeticEdits = 16;

std::vector<std::string> with_out(const std::string& cmd, const fs::path& dir, std::vector<std::string> extra) {
  std::vector<std::string> args = {cmd, "--out", dir.string()};
  for (const auto& o : extra) {
    args.push_back("--override");
    args.push_back(o);
  }
  return args;
}

void run_cli(const std::string& cmd, const fs::path& dir, const std::vector<std::string>& overrides) {
  std::ostringstream out, err;
  const int code = cli::run(with_out(cmd, dir, overrides), out, err);
  if (code != cli::kOk) throw std::runtime_error(cmd + " failed: " + err.str() + out.str());
}

// Data, base model and baseline for one resolved config.
struct Lab {
  ExperimentConfig cfg;
  fs::path dir;
  FactWorld world;
  std::vector<EditExample> edits;
  Tokenizer tok;
  std::vector<TokenizedEdit> tedits;
  TokenizedProbes tprobes;
  TransformerLM base;
  CapabilityBaseline baseline;

  Lab(const ExperimentConfig& c, const fs::path& d)
      : cfg(c),
        dir(d),
        world(load_world(d / "world.json")),
        edits(load_edits(d / "edits.jsonl")),
        tok(world),
        tedits(tokenize_edits(tok, edits)),
        tprobes(tokenize_probes(tok, load_probes(d / "probes.jsonl"))),
        base(load_checkpoint(d / "base.ckpt").model),
        baseline(capability_baseline(base, tprobes)) {}

  PipelineConfig pipeline() const {
    PipelineConfig p = cfg.edit;
    p.bf_stop_reliability = kBfStop;
    p.shuffle_seed = derive_seed(cfg.seed, "shuffle");
    return p;
  }
};

Lab prepare(const fs::path& cache_root, const std::vector<std::string>& overrides) {
  const ExperimentConfig cfg = load_config(nullptr, overrides);
  const fs::path dir = cache_root / hex(config_hash(cfg));
  if (!fs::exists(dir / "baseline.json")) {
    std::cout << "preparing base model in " << dir.string() << " (cached for later runs)" << std::endl;
    run_cli("gen-data", dir, overrides);
    run_cli("pretrain", dir, overrides);
  }
  return Lab(cfg, dir);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- criteria ----

void gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const double e = testing::gradcheck_error(c, seed);
      ++checks;
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  const double secs = since(t0);
  verdict("gradient-correctness", worst < 1e-4 && secs < 60.0,
          std::to_string(checks) + " checks, worst relative error " + fmt(worst * 1e6, 3) + "e-6 (" + worst_name +
              "), " + fmt(secs) + "s");
}

void hermeticity(const Lab& lab) {
  const auto t0 = Clock::now();
  const auto locations = enumerate_locations(lab.base.config());
  Rng rng(derive_seed(lab.cfg.seed, "hermeticity"));
  int clean = 0;
  std::string bad;
  for (int trial = 0; trial < 10; ++trial) {
    const std::uint64_t seed = rng.next();
    const ParamLocation loc = locations[rng.below(locations.size())];
    const std::size_t start = rng.below(lab.tedits.size() - kHermeticEdits);
    const std::span<const TokenizedEdit> subset(lab.tedits.data() + start, kHermeticEdits);
    PipelineConfig p = lab.pipeline();
    p.location = loc;
    p.max_epochs = 2;
    p.shuffle_seed = seed;
    p.bf_stop_reliability = std::nullopt;
    TransformerLM m = lab.base;
    edit_breadth_first(m, subset, p);
    const bool moved = m.hash() != lab.base.hash();
    if (moved && changed_outside(lab.base, m, loc).empty()) {
      ++clean;
    } else {
      bad += " " + loc.label();
    }
  }
  const double secs = since(t0);
  verdict("localization-hermeticity", clean == 10 && secs < 300.0,
          std::to_string(clean) + "/10 runs changed only their location" + (bad.empty() ? "" : " (failed:" + bad + ")") +
              ", " + fmt(secs) + "s");
}

struct PipelineRuns {
  double df_rel = 0.0, bf_rel = 0.0, last_rel = 0.0;
  double df_drop = 0.0;
  DynamicsTrace df_trace, bf_trace;
};

PipelineRuns pipeline_runs(const Lab& lab) {
  PipelineRuns r;
  PipelineConfig base_cfg = lab.pipeline();
  base_cfg.batch_size = 1;
  base_cfg.trace_shards = 5;

  {
    PipelineConfig p = base_cfg;
    p.pipeline = Pipeline::DepthFirst;
    TransformerLM m = lab.base;
    const auto t0 = Clock::now();
    r.df_trace = edit_depth_first(m, lab.tedits, p).trace;
    r.df_rel = reliability(m, lab.tedits);
    std::cout << "  DF: reliability " << fmt(r.df_rel) << "%, " << fmt(since(t0)) << "s" << std::endl;
  }
  {
    PipelineConfig p = base_cfg;
    p.max_epochs = kBfEpochs;
    TransformerLM m = lab.base;
    const auto t0 = Clock::now();
    const EditResult res = edit_breadth_first(m, lab.tedits, p);
    r.bf_trace = res.trace;
    r.bf_rel = reliability(m, lab.tedits);
    std::cout << "  BF: reliability " << fmt(r.bf_rel) << "% after " << res.epochs_run << " epochs, "
              << fmt(since(t0)) << "s" << std::endl;
  }
  {
    PipelineConfig p = base_cfg;
    p.max_epochs = kBfEpochs;
    p.loss_mode = LossMode::LastToken;
    TransformerLM m = lab.base;
    const auto t0 = Clock::now();
    const EditResult res = edit_breadth_first(m, lab.tedits, p);
    r.last_rel = reliability(m, lab.tedits);
    std::cout << "  BF LAST_TOKEN: reliability " << fmt(r.last_rel) << "% after " << res.epochs_run << " epochs, "
              << fmt(since(t0)) << "s" << std::endl;
  }
  return r;
}

void df_overwriting(const PipelineRuns& r) {
  const auto& cps = r.df_trace.checkpoints;
  if (cps.size() != 5) {
    verdict("df-overwriting", false, "expected 5 DF checkpoints, got " + std::to_string(cps.size()));
    return;
  }
  const double own = 100.0 * cps.front().success[0];
  const double last = 100.0 * cps.back().success[0];
  verdict("df-overwriting", own - last >= 20.0,
          "shard-1 success " + fmt(own) + "% at its checkpoint, " + fmt(last) + "% at the end (drop " + fmt(own - last) +
              " points, need >= 20)");
}

void bf_joint_convergence(const PipelineRuns& r) {
  const auto& cps = r.bf_trace.checkpoints;
  double worst_dip = 0.0;
  for (std::size_t c = 1; c < cps.size(); ++c)
    for (std::size_t s = 0; s < cps[c].success.size(); ++s)
      worst_dip = std::max(worst_dip, 100.0 * (cps[c - 1].success[s] - cps[c].success[s]));
  verdict("bf-joint-convergence", r.bf_rel >= 95.0 && worst_dip <= 2.0,
          "final reliability " + fmt(r.bf_rel) + "% (need >= 95), largest per-shard dip between epochs " +
              fmt(worst_dip) + " points (need <= 2) over " + std::to_string(cps.size()) + " epochs");
}

void pipeline_ordering(const PipelineRuns& r) {
  verdict("pipeline-ordering", r.bf_rel - r.df_rel >= 10.0,
          "BF " + fmt(r.bf_rel) + "% vs DF " + fmt(r.df_rel) + "% (gap " + fmt(r.bf_rel - r.df_rel) + ", need >= 10)");
}

void loss_mode_ordering(const PipelineRuns& r) {
  verdict("loss-mode-ordering", r.bf_rel - r.last_rel >= 30.0,
          "FULL_TARGET " + fmt(r.bf_rel) + "% vs LAST_TOKEN " + fmt(r.last_rel) + "% (gap " +
              fmt(r.bf_rel - r.last_rel) + ", need >= 30)");
}

void batch_size_capability(const Lab& lab) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t s = 0; s < 3; ++s) {
    std::vector<TokenizedEdit> subset = lab.tedits;
    Rng rng(derive_seed(lab.cfg.seed, "batch-study", s));
    rng.shuffle(subset);
    subset.resize(kBatchStudyEdits);
    double ratio[2] = {0.0, 0.0};
    const int sizes[2] = {1, 32};
    for (int k = 0; k < 2; ++k) {
      PipelineConfig p = lab.pipeline();
      p.batch_size = sizes[k];
      p.max_epochs = kBatchStudyEpochs;
      p.bf_stop_reliability = std::nullopt;
      p.shuffle_seed = derive_seed(lab.cfg.seed, "batch-shuffle", s);
      TransformerLM m = lab.base;
      edit_breadth_first(m, subset, p);
      ratio[k] = capability(m, lab.tprobes, lab.baseline).ppl_ratio;
    }
    ok = ok && ratio[1] <= ratio[0];
    detail += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + ": batch 32 " + fmt(ratio[1], 3) +
              " vs batch 1 " + fmt(ratio[0], 3);
  }
  verdict("batch-size-capability", ok, "ppl ratio " + detail);
}

void heuristic_arithmetic() {
  bool ok = proportional_position({6, Selector::MlpDown}, 28, 80) == ParamLocation{19, Selector::MlpDown};
  for (int target : {4, 28, 80})
    for (int i = 0; i < std::min(28, target); ++i)
      ok = ok && default_position({i, Selector::FullMlp}, target) == ParamLocation{i, Selector::FullMlp};
  bool monotone = true;
  for (int src = 1; src <= 40; ++src)
    for (int dst = 1; dst <= 96; ++dst) {
      int prev = -1;
      for (int i = 0; i < src; ++i) {
        const int got = proportional_position({i, Selector::MlpDown}, src, dst).layer_index;
        monotone = monotone && got >= prev;
        prev = got;
      }
    }
  verdict("heuristic-arithmetic", ok && monotone,
          "proportional (6, 28 -> 80) = " +
              std::to_string(proportional_position({6, Selector::MlpDown}, 28, 80).layer_index) +
              ", default is the identity, monotone over all depths up to 40 -> 96: " + (monotone ? "yes" : "no"));
}

void sweep_integrity(const Lab& lab) {
  const auto t0 = Clock::now();
  const auto locations = enumerate_locations(lab.base.config());
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(lab.cfg.sweep.n_edits), lab.tedits.size());
  const std::span<const TokenizedEdit> subset(lab.tedits.data(), n);
  const SweepResult res = sweep(lab.base, subset, lab.pipeline(), locations, lab.tprobes, lab.baseline);
  bool restored = res.restored_hashes.size() == res.rows.size();
  for (auto h : res.restored_hashes) restored = restored && h == lab.base.hash();

  auto row = [](int layer, Selector s, double rel, double gen, double ppl) {
    return SweepRow{{layer, s}, rel, gen, ppl, 50.0, 0.1};
  };
  const std::vector<SweepRow> table = {row(1, Selector::EntireLayer, 99.0, 80.0, 1.20),
                                       row(2, Selector::FullMlp, 97.9, 90.0, 1.10),
                                       row(3, Selector::MlpUp, 90.0, 95.0, 1.00),
                                       row(4, Selector::MlpDown, 98.0, 70.0, 1.15)};
  const bool oracle = select_location(table, SelectionRule{}) == ParamLocation{4, Selector::MlpDown};
  const ParamLocation chosen = select_location(res.rows, SelectionRule{lab.cfg.sweep.min_reliability});
  verdict("sweep-integrity", res.rows.size() == 30 && restored && oracle,
          std::to_string(res.rows.size()) + " rows, restored hashes " + (restored ? "equal" : "differ from") +
              " base, 4-row oracle " + (oracle ? "matches" : "differs") + "; selected " + chosen.label() + ", " +
              fmt(since(t0)) + "s");
}

void streaming(const Lab& lab) {
  const auto t0 = Clock::now();
  PipelineConfig p = lab.pipeline();
  StreamConfig sc;
  sc.chunk_size = 100;
  sc.replay_fraction = 0.2;
  sc.epochs_per_chunk = kStreamEpochs;
  TransformerLM m = lab.base;
  const StreamResult res = edit_streaming(m, lab.tedits, p, sc, lab.tprobes, lab.baseline);
  std::string curve;
  for (const auto& c : res.chunks) curve += (curve.empty() ? "" : " ") + fmt(c.report.reliability_pct, 1);
  const auto& last = res.chunks.back().report;
  verdict("streaming-scaling", res.chunks.size() == 10 && last.reliability_pct >= 90.0 && last.capability.ppl_ratio <= 1.25,
          "cumulative reliability per chunk [" + curve + "], final " + fmt(last.reliability_pct) +
              "% (need >= 90), ppl ratio " + fmt(last.capability.ppl_ratio, 3) + " (need <= 1.25), " + fmt(since(t0)) +
              "s");
}

void determinism(const fs::path& scratch) {
  const std::vector<std::string> tiny = {
      "model.n_layers=2",      "model.d_model=16",   "model.n_heads=2",          "model.d_mlp=32",
      "data.n_entities=20",    "data.n_relations=2", "data.n_facts=30",          "data.n_edits=10",
      "data.n_probe_facts=5",  "pretrain.epochs=2",  "edit.max_epochs=2",        "edit.location=layer1.MLP_DOWN",
      "sweep.n_edits=4",       "stream.chunk_size=5", "stream.epochs_per_chunk=1"};
  const fs::path a = scratch / "det_a", b = scratch / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const std::vector<std::string> cmds = {"gen-data", "pretrain", "edit", "dynamics", "sweep",
                                         "stream", "scale-heuristic", "eval", "report"};
  for (const fs::path& dir : {a, b})
    for (const auto& cmd : cmds) run_cli(cmd, dir, tiny);
  int files = 0, same = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".jsonl") continue;
    ++files;
    if (slurp(entry.path()) == slurp(b / entry.path().filename())) ++same;
  }
  verdict("determinism", files > 0 && same == files,
          std::to_string(same) + "/" + std::to_string(files) + " CSV/JSONL artifacts byte-identical across " +
              std::to_string(cmds.size()) + " subcommands run twice");
  fs::remove_all(a);
  fs::remove_all(b);
}

void round_trips(const Lab& lab, const fs::path& scratch) {
  const fs::path ck = scratch / "roundtrip.ckpt", ed = scratch / "roundtrip.jsonl";
  save_checkpoint(lab.base, ck);
  const auto loaded = load_checkpoint(ck);
  bool params = loaded.model.param_names() == lab.base.param_names();
  for (const auto& name : lab.base.param_names())
    params = params && loaded.model.param(name).data == lab.base.param(name).data;
  const bool ckpt_ok = params && loaded.model.config() == lab.base.config() && loaded.model.hash() == lab.base.hash();
  save_edits(lab.edits, ed);
  const bool edits_ok = load_edits(ed) == lab.edits;
  verdict("format-round-trips", ckpt_ok && edits_ok,
          std::string("checkpoint ") + (ckpt_ok ? "bit-exact" : "differs") + ", " + std::to_string(lab.edits.size()) +
              "-edit JSONL " + (edits_ok ? "equal" : "differs"));
  fs::remove(ck);
  fs::remove(ed);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path cache = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "edlab_acceptance";
  fs::create_directories(cache);
  const auto t0 = Clock::now();
  try {
    gradient_correctness();
    heuristic_arithmetic();
    determinism(cache);

    const Lab lab = prepare(cache, kRecipe);
    std::cout << "base: " << lab.tedits.size() << " edits, baseline ppl " << fmt(lab.baseline.ppl, 3)
              << ", held-out fact accuracy " << fmt(lab.baseline.heldout_fact_acc_pct) << "%" << std::endl;
    round_trips(lab, cache);
    hermeticity(lab);
    const PipelineRuns runs = pipeline_runs(lab);
    df_overwriting(runs);
    bf_joint_convergence(runs);
    pipeline_ordering(runs);
    loss_mode_ordering(runs);
    batch_size_capability(lab);
    sweep_integrity(lab);
    streaming(lab);
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance-runner: " << e.what() << std::endl;
    return 1;
  }
  std::cout << g_pass << " passed, " << g_fail << " failed, " << fmt(since(t0), 0) << "s" << std::endl;
  return 0;
}
