#include "edlab/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "edlab/config.hpp"
#include "edlab/rng.hpp"

namespace edlab::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string num(std::uint64_t v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : header_(std::move(header)) {}
  void row(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) throw Error(ErrorKind::Format, "csv row width mismatch");
    rows_.push_back(std::move(cells));
  }
  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::Format, "cannot write " + path.string());
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
      out << '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

void save_json(const ojson& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Format, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Dependency, "missing upstream artifact: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

const std::vector<std::string> kResultsHeader = {"method", "pipeline", "batch_size", "location", "n_edits", "rel",
                                                 "gen", "ppl_ratio", "fact_acc", "sec_per_edit", "seed"};

// Shared state of one invocation.
struct Run {
  ExperimentConfig cfg;
  fs::path dir;
  std::uint64_t hash = 0;
  std::ostream& out;
  std::vector<std::string> artifacts;
  bool invariants_ok = true;

  fs::path path(const std::string& name) const { return dir / name; }

  fs::path require(const std::string& name, const std::string& producer) const {
    const fs::path p = path(name);
    if (!fs::exists(p)) {
      throw Error(ErrorKind::Dependency, "missing upstream artifact " + p.string() + " (run `" + producer + "` first)");
    }
    return p;
  }

  void wrote(const std::string& name) { artifacts.push_back(name); }

  void violation(const std::string& what) {
    invariants_ok = false;
    out << "invariant violated: " << what << '\n';
  }

  std::string seconds_cell(double s) const { return cfg.eval.wall_clock_in_csv ? num(s) : "NA"; }

  ojson stamp() const { return ojson{{"config_hash", hex(hash)}, {"seed", cfg.seed}}; }
};

struct Data {
  FactWorld world;
  std::vector<EditExample> edits;
  ProbeSet probes;
  Tokenizer tok;
  std::vector<TokenizedEdit> tedits;
  TokenizedProbes tprobes;

  explicit Data(const Run& r)
      : world(load_world(r.require("world.json", "gen-data"))),
        edits(load_edits(r.require("edits.jsonl", "gen-data"))),
        probes(load_probes(r.require("probes.jsonl", "gen-data"))),
        tok(world),
        tedits(tokenize_edits(tok, edits)),
        tprobes(tokenize_probes(tok, probes)) {}
};

ModelConfig model_config(const Run& r, const Tokenizer& tok) {
  ModelConfig m = r.cfg.model;
  m.vocab_size = tok.size();
  m.seed = r.cfg.seed;
  m.validate();
  return m;
}

TransformerLM load_model(const Run& r, const std::string& name, const std::string& producer, const ModelConfig& expect) {
  auto ck = load_checkpoint(r.require(name, producer));
  if (!(ck.model.config() == expect)) {
    throw Error(ErrorKind::Dependency, name + " was produced under a different model config; rerun `" + producer + "`");
  }
  return std::move(ck.model);
}

CapabilityBaseline load_baseline(const Run& r, const TransformerLM& base) {
  CapabilityBaseline b = read_json(r.require("baseline.json", "pretrain")).at("baseline").get<CapabilityBaseline>();
  if (b.model_hash != base.hash()) throw Error(ErrorKind::Dependency, "baseline.json does not match base.ckpt");
  return b;
}

PipelineConfig pipeline(const Run& r) {
  PipelineConfig p = r.cfg.edit;
  p.shuffle_seed = derive_seed(r.cfg.seed, "shuffle");
  return p;
}

std::string method_name(const PipelineConfig& p) { return p.loss_mode == LossMode::FullTarget ? "FT-M" : "FT-L"; }

std::vector<std::string> results_row(const Run& r, const PipelineConfig& p, const EvalReport& rep) {
  return {method_name(p),
          std::string(to_string(p.pipeline)),
          std::to_string(p.batch_size),
          p.location.label(),
          std::to_string(rep.n_edits),
          num(rep.reliability_pct),
          num(rep.generalization_pct),
          num(rep.capability.ppl_ratio),
          num(rep.capability.heldout_fact_acc_pct),
          r.seconds_cell(rep.seconds_per_edit),
          num(r.cfg.seed)};
}

void check_hermetic(Run& r, const TransformerLM& before, const TransformerLM& after, ParamLocation loc) {
  const auto changed = changed_outside(before, after, loc);
  for (const auto& name : changed) r.violation("parameter " + name + " changed outside " + loc.label());
}

void save_log(const EditResult& er, const fs::path& path) {
  Csv csv({"step", "loss"});
  for (const auto& s : er.log) csv.row({num(static_cast<std::uint64_t>(s.step)), num(s.loss)});
  csv.save(path);
}

// ---- subcommands ----

void cmd_gen_data(Run& r) {
  const auto& d = r.cfg.data;
  const FactWorld world = gen_fact_world(derive_seed(r.cfg.seed, "data"), d.n_entities, d.n_relations, d.n_facts,
                                         d.objects_per_relation);
  const auto edits = make_edit_set(world, d.n_edits, d.n_rephrases, d.rephrase_style, derive_seed(r.cfg.seed, "edits"));
  const auto probes = make_probe_set(world, edits, d.n_probe_facts, derive_seed(r.cfg.seed, "probes"));
  save_world(world, r.path("world.json"));
  save_edits(edits, r.path("edits.jsonl"));
  save_probes(probes, r.path("probes.jsonl"));
  r.wrote("world.json");
  r.wrote("edits.jsonl");
  r.wrote("probes.jsonl");
  r.out << "world: " << world.facts.size() << " facts, vocabulary " << Tokenizer(world).size() << "; "
        << edits.size() << " edits; " << probes.heldout_facts.size() << " probe facts\n";
}

void cmd_pretrain(Run& r) {
  const Data data(r);
  TransformerLM model(model_config(r, data.tok));
  PretrainConfig pc = r.cfg.pretrain;
  pc.seed = derive_seed(r.cfg.seed, "pretrain");
  const PretrainResult res = pretrain(model, data.world, data.tok, data.tprobes, pc);

  Csv log({"epoch", "loss", "fact_acc", "ppl"});
  for (const auto& e : res.log) log.row({std::to_string(e.epoch), num(e.loss), num(e.fact_acc), num(e.ppl)});
  log.save(r.path("pretrain_log.csv"));
  r.wrote("pretrain_log.csv");

  ojson extra = r.stamp();
  extra["status"] = res.status;
  save_checkpoint(model, r.path("base.ckpt"), nlohmann::json::parse(extra.dump()));
  r.wrote("base.ckpt");

  const CapabilityBaseline baseline = capability_baseline(model, data.tprobes);
  ojson bj = r.stamp();
  bj["baseline"] = nlohmann::json(baseline);
  bj["status"] = res.status;
  save_json(bj, r.path("baseline.json"));
  r.wrote("baseline.json");
  r.out << "pretrain: " << res.status << " after " << res.log.size() << " epochs; baseline ppl " << baseline.ppl
        << ", held-out fact accuracy " << baseline.heldout_fact_acc_pct << "%\n";
}

void cmd_edit(Run& r) {
  const Data data(r);
  const ModelConfig mc = model_config(r, data.tok);
  const TransformerLM base = load_model(r, "base.ckpt", "pretrain", mc);
  const CapabilityBaseline baseline = load_baseline(r, base);
  PipelineConfig p = pipeline(r);
  p.trace_shards = 1;

  TransformerLM model = base;
  const EditResult er = p.pipeline == Pipeline::DepthFirst ? edit_depth_first(model, data.tedits, p)
                                                           : edit_breadth_first(model, data.tedits, p);
  check_hermetic(r, base, model, p.location);
  EvalReport rep = evaluate(model, data.tedits, data.tprobes, baseline, er.seconds_per_edit);

  save_checkpoint(model, r.path("edited.ckpt"), nlohmann::json::parse(r.stamp().dump()));
  r.wrote("edited.ckpt");
  Csv results(kResultsHeader);
  results.row(results_row(r, p, rep));
  results.save(r.path("results.csv"));
  r.wrote("results.csv");
  save_log(er, r.path("edit_log.csv"));
  r.wrote("edit_log.csv");

  ojson report = r.stamp();
  report["pipeline"] = to_string(p.pipeline);
  report["loss_mode"] = to_string(p.loss_mode);
  report["location"] = p.location.label();
  report["batch_size"] = p.batch_size;
  report["epochs_run"] = er.epochs_run;
  report["report"] = nlohmann::json(rep);
  save_json(report, r.path("report.json"));
  r.wrote("report.json");
  save_json(ojson{{"config_hash", hex(r.hash)}, {"seconds", er.seconds}, {"seconds_per_edit", er.seconds_per_edit},
                  {"n_edits", data.tedits.size()}},
            r.path("timing.json"));
  r.wrote("timing.json");
  r.out << "edit: reliability " << rep.reliability_pct << "%, generalization " << rep.generalization_pct
        << "%, ppl ratio " << rep.capability.ppl_ratio << ", " << er.seconds_per_edit << " s/edit\n";
}

void cmd_dynamics(Run& r) {
  const Data data(r);
  const ModelConfig mc = model_config(r, data.tok);
  const TransformerLM base = load_model(r, "base.ckpt", "pretrain", mc);
  const CapabilityBaseline baseline = load_baseline(r, base);
  const int k = r.cfg.dynamics_shards;

  // Shards in seeded order, laid out consecutively so the editor can trace them.
  std::vector<EditExample> ordered;
  for (auto& s : shard(data.edits, k, derive_seed(r.cfg.seed, "shards"))) ordered.insert(ordered.end(), s.begin(), s.end());
  const auto tedits = tokenize_edits(data.tok, ordered);

  Csv dyn({"checkpoint_label", "shard_id", "success"});
  Csv results(kResultsHeader);
  ojson timing = r.stamp();
  for (const Pipeline pl : {Pipeline::DepthFirst, Pipeline::BreadthFirst}) {
    PipelineConfig p = pipeline(r);
    p.pipeline = pl;
    p.trace_shards = k;
    if (pl == Pipeline::DepthFirst) p.batch_size = 1;
    TransformerLM model = base;
    const EditResult er =
        pl == Pipeline::DepthFirst ? edit_depth_first(model, tedits, p) : edit_breadth_first(model, tedits, p);
    check_hermetic(r, base, model, p.location);
    const std::string prefix = pl == Pipeline::DepthFirst ? "DF:" : "BF:";
    for (const auto& cp : er.trace.checkpoints) {
      for (std::size_t s = 0; s < cp.success.size(); ++s) {
        dyn.row({prefix + cp.label, std::to_string(s + 1), num(cp.success[s])});
      }
    }
    const EvalReport rep = evaluate(model, tedits, data.tprobes, baseline, er.seconds_per_edit);
    results.row(results_row(r, p, rep));
    timing[std::string(to_string(pl))] = {{"seconds", er.seconds}, {"seconds_per_edit", er.seconds_per_edit}};
    r.out << "dynamics " << to_string(pl) << ": reliability " << rep.reliability_pct << "% after "
          << er.trace.checkpoints.size() << " checkpoints\n";
  }
  dyn.save(r.path("dynamics.csv"));
  r.wrote("dynamics.csv");
  results.save(r.path("results_dynamics.csv"));
  r.wrote("results_dynamics.csv");
  save_json(timing, r.path("timing_dynamics.json"));
  r.wrote("timing_dynamics.json");
}

void cmd_sweep(Run& r) {
  const Data data(r);
  const ModelConfig mc = model_config(r, data.tok);
  const TransformerLM base = load_model(r, "base.ckpt", "pretrain", mc);
  const CapabilityBaseline baseline = load_baseline(r, base);
  PipelineConfig p = pipeline(r);
  p.pipeline = Pipeline::BreadthFirst;

  std::span<const TokenizedEdit> edits(data.tedits);
  if (r.cfg.sweep.n_edits > 0) edits = edits.first(std::min<std::size_t>(edits.size(), r.cfg.sweep.n_edits));
  const auto locations = enumerate_locations(mc);
  const SweepResult res = sweep(base, edits, p, locations, data.tprobes, baseline);

  const std::uint64_t base_hash = base.hash();
  bool isolated = true;
  for (auto h : res.restored_hashes) isolated = isolated && h == base_hash;
  if (!isolated) r.violation("a sweep row did not start from the base checkpoint");

  Csv csv({"layer", "selector", "reliability", "generalization", "ppl_ratio", "fact_acc", "sec_per_edit"});
  for (const auto& row : res.rows) {
    csv.row({std::to_string(row.location.layer_index), std::string(to_string(row.location.selector)),
             num(row.reliability), num(row.generalization), num(row.ppl_ratio), num(row.fact_acc),
             r.seconds_cell(row.seconds_per_edit)});
  }
  csv.save(r.path("sweep.csv"));
  r.wrote("sweep.csv");

  const SelectionRule rule{r.cfg.sweep.min_reliability};
  const ParamLocation chosen = select_location(res.rows, rule);
  ojson sel = r.stamp();
  sel["rule"] = {{"min_reliability", rule.min_reliability},
                 {"objective", {"ppl_ratio", "generalization", "layer", "selector"}}};
  sel["location"] = chosen.label();
  sel["layer"] = chosen.layer_index;
  sel["selector"] = to_string(chosen.selector);
  sel["rows"] = res.rows.size();
  sel["n_edits"] = edits.size();
  sel["rows_restored_to_base"] = isolated;
  save_json(sel, r.path("selection.json"));
  r.wrote("selection.json");
  r.out << "sweep: " << res.rows.size() << " locations; selected " << chosen.label() << '\n';
}

void cmd_stream(Run& r) {
  const Data data(r);
  const ModelConfig mc = model_config(r, data.tok);
  const TransformerLM base = load_model(r, "base.ckpt", "pretrain", mc);
  const CapabilityBaseline baseline = load_baseline(r, base);
  PipelineConfig p = pipeline(r);
  p.pipeline = Pipeline::BreadthFirst;

  TransformerLM model = base;
  const StreamResult res = edit_streaming(model, data.tedits, p, r.cfg.stream, data.tprobes, baseline);
  check_hermetic(r, base, model, p.location);

  Csv csv({"chunk", "seen", "pool", "reliability", "generalization", "ppl_ratio", "fact_acc", "sec_per_edit"});
  for (const auto& c : res.chunks) {
    csv.row({std::to_string(c.chunk), std::to_string(c.seen), std::to_string(c.pool), num(c.report.reliability_pct),
             num(c.report.generalization_pct), num(c.report.capability.ppl_ratio),
             num(c.report.capability.heldout_fact_acc_pct), r.seconds_cell(c.report.seconds_per_edit)});
  }
  csv.save(r.path("stream.csv"));
  r.wrote("stream.csv");
  if (!res.chunks.empty()) {
    Csv results(kResultsHeader);
    EvalReport last = res.chunks.back().report;
    last.seconds_per_edit = res.seconds / static_cast<double>(data.tedits.size());
    results.row(results_row(r, p, last));
    results.save(r.path("results_stream.csv"));
    r.wrote("results_stream.csv");
    r.out << "stream: " << res.chunks.size() << " chunks; final reliability " << last.reliability_pct
          << "%, ppl ratio " << last.capability.ppl_ratio << '\n';
  }
  save_json(ojson{{"config_hash", hex(r.hash)}, {"seconds", res.seconds}}, r.path("timing_stream.json"));
  r.wrote("timing_stream.json");
}

void cmd_scale(Run& r) {
  const ParamLocation src =
      r.cfg.scale.source_location.empty() ? r.cfg.edit.location : parse_location(r.cfg.scale.source_location);
  const int from = r.cfg.model.n_layers;
  const int to = r.cfg.scale.target_n_layers;
  if (src.layer_index >= from) {
    throw Error(ErrorKind::OutOfRange, "source location " + src.label() + " is outside the configured model");
  }
  Csv csv({"strategy", "source_n_layers", "target_n_layers", "source_location", "target_location"});
  ojson j = r.stamp();
  j["source"] = src.label();
  j["source_n_layers"] = from;
  j["target_n_layers"] = to;
  const ParamLocation prop = proportional_position(src, from, to);
  csv.row({"PROPORTIONAL", std::to_string(from), std::to_string(to), src.label(), prop.label()});
  j["proportional"] = prop.label();
  try {
    const ParamLocation def = default_position(src, to);
    csv.row({"DEFAULT", std::to_string(from), std::to_string(to), src.label(), def.label()});
    j["default"] = def.label();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::OutOfRange) throw;
    csv.row({"DEFAULT", std::to_string(from), std::to_string(to), src.label(), "NA"});
    j["default"] = nullptr;
  }
  csv.save(r.path("scale.csv"));
  r.wrote("scale.csv");
  save_json(j, r.path("scale.json"));
  r.wrote("scale.json");
  r.out << "scale: " << src.label() << " -> proportional " << prop.label() << '\n';
}

void cmd_eval(Run& r) {
  const Data data(r);
  const ModelConfig mc = model_config(r, data.tok);
  const TransformerLM base = load_model(r, "base.ckpt", "pretrain", mc);
  const CapabilityBaseline baseline = load_baseline(r, base);
  const TransformerLM edited = load_model(r, "edited.ckpt", "edit", mc);
  const EvalReport rep = evaluate(edited, data.tedits, data.tprobes, baseline, 0.0);
  ojson j = r.stamp();
  j["checkpoint"] = "edited.ckpt";
  j["report"] = nlohmann::json(rep);
  j["report"].erase("seconds_per_edit");
  save_json(j, r.path("eval.json"));
  r.wrote("eval.json");
  r.out << "eval: reliability " << rep.reliability_pct << "%, generalization " << rep.generalization_pct
        << "%, ppl ratio " << rep.capability.ppl_ratio << '\n';
}

void cmd_report(Run& r) {
  std::vector<fs::path> files;
  if (fs::exists(r.dir)) {
    for (const auto& entry : fs::directory_iterator(r.dir)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("results", 0) == 0 && entry.path().extension() == ".csv") files.push_back(entry.path());
    }
  }
  if (files.empty()) throw Error(ErrorKind::Dependency, "no results*.csv in " + r.dir.string() + " (run `edit` first)");
  std::sort(files.begin(), files.end());

  std::vector<std::string> header = kResultsHeader;
  header.insert(header.begin(), "source");
  Csv table(header);
  ojson rows = ojson::array();
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells{f.filename().string()};
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() != header.size()) throw Error(ErrorKind::Format, f.string() + ": unexpected column count");
      ojson row;
      for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
      rows.push_back(row);
      table.row(std::move(cells));
    }
  }
  table.save(r.path("summary.csv"));
  r.wrote("summary.csv");
  ojson j = r.stamp();
  j["rows"] = rows;
  save_json(j, r.path("summary.json"));
  r.wrote("summary.json");
  r.out << "report: " << rows.size() << " rows from " << files.size() << " files\n";
}

const std::map<std::string, std::function<void(Run&)>>& commands() {
  static const std::map<std::string, std::function<void(Run&)>> table = {
      {"gen-data", cmd_gen_data}, {"pretrain", cmd_pretrain}, {"edit", cmd_edit},
      {"dynamics", cmd_dynamics}, {"sweep", cmd_sweep},       {"stream", cmd_stream},
      {"scale-heuristic", cmd_scale}, {"eval", cmd_eval},     {"report", cmd_report}};
  return table;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lifelong model-editing lab on a toy transformer"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--override", overrides, "KEY=VALUE with a dotted key, repeatable");
  app.add_option("--out", out_dir, "output directory (overrides out_dir)");
  app.add_option("--seed", seed, "root seed (overrides seed)");
  app.fallthrough();
  static const std::map<std::string, std::string> about = {
      {"gen-data", "generate the fact world, edit set and probes"},
      {"pretrain", "train the base model and record the capability baseline"},
      {"edit", "apply the edit set with the configured pipeline"},
      {"dynamics", "trace per-shard success for DF and BF"},
      {"sweep", "edit every layer and selector, then select a location"},
      {"stream", "edit in chunks with replay"},
      {"scale-heuristic", "map a location to a model of another depth"},
      {"eval", "re-evaluate edited.ckpt against the baseline"},
      {"report", "join results files into summary.csv and summary.json"}};
  for (const auto& [name, fn] : commands()) app.add_subcommand(name, about.at(name))->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, eo;
    const int code = app.exit(e, o, eo);
    out << o.str();
    err << eo.str();
    return code == 0 ? kOk : kUsage;
  }
  const std::string name = app.get_subcommands().front()->get_name();

  try {
    std::vector<std::string> all = overrides;
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    if (!out_dir.empty()) all.push_back("out_dir=" + nlohmann::json(out_dir).dump());
    const fs::path cfg_file(config_path);
    ExperimentConfig cfg = load_config(config_path.empty() ? nullptr : &cfg_file, all);

    Run r{cfg, fs::path(cfg.out_dir), config_hash(cfg), out, {}, true};
    fs::create_directories(r.dir);
    ojson resolved;
    resolved["config_hash"] = hex(r.hash);
    resolved["config"] = to_json(cfg);
    save_json(resolved, r.path("config.resolved.json"));

    commands().at(name)(r);

    ojson manifest = r.stamp();
    manifest["subcommand"] = name;
    manifest["artifacts"] = r.artifacts;
    manifest["invariants_ok"] = r.invariants_ok;
    save_json(manifest, r.path(name + ".manifest.json"));
    return r.invariants_ok ? kOk : kInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailed;
  }
}

}  // namespace edlab::cli
