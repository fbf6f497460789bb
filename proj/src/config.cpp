#include "edlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "edlab/rng.hpp"

namespace edlab {

using ojson = nlohmann::ordered_json;

namespace {

// Keys whose value may be null as well as the default's type.
const std::set<std::string> kNullable = {"edit.bf_stop_reliability"};

[[noreturn]] void parse_fail(const std::string& path, const std::string& what) {
  throw Error(ErrorKind::Parse, "config key '" + path + "': " + what);
}

std::string type_name(const nlohmann::json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

bool compatible(const nlohmann::json& def, const nlohmann::json& v, const std::string& path) {
  if (kNullable.count(path) && (v.is_null() || v.is_number())) return true;
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

void merge_strict(nlohmann::json& base, const nlohmann::json& user, const std::string& prefix) {
  if (!user.is_object()) parse_fail(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) parse_fail(path, "unknown key");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else if (!compatible(slot, value, path)) {
      parse_fail(path, "expected " + type_name(slot) + ", got " + type_name(value));
    } else {
      slot = value;
    }
  }
}

nlohmann::json defaults_tree() { return nlohmann::json::parse(to_json(ExperimentConfig{}).dump()); }

template <class T>
T field(const nlohmann::json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    parse_fail(std::string(section) + "." + key, e.what());
  }
}

// Re-throws domain errors from enum parsing and validation as parse errors
// carrying the key path.
template <class F>
auto keyed(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    parse_fail(path, e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  ModelConfig m = model;
  m.vocab_size = 4;  // filled from the tokenizer later
  m.validate();
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, msg); };
  if (data.n_entities < 1 || data.n_relations < 1 || data.n_facts < 1) fail("data sizes must be positive");
  if (data.n_edits < 0 || data.n_rephrases < 1 || data.n_probe_facts < 1) fail("data edit/probe counts out of range");
  pretrain.validate();
  edit.validate();
  if (dynamics_shards < 1) fail("dynamics.shards must be >= 1");
  stream.validate();
  SelectionRule{sweep.min_reliability}.validate();
  if (sweep.n_edits < 0) fail("sweep.n_edits must be >= 0");
  if (scale.target_n_layers < 1) fail("scale.target_n_layers must be >= 1");
}

ojson to_json(const ExperimentConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["model"] = {{"n_layers", c.model.n_layers},
                {"d_model", c.model.d_model},
                {"n_heads", c.model.n_heads},
                {"d_mlp", c.model.d_mlp},
                {"max_seq_len", c.model.max_seq_len}};
  j["data"] = {{"n_entities", c.data.n_entities},
               {"n_relations", c.data.n_relations},
               {"n_facts", c.data.n_facts},
               {"objects_per_relation", c.data.objects_per_relation},
               {"n_edits", c.data.n_edits},
               {"n_rephrases", c.data.n_rephrases},
               {"rephrase_style", to_string(c.data.rephrase_style)},
               {"n_probe_facts", c.data.n_probe_facts}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"threshold", c.pretrain.threshold}};
  const auto& e = c.edit;
  j["edit"] = {{"pipeline", to_string(e.pipeline)},
               {"batch_size", e.batch_size},
               {"max_epochs", e.max_epochs},
               {"per_sample_max_steps", e.per_sample_max_steps},
               {"per_sample_loss_threshold", e.per_sample_loss_threshold},
               {"loss_mode", to_string(e.loss_mode)},
               {"lr", e.adam.lr},
               {"beta1", e.adam.beta1},
               {"beta2", e.adam.beta2},
               {"eps", e.adam.eps},
               {"location", e.location.label()},
               {"bf_stop_reliability", e.bf_stop_reliability ? ojson(*e.bf_stop_reliability) : ojson(nullptr)}};
  j["dynamics"] = {{"shards", c.dynamics_shards}};
  j["stream"] = {{"chunk_size", c.stream.chunk_size},
                 {"replay_fraction", c.stream.replay_fraction},
                 {"epochs_per_chunk", c.stream.epochs_per_chunk}};
  j["sweep"] = {{"min_reliability", c.sweep.min_reliability}, {"n_edits", c.sweep.n_edits}};
  j["eval"] = {{"wall_clock_in_csv", c.eval.wall_clock_in_csv}};
  j["scale"] = {{"source_location", c.scale.source_location}, {"target_n_layers", c.scale.target_n_layers}};
  return j;
}

ExperimentConfig config_from_json(const nlohmann::json& user) {
  nlohmann::json j = defaults_tree();
  merge_strict(j, user, "");

  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    parse_fail("seed", e.what());
  }
  c.out_dir = j.at("out_dir").get<std::string>();
  c.model.n_layers = field<int>(j, "model", "n_layers");
  c.model.d_model = field<int>(j, "model", "d_model");
  c.model.n_heads = field<int>(j, "model", "n_heads");
  c.model.d_mlp = field<int>(j, "model", "d_mlp");
  c.model.max_seq_len = field<int>(j, "model", "max_seq_len");

  c.data.n_entities = field<int>(j, "data", "n_entities");
  c.data.n_relations = field<int>(j, "data", "n_relations");
  c.data.n_facts = field<int>(j, "data", "n_facts");
  c.data.objects_per_relation = field<int>(j, "data", "objects_per_relation");
  c.data.n_edits = field<int>(j, "data", "n_edits");
  c.data.n_rephrases = field<int>(j, "data", "n_rephrases");
  c.data.rephrase_style = keyed("data.rephrase_style", [&] {
    return parse_rephrase_style(field<std::string>(j, "data", "rephrase_style"));
  });
  c.data.n_probe_facts = field<int>(j, "data", "n_probe_facts");

  c.pretrain.epochs = field<int>(j, "pretrain", "epochs");
  c.pretrain.batch_size = field<int>(j, "pretrain", "batch_size");
  c.pretrain.lr = field<double>(j, "pretrain", "lr");
  c.pretrain.threshold = field<double>(j, "pretrain", "threshold");

  auto& e = c.edit;
  e.pipeline = keyed("edit.pipeline", [&] { return parse_pipeline(field<std::string>(j, "edit", "pipeline")); });
  e.batch_size = field<int>(j, "edit", "batch_size");
  e.max_epochs = field<int>(j, "edit", "max_epochs");
  e.per_sample_max_steps = field<int>(j, "edit", "per_sample_max_steps");
  e.per_sample_loss_threshold = field<double>(j, "edit", "per_sample_loss_threshold");
  e.loss_mode = keyed("edit.loss_mode", [&] { return parse_loss_mode(field<std::string>(j, "edit", "loss_mode")); });
  e.adam.lr = field<double>(j, "edit", "lr");
  e.adam.beta1 = field<double>(j, "edit", "beta1");
  e.adam.beta2 = field<double>(j, "edit", "beta2");
  e.adam.eps = field<double>(j, "edit", "eps");
  e.location = keyed("edit.location", [&] { return parse_location(field<std::string>(j, "edit", "location")); });
  const auto& stop = j.at("edit").at("bf_stop_reliability");
  e.bf_stop_reliability = stop.is_null() ? std::nullopt : std::optional<double>(stop.get<double>());

  c.dynamics_shards = field<int>(j, "dynamics", "shards");
  c.stream.chunk_size = field<int>(j, "stream", "chunk_size");
  c.stream.replay_fraction = field<double>(j, "stream", "replay_fraction");
  c.stream.epochs_per_chunk = field<int>(j, "stream", "epochs_per_chunk");
  c.sweep.min_reliability = field<double>(j, "sweep", "min_reliability");
  c.sweep.n_edits = field<int>(j, "sweep", "n_edits");
  c.eval.wall_clock_in_csv = field<bool>(j, "eval", "wall_clock_in_csv");
  c.scale.source_location = field<std::string>(j, "scale", "source_location");
  c.scale.target_n_layers = field<int>(j, "scale", "target_n_layers");
  if (!c.scale.source_location.empty()) keyed("scale.source_location", [&] { return parse_location(c.scale.source_location); });

  c.validate();
  return c;
}

void apply_override(nlohmann::json& tree, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorKind::Parse, "override '" + std::string(assignment) + "' is not KEY=VALUE");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;  // bare words are strings

  // Build a nested object for the path and merge it strictly.
  nlohmann::json patch = value;
  std::string rest = path;
  std::vector<std::string> keys;
  std::size_t pos;
  while ((pos = rest.find('.')) != std::string::npos) {
    keys.push_back(rest.substr(0, pos));
    rest = rest.substr(pos + 1);
  }
  keys.push_back(rest);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) {
    if (it->empty()) parse_fail(path, "empty path component");
    patch = nlohmann::json{{*it, patch}};
  }
  nlohmann::json full = defaults_tree();
  merge_strict(full, tree, "");
  merge_strict(full, patch, "");
  nlohmann::json* node = &tree;
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object()) (*node)[keys[i]] = nlohmann::json::object();
    node = &(*node)[keys[i]];
  }
  (*node)[keys.back()] = value;
}

ExperimentConfig load_config(const std::filesystem::path* file, std::span<const std::string> overrides) {
  nlohmann::json tree = nlohmann::json::object();
  if (file != nullptr) {
    std::ifstream in(*file);
    if (!in) throw Error(ErrorKind::Dependency, "config file not found: " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      tree = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::Parse, file->string() + ": " + e.what());
    }
    nlohmann::json check = defaults_tree();
    merge_strict(check, tree, "");
  }
  for (const auto& o : overrides) apply_override(tree, o);
  return config_from_json(tree);
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  ojson j = to_json(cfg);
  j.erase("out_dir");  // where results go does not change what they are
  return fnv1a(j.dump());
}

std::string hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace edlab
