#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "edlab/data.hpp"
#include "edlab/editor.hpp"
#include "edlab/locations.hpp"
#include "edlab/model.hpp"
#include "edlab/pretrain.hpp"

namespace edlab {

struct DataSection {
  int n_entities = 300;
  int n_relations = 5;
  int n_facts = 1500;
  int objects_per_relation = 24;
  int n_edits = 1000;
  int n_rephrases = 1;
  RephraseStyle rephrase_style = RephraseStyle::Paraphrase;
  int n_probe_facts = 200;
};

struct SweepSection {
  double min_reliability = 0.98;
  int n_edits = 100;  // leading edits used per row; 0 means the whole set
};

struct EvalSection {
  // Wall-clock seconds per edit in CSVs makes reruns differ; off by default.
  bool wall_clock_in_csv = false;
};

struct ScaleSection {
  std::string source_location;  // empty: the selected or configured location
  int target_n_layers = 12;
};

struct ExperimentConfig {
  ModelConfig model;  // vocab_size and seed are filled in from the data and root seed
  DataSection data;
  PretrainConfig pretrain;
  PipelineConfig edit;
  int dynamics_shards = 5;  // equal shards traced by the dynamics protocol
  StreamConfig stream;
  SweepSection sweep;
  EvalSection eval;
  ScaleSection scale;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void validate() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

// Strict: every key must exist in the defaults with a compatible type.
ExperimentConfig config_from_json(const nlohmann::json& j);

// Defaults, then the optional file, then KEY=VALUE overrides in order.
ExperimentConfig load_config(const std::filesystem::path* file, std::span<const std::string> overrides);

// Applies one dotted-path KEY=VALUE override to a config tree.
void apply_override(nlohmann::json& tree, std::string_view assignment);

// FNV-1a of the canonical resolved config text.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hex(std::uint64_t v);

}  // namespace edlab
