#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "edlab/editor.hpp"

namespace edlab {

struct SweepRow {
  ParamLocation location;
  double reliability = 0.0;     // pct
  double generalization = 0.0;  // pct
  double ppl_ratio = 0.0;
  double fact_acc = 0.0;        // pct
  double seconds_per_edit = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  // Hash of the model restored for each row, taken before editing.
  std::vector<std::uint64_t> restored_hashes;
};

// Edits a fresh copy of `base` breadth-first at each location in turn and
// evaluates it. `baseline` must describe `base`.
SweepResult sweep(const TransformerLM& base, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg_template,
                  std::span<const ParamLocation> locations, const TokenizedProbes& probes,
                  const CapabilityBaseline& baseline);

struct SelectionRule {
  double min_reliability = 0.98;  // fraction

  void validate() const;
};

// Among rows meeting the reliability floor (or, if none do, the rows with the
// highest reliability), the lowest ppl ratio wins; ties go to higher
// generalization, then the lower layer, then selector order.
ParamLocation select_location(std::span<const SweepRow> rows, const SelectionRule& rule);

// Same absolute layer in the target model.
ParamLocation default_position(ParamLocation source, int target_n_layers);

// Same relative depth: 1-based ordinal scaled by target/source and rounded
// half away from zero, clamped to the target depth.
ParamLocation proportional_position(ParamLocation source, int source_n_layers, int target_n_layers);

}  // namespace edlab
