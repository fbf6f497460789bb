#include "edlab/locations.hpp"

#include <algorithm>
#include <tuple>

namespace edlab {

SweepResult sweep(const TransformerLM& base, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg_template,
                  std::span<const ParamLocation> locations, const TokenizedProbes& probes,
                  const CapabilityBaseline& baseline) {
  const std::uint64_t base_hash = base.hash();
  if (baseline.model_hash != base_hash) {
    throw Error(ErrorKind::Sweep, "capability baseline does not belong to the base checkpoint");
  }
  for (const auto& loc : locations) {
    if (loc.layer_index < 0 || loc.layer_index >= base.config().n_layers) {
      throw Error(ErrorKind::Sweep, "location " + loc.label() + " is outside the " +
                                        std::to_string(base.config().n_layers) + "-layer base model");
    }
  }
  PipelineConfig cfg = cfg_template;
  cfg.pipeline = Pipeline::BreadthFirst;
  cfg.trace_shards = 1;

  SweepResult result;
  for (const auto& loc : locations) {
    TransformerLM model = base;
    const std::uint64_t restored = model.hash();
    if (restored != base_hash) throw Error(ErrorKind::Sweep, "restored model differs from the base checkpoint");
    result.restored_hashes.push_back(restored);

    cfg.location = loc;
    const EditResult er = edit_breadth_first(model, edits, cfg);
    const EvalReport rep = evaluate(model, edits, probes, baseline, er.seconds_per_edit);
    result.rows.push_back({loc, rep.reliability_pct, rep.generalization_pct, rep.capability.ppl_ratio,
                           rep.capability.heldout_fact_acc_pct, rep.seconds_per_edit});
  }
  return result;
}

void SelectionRule::validate() const {
  if (!(min_reliability > 0.0 && min_reliability <= 1.0)) {
    throw Error(ErrorKind::Config, "sweep.min_reliability must be in (0, 1]");
  }
}

ParamLocation select_location(std::span<const SweepRow> rows, const SelectionRule& rule) {
  rule.validate();
  if (rows.empty()) throw Error(ErrorKind::Selection, "cannot select from an empty sweep");

  const double floor = 100.0 * rule.min_reliability;
  double best_rel = rows.front().reliability;
  bool any_qualifies = false;
  for (const auto& r : rows) {
    best_rel = std::max(best_rel, r.reliability);
    any_qualifies = any_qualifies || r.reliability >= floor;
  }
  auto eligible = [&](const SweepRow& r) { return any_qualifies ? r.reliability >= floor : r.reliability == best_rel; };
  // Total order, so the winner does not depend on row order.
  auto key = [](const SweepRow& r) {
    return std::make_tuple(r.ppl_ratio, -r.generalization, r.location.layer_index, static_cast<int>(r.location.selector));
  };

  const SweepRow* best = nullptr;
  for (const auto& r : rows) {
    if (eligible(r) && (best == nullptr || key(r) < key(*best))) best = &r;
  }
  return best->location;
}

ParamLocation default_position(ParamLocation source, int target_n_layers) {
  if (target_n_layers <= 0) throw Error(ErrorKind::Argument, "target depth must be positive");
  if (source.layer_index < 0 || source.layer_index >= target_n_layers) {
    throw Error(ErrorKind::OutOfRange, "layer " + std::to_string(source.layer_index) + " does not exist in a " +
                                           std::to_string(target_n_layers) + "-layer model");
  }
  return source;
}

ParamLocation proportional_position(ParamLocation source, int source_n_layers, int target_n_layers) {
  if (source_n_layers <= 0 || target_n_layers <= 0) throw Error(ErrorKind::Argument, "depths must be positive");
  if (source.layer_index < 0 || source.layer_index >= source_n_layers) {
    throw Error(ErrorKind::OutOfRange, "layer " + std::to_string(source.layer_index) + " does not exist in a " +
                                           std::to_string(source_n_layers) + "-layer model");
  }
  // round(target * ordinal / source) half away from zero, in integers; all
  // terms are positive so this is floor((2 * target * ordinal + source) / (2 * source)).
  const long long ordinal = source.layer_index + 1;
  const long long num = 2LL * target_n_layers * ordinal + source_n_layers;
  long long target_ordinal = num / (2LL * source_n_layers);
  target_ordinal = std::clamp<long long>(target_ordinal, 1, target_n_layers);
  return {static_cast<int>(target_ordinal - 1), source.selector};
}

}  // namespace edlab
