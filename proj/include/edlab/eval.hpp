#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "edlab/data.hpp"
#include "edlab/model.hpp"

namespace edlab {

// Token-level view of an edit used by the editor and the metrics.
struct TokenizedEdit {
  int id = 0;
  std::vector<int> prompt;
  std::vector<int> target;
  std::vector<std::vector<int>> rephrases;
};

TokenizedEdit tokenize_edit(const Tokenizer& tok, const EditExample& edit);
std::vector<TokenizedEdit> tokenize_edits(const Tokenizer& tok, std::span<const EditExample> edits);

struct TokenizedProbes {
  std::vector<std::vector<int>> texts;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> facts;  // (prompt, answer)
};

TokenizedProbes tokenize_probes(const Tokenizer& tok, const ProbeSet& probes);

// Greedy-decodes up to len(target)+2 tokens and compares the output, cut at
// EOS, with target token by token.
bool exact_match(const TransformerLM& model, std::span<const int> prompt, std::span<const int> target);

// 100 × fraction of edit prompts answered exactly.
double reliability(const TransformerLM& model, std::span<const TokenizedEdit> edits);

// 100 × mean over edits of the fraction of that edit's rephrases answered exactly.
double generalization(const TransformerLM& model, std::span<const TokenizedEdit> edits);

// exp(mean next-token NLL) over the given sequences, 64-bit accumulation.
double perplexity(const TransformerLM& model, std::span<const std::vector<int>> texts);

// 100 × fraction of (prompt, answer) pairs answered exactly.
double fact_accuracy(const TransformerLM& model, std::span<const std::pair<std::vector<int>, std::vector<int>>> facts);

// Capability of the pre-edited model; later measurements are ratios to it.
struct CapabilityBaseline {
  double ppl = 0.0;
  double heldout_fact_acc_pct = 0.0;
  std::uint64_t model_hash = 0;
};

struct CapabilityRecord {
  double ppl_ratio = 0.0;
  double heldout_fact_acc_pct = 0.0;
  double ppl = 0.0;
};

CapabilityBaseline capability_baseline(const TransformerLM& pre_edited, const TokenizedProbes& probes);
CapabilityRecord capability(const TransformerLM& model, const TokenizedProbes& probes,
                            const std::optional<CapabilityBaseline>& baseline);

void to_json(nlohmann::json& j, const CapabilityBaseline& b);
void from_json(const nlohmann::json& j, CapabilityBaseline& b);

struct EvalReport {
  double reliability_pct = 0.0;
  double generalization_pct = 0.0;
  CapabilityRecord capability;
  double seconds_per_edit = 0.0;
  std::size_t n_edits = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const EvalReport& r);

// All four metrics; seconds_per_edit is passed in by the caller that timed
// the edit.
EvalReport evaluate(const TransformerLM& model, std::span<const TokenizedEdit> edits, const TokenizedProbes& probes,
                    const CapabilityBaseline& baseline, double seconds_per_edit);

}  // namespace edlab
