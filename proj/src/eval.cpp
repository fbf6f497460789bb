#include "edlab/eval.hpp"

#include <cmath>

#include "edlab/kernels.hpp"

namespace edlab {

TokenizedEdit tokenize_edit(const Tokenizer& tok, const EditExample& edit) {
  TokenizedEdit t;
  t.id = edit.id;
  t.prompt = tok.encode(edit.edit_prompt);
  t.target = tok.encode(edit.target);
  for (const auto& r : edit.rephrase_prompts) t.rephrases.push_back(tok.encode(r));
  return t;
}

std::vector<TokenizedEdit> tokenize_edits(const Tokenizer& tok, std::span<const EditExample> edits) {
  std::vector<TokenizedEdit> out;
  out.reserve(edits.size());
  for (const auto& e : edits) out.push_back(tokenize_edit(tok, e));
  return out;
}

TokenizedProbes tokenize_probes(const Tokenizer& tok, const ProbeSet& probes) {
  TokenizedProbes t;
  for (const auto& text : probes.heldout_text) {
    auto ids = tok.encode(text);
    ids.push_back(kEosId);
    t.texts.push_back(std::move(ids));
  }
  for (const auto& f : probes.heldout_facts) t.facts.emplace_back(tok.encode(f.prompt), tok.encode(f.object));
  return t;
}

bool exact_match(const TransformerLM& model, std::span<const int> prompt, std::span<const int> target) {
  const std::size_t budget = target.size() + 2;
  if (prompt.empty() || prompt.size() + budget > static_cast<std::size_t>(model.config().max_seq_len)) {
    throw Error(ErrorKind::Evaluation, "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                           std::to_string(budget) + " decode steps does not fit the context");
  }
  // Greedy decoding stops being able to match at the first divergent token,
  // so the loop exits there; the verdict is the same as decoding the full
  // budget and comparing afterwards.
  Decoder dec(model);
  dec.feed(prompt);
  for (std::size_t step = 0; step < target.size(); ++step) {
    const int tok = dec.argmax();
    if (tok != target[step]) return false;
    dec.feed(std::span<const int>(&tok, 1));
  }
  return dec.argmax() == kEosId;
}

double reliability(const TransformerLM& model, std::span<const TokenizedEdit> edits) {
  if (edits.empty()) throw Error(ErrorKind::Evaluation, "reliability of an empty edit set");
  std::size_t hits = 0;
  for (const auto& e : edits) hits += exact_match(model, e.prompt, e.target) ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(edits.size());
}

double generalization(const TransformerLM& model, std::span<const TokenizedEdit> edits) {
  if (edits.empty()) throw Error(ErrorKind::Evaluation, "generalization of an empty edit set");
  double total = 0.0;
  for (const auto& e : edits) {
    if (e.rephrases.empty()) {
      throw Error(ErrorKind::Evaluation, "edit " + std::to_string(e.id) + " has no rephrase prompts");
    }
    std::size_t hits = 0;
    for (const auto& r : e.rephrases) hits += exact_match(model, r, e.target) ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(e.rephrases.size());
  }
  return 100.0 * total / static_cast<double>(edits.size());
}

double perplexity(const TransformerLM& model, std::span<const std::vector<int>> texts) {
  constexpr std::size_t kChunk = 64;
  double nll = 0.0;
  std::size_t count = 0;
  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  for (std::size_t begin = 0; begin < texts.size(); begin += kChunk) {
    const auto chunk = texts.subspan(begin, std::min(kChunk, texts.size() - begin));
    const PackedBatch batch = PackedBatch::pack(chunk);
    std::vector<std::size_t> rows;
    std::vector<int> next;
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
      for (std::size_t r = batch.offsets[s]; r + 1 < batch.offsets[s + 1]; ++r) {
        rows.push_back(r);
        next.push_back(batch.tokens[r + 1]);
      }
    }
    if (rows.empty()) continue;
    const Tensor logits = model.logits(batch, rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const float* row = logits.data.data() + i * vocab;
      nll += kernels::log_sum_exp(row, vocab) - static_cast<double>(row[next[i]]);
    }
    count += rows.size();
  }
  if (count == 0) throw Error(ErrorKind::Evaluation, "perplexity needs at least one predicted token");
  return std::exp(nll / static_cast<double>(count));
}

double fact_accuracy(const TransformerLM& model, std::span<const std::pair<std::vector<int>, std::vector<int>>> facts) {
  if (facts.empty()) throw Error(ErrorKind::Evaluation, "fact accuracy of an empty fact list");
  std::size_t hits = 0;
  for (const auto& [prompt, answer] : facts) hits += exact_match(model, prompt, answer) ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(facts.size());
}

CapabilityBaseline capability_baseline(const TransformerLM& pre_edited, const TokenizedProbes& probes) {
  return {perplexity(pre_edited, probes.texts), fact_accuracy(pre_edited, probes.facts), pre_edited.hash()};
}

CapabilityRecord capability(const TransformerLM& model, const TokenizedProbes& probes,
                            const std::optional<CapabilityBaseline>& baseline) {
  if (!baseline || !(baseline->ppl > 0.0)) {
    throw Error(ErrorKind::Evaluation, "capability needs a pre-edited baseline");
  }
  CapabilityRecord rec;
  rec.ppl = perplexity(model, probes.texts);
  rec.ppl_ratio = rec.ppl / baseline->ppl;
  rec.heldout_fact_acc_pct = fact_accuracy(model, probes.facts);
  return rec;
}

void to_json(nlohmann::json& j, const CapabilityBaseline& b) {
  j = nlohmann::json{{"ppl", b.ppl}, {"heldout_fact_acc_pct", b.heldout_fact_acc_pct}, {"model_hash", b.model_hash}};
}

void from_json(const nlohmann::json& j, CapabilityBaseline& b) {
  j.at("ppl").get_to(b.ppl);
  j.at("heldout_fact_acc_pct").get_to(b.heldout_fact_acc_pct);
  j.at("model_hash").get_to(b.model_hash);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"reliability_pct", r.reliability_pct},
                     {"generalization_pct", r.generalization_pct},
                     {"capability",
                      {{"ppl_ratio", r.capability.ppl_ratio},
                       {"heldout_fact_acc_pct", r.capability.heldout_fact_acc_pct},
                       {"ppl", r.capability.ppl}}},
                     {"seconds_per_edit", r.seconds_per_edit},
                     {"n_edits", r.n_edits},
                     {"metadata", r.metadata}};
}

EvalReport evaluate(const TransformerLM& model, std::span<const TokenizedEdit> edits, const TokenizedProbes& probes,
                    const CapabilityBaseline& baseline, double seconds_per_edit) {
  EvalReport r;
  r.reliability_pct = reliability(model, edits);
  r.generalization_pct = generalization(model, edits);
  r.capability = capability(model, probes, baseline);
  r.seconds_per_edit = seconds_per_edit;
  r.n_edits = edits.size();
  r.metadata["model_hash"] = model.hash();
  r.metadata["baseline_hash"] = baseline.model_hash;
  return r;
}

}  // namespace edlab
