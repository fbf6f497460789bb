#pragma once

#include <vector>

#include "edlab/editor.hpp"

namespace edlab::testing {

inline ModelConfig small_model(int vocab, std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.seed = seed;
  return c;
}

inline TokenizedEdit make_edit(int id, std::vector<int> prompt, std::vector<int> target,
                               std::vector<std::vector<int>> rephrases = {}) {
  return TokenizedEdit{id, std::move(prompt), std::move(target), std::move(rephrases)};
}

// Trains the first and last layers on the given edits, with EOS appended to
// each target so exact match can succeed.
inline void memorize(TransformerLM& model, std::span<const TokenizedEdit> targets, int epochs = 200) {
  std::vector<TokenizedEdit> edits(targets.begin(), targets.end());
  for (auto& e : edits) e.target.push_back(kEosId);
  PipelineConfig cfg;
  cfg.pipeline = Pipeline::BreadthFirst;
  cfg.batch_size = static_cast<int>(edits.size());
  cfg.max_epochs = epochs;
  cfg.adam.lr = 1e-2;
  cfg.location = {0, Selector::EntireLayer};
  cfg.bf_stop_reliability = std::nullopt;
  edit_breadth_first(model, edits, cfg);
  cfg.location = {model.config().n_layers - 1, Selector::EntireLayer};
  edit_breadth_first(model, edits, cfg);
}

}  // namespace edlab::testing
