#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edlab/data.hpp"
#include "edlab/eval.hpp"
#include "edlab/model.hpp"

namespace edlab {

struct PretrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 1e-3;
  double threshold = 0.95;  // early stop on held-in fact accuracy (fraction)
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0.0;      // mean training loss over the epoch
  double fact_acc = 0.0;  // fraction of held-in facts answered exactly
  double ppl = 0.0;       // held-out text perplexity
};

struct PretrainResult {
  std::vector<PretrainEpoch> log;
  bool reached_threshold = false;
  std::string status;  // "converged" or "warning: ..."
};

// Statement sequences (tokens + EOS) the base model is trained on.
std::vector<std::vector<int>> pretraining_sequences(const FactWorld& world, const Tokenizer& tok);

// Every world fact as a (prompt, answer) pair under a seeded template choice.
std::vector<std::pair<std::vector<int>, std::vector<int>>> held_in_facts(const FactWorld& world, const Tokenizer& tok,
                                                                         std::uint64_t seed);

// Next-token training of all parameters until held-in fact accuracy reaches
// the threshold or the epoch budget runs out. Missing the threshold is
// reported in the status, not thrown.
PretrainResult pretrain(TransformerLM& model, const FactWorld& world, const Tokenizer& tok,
                        const TokenizedProbes& probes, const PretrainConfig& cfg);

}  // namespace edlab
