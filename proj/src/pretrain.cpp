#include "edlab/pretrain.hpp"

#include <cmath>

#include "edlab/ops.hpp"
#include "edlab/rng.hpp"

namespace edlab {

void PretrainConfig::validate() const {
  if (epochs < 0) throw Error(ErrorKind::Config, "pretrain.epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorKind::Config, "pretrain.batch_size must be >= 1");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(ErrorKind::Config, "pretrain.threshold must be in (0, 1]");
  if (!(lr > 0.0)) throw Error(ErrorKind::Config, "pretrain.lr must be positive");
}

std::vector<std::vector<int>> pretraining_sequences(const FactWorld& world, const Tokenizer& tok) {
  std::vector<std::vector<int>> out;
  for (const auto& s : world_statements(world)) {
    auto ids = tok.encode(s);
    ids.push_back(kEosId);
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<std::pair<std::vector<int>, std::vector<int>>> held_in_facts(const FactWorld& world, const Tokenizer& tok,
                                                                         std::uint64_t seed) {
  Rng rng(derive_seed(seed, "held-in"));
  std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
  for (const Fact& f : world.facts) {
    const auto& rel = world.relations[static_cast<std::size_t>(f.relation)];
    const std::size_t t = rng.below(rel.templates.size());
    out.emplace_back(tok.encode(world.prompt(f, t)), tok.encode(world.object_text(f)));
  }
  return out;
}

PretrainResult pretrain(TransformerLM& model, const FactWorld& world, const Tokenizer& tok,
                        const TokenizedProbes& probes, const PretrainConfig& cfg) {
  cfg.validate();
  if (tok.size() > model.config().vocab_size) {
    throw Error(ErrorKind::Config, "model vocabulary of " + std::to_string(model.config().vocab_size) +
                                       " does not cover " + std::to_string(tok.size()) + " tokens");
  }
  const auto corpus = pretraining_sequences(world, tok);
  const auto facts = held_in_facts(world, tok, cfg.seed);

  PretrainResult result;
  if (cfg.epochs == 0) {
    result.status = "warning: zero-epoch budget";
    return result;
  }

  model.set_trainable(model.param_names());
  auto refs = model.param_refs();
  const std::vector<bool> mask(refs.size(), true);
  AdamState adam(AdamHyper{cfg.lr, 0.9, 0.999, 1e-8});

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "pretrain-shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<int>> seqs;
      for (std::size_t i = begin; i < end; ++i) seqs.push_back(corpus[order[i]]);
      const PackedBatch batch = PackedBatch::pack(seqs);
      std::vector<std::size_t> rows;
      std::vector<int> targets;
      for (std::size_t s = 0; s < batch.sequences(); ++s) {
        for (std::size_t r = batch.offsets[s]; r + 1 < batch.offsets[s + 1]; ++r) {
          rows.push_back(r);
          targets.push_back(batch.tokens[r + 1]);
        }
      }
      model.zero_grad();
      Tape<float> tape;
      Var logits = model.forward(tape, batch, rows);
      Var loss = ops::masked_cross_entropy(tape, logits, targets, std::vector<bool>(rows.size(), true));
      const double lv = static_cast<double>(tape.value(loss).data[0]);
      if (!std::isfinite(lv)) throw Error(ErrorKind::NonFinite, "pretraining loss became non-finite");
      tape.backward(loss);
      adam_step(refs, adam, mask);
      loss_sum += lv;
      ++batches;
    }
    PretrainEpoch row;
    row.epoch = epoch;
    row.loss = loss_sum / static_cast<double>(batches);
    row.fact_acc = fact_accuracy(model, facts) / 100.0;
    row.ppl = probes.texts.empty() ? 0.0 : perplexity(model, probes.texts);
    result.log.push_back(row);
    if (row.fact_acc >= cfg.threshold) {
      result.reached_threshold = true;
      break;
    }
  }
  model.set_trainable({});
  result.status = result.reached_threshold
                      ? "converged"
                      : "warning: fact accuracy below threshold after " + std::to_string(cfg.epochs) + " epochs";
  return result;
}

}  // namespace edlab
