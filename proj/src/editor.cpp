#include "edlab/editor.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <set>

#include "edlab/ops.hpp"
#include "edlab/rng.hpp"

namespace edlab {

std::string_view to_string(Pipeline p) { return p == Pipeline::DepthFirst ? "DEPTH_FIRST" : "BREADTH_FIRST"; }

Pipeline parse_pipeline(std::string_view s) {
  if (s == "DEPTH_FIRST") return Pipeline::DepthFirst;
  if (s == "BREADTH_FIRST") return Pipeline::BreadthFirst;
  throw Error(ErrorKind::Config, "unknown pipeline '" + std::string(s) + "'");
}

std::string_view to_string(LossMode m) { return m == LossMode::FullTarget ? "FULL_TARGET" : "LAST_TOKEN"; }

LossMode parse_loss_mode(std::string_view s) {
  if (s == "FULL_TARGET") return LossMode::FullTarget;
  if (s == "LAST_TOKEN") return LossMode::LastToken;
  throw Error(ErrorKind::Config, "unknown loss mode '" + std::string(s) + "'");
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
  if (batch_size < 1) fail("edit.batch_size must be >= 1");
  if (pipeline == Pipeline::DepthFirst && batch_size != 1) fail("DEPTH_FIRST requires edit.batch_size == 1");
  if (max_epochs < 0) fail("edit.max_epochs must be >= 0");
  if (per_sample_max_steps < 0) fail("edit.per_sample_max_steps must be >= 0");
  if (!(adam.lr > 0.0)) fail("edit.lr must be positive");
  if (trace_shards < 1) fail("trace shard count must be >= 1");
  if (bf_stop_reliability && !(*bf_stop_reliability > 0.0 && *bf_stop_reliability <= 1.0)) {
    fail("edit.bf_stop_reliability must be in (0, 1]");
  }
}

void StreamConfig::validate() const {
  if (chunk_size < 1) throw Error(ErrorKind::Config, "stream.chunk_size must be >= 1");
  if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0)) throw Error(ErrorKind::Config, "stream.replay_fraction must be in [0, 1]");
  if (epochs_per_chunk < 0) throw Error(ErrorKind::Config, "stream.epochs_per_chunk must be >= 0");
}

namespace {

struct Supervision {
  std::vector<int> sequence;
  std::vector<std::size_t> rows;  // rows predicting a supervised token
  std::vector<int> targets;
};

Supervision supervision_for(const TokenizedEdit& edit, LossMode mode, int max_seq_len) {
  if (edit.target.empty()) throw Error(ErrorKind::Supervision, "edit " + std::to_string(edit.id) + " has an empty target");
  if (edit.prompt.empty()) throw Error(ErrorKind::Supervision, "edit " + std::to_string(edit.id) + " has an empty prompt");
  Supervision s;
  s.sequence = edit.prompt;
  s.sequence.insert(s.sequence.end(), edit.target.begin(), edit.target.end());
  if (s.sequence.size() > static_cast<std::size_t>(max_seq_len)) {
    throw Error(ErrorKind::Length, "edit " + std::to_string(edit.id) + " does not fit the context");
  }
  const std::size_t p = edit.prompt.size(), t = edit.target.size();
  const std::size_t first = mode == LossMode::FullTarget ? 0 : t - 1;
  for (std::size_t j = first; j < t; ++j) {
    s.rows.push_back(p - 1 + j);
    s.targets.push_back(edit.target[j]);
  }
  return s;
}

std::vector<bool> location_mask(TransformerLM& model, const std::vector<ParamRef>& refs, ParamLocation loc) {
  const auto names = resolve_location(model.config(), loc);
  model.set_trainable(names);
  const std::set<std::string> chosen(names.begin(), names.end());
  std::vector<bool> mask(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) mask[i] = chosen.count(refs[i].name) > 0;
  return mask;
}

// Exact-match success of each of the first `shards` equal shards.
std::vector<double> shard_success(const TransformerLM& model, std::span<const TokenizedEdit> edits, int shard_count,
                                  int shards) {
  const std::size_t per = edits.size() / static_cast<std::size_t>(shard_count);
  std::vector<double> out;
  for (int s = 0; s < shards; ++s) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < per; ++i) {
      const auto& e = edits[static_cast<std::size_t>(s) * per + i];
      hits += exact_match(model, e.prompt, e.target) ? 1 : 0;
    }
    out.push_back(per == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(per));
  }
  return out;
}

void check_trace_shards(std::span<const TokenizedEdit> edits, int k) {
  if (edits.size() % static_cast<std::size_t>(k) != 0) {
    throw Error(ErrorKind::Shard, std::to_string(k) + " trace shards do not divide " + std::to_string(edits.size()) + " edits");
  }
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// One optimiser step on a batch; returns the batch loss.
double train_step(TransformerLM& model, const std::vector<ParamRef>& refs, const std::vector<bool>& mask,
                  AdamState& adam, std::span<const TokenizedEdit* const> batch, LossMode mode) {
  model.zero_grad();
  Tape<float> tape;
  Var loss = batch_edit_loss(tape, model, batch, mode);
  const double value = static_cast<double>(tape.value(loss).data[0]);
  if (!std::isfinite(value)) throw Error(ErrorKind::NonFinite, "edit loss became non-finite");
  tape.backward(loss);
  adam_step(refs, adam, mask);
  return value;
}

}  // namespace

Var batch_edit_loss(Tape<float>& tape, TransformerLM& model, std::span<const TokenizedEdit* const> batch,
                    LossMode mode) {
  if (batch.empty()) throw Error(ErrorKind::Supervision, "empty edit batch");
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  std::vector<double> weights;
  std::size_t offset = 0;
  for (const TokenizedEdit* e : batch) {
    Supervision s = supervision_for(*e, mode, model.config().max_seq_len);
    const double w = 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(s.rows.size()));
    for (std::size_t i = 0; i < s.rows.size(); ++i) {
      rows.push_back(offset + s.rows[i]);
      targets.push_back(s.targets[i]);
      weights.push_back(w);
    }
    offset += s.sequence.size();
    seqs.push_back(std::move(s.sequence));
  }
  const PackedBatch packed = PackedBatch::pack(seqs);
  Var logits = model.forward(tape, packed, rows);
  return ops::cross_entropy(tape, logits, std::span<const int>(targets), std::span<const double>(weights));
}

Var edit_loss(Tape<float>& tape, TransformerLM& model, const TokenizedEdit& edit, LossMode mode) {
  const TokenizedEdit* one[] = {&edit};
  return batch_edit_loss(tape, model, one, mode);
}

EditResult edit_depth_first(TransformerLM& model, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg) {
  cfg.validate();
  if (cfg.pipeline != Pipeline::DepthFirst) throw Error(ErrorKind::Config, "edit_depth_first needs pipeline DEPTH_FIRST");
  check_trace_shards(edits, cfg.trace_shards);
  EditResult result;
  result.trace.shard_count = cfg.trace_shards;
  if (edits.empty()) return result;

  auto refs = model.param_refs();
  const auto mask = location_mask(model, refs, cfg.location);
  const std::size_t per_shard = edits.size() / static_cast<std::size_t>(cfg.trace_shards);
  std::size_t step = 0;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const auto t0 = Clock::now();
    AdamState adam(cfg.adam);
    const TokenizedEdit* one[] = {&edits[i]};
    for (int s = 0; s < cfg.per_sample_max_steps; ++s) {
      model.zero_grad();
      Tape<float> tape;
      Var loss = batch_edit_loss(tape, model, one, cfg.loss_mode);
      const double value = static_cast<double>(tape.value(loss).data[0]);
      if (!std::isfinite(value)) throw Error(ErrorKind::NonFinite, "edit loss became non-finite");
      result.log.push_back({step++, value});
      if (value < cfg.per_sample_loss_threshold) break;
      tape.backward(loss);
      adam_step(refs, adam, mask);
    }
    result.seconds += seconds_since(t0);
    if ((i + 1) % per_shard == 0) {
      const int done = static_cast<int>((i + 1) / per_shard);
      result.trace.checkpoints.push_back(
          {"shard" + std::to_string(done), shard_success(model, edits, cfg.trace_shards, done)});
    }
  }
  model.set_trainable({});
  result.epochs_run = 1;
  result.seconds_per_edit = result.seconds / static_cast<double>(edits.size());
  return result;
}

EditResult edit_breadth_first(TransformerLM& model, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg) {
  cfg.validate();
  if (cfg.pipeline != Pipeline::BreadthFirst) throw Error(ErrorKind::Config, "edit_breadth_first needs pipeline BREADTH_FIRST");
  check_trace_shards(edits, cfg.trace_shards);
  EditResult result;
  result.trace.shard_count = cfg.trace_shards;
  if (edits.empty()) return result;

  auto refs = model.param_refs();
  const auto mask = location_mask(model, refs, cfg.location);
  AdamState adam(cfg.adam);
  std::vector<std::size_t> order(edits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t step = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(cfg.shuffle_seed, "bf-epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<const TokenizedEdit*> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      batch.clear();
      for (std::size_t i = begin; i < std::min(order.size(), begin + bs); ++i) batch.push_back(&edits[order[i]]);
      result.log.push_back({step++, train_step(model, refs, mask, adam, batch, cfg.loss_mode)});
    }
    result.seconds += seconds_since(t0);
    result.epochs_run = epoch;

    auto success = shard_success(model, edits, cfg.trace_shards, cfg.trace_shards);
    double overall = 0.0;
    for (double s : success) overall += s;
    overall /= static_cast<double>(success.size());
    result.trace.checkpoints.push_back({"epoch" + std::to_string(epoch), std::move(success)});
    if (cfg.bf_stop_reliability && overall >= *cfg.bf_stop_reliability) break;
  }
  model.set_trainable({});
  result.seconds_per_edit = result.seconds / static_cast<double>(edits.size());
  return result;
}

std::vector<std::string> changed_outside(const TransformerLM& before, const TransformerLM& after, ParamLocation loc) {
  if (!(before.config() == after.config())) throw Error(ErrorKind::Dimension, "models have different configs");
  const auto inside = resolve_location(before.config(), loc);
  const std::set<std::string> chosen(inside.begin(), inside.end());
  std::vector<std::string> out;
  for (const auto& name : before.param_names()) {
    if (chosen.count(name)) continue;
    const auto& a = before.param(name).data;
    const auto& b = after.param(name).data;
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0) out.push_back(name);
  }
  return out;
}

StreamResult edit_streaming(TransformerLM& model, std::span<const TokenizedEdit> stream, const PipelineConfig& cfg,
                            const StreamConfig& stream_cfg, const TokenizedProbes& probes,
                            const CapabilityBaseline& baseline) {
  cfg.validate();
  stream_cfg.validate();
  std::set<int> ids;
  for (const auto& e : stream) {
    if (!ids.insert(e.id).second) throw Error(ErrorKind::Stream, "edit id " + std::to_string(e.id) + " arrives twice");
  }

  StreamResult result;
  const auto chunk = static_cast<std::size_t>(stream_cfg.chunk_size);
  for (std::size_t begin = 0, c = 0; begin < stream.size(); begin += chunk, ++c) {
    const std::size_t end = std::min(stream.size(), begin + chunk);
    std::vector<TokenizedEdit> pool(stream.begin() + static_cast<std::ptrdiff_t>(begin),
                                    stream.begin() + static_cast<std::ptrdiff_t>(end));
    const auto n_replay = static_cast<std::size_t>(std::llround(stream_cfg.replay_fraction * static_cast<double>(begin)));
    if (n_replay > 0) {
      std::vector<std::size_t> prior(begin);
      for (std::size_t i = 0; i < begin; ++i) prior[i] = i;
      Rng rng(derive_seed(cfg.shuffle_seed, "replay", c));
      rng.shuffle(prior);
      prior.resize(n_replay);
      std::sort(prior.begin(), prior.end());
      for (std::size_t i : prior) pool.push_back(stream[i]);
    }

    PipelineConfig chunk_cfg = cfg;
    chunk_cfg.pipeline = Pipeline::BreadthFirst;
    chunk_cfg.max_epochs = stream_cfg.epochs_per_chunk;
    chunk_cfg.shuffle_seed = cfg.shuffle_seed + c;
    chunk_cfg.trace_shards = 1;
    const EditResult er = edit_breadth_first(model, pool, chunk_cfg);
    result.seconds += er.seconds;

    StreamChunkReport rep;
    rep.chunk = static_cast<int>(c);
    rep.seen = end;
    rep.pool = pool.size();
    rep.report = evaluate(model, stream.subspan(0, end), probes, baseline, er.seconds / static_cast<double>(end - begin));
    result.chunks.push_back(std::move(rep));
  }
  return result;
}

}  // namespace edlab
