#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "edlab/adam.hpp"
#include "edlab/eval.hpp"
#include "edlab/model.hpp"

namespace edlab {

enum class Pipeline { DepthFirst, BreadthFirst };
enum class LossMode { FullTarget, LastToken };

std::string_view to_string(Pipeline p);
Pipeline parse_pipeline(std::string_view s);
std::string_view to_string(LossMode m);
LossMode parse_loss_mode(std::string_view s);

struct PipelineConfig {
  Pipeline pipeline = Pipeline::BreadthFirst;
  int batch_size = 1;
  int max_epochs = 10;                     // breadth-first
  int per_sample_max_steps = 50;           // depth-first
  double per_sample_loss_threshold = 1e-2; // depth-first convergence
  LossMode loss_mode = LossMode::FullTarget;
  AdamHyper adam;
  ParamLocation location{4, Selector::MlpDown};
  std::uint64_t shuffle_seed = 0;
  std::optional<double> bf_stop_reliability = 0.99;  // fraction of the training set
  // The edit set is treated as this many equal consecutive shards when
  // recording the dynamics trace.
  int trace_shards = 1;

  void validate() const;
};

struct DynamicsCheckpoint {
  std::string label;
  std::vector<double> success;  // per shard, in [0, 1]
};

struct DynamicsTrace {
  int shard_count = 1;
  std::vector<DynamicsCheckpoint> checkpoints;
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
};

struct EditResult {
  DynamicsTrace trace;
  std::vector<StepLog> log;
  double seconds = 0.0;  // optimisation time only
  double seconds_per_edit = 0.0;
  int epochs_run = 0;
};

// Mean cross-entropy over the supervised positions of one edit: every target
// token (FullTarget) or only the final one (LastToken). The prompt is never
// supervised.
Var edit_loss(Tape<float>& tape, TransformerLM& model, const TokenizedEdit& edit, LossMode mode);

// Mean of the per-example edit losses over a mini-batch, in one packed pass.
Var batch_edit_loss(Tape<float>& tape, TransformerLM& model, std::span<const TokenizedEdit* const> batch,
                    LossMode mode);

// Single pass; each edit is optimised on its own (fresh optimiser state)
// until its loss drops below the threshold or the step budget is spent.
EditResult edit_depth_first(TransformerLM& model, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg);

// Epochs over the whole set with per-epoch seeded shuffling and averaged
// mini-batch gradients; one optimiser state for the run.
EditResult edit_breadth_first(TransformerLM& model, std::span<const TokenizedEdit> edits, const PipelineConfig& cfg);

// Names of parameters outside resolve_location(loc) whose bytes differ
// between the two models. Empty when the edit stayed inside its location.
std::vector<std::string> changed_outside(const TransformerLM& before, const TransformerLM& after, ParamLocation loc);

struct StreamConfig {
  int chunk_size = 100;
  double replay_fraction = 0.0;
  int epochs_per_chunk = 10;

  void validate() const;
};

struct StreamChunkReport {
  int chunk = 0;
  std::size_t seen = 0;   // edits arrived so far
  std::size_t pool = 0;   // training pool size for this chunk
  EvalReport report;      // reliability/generalization over all seen edits
};

struct StreamResult {
  std::vector<StreamChunkReport> chunks;
  double seconds = 0.0;
};

// Edits arrive in order, chunk_size at a time. Each chunk is trained
// breadth-first together with a seeded replay sample of earlier edits, then
// everything seen so far is evaluated.
StreamResult edit_streaming(TransformerLM& model, std::span<const TokenizedEdit> stream, const PipelineConfig& cfg,
                            const StreamConfig& stream_cfg, const TokenizedProbes& probes,
                            const CapabilityBaseline& baseline);

}  // namespace edlab
