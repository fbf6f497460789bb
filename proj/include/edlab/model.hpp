#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "edlab/adam.hpp"
#include "edlab/tape.hpp"
#include "edlab/tensor.hpp"

namespace edlab {

inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kUnkId = 2;

struct ModelConfig {
  int n_layers = 6;
  int d_model = 128;
  int n_heads = 4;
  int d_mlp = 512;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// The five tuning-location selectors.
enum class Selector { EntireLayer, FullAttention, FullMlp, MlpUp, MlpDown };

inline constexpr std::array<Selector, 5> kAllSelectors = {Selector::EntireLayer, Selector::FullAttention,
                                                          Selector::FullMlp, Selector::MlpUp, Selector::MlpDown};

std::string_view to_string(Selector s);
Selector parse_selector(std::string_view name);

struct ParamLocation {
  int layer_index = 0;
  Selector selector = Selector::MlpDown;

  auto operator<=>(const ParamLocation&) const = default;
  std::string label() const;  // e.g. "layer4.MLP_DOWN"
};

ParamLocation parse_location(std::string_view label);

// Canonical parameter names touched by a location, in canonical order.
std::vector<std::string> resolve_location(const ModelConfig& config, ParamLocation loc);

// Every (layer, selector) pair, layer-major.
std::vector<ParamLocation> enumerate_locations(const ModelConfig& config);

// Several token sequences packed row-wise into one matrix.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<std::size_t> offsets;  // sequence s spans rows [offsets[s], offsets[s+1])

  static PackedBatch pack(std::span<const std::vector<int>> sequences);
  std::size_t rows() const { return tokens.size(); }
  std::size_t sequences() const { return offsets.size() - 1; }
};

// Pre-layernorm decoder-only transformer with GELU MLPs, learned absolute
// positions and an untied output head. No biases outside the layernorms.
//
// Parameters (canonical order): embed, pos_embed, then per layer ln1,
// attn_q, attn_k, attn_v, attn_o, ln2, mlp_up, mlp_down, then final_ln and
// head. Layernorm tensors are [2×d]: gain row then bias row.
class TransformerLM {
 public:
  explicit TransformerLM(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& param_names() const { return names_; }
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  std::vector<ParamRef> param_refs();
  std::size_t parameter_count() const;

  // requires_grad is set exactly on `names`; every gradient is cleared.
  void set_trainable(std::span<const std::string> names);
  void zero_grad();

  // FNV-1a over the raw parameter bytes in canonical order.
  std::uint64_t hash() const;

  // Differentiable forward. Returns logits for `rows` of the packed batch
  // (all rows when empty).
  Var forward(Tape<float>& tape, const PackedBatch& batch, std::span<const std::size_t> rows = {});

  // Read-only forward returning [rows × vocab] logits.
  Tensor logits(const PackedBatch& batch, std::span<const std::size_t> rows = {}) const;

  bool operator==(const TransformerLM& other) const;

 private:
  friend class Decoder;
  template <class Leaf>
  Var forward_impl(Tape<float>& tape, const PackedBatch& batch, std::span<const std::size_t> rows,
                   Leaf&& leaf) const;
  std::size_t index_of(std::string_view name) const;
  void check_batch(const PackedBatch& batch) const;

  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

// Incremental greedy decoder with a key/value cache. Produces logits that are
// bit-identical to TransformerLM::logits on the same prefix.
class Decoder {
 public:
  explicit Decoder(const TransformerLM& model);

  // Appends tokens and updates the last-position logits.
  void feed(std::span<const int> tokens);
  std::span<const float> last_logits() const { return logits_; }
  int argmax() const;
  std::size_t length() const { return length_; }

 private:
  const TransformerLM& model_;
  std::vector<std::vector<float>> k_cache_;
  std::vector<std::vector<float>> v_cache_;
  std::vector<float> logits_;
  std::size_t length_ = 0;
};

// Greedy argmax decoding (ties -> lowest id). Stops after emitting EOS or
// max_new tokens; the returned tokens exclude the prompt and include the EOS
// if one was produced.
std::vector<int> greedy_decode(const TransformerLM& model, std::span<const int> prompt, int max_new);

// Binary checkpoint: "EDLB", u32 version, u64 metadata length, JSON metadata,
// then raw little-endian float32 parameters in canonical order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path,
                     const nlohmann::json& extra_metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  TransformerLM model;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace edlab
