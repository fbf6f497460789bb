#include "edlab/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "edlab/kernels.hpp"
#include "edlab/ops.hpp"
#include "edlab/rng.hpp"

namespace edlab {

namespace {

constexpr std::size_t kPerLayer = 8;
enum LayerSlot : std::size_t { kLn1, kAttnQ, kAttnK, kAttnV, kAttnO, kLn2, kMlpUp, kMlpDown };
constexpr const char* kSlotNames[kPerLayer] = {"ln1", "attn_q", "attn_k", "attn_v", "attn_o", "ln2", "mlp_up", "mlp_down"};

std::size_t layer_slot(int layer, LayerSlot slot) { return 2 + static_cast<std::size_t>(layer) * kPerLayer + slot; }

std::string layer_name(int layer, LayerSlot slot) { return "layer" + std::to_string(layer) + "." + kSlotNames[slot]; }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) fail("n_heads must divide d_model");
  if (d_mlp < 1) fail("d_mlp must be >= 1");
  if (vocab_size < 4) fail("vocab_size must be >= 4");
  if (max_seq_len < 1) fail("max_seq_len must be >= 1");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
                     {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("seed").get_to(c.seed);
}

std::string_view to_string(Selector s) {
  switch (s) {
    case Selector::EntireLayer: return "ENTIRE_LAYER";
    case Selector::FullAttention: return "FULL_ATTENTION";
    case Selector::FullMlp: return "FULL_MLP";
    case Selector::MlpUp: return "MLP_UP";
    case Selector::MlpDown: return "MLP_DOWN";
  }
  return "?";
}

Selector parse_selector(std::string_view name) {
  for (Selector s : kAllSelectors)
    if (to_string(s) == name) return s;
  throw Error(ErrorKind::Location, "unknown selector '" + std::string(name) + "'");
}

std::string ParamLocation::label() const { return "layer" + std::to_string(layer_index) + "." + std::string(to_string(selector)); }

ParamLocation parse_location(std::string_view label) {
  const auto dot = label.find('.');
  if (label.rfind("layer", 0) != 0 || dot == std::string_view::npos || dot == 5) {
    throw Error(ErrorKind::Location, "location must look like layer<N>.<SELECTOR>, got '" + std::string(label) + "'");
  }
  ParamLocation loc;
  try {
    std::size_t used = 0;
    const std::string digits(label.substr(5, dot - 5));
    loc.layer_index = std::stoi(digits, &used);
    if (used != digits.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw Error(ErrorKind::Location, "bad layer index in '" + std::string(label) + "'");
  }
  loc.selector = parse_selector(label.substr(dot + 1));
  return loc;
}

std::vector<std::string> resolve_location(const ModelConfig& config, ParamLocation loc) {
  if (loc.layer_index < 0 || loc.layer_index >= config.n_layers) {
    throw Error(ErrorKind::Location, "layer " + std::to_string(loc.layer_index) + " outside a " +
                                         std::to_string(config.n_layers) + "-layer model");
  }
  const int i = loc.layer_index;
  switch (loc.selector) {
    case Selector::MlpDown: return {layer_name(i, kMlpDown)};
    case Selector::MlpUp: return {layer_name(i, kMlpUp)};
    case Selector::FullMlp: return {layer_name(i, kMlpUp), layer_name(i, kMlpDown)};
    case Selector::FullAttention:
      return {layer_name(i, kAttnQ), layer_name(i, kAttnK), layer_name(i, kAttnV), layer_name(i, kAttnO)};
    case Selector::EntireLayer: {
      std::vector<std::string> all;
      for (std::size_t s = 0; s < kPerLayer; ++s) all.push_back(layer_name(i, static_cast<LayerSlot>(s)));
      return all;
    }
  }
  return {};
}

std::vector<ParamLocation> enumerate_locations(const ModelConfig& config) {
  std::vector<ParamLocation> out;
  for (int i = 0; i < config.n_layers; ++i)
    for (Selector s : kAllSelectors) out.push_back({i, s});
  return out;
}

PackedBatch PackedBatch::pack(std::span<const std::vector<int>> sequences) {
  PackedBatch b;
  b.offsets.push_back(0);
  for (const auto& seq : sequences) {
    for (std::size_t p = 0; p < seq.size(); ++p) {
      b.tokens.push_back(seq[p]);
      b.positions.push_back(static_cast<int>(p));
    }
    b.offsets.push_back(b.tokens.size());
  }
  return b;
}

TransformerLM::TransformerLM(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, v = config_.vocab_size, dm = config_.d_mlp;
  auto add = [&](std::string name, Shape shape) {
    names_.push_back(std::move(name));
    params_.emplace_back(std::move(shape));
  };
  add("embed", {v, d});
  add("pos_embed", {static_cast<std::size_t>(config_.max_seq_len), d});
  for (int i = 0; i < config_.n_layers; ++i) {
    add(layer_name(i, kLn1), {2, d});
    add(layer_name(i, kAttnQ), {d, d});
    add(layer_name(i, kAttnK), {d, d});
    add(layer_name(i, kAttnV), {d, d});
    add(layer_name(i, kAttnO), {d, d});
    add(layer_name(i, kLn2), {2, d});
    add(layer_name(i, kMlpUp), {d, dm});
    add(layer_name(i, kMlpDown), {dm, d});
  }
  add("final_ln", {2, d});
  add("head", {d, v});

  Rng rng(derive_seed(config_.seed, "init"));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p];
    const bool is_norm = names_[p].ends_with("ln1") || names_[p].ends_with("ln2") || names_[p] == "final_ln";
    if (is_norm) {
      for (std::size_t j = 0; j < d; ++j) t.data[j] = 1.0f;
    } else {
      for (float& x : t.data) x = static_cast<float>(0.02 * rng.normal());
    }
  }
}

std::size_t TransformerLM::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw Error(ErrorKind::Location, "no parameter named '" + std::string(name) + "'");
}

Tensor& TransformerLM::param(std::string_view name) { return params_[index_of(name)]; }
const Tensor& TransformerLM::param(std::string_view name) const { return params_[index_of(name)]; }

std::vector<ParamRef> TransformerLM::param_refs() {
  std::vector<ParamRef> refs;
  refs.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) refs.push_back({names_[i], &params_[i]});
  return refs;
}

std::size_t TransformerLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

void TransformerLM::set_trainable(std::span<const std::string> names) {
  for (auto& p : params_) {
    p.requires_grad = false;
    p.grad.reset();
  }
  for (const auto& n : names) params_[index_of(n)].requires_grad = true;
}

void TransformerLM::zero_grad() {
  for (auto& p : params_)
    if (p.requires_grad) p.zero_grad();
}

std::uint64_t TransformerLM::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(p.data.data()), p.data.size() * sizeof(float)), h);
  }
  return h;
}

bool TransformerLM::operator==(const TransformerLM& other) const {
  if (!(config_ == other.config_) || names_ != other.names_) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].shape != other.params_[i].shape) return false;
    if (std::memcmp(params_[i].data.data(), other.params_[i].data.data(), params_[i].numel() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

void TransformerLM::check_batch(const PackedBatch& batch) const {
  if (batch.offsets.size() < 2) throw Error(ErrorKind::Dimension, "empty batch");
  for (std::size_t s = 0; s + 1 < batch.offsets.size(); ++s) {
    const std::size_t len = batch.offsets[s + 1] - batch.offsets[s];
    if (len > static_cast<std::size_t>(config_.max_seq_len)) {
      throw Error(ErrorKind::Length, "sequence of " + std::to_string(len) + " tokens exceeds context of " +
                                         std::to_string(config_.max_seq_len));
    }
  }
}

template <class Leaf>
Var TransformerLM::forward_impl(Tape<float>& tape, const PackedBatch& batch, std::span<const std::size_t> rows,
                                Leaf&& leaf) const {
  check_batch(batch);
  using ops::add;
  using ops::matmul;
  Var x = add(tape, ops::embedding(tape, leaf(0), std::span<const int>(batch.tokens)),
              ops::embedding(tape, leaf(1), std::span<const int>(batch.positions)));
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  for (int i = 0; i < config_.n_layers; ++i) {
    Var h = ops::layernorm(tape, x, leaf(layer_slot(i, kLn1)));
    Var q = matmul(tape, h, leaf(layer_slot(i, kAttnQ)));
    Var k = matmul(tape, h, leaf(layer_slot(i, kAttnK)));
    Var v = matmul(tape, h, leaf(layer_slot(i, kAttnV)));
    Var a = ops::causal_attention(tape, q, k, v, heads, std::span<const std::size_t>(batch.offsets));
    x = add(tape, x, matmul(tape, a, leaf(layer_slot(i, kAttnO))));
    Var h2 = ops::layernorm(tape, x, leaf(layer_slot(i, kLn2)));
    Var u = ops::gelu(tape, matmul(tape, h2, leaf(layer_slot(i, kMlpUp))));
    x = add(tape, x, matmul(tape, u, leaf(layer_slot(i, kMlpDown))));
  }
  const std::size_t tail = 2 + static_cast<std::size_t>(config_.n_layers) * kPerLayer;
  x = ops::layernorm(tape, x, leaf(tail));
  if (!rows.empty()) x = ops::select_rows(tape, x, rows);
  return matmul(tape, x, leaf(tail + 1));
}

Var TransformerLM::forward(Tape<float>& tape, const PackedBatch& batch, std::span<const std::size_t> rows) {
  return forward_impl(tape, batch, rows, [&](std::size_t i) { return tape.param(params_[i]); });
}

Tensor TransformerLM::logits(const PackedBatch& batch, std::span<const std::size_t> rows) const {
  Tape<float> tape;
  Var out = forward_impl(tape, batch, rows, [&](std::size_t i) { return tape.reference(params_[i]); });
  return tape.value(out);
}

Decoder::Decoder(const TransformerLM& model)
    : model_(model), k_cache_(model.config().n_layers), v_cache_(model.config().n_layers) {}

void Decoder::feed(std::span<const int> tokens) {
  const ModelConfig& cfg = model_.config();
  const std::size_t n = tokens.size();
  if (n == 0) return;
  if (length_ + n > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw Error(ErrorKind::Length, "decoder context of " + std::to_string(cfg.max_seq_len) + " exceeded");
  }
  const std::size_t d = cfg.d_model, dm = cfg.d_mlp, vocab = cfg.vocab_size;
  const std::size_t heads = cfg.n_heads, dh = d / heads;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));
  const auto& P = model_.params_;

  std::vector<float> x(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    const int tok = tokens[r];
    if (tok < 0 || tok >= cfg.vocab_size) throw Error(ErrorKind::Vocabulary, "token id " + std::to_string(tok));
    const float* e = P[0].data.data() + static_cast<std::size_t>(tok) * d;
    const float* p = P[1].data.data() + (length_ + r) * d;
    for (std::size_t j = 0; j < d; ++j) x[r * d + j] = e[j] + p[j];
  }

  std::vector<float> h(n * d), q(n * d), att(n * d), proj(n * d), up(n * dm), probs(length_ + n);
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const Tensor& ln1 = P[layer_slot(layer, kLn1)];
    for (std::size_t r = 0; r < n; ++r)
      kernels::layernorm_row(x.data() + r * d, ln1.data.data(), ln1.data.data() + d, d, h.data() + r * d,
                             static_cast<float*>(nullptr), static_cast<float*>(nullptr));
    auto& kc = k_cache_[layer];
    auto& vc = v_cache_[layer];
    kc.resize((length_ + n) * d);
    vc.resize((length_ + n) * d);
    kernels::gemm(n, d, d, h.data(), P[layer_slot(layer, kAttnQ)].data.data(), q.data(), false);
    kernels::gemm(n, d, d, h.data(), P[layer_slot(layer, kAttnK)].data.data(), kc.data() + length_ * d, false);
    kernels::gemm(n, d, d, h.data(), P[layer_slot(layer, kAttnV)].data.data(), vc.data() + length_ * d, false);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t col = hd * dh;
      for (std::size_t r = 0; r < n; ++r) {
        kernels::attend_row(q.data() + r * d + col, kc.data() + col, vc.data() + col, d, length_ + r + 1, dh, scale,
                            probs.data(), att.data() + r * d + col);
      }
    }
    kernels::gemm(n, d, d, att.data(), P[layer_slot(layer, kAttnO)].data.data(), proj.data(), false);
    for (std::size_t j = 0; j < n * d; ++j) x[j] = x[j] + proj[j];
    const Tensor& ln2 = P[layer_slot(layer, kLn2)];
    for (std::size_t r = 0; r < n; ++r)
      kernels::layernorm_row(x.data() + r * d, ln2.data.data(), ln2.data.data() + d, d, h.data() + r * d,
                             static_cast<float*>(nullptr), static_cast<float*>(nullptr));
    kernels::gemm(n, d, dm, h.data(), P[layer_slot(layer, kMlpUp)].data.data(), up.data(), false);
    for (float& u : up) u = kernels::gelu(u);
    kernels::gemm(n, dm, d, up.data(), P[layer_slot(layer, kMlpDown)].data.data(), proj.data(), false);
    for (std::size_t j = 0; j < n * d; ++j) x[j] = x[j] + proj[j];
  }
  length_ += n;

  const std::size_t tail = 2 + static_cast<std::size_t>(cfg.n_layers) * kPerLayer;
  const Tensor& fln = P[tail];
  std::vector<float> last(d);
  kernels::layernorm_row(x.data() + (n - 1) * d, fln.data.data(), fln.data.data() + d, d, last.data(),
                         static_cast<float*>(nullptr), static_cast<float*>(nullptr));
  logits_.resize(vocab);
  kernels::gemm(std::size_t{1}, d, vocab, last.data(), P[tail + 1].data.data(), logits_.data(), false);
}

int Decoder::argmax() const {
  if (logits_.empty()) throw Error(ErrorKind::Length, "decoder has not been fed any tokens");
  return static_cast<int>(kernels::argmax(logits_.data(), logits_.size()));
}

std::vector<int> greedy_decode(const TransformerLM& model, std::span<const int> prompt, int max_new) {
  if (max_new < 0) throw Error(ErrorKind::Argument, "max_new must be >= 0");
  if (prompt.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(model.config().max_seq_len)) {
    throw Error(ErrorKind::Length, "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                                       std::to_string(max_new) + " new tokens exceeds context of " +
                                       std::to_string(model.config().max_seq_len));
  }
  std::vector<int> out;
  if (max_new == 0) return out;
  if (prompt.empty()) throw Error(ErrorKind::Length, "greedy decoding needs a non-empty prompt");
  Decoder dec(model);
  dec.feed(prompt);
  for (int step = 0; step < max_new; ++step) {
    const int tok = dec.argmax();
    out.push_back(tok);
    if (tok == kEosId || step + 1 == max_new) break;
    dec.feed(std::span<const int>(&tok, 1));
  }
  return out;
}

namespace {

template <class U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!is) throw Error(ErrorKind::Format, "truncated checkpoint");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

}  // namespace

void save_checkpoint(const TransformerLM& model, const std::filesystem::path& path,
                     const nlohmann::json& extra_metadata) {
  nlohmann::json meta = extra_metadata.is_object() ? extra_metadata : nlohmann::json::object();
  meta["config"] = model.config();
  meta["seed"] = model.config().seed;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& name : model.param_names()) plist.push_back({{"name", name}, {"shape", model.param(name).shape}});
  meta["params"] = plist;
  const std::string text = meta.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::Format, "cannot open '" + path.string() + "' for writing");
  os.write("EDLB", 4);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& name : model.param_names())
    for (float f : model.param(name).data) write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
  if (!os) throw Error(ErrorKind::Format, "failed writing '" + path.string() + "'");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Dependency, "missing checkpoint '" + path.string() + "'");
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EDLB", 4) != 0) throw Error(ErrorKind::Format, "bad checkpoint magic in '" + path.string() + "'");
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw Error(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = read_le<std::uint64_t>(is);
  std::string text(meta_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw Error(ErrorKind::Format, "truncated checkpoint metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint metadata: ") + e.what());
  }
  ModelConfig cfg;
  try {
    cfg = meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint config: ") + e.what());
  }
  TransformerLM model(cfg);
  const auto& plist = meta.at("params");
  if (plist.size() != model.param_names().size()) throw Error(ErrorKind::Format, "checkpoint parameter list mismatch");
  for (std::size_t i = 0; i < plist.size(); ++i) {
    const std::string& name = model.param_names()[i];
    Tensor& t = model.param(name);
    if (plist[i].at("name").get<std::string>() != name || plist[i].at("shape").get<Shape>() != t.shape) {
      throw Error(ErrorKind::Format, "checkpoint parameter " + std::to_string(i) + " does not match '" + name + "'");
    }
    for (float& f : t.data) f = std::bit_cast<float>(read_le<std::uint32_t>(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw Error(ErrorKind::Format, "trailing bytes in checkpoint");
  return {std::move(model), std::move(meta)};
}

}  // namespace edlab
