#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "edlab/model.hpp"
#include "edlab/ops.hpp"

using namespace edlab;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.vocab_size = 11;
  c.max_seq_len = 12;
  c.seed = seed;
  return c;
}

std::set<std::string> resolved(const ModelConfig& c, int layer, Selector s) {
  const auto v = resolve_location(c, {layer, s});
  return {v.begin(), v.end()};
}

}  // namespace

TEST_CASE("locations partition each layer") {
  const ModelConfig c = tiny_config();
  for (int layer = 0; layer < c.n_layers; ++layer) {
    const std::string prefix = "layer" + std::to_string(layer) + ".";
    auto up = resolved(c, layer, Selector::MlpUp);
    auto down = resolved(c, layer, Selector::MlpDown);
    std::set<std::string> both = up;
    both.insert(down.begin(), down.end());
    CHECK(both == resolved(c, layer, Selector::FullMlp));
    CHECK(up.size() == 1);
    CHECK(down.size() == 1);
    CHECK(resolved(c, layer, Selector::FullAttention).size() == 4);

    auto entire = resolved(c, layer, Selector::EntireLayer);
    CHECK(entire.count(prefix + "ln1") == 1);
    CHECK(entire.count(prefix + "ln2") == 1);
    for (Selector s : kAllSelectors) {
      for (const auto& name : resolved(c, layer, s)) {
        CHECK(name.rfind(prefix, 0) == 0);
        CHECK(entire.count(name) == 1);
      }
    }
    for (Selector s : {Selector::FullAttention, Selector::FullMlp, Selector::MlpUp, Selector::MlpDown}) {
      for (const auto& name : resolved(c, layer, s)) CHECK(name.find("ln") == std::string::npos);
    }
  }
  CHECK_THROWS_AS(resolve_location(c, {c.n_layers, Selector::MlpDown}), Error);
  CHECK_THROWS_AS(resolve_location(c, {-1, Selector::MlpDown}), Error);
  CHECK(enumerate_locations(c).size() == static_cast<std::size_t>(c.n_layers) * 5);
}

TEST_CASE("location labels round-trip") {
  for (Selector s : kAllSelectors) {
    const ParamLocation loc{4, s};
    CHECK(parse_location(loc.label()) == loc);
  }
  CHECK(ParamLocation{4, Selector::MlpDown}.label() == "layer4.MLP_DOWN");
  CHECK_THROWS_AS(parse_location("layerX.MLP_DOWN"), Error);
  CHECK_THROWS_AS(parse_location("layer1.MLP_SIDEWAYS"), Error);
}

TEST_CASE("initialisation is deterministic per seed") {
  TransformerLM a(tiny_config(3)), b(tiny_config(3)), c(tiny_config(4));
  CHECK(a == b);
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  const Tensor& ln = a.param("layer0.ln1");
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(ln(0, j) == 1.0f);
    CHECK(ln(1, j) == 0.0f);
  }
}

TEST_CASE("forward is causal: later tokens never change earlier logits") {
  TransformerLM m(tiny_config());
  const std::vector<int> a = {3, 4, 5, 6, 7}, b = {3, 4, 5, 9, 2};
  const std::vector<std::vector<int>> sa = {a}, sb = {b};
  const Tensor la = m.logits(PackedBatch::pack(sa));
  const Tensor lb = m.logits(PackedBatch::pack(sb));
  const std::size_t v = 11;
  for (std::size_t i = 0; i < 3 * v; ++i) CHECK(la.data[i] == lb.data[i]);
  CHECK(!std::equal(la.data.begin() + 3 * v, la.data.end(), lb.data.begin() + 3 * v));
}

TEST_CASE("packing sequences together does not change their logits") {
  TransformerLM m(tiny_config());
  const std::vector<std::vector<int>> one = {{5, 6, 7}}, two = {{9, 3}}, both = {{5, 6, 7}, {9, 3}};
  const Tensor l1 = m.logits(PackedBatch::pack(one));
  const Tensor l2 = m.logits(PackedBatch::pack(two));
  const Tensor lb = m.logits(PackedBatch::pack(both));
  std::vector<float> joined = l1.data;
  joined.insert(joined.end(), l2.data.begin(), l2.data.end());
  CHECK(joined == lb.data);
}

TEST_CASE("the incremental decoder reproduces full-forward logits bit for bit") {
  TransformerLM m(tiny_config(7));
  const std::vector<int> seq = {4, 8, 1, 10, 3, 3, 6};
  const std::vector<std::vector<int>> s = {seq};
  const Tensor full = m.logits(PackedBatch::pack(s));
  Decoder dec(m);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    dec.feed(std::span<const int>(&seq[t], 1));
    const auto last = dec.last_logits();
    CHECK(std::equal(last.begin(), last.end(), full.data.begin() + t * 11));
  }
}

TEST_CASE("forward through the tape matches the read-only forward") {
  TransformerLM m(tiny_config(2));
  const std::vector<std::vector<int>> s = {{1, 2, 3, 4}, {5, 6}};
  const PackedBatch batch = PackedBatch::pack(s);
  Tape<float> tape;
  const std::size_t rows[] = {1, 4};
  Var out = m.forward(tape, batch, rows);
  const Tensor ro = m.logits(batch, rows);
  CHECK(tape.value(out).data == ro.data);
}

TEST_CASE("backward with a localized trainable set only fills those gradients") {
  TransformerLM m(tiny_config(2));
  const std::vector<std::string> names = {"layer1.mlp_down"};
  m.set_trainable(names);
  const std::vector<std::vector<int>> s = {{1, 2, 3, 4}};
  Tape<float> tape;
  Var logits = m.forward(tape, PackedBatch::pack(s));
  const int targets[] = {2, 3, 4, 1};
  Var loss = ops::masked_cross_entropy(tape, logits, targets, std::vector<bool>(4, true));
  tape.backward(loss);
  for (const auto& name : m.param_names()) {
    const Tensor& t = m.param(name);
    if (name == "layer1.mlp_down") {
      REQUIRE(t.grad);
      double norm = 0;
      for (float g : *t.grad) norm += g * g;
      CHECK(norm > 0.0);
    } else {
      CHECK_FALSE(t.requires_grad);
      CHECK_FALSE(t.grad);
    }
  }
}

TEST_CASE("greedy decoding respects the context and stops at EOS") {
  TransformerLM m(tiny_config());
  const std::vector<int> prompt = {3, 4};
  CHECK(greedy_decode(m, prompt, 0).empty());
  const auto out = greedy_decode(m, prompt, 5);
  CHECK(out.size() <= 5);
  if (!out.empty() && out.back() == kEosId) CHECK(std::count(out.begin(), out.end(), kEosId) == 1);
  try {
    greedy_decode(m, prompt, 11);
    FAIL("expected a length error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Length);
  }
}

TEST_CASE("sequences longer than the context are rejected") {
  TransformerLM m(tiny_config());
  const std::vector<std::vector<int>> s = {std::vector<int>(13, 3)};
  CHECK_THROWS_AS(m.logits(PackedBatch::pack(s)), Error);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  TransformerLM m(tiny_config(9));
  m.param("head").data[5] = -0.0f;
  m.param("embed").data[0] = 1e-38f;
  const auto path = std::filesystem::temp_directory_path() / "edlab_test_ckpt.bin";
  save_checkpoint(m, path, {{"note", "x"}});
  const LoadedCheckpoint ck = load_checkpoint(path);
  CHECK(ck.model == m);
  CHECK(ck.model.config() == m.config());
  CHECK(ck.metadata.at("note") == "x");
  CHECK(std::signbit(ck.model.param("head").data[5]));

  SUBCASE("a truncated file is a format error") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 4);
    try {
      load_checkpoint(path);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
    }
  }
  SUBCASE("a missing file is a dependency error") {
    std::filesystem::remove(path);
    try {
      load_checkpoint(path);
      FAIL("expected a dependency error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Dependency);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  c.n_heads = 3;  // 16 not divisible by 3
  CHECK_THROWS_AS(c.validate(), Error);
  c = tiny_config();
  c.vocab_size = 2;
  CHECK_THROWS_AS(c.validate(), Error);
}
