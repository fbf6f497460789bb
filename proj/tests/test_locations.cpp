#include <doctest.h>

#include <algorithm>

#include "edlab/locations.hpp"
#include "edlab/rng.hpp"
#include "fixtures.hpp"

using namespace edlab;

namespace {

SweepRow row(int layer, Selector s, double rel, double gen, double ppl) {
  return SweepRow{{layer, s}, rel, gen, ppl, 50.0, 0.1};
}

// Worked by hand: rows 0 and 3 clear the 98% floor; row 3 has the lower ppl
// ratio, so it wins even though row 2 has a lower ppl ratio overall.
std::vector<SweepRow> oracle_table() {
  return {row(1, Selector::EntireLayer, 99.0, 80.0, 1.20), row(2, Selector::FullMlp, 97.9, 90.0, 1.10),
          row(3, Selector::MlpUp, 90.0, 95.0, 1.00), row(4, Selector::MlpDown, 98.0, 70.0, 1.15)};
}

}  // namespace

TEST_CASE("proportional position follows the worked example") {
  CHECK(proportional_position({6, Selector::MlpDown}, 28, 80) == ParamLocation{19, Selector::MlpDown});
  CHECK(proportional_position({0, Selector::MlpDown}, 28, 80).layer_index == 2);  // 80/28 = 2.857 -> 3rd layer
  for (int i = 0; i < 28; ++i) CHECK(proportional_position({i, Selector::FullMlp}, 28, 28).layer_index == i);
  // 7 * 2 / 4 = 3.5 rounds away from zero to 4.
  CHECK(proportional_position({1, Selector::MlpUp}, 4, 7).layer_index == 3);
  // Shrinking clamps to the first layer.
  CHECK(proportional_position({0, Selector::MlpUp}, 80, 4).layer_index == 0);
  CHECK_THROWS_AS(proportional_position({0, Selector::MlpUp}, 0, 4), Error);
  CHECK_THROWS_AS(proportional_position({5, Selector::MlpUp}, 4, 8), Error);
}

TEST_CASE("proportional position agrees with floating-point rounding and is monotone") {
  for (int src = 1; src <= 40; ++src) {
    for (int dst = 1; dst <= 90; dst += 7) {
      int prev = -1;
      for (int i = 0; i < src; ++i) {
        const int got = proportional_position({i, Selector::MlpDown}, src, dst).layer_index;
        const double exact = static_cast<double>(dst) * (i + 1) / src;
        const int expect = std::clamp(static_cast<int>(std::floor(exact + 0.5)), 1, dst) - 1;
        // Exact halves are represented exactly in double for these sizes.
        CHECK(got == expect);
        CHECK(got >= prev);
        prev = got;
      }
    }
  }
}

TEST_CASE("default position is the identity within range") {
  CHECK(default_position({6, Selector::MlpDown}, 80) == ParamLocation{6, Selector::MlpDown});
  CHECK(default_position({3, Selector::FullAttention}, 4) == ParamLocation{3, Selector::FullAttention});
  try {
    default_position({6, Selector::MlpDown}, 4);
    FAIL("expected out of range");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::OutOfRange);
  }
}

TEST_CASE("selection matches the hand-evaluated table") {
  CHECK(select_location(oracle_table(), SelectionRule{}) == ParamLocation{4, Selector::MlpDown});
  // With a lower floor row 2 qualifies and wins on ppl ratio.
  CHECK(select_location(oracle_table(), SelectionRule{0.9}) == ParamLocation{3, Selector::MlpUp});
}

TEST_CASE("selection tie-breaks and fallbacks") {
  const std::vector<SweepRow> single = {row(2, Selector::MlpUp, 10.0, 0.0, 3.0)};
  CHECK(select_location(single, SelectionRule{}) == ParamLocation{2, Selector::MlpUp});

  const std::vector<SweepRow> gen_tie = {row(1, Selector::MlpUp, 99.0, 60.0, 1.1), row(2, Selector::MlpDown, 99.0, 70.0, 1.1)};
  CHECK(select_location(gen_tie, SelectionRule{}) == ParamLocation{2, Selector::MlpDown});

  const std::vector<SweepRow> layer_tie = {row(3, Selector::MlpUp, 99.0, 70.0, 1.1), row(1, Selector::MlpDown, 99.0, 70.0, 1.1)};
  CHECK(select_location(layer_tie, SelectionRule{}) == ParamLocation{1, Selector::MlpDown});

  // Nobody reaches the floor: fall back to the most reliable rows.
  const std::vector<SweepRow> weak = {row(1, Selector::MlpUp, 50.0, 70.0, 1.0), row(2, Selector::MlpDown, 60.0, 10.0, 1.3),
                                      row(3, Selector::MlpDown, 60.0, 10.0, 1.2)};
  CHECK(select_location(weak, SelectionRule{}) == ParamLocation{3, Selector::MlpDown});

  try {
    select_location(std::vector<SweepRow>{}, SelectionRule{});
    FAIL("expected a selection error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Selection);
  }
  CHECK_THROWS_AS(select_location(single, SelectionRule{0.0}), Error);
}

TEST_CASE("selection does not depend on row order") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SweepRow> rows;
    for (int i = 0; i < 12; ++i) {
      // Coarse values so ties actually occur.
      rows.push_back(row(static_cast<int>(rng.below(4)), kAllSelectors[rng.below(5)], 95.0 + static_cast<double>(rng.below(5)),
                         10.0 * static_cast<double>(rng.below(3)), 1.0 + 0.1 * static_cast<double>(rng.below(3))));
    }
    const ParamLocation expect = select_location(rows, SelectionRule{});
    for (int p = 0; p < 5; ++p) {
      rng.shuffle(rows);
      CHECK(select_location(rows, SelectionRule{}) == expect);
    }
  }
}

TEST_CASE("a small sweep restores the base before every row") {
  const TransformerLM base(testing::small_model(24, 3));
  std::vector<TokenizedEdit> edits;
  for (int i = 0; i < 4; ++i) edits.push_back(testing::make_edit(i, {3 + i, 4}, {10 + i}, {{4, 3 + i}}));
  TokenizedProbes probes;
  probes.texts = {{3, 4, 5, kEosId}};
  probes.facts = {{{3, 4}, {5}}};
  const CapabilityBaseline baseline = capability_baseline(base, probes);
  PipelineConfig cfg;
  cfg.max_epochs = 2;
  cfg.adam.lr = 1e-2;
  const auto locations = enumerate_locations(base.config());
  const SweepResult r = sweep(base, edits, cfg, locations, probes, baseline);
  REQUIRE(r.rows.size() == locations.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    CHECK(r.rows[i].location == locations[i]);
    CHECK(r.restored_hashes[i] == base.hash());
    CHECK((r.rows[i].reliability >= 0.0 && r.rows[i].reliability <= 100.0));
  }
  const SweepResult again = sweep(base, edits, cfg, locations, probes, baseline);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    CHECK(again.rows[i].reliability == r.rows[i].reliability);
    CHECK(again.rows[i].ppl_ratio == r.rows[i].ppl_ratio);
  }

  CapabilityBaseline wrong = baseline;
  wrong.model_hash ^= 1;
  try {
    sweep(base, edits, cfg, locations, probes, wrong);
    FAIL("expected a sweep error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Sweep);
  }
}
