#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "edlab/data.hpp"
#include "edlab/error.hpp"
#include "edlab/model.hpp"

using namespace edlab;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::Format;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("edlab_test_" + name); }

}  // namespace

TEST_CASE("fact worlds are deterministic and functional") {
  const FactWorld a = gen_fact_world(5, 40, 4, 120);
  const FactWorld b = gen_fact_world(5, 40, 4, 120);
  const FactWorld c = gen_fact_world(6, 40, 4, 120);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  std::set<std::pair<int, int>> keys;
  for (const Fact& f : a.facts) CHECK(keys.emplace(f.subject, f.relation).second);
  CHECK(a.facts.size() == 120);
  for (const auto& r : a.relations) {
    CHECK(r.templates.size() >= 2);
    CHECK(std::set<std::string>(r.templates.begin(), r.templates.end()).size() == r.templates.size());
  }
  CHECK(std::set<std::string>(a.entities.begin(), a.entities.end()).size() == a.entities.size());
}

TEST_CASE("a world may fill the full cross product but not exceed it") {
  const FactWorld full = gen_fact_world(1, 10, 3, 30);
  CHECK(full.facts.size() == 30);
  CHECK(kind_of([] { gen_fact_world(1, 10, 3, 31); }) == ErrorKind::Generation);
  CHECK(kind_of([] { gen_fact_world(1, 10, 99, 5); }) == ErrorKind::Generation);
}

TEST_CASE("every generated string survives the tokenizer") {
  const FactWorld w = gen_fact_world(2, 30, 6, 150);
  const Tokenizer tok(w);
  for (const auto& s : world_statements(w)) {
    const auto ids = tok.encode(s);
    CHECK(std::find(ids.begin(), ids.end(), kUnkId) == ids.end());
    CHECK(tok.decode(ids) == s);
  }
  const auto edits = make_edit_set(w, 100, 2, RephraseStyle::PrefixNoise, 3);
  for (const auto& e : edits) {
    CHECK(tok.decode(tok.encode(e.edit_prompt)) == e.edit_prompt);
    CHECK(tok.decode(tok.encode(e.target)) == e.target);
    for (const auto& r : e.rephrase_prompts) CHECK(tok.decode(tok.encode(r)) == r);
  }
  CHECK(tok.encode("zzzunknown")[0] == kUnkId);
  CHECK(tok.word(kPadId) != tok.word(kEosId));
}

TEST_CASE("edits are counterfactual and rephrased per style") {
  const FactWorld w = gen_fact_world(4, 400, 5, 1500);
  const auto edits = make_edit_set(w, 1000, 1, RephraseStyle::Paraphrase, 8);
  REQUIRE(edits.size() == 1000);
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& e : edits) {
    CHECK(e.new_object != e.old_object);
    CHECK(e.target == e.new_object);
    REQUIRE(e.rephrase_prompts.size() == 1);
    CHECK(e.rephrase_prompts[0] != e.edit_prompt);
    CHECK(e.rephrase_prompts[0].find(e.subject) != std::string::npos);
    CHECK(seen.emplace(e.subject, e.relation).second);
  }
  CHECK(make_edit_set(w, 1000, 1, RephraseStyle::Paraphrase, 8) == edits);

  const auto noisy = make_edit_set(w, 50, 2, RephraseStyle::PrefixNoise, 8);
  for (const auto& e : noisy) {
    for (const auto& r : e.rephrase_prompts) {
      const std::string suffix = " " + e.edit_prompt;
      REQUIRE(r.size() > suffix.size());
      CHECK(r.compare(r.size() - suffix.size(), suffix.size(), suffix) == 0);
      const std::string prefix = r.substr(0, r.size() - suffix.size());
      CHECK(std::find(w.noise.begin(), w.noise.end(), prefix) != w.noise.end());
    }
  }
  CHECK(kind_of([&] { make_edit_set(w, 1501, 1, RephraseStyle::Paraphrase, 0); }) == ErrorKind::Sampling);
}

TEST_CASE("paraphrases use a different template of the same relation") {
  const FactWorld w = gen_fact_world(4, 50, 3, 100);
  const auto edits = make_edit_set(w, 60, 2, RephraseStyle::Paraphrase, 1);
  for (const auto& e : edits) {
    for (const auto& r : e.rephrase_prompts) CHECK(r != e.edit_prompt);
  }
}

TEST_CASE("probe facts never share a subject and relation with an edit") {
  const FactWorld w = gen_fact_world(9, 100, 4, 300);
  const auto edits = make_edit_set(w, 200, 1, RephraseStyle::Paraphrase, 2);
  const ProbeSet p = make_probe_set(w, edits, 80, 2);
  std::set<std::pair<std::string, std::string>> edited;
  for (const auto& e : edits) edited.emplace(e.subject, e.relation);
  CHECK(p.heldout_facts.size() == 80);
  CHECK(p.heldout_text.size() == 80);
  for (const auto& f : p.heldout_facts) CHECK(edited.count({f.subject, f.relation}) == 0);

  // Held-out text is unseen in pretraining and never contains an edit target.
  const auto statements = world_statements(w);
  const std::set<std::string> corpus(statements.begin(), statements.end());
  for (const auto& t : p.heldout_text) {
    CHECK(corpus.count(t) == 0);
    for (const auto& e : edits) CHECK(t.find(e.target) == std::string::npos);
  }
  CHECK(kind_of([&] { make_probe_set(w, edits, 101, 2); }) == ErrorKind::Sampling);
}

TEST_CASE("sharding partitions the set") {
  const FactWorld w = gen_fact_world(3, 300, 5, 1200);
  const auto edits = make_edit_set(w, 1000, 1, RephraseStyle::Paraphrase, 1);
  const auto shards = shard(edits, 5, 11);
  REQUIRE(shards.size() == 5);
  std::multiset<int> ids;
  for (const auto& s : shards) {
    CHECK(s.size() == 200);
    for (const auto& e : s) ids.insert(e.id);
  }
  std::multiset<int> expect;
  for (const auto& e : edits) expect.insert(e.id);
  CHECK(ids == expect);
  CHECK(shard(edits, 5, 11) == shards);
  CHECK(shard(edits, 1, 11)[0] == edits);
  CHECK(kind_of([&] { shard(edits, 3, 0); }) == ErrorKind::Shard);
}

TEST_CASE("world, edits and probes round-trip through their files") {
  const FactWorld w = gen_fact_world(12, 60, 4, 200);
  const auto edits = make_edit_set(w, 50, 2, RephraseStyle::PrefixNoise, 4);
  const ProbeSet probes = make_probe_set(w, edits, 30, 4);
  const auto wp = temp_file("world.json"), ep = temp_file("edits.jsonl"), pp = temp_file("probes.jsonl");
  save_world(w, wp);
  save_edits(edits, ep);
  save_probes(probes, pp);
  CHECK(load_world(wp) == w);
  CHECK(load_edits(ep) == edits);
  CHECK(load_probes(pp) == probes);

  // One object per line, fields in declaration order.
  std::ifstream in(ep);
  std::string first;
  std::getline(in, first);
  CHECK(first.rfind("{\"id\":0,\"subject\":", 0) == 0);

  std::ofstream(ep, std::ios::app) << "{not json\n";
  CHECK(kind_of([&] { load_edits(ep); }) == ErrorKind::Parse);
  fs::remove(ep);
  CHECK(kind_of([&] { load_edits(ep); }) == ErrorKind::Dependency);
  fs::remove(wp);
  fs::remove(pp);
}
