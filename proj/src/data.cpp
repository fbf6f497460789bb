#include "edlab/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "edlab/error.hpp"
#include "edlab/rng.hpp"

namespace edlab {

namespace {

struct RelationFrame {
  const char* name;
  std::vector<const char*> templates;
};

const std::vector<RelationFrame>& relation_library() {
  static const std::vector<RelationFrame> lib = {
      {"capital", {"the capital of {s} is", "{s} has its capital in", "the seat of government of {s} is"}},
      {"language", {"the official language of {s} is", "people in {s} mainly speak", "the main language spoken in {s} is"}},
      {"currency", {"the currency of {s} is", "in {s} people pay with", "the money used in {s} is"}},
      {"founder", {"{s} was founded by", "the founder of {s} is", "the person who founded {s} is"}},
      {"river", {"the longest river in {s} is", "{s} is crossed by the river", "the main river of {s} is"}},
      {"sport", {"the national sport of {s} is", "in {s} the most popular sport is", "the favourite game of {s} is"}},
      {"instrument", {"the traditional instrument of {s} is", "musicians from {s} usually play", "the typical instrument of {s} is"}},
      {"dish", {"the national dish of {s} is", "a classic meal from {s} is", "the best known food of {s} is"}},
      {"animal", {"the national animal of {s} is", "the symbol animal of {s} is", "{s} is represented by the animal"}},
      {"mountain", {"the highest mountain in {s} is", "the tallest peak of {s} is", "{s} is dominated by the mountain"}},
      {"festival", {"the main festival of {s} is", "every year {s} celebrates", "the biggest holiday in {s} is"}},
      {"color", {"the flag color of {s} is", "the main color on the flag of {s} is", "{s} is known for the color"}},
  };
  return lib;
}

const std::vector<std::string>& noise_pool() {
  static const std::vector<std::string> pool = {
      "the weather was mild that morning .",
      "a small boat drifted slowly along the coast .",
      "she forgot her umbrella at the station again .",
      "the old clock in the hall stopped at noon .",
      "several birds gathered on the wet roof .",
      "he poured a cup of tea and sat down .",
      "the train was late because of the snow .",
      "nobody noticed the painting had been moved .",
      "the children laughed loudly in the garden .",
      "a quiet wind moved through the tall grass .",
      "the market opens early on every weekday .",
      "they walked home after the long meeting .",
      "the lamp flickered twice before going dark .",
      "fresh bread was sold out by nine .",
      "the letter arrived without a stamp .",
      "we waited for the rain to stop .",
      "the road curved sharply near the bridge .",
      "a cat slept on the warm windowsill .",
      "the library was nearly empty that evening .",
      "music drifted from an open window upstairs .",
  };
  return pool;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string fill_template(const std::string& tmpl, const std::string& subject) {
  const auto pos = tmpl.find("{s}");
  return tmpl.substr(0, pos) + subject + tmpl.substr(pos + 3);
}

std::set<std::string> reserved_words() {
  std::set<std::string> words;
  for (const auto& rel : relation_library())
    for (const char* t : rel.templates)
      for (auto& w : split_words(t)) words.insert(w);
  for (const auto& s : noise_pool())
    for (auto& w : split_words(s)) words.insert(w);
  return words;
}

// Entities are three open syllables ("kabilo"); object words are two
// syllables plus a coda ("tavor"), so the two classes never collide.
std::string pseudo_word(Rng& rng, int syllables, bool coda) {
  static const char kOnsets[] = "bdfgklmnprstvz";
  static const char kVowels[] = "aeiou";
  static const char kCodas[] = "nrx";
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(sizeof(kOnsets) - 1)];
    w += kVowels[rng.below(sizeof(kVowels) - 1)];
  }
  if (coda) w += kCodas[rng.below(sizeof(kCodas) - 1)];
  return w;
}

std::vector<std::string> unique_words(Rng& rng, std::size_t count, int syllables, bool coda,
                                      const std::set<std::string>& reserved) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w = pseudo_word(rng, syllables, coda);
    if (reserved.count(w) || !seen.insert(w).second) continue;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

std::string FactWorld::prompt(const Fact& f, std::size_t template_index) const {
  return fill_template(relations.at(f.relation).templates.at(template_index), entities.at(f.subject));
}

const std::string& FactWorld::object_text(const Fact& f) const { return relations.at(f.relation).objects.at(f.object); }

FactWorld gen_fact_world(std::uint64_t seed, int n_entities, int n_relations, int n_facts, int objects_per_relation) {
  if (n_entities < 1 || n_relations < 1 || n_facts < 0 || objects_per_relation < 2) {
    throw Error(ErrorKind::Generation, "world sizes must be positive and objects_per_relation >= 2");
  }
  if (static_cast<std::size_t>(n_relations) > relation_library().size()) {
    throw Error(ErrorKind::Generation, "at most " + std::to_string(relation_library().size()) + " relations available");
  }
  if (static_cast<long long>(n_facts) > static_cast<long long>(n_entities) * n_relations) {
    throw Error(ErrorKind::Generation, std::to_string(n_facts) + " facts exceed " + std::to_string(n_entities) + " x " +
                                           std::to_string(n_relations) + " (subject, relation) pairs");
  }
  const auto reserved = reserved_words();
  FactWorld world;
  world.seed = seed;
  world.noise = noise_pool();

  Rng name_rng(derive_seed(seed, "entities"));
  world.entities = unique_words(name_rng, static_cast<std::size_t>(n_entities), 3, false, reserved);

  // Object words form a shared lexicon; every answer is an ordered pair.
  Rng obj_rng(derive_seed(seed, "objects"));
  const std::size_t lexicon_size = std::max<std::size_t>(16, static_cast<std::size_t>(objects_per_relation));
  const auto lexicon = unique_words(obj_rng, lexicon_size, 2, true, reserved);
  for (int r = 0; r < n_relations; ++r) {
    const auto& frame = relation_library()[static_cast<std::size_t>(r)];
    Relation rel;
    rel.name = frame.name;
    for (const char* t : frame.templates) rel.templates.emplace_back(t);
    std::set<std::string> used;
    while (rel.objects.size() < static_cast<std::size_t>(objects_per_relation)) {
      const auto a = obj_rng.below(lexicon.size());
      const auto b = obj_rng.below(lexicon.size());
      if (a == b) continue;
      std::string obj = lexicon[a] + " " + lexicon[b];
      if (used.insert(obj).second) rel.objects.push_back(std::move(obj));
    }
    world.relations.push_back(std::move(rel));
  }

  Rng fact_rng(derive_seed(seed, "facts"));
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(n_entities) * n_relations);
  for (int s = 0; s < n_entities; ++s)
    for (int r = 0; r < n_relations; ++r) pairs.emplace_back(s, r);
  fact_rng.shuffle(pairs);
  pairs.resize(static_cast<std::size_t>(n_facts));
  std::sort(pairs.begin(), pairs.end());
  for (auto [s, r] : pairs) {
    const auto obj = static_cast<int>(fact_rng.below(static_cast<std::uint64_t>(objects_per_relation)));
    world.facts.push_back({s, r, obj});
  }
  return world;
}

Tokenizer::Tokenizer(const FactWorld& world) {
  std::set<std::string> vocab;
  for (const auto& e : world.entities) vocab.insert(e);
  for (const auto& rel : world.relations) {
    for (const auto& t : rel.templates)
      for (auto& w : split_words(t))
        if (w != "{s}") vocab.insert(w);
    for (const auto& o : rel.objects)
      for (auto& w : split_words(o)) vocab.insert(w);
  }
  for (const auto& s : world.noise)
    for (auto& w : split_words(s)) vocab.insert(w);
  words_ = {"<pad>", "<eos>", "<unk>"};
  words_.insert(words_.end(), vocab.begin(), vocab.end());
  for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], static_cast<int>(i));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) {
    auto it = ids_.find(w);
    out.push_back(it == ids_.end() ? 2 : it->second);
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::string_view to_string(RephraseStyle s) { return s == RephraseStyle::Paraphrase ? "PARAPHRASE" : "PREFIX_NOISE"; }

RephraseStyle parse_rephrase_style(std::string_view s) {
  if (s == "PARAPHRASE") return RephraseStyle::Paraphrase;
  if (s == "PREFIX_NOISE") return RephraseStyle::PrefixNoise;
  throw Error(ErrorKind::Parse, "unknown rephrase style '" + std::string(s) + "'");
}

std::vector<EditExample> make_edit_set(const FactWorld& world, int n_edits, int n_rephrases, RephraseStyle style,
                                       std::uint64_t seed) {
  if (n_edits < 0 || static_cast<std::size_t>(n_edits) > world.facts.size()) {
    throw Error(ErrorKind::Sampling, "cannot sample " + std::to_string(n_edits) + " edits from " +
                                         std::to_string(world.facts.size()) + " facts");
  }
  if (n_rephrases < 0) throw Error(ErrorKind::Sampling, "n_rephrases must be >= 0");
  Rng rng(derive_seed(seed, "edits"));
  std::vector<std::size_t> order(world.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<EditExample> edits;
  edits.reserve(static_cast<std::size_t>(n_edits));
  for (int e = 0; e < n_edits; ++e) {
    const Fact& f = world.facts[order[static_cast<std::size_t>(e)]];
    const Relation& rel = world.relations[static_cast<std::size_t>(f.relation)];
    EditExample ex;
    ex.id = e;
    ex.subject = world.entities[static_cast<std::size_t>(f.subject)];
    ex.relation = rel.name;
    ex.old_object = world.object_text(f);
    // Uniform over the relation's other objects.
    auto pick = static_cast<int>(rng.below(rel.objects.size() - 1));
    if (pick >= f.object) ++pick;
    ex.new_object = rel.objects[static_cast<std::size_t>(pick)];
    ex.target = ex.new_object;
    const std::size_t t0 = rng.below(rel.templates.size());
    ex.edit_prompt = world.prompt(f, t0);
    ex.rephrase_style = style;
    for (int r = 0; r < n_rephrases; ++r) {
      if (style == RephraseStyle::Paraphrase) {
        // Cycle through the other surface forms, starting after t0.
        const std::size_t others = rel.templates.size() - 1;
        const std::size_t t = (t0 + 1 + static_cast<std::size_t>(r) % others) % rel.templates.size();
        ex.rephrase_prompts.push_back(world.prompt(f, t));
      } else {
        ex.rephrase_prompts.push_back(world.noise[rng.below(world.noise.size())] + " " + ex.edit_prompt);
      }
    }
    edits.push_back(std::move(ex));
  }
  return edits;
}

ProbeSet make_probe_set(const FactWorld& world, std::span<const EditExample> edits, int n_facts, std::uint64_t seed) {
  std::set<std::pair<std::string, std::string>> edited;
  for (const auto& e : edits) edited.emplace(e.subject, e.relation);
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    const Fact& f = world.facts[i];
    if (!edited.count({world.entities[static_cast<std::size_t>(f.subject)], world.relations[static_cast<std::size_t>(f.relation)].name}))
      candidates.push_back(i);
  }
  if (n_facts < 0 || static_cast<std::size_t>(n_facts) > candidates.size()) {
    throw Error(ErrorKind::Sampling, "only " + std::to_string(candidates.size()) + " unedited facts for " +
                                         std::to_string(n_facts) + " probes");
  }
  Rng rng(derive_seed(seed, "probes"));
  rng.shuffle(candidates);
  candidates.resize(static_cast<std::size_t>(n_facts));
  std::sort(candidates.begin(), candidates.end());

  ProbeSet probes;
  for (std::size_t idx : candidates) {
    const Fact& f = world.facts[idx];
    const Relation& rel = world.relations[static_cast<std::size_t>(f.relation)];
    const std::size_t t = rng.below(rel.templates.size());
    ProbeFact pf{world.entities[static_cast<std::size_t>(f.subject)], rel.name, world.prompt(f, t), world.object_text(f)};
    // Held-out text pairs a prompt about the probe subject with a noise
    // sentence other than its filler one, a combination never seen verbatim
    // during pretraining. It stops before the object so that no held-out
    // sequence contains an edit target.
    const std::size_t t2 = rng.below(rel.templates.size());
    const std::size_t seen = filler_noise(world, f);
    std::size_t n = rng.below(world.noise.size() - 1);
    if (n >= seen) ++n;
    probes.heldout_text.push_back(world.noise[n] + " " + world.prompt(f, t2));
    probes.heldout_facts.push_back(std::move(pf));
  }
  return probes;
}

std::vector<std::vector<EditExample>> shard(std::span<const EditExample> edits, int k, std::uint64_t seed) {
  if (k < 1 || edits.size() % static_cast<std::size_t>(k) != 0) {
    throw Error(ErrorKind::Shard, std::to_string(k) + " shards do not divide " + std::to_string(edits.size()) + " edits");
  }
  std::vector<std::size_t> order(edits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (k > 1) {
    Rng rng(derive_seed(seed, "shard"));
    rng.shuffle(order);
  }
  const std::size_t per = edits.size() / static_cast<std::size_t>(k);
  std::vector<std::vector<EditExample>> shards(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < order.size(); ++i) shards[i / per].push_back(edits[order[i]]);
  return shards;
}

std::vector<std::string> world_statements(const FactWorld& world) {
  std::vector<std::string> out;
  for (const Fact& f : world.facts) {
    const auto& rel = world.relations[static_cast<std::size_t>(f.relation)];
    for (std::size_t t = 0; t < rel.templates.size(); ++t) out.push_back(world.prompt(f, t) + " " + world.object_text(f));
  }
  for (const auto& s : world.noise) out.push_back(s);
  for (const Fact& f : world.facts) {
    const auto& rel = world.relations[static_cast<std::size_t>(f.relation)];
    const auto t = static_cast<std::size_t>(f.subject + f.relation) % rel.templates.size();
    out.push_back(world.noise[filler_noise(world, f)] + " " + world.prompt(f, t) + " " + world.object_text(f));
  }
  return out;
}

std::size_t filler_noise(const FactWorld& world, const Fact& f) {
  return static_cast<std::size_t>(f.subject * 7 + f.relation * 3) % world.noise.size();
}

namespace {

using ojson = nlohmann::ordered_json;

ojson edit_to_json(const EditExample& e) {
  ojson j;
  j["id"] = e.id;
  j["subject"] = e.subject;
  j["relation"] = e.relation;
  j["old_object"] = e.old_object;
  j["new_object"] = e.new_object;
  j["edit_prompt"] = e.edit_prompt;
  j["target"] = e.target;
  j["rephrase_prompts"] = e.rephrase_prompts;
  j["rephrase_style"] = std::string(to_string(e.rephrase_style));
  return j;
}

EditExample edit_from_json(const ojson& j) {
  EditExample e;
  j.at("id").get_to(e.id);
  j.at("subject").get_to(e.subject);
  j.at("relation").get_to(e.relation);
  j.at("old_object").get_to(e.old_object);
  j.at("new_object").get_to(e.new_object);
  j.at("edit_prompt").get_to(e.edit_prompt);
  j.at("target").get_to(e.target);
  j.at("rephrase_prompts").get_to(e.rephrase_prompts);
  e.rephrase_style = parse_rephrase_style(j.at("rephrase_style").get<std::string>());
  return e;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::Format, "cannot write '" + path.string() + "'");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Dependency, "missing file '" + path.string() + "'");
  return is;
}

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& fn) {
  auto is = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      fn(ojson::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

void save_world(const FactWorld& world, const std::filesystem::path& path) {
  ojson j;
  j["seed"] = world.seed;
  j["entities"] = world.entities;
  ojson rels = ojson::array();
  for (const auto& r : world.relations) {
    ojson rj;
    rj["name"] = r.name;
    rj["templates"] = r.templates;
    rj["objects"] = r.objects;
    rels.push_back(rj);
  }
  j["relations"] = rels;
  ojson facts = ojson::array();
  for (const auto& f : world.facts) facts.push_back({f.subject, f.relation, f.object});
  j["facts"] = facts;
  j["noise"] = world.noise;
  auto os = open_out(path);
  os << j.dump(1) << '\n';
}

FactWorld load_world(const std::filesystem::path& path) {
  auto is = open_in(path);
  FactWorld w;
  try {
    const ojson j = ojson::parse(is);
    j.at("seed").get_to(w.seed);
    j.at("entities").get_to(w.entities);
    for (const auto& rj : j.at("relations")) {
      Relation r;
      rj.at("name").get_to(r.name);
      rj.at("templates").get_to(r.templates);
      rj.at("objects").get_to(r.objects);
      w.relations.push_back(std::move(r));
    }
    for (const auto& fj : j.at("facts")) w.facts.push_back({fj.at(0).get<int>(), fj.at(1).get<int>(), fj.at(2).get<int>()});
    j.at("noise").get_to(w.noise);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
  return w;
}

void save_edits(std::span<const EditExample> edits, const std::filesystem::path& path) {
  auto os = open_out(path);
  for (const auto& e : edits) os << edit_to_json(e).dump() << '\n';
}

std::vector<EditExample> load_edits(const std::filesystem::path& path) {
  std::vector<EditExample> out;
  for_each_jsonl(path, [&](const ojson& j) { out.push_back(edit_from_json(j)); });
  return out;
}

void save_probes(const ProbeSet& probes, const std::filesystem::path& path) {
  auto os = open_out(path);
  for (const auto& t : probes.heldout_text) {
    ojson j;
    j["kind"] = "text";
    j["text"] = t;
    os << j.dump() << '\n';
  }
  for (const auto& f : probes.heldout_facts) {
    ojson j;
    j["kind"] = "fact";
    j["subject"] = f.subject;
    j["relation"] = f.relation;
    j["prompt"] = f.prompt;
    j["object"] = f.object;
    os << j.dump() << '\n';
  }
}

ProbeSet load_probes(const std::filesystem::path& path) {
  ProbeSet p;
  for_each_jsonl(path, [&](const ojson& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "text") {
      p.heldout_text.push_back(j.at("text").get<std::string>());
    } else if (kind == "fact") {
      p.heldout_facts.push_back({j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                                 j.at("prompt").get<std::string>(), j.at("object").get<std::string>()});
    } else {
      throw Error(ErrorKind::Parse, "unknown probe kind '" + kind + "'");
    }
  });
  return p;
}

}  // namespace edlab
