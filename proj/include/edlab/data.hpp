#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace edlab {

struct Relation {
  std::string name;
  std::vector<std::string> templates;  // each contains "{s}" and ends right before the object
  std::vector<std::string> objects;    // multi-word answers
  bool operator==(const Relation&) const = default;
};

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;  // index into relations[relation].objects
  bool operator==(const Fact&) const = default;
};

// A closed synthetic world of functional (subject, relation) -> object facts.
struct FactWorld {
  std::uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;
  std::vector<std::string> noise;  // filler sentences used as irrelevant prefixes

  std::string prompt(const Fact& f, std::size_t template_index) const;
  const std::string& object_text(const Fact& f) const;
  bool operator==(const FactWorld&) const = default;
};

inline constexpr std::size_t kMaxRelations = 12;
inline constexpr std::size_t kNoisePoolSize = 20;

FactWorld gen_fact_world(std::uint64_t seed, int n_entities, int n_relations, int n_facts,
                         int objects_per_relation = 24);

// Word-level tokenizer over the world's closed vocabulary plus PAD/EOS/UNK.
class Tokenizer {
 public:
  explicit Tokenizer(const FactWorld& world);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

enum class RephraseStyle { Paraphrase, PrefixNoise };

std::string_view to_string(RephraseStyle s);
RephraseStyle parse_rephrase_style(std::string_view s);

struct EditExample {
  int id = 0;
  std::string subject;
  std::string relation;
  std::string old_object;
  std::string new_object;
  std::string edit_prompt;
  std::string target;
  std::vector<std::string> rephrase_prompts;
  RephraseStyle rephrase_style = RephraseStyle::Paraphrase;
  bool operator==(const EditExample&) const = default;
};

std::vector<EditExample> make_edit_set(const FactWorld& world, int n_edits, int n_rephrases, RephraseStyle style,
                                       std::uint64_t seed);

struct ProbeFact {
  std::string subject;
  std::string relation;
  std::string prompt;
  std::string object;
  bool operator==(const ProbeFact&) const = default;
};

// Held-out material for capability: text for perplexity and unedited facts
// for retention accuracy. No probe fact shares (subject, relation) with an edit.
struct ProbeSet {
  std::vector<std::string> heldout_text;
  std::vector<ProbeFact> heldout_facts;
  bool operator==(const ProbeSet&) const = default;
};

ProbeSet make_probe_set(const FactWorld& world, std::span<const EditExample> edits, int n_facts, std::uint64_t seed);

// k disjoint equal shards in a seeded order; k must divide the set size.
std::vector<std::vector<EditExample>> shard(std::span<const EditExample> edits, int k, std::uint64_t seed);

// Pretraining statements: every fact under every template, the noise
// sentences, and one filler statement per fact that prefixes it with a noise
// sentence, one sequence each (not yet tokenized).
std::vector<std::string> world_statements(const FactWorld& world);

// The noise sentence used in a fact's filler statement.
std::size_t filler_noise(const FactWorld& world, const Fact& f);

// Persistence. Field order is stable so files diff cleanly.
void save_world(const FactWorld& world, const std::filesystem::path& path);
FactWorld load_world(const std::filesystem::path& path);
void save_edits(std::span<const EditExample> edits, const std::filesystem::path& path);
std::vector<EditExample> load_edits(const std::filesystem::path& path);
void save_probes(const ProbeSet& probes, const std::filesystem::path& path);
ProbeSet load_probes(const std::filesystem::path& path);

}  // namespace edlab
