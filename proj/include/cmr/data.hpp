#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmr/common.hpp"
#include "cmr/rng.hpp"

namespace cmr {

struct Span {
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive
    bool operator==(const Span&) const = default;
};

struct Argument {
    std::string role;
    Span span;
};

struct Event {
    std::string event_type;
    Span trigger;
    std::vector<Argument> arguments;
};

struct EventInstance {
    std::string doc_id;
    std::vector<std::string> tokens;
    std::vector<Event> events;
};

struct OntologyType {
    std::vector<std::string> roles;  // template order
    std::string template_str;        // words with {role} placeholders
};

struct Ontology {
    std::map<std::string, OntologyType> types;

    const OntologyType& type(const std::string& name) const;
    void validate() const;  // each role appears exactly once in its template
    std::string to_json() const;
    static Ontology from_json(const std::string& text);
};

/// role -> predicted tokens; an absent or empty entry means no prediction.
struct Prediction {
    std::map<std::string, std::vector<std::string>> roles;
};

struct PredRecord {
    std::string doc_id;
    std::size_t event_index = 0;
    Prediction pred;
};

// ---- fixed token strings ----
namespace tok {
inline constexpr const char* kUnk = "<unk>";
inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kSentOpen = "<s>";
inline constexpr const char* kSentClose = "</s>";
inline constexpr const char* kInputEos = "[EOS]";
inline constexpr const char* kTrigOpen = "<t>";
inline constexpr const char* kTrigClose = "</t>";
inline constexpr const char* kNone = "∅";
inline constexpr const char* kColon = ":";
inline constexpr const char* kSemi = ";";
}  // namespace tok

/// Word <-> id table. Ids 0..9 are the fixed specials above (plus ":" and
/// ";"); the rest is the sorted vocabulary of the ontology and corpus.
/// Unknown words map to <unk>.
class Vocab {
  public:
    static Vocab build(const Ontology& ontology,
                       const std::vector<EventInstance>& corpus);

    std::size_t size() const { return words_.size(); }
    TokenId id(const std::string& w) const;
    const std::string& word(TokenId id) const;
    TokenSeq encode(const std::vector<std::string>& words) const;
    std::vector<std::string> decode(const TokenSeq& ids) const;

    TokenId unk() const { return 0; }
    TokenId bos() const { return 1; }
    TokenId eos() const { return 2; }

  private:
    std::vector<std::string> words_;
    std::map<std::string, TokenId> index_;
};

/// Lexicons behind the synthetic world: per-type triggers (some shared
/// between paired types), per-type theme vocabulary, and per-(type, role)
/// entity lexicons, all globally disjoint.
struct World {
    Ontology ontology;
    std::map<std::string, std::vector<std::string>> triggers;
    std::map<std::string, std::vector<std::string>> frame_words;
    std::map<std::string, std::map<std::string, std::vector<std::string>>>
        entities;
    std::vector<std::string> neutral_words;
    std::map<std::string, std::string> partner;  // polysemy partner type

    static const World& builtin();
    /// Builtin world when the ontology matches it; otherwise lexicons are
    /// synthesized deterministically for the given ontology (pseudo-word
    /// triggers/frames/entities, trigger sharing between consecutive type
    /// pairs).
    static World for_ontology(const Ontology& ontology);
    std::vector<std::string> all_words() const;
};

struct GeneratorConfig {
    std::uint64_t seed = 7;
    std::size_t n_train = 2000;
    std::size_t n_dev = 300;
    std::size_t n_test = 300;
    /// Documents cluster into recurring incidents ("episodes") per event
    /// type; episode members share role fillers and landmark vocabulary, so
    /// retrieval can surface documents about the same incident. Episodes
    /// span all three splits.
    std::size_t episodes_per_type = 6;
    double role_present_prob = 0.85;
    double second_event_prob = 0.25;
    double decoy_prob = 0.6;
    std::size_t min_tokens = 30;
    std::size_t max_tokens = 80;
};

std::vector<EventInstance> generate_split(const World& world,
                                          const GeneratorConfig& cfg,
                                          const std::string& prefix,
                                          std::size_t count,
                                          std::uint64_t split_seed);

/// Writes train.jsonl / dev.jsonl / test.jsonl plus ontology.json.
void generate_corpus(const GeneratorConfig& cfg, const World& world,
                     const std::string& out_dir);

// ---- JSONL / JSON IO ----
std::string instance_to_json(const EventInstance& inst);
EventInstance instance_from_json(const std::string& line);
std::vector<EventInstance> read_instances_jsonl(const std::string& path);
void write_instances_jsonl(const std::string& path,
                           const std::vector<EventInstance>& instances);

struct FormattedInstance {
    std::vector<std::string> input;
    std::vector<std::string> target;
};

/// Input:  <s> P </s> context-with-<t>-marked-trigger [EOS]
/// Target: one "role : value ;" group per role in template order, with the
/// literal token ∅ for absent roles.
FormattedInstance format_instance(const EventInstance& inst,
                                  std::size_t event_index,
                                  const Ontology& ontology);

/// Prompt tokens for one event type: the template with each {role}
/// placeholder replaced by the role name.
std::vector<std::string> prompt_tokens(const Ontology& ontology,
                                       const std::string& event_type);

/// Context tokens with <t> ... </t> wrapped around the trigger span.
std::vector<std::string> marked_context(const EventInstance& inst,
                                        std::size_t event_index);

/// Greedy left-to-right slot recovery; tolerates arbitrary garbage and
/// never throws.
Prediction parse_prediction(const std::vector<std::string>& generated,
                            const Ontology& ontology,
                            const std::string& event_type);

struct MetricReport {
    double arg_i_p = 0, arg_i_r = 0, arg_i_f1 = 0;
    double arg_c_p = 0, arg_c_r = 0, arg_c_f1 = 0;
    double strict_p = 0, strict_r = 0, strict_f1 = 0;
    double relaxed_p = 0, relaxed_r = 0, relaxed_f1 = 0;
};

/// Micro-averaged F1 over all four metric families. Every prediction record
/// must reference an existing (doc_id, event_index); every gold event must
/// be covered by exactly one record.
MetricReport evaluate(const std::vector<PredRecord>& predictions,
                      const std::vector<EventInstance>& golds,
                      const Ontology& ontology);

}  // namespace cmr
