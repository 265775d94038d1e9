#include "cmr/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cmr {

using nlohmann::json;

// ---- Ontology ----

const OntologyType& Ontology::type(const std::string& name) const {
    auto it = types.find(name);
    if (it == types.end())
        throw ValueError("ontology: unknown event type '" + name + "'");
    return it->second;
}

namespace {

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

bool is_placeholder(const std::string& w) {
    return w.size() >= 3 && w.front() == '{' && w.back() == '}';
}

std::string placeholder_role(const std::string& w) {
    return w.substr(1, w.size() - 2);
}

}  // namespace

void Ontology::validate() const {
    if (types.empty()) throw ValueError("ontology: no event types");
    for (const auto& [name, t] : types) {
        if (t.roles.empty())
            throw ValueError("ontology: type '" + name + "' has no roles");
        std::map<std::string, int> seen;
        for (const std::string& w : split_words(t.template_str))
            if (is_placeholder(w)) seen[placeholder_role(w)]++;
        for (const std::string& r : t.roles) {
            if (seen[r] != 1)
                throw ValueError("ontology: role '" + r + "' must appear "
                                 "exactly once in the template of '" +
                                 name + "'");
        }
        if (seen.size() != t.roles.size())
            throw ValueError("ontology: template of '" + name +
                             "' references a role outside its role list");
    }
}

std::string Ontology::to_json() const {
    json j = json::object();
    for (const auto& [name, t] : types) {
        j[name] = {{"roles", t.roles}, {"template", t.template_str}};
    }
    return j.dump(2);
}

Ontology Ontology::from_json(const std::string& text) {
    json j = json::parse(text);
    Ontology o;
    for (auto it = j.begin(); it != j.end(); ++it) {
        OntologyType t;
        t.roles = it.value().at("roles").get<std::vector<std::string>>();
        t.template_str = it.value().at("template").get<std::string>();
        o.types[it.key()] = std::move(t);
    }
    o.validate();
    return o;
}

// ---- Vocab ----

namespace {
const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {
        tok::kUnk, tok::kBos, tok::kEos, tok::kSentOpen, tok::kSentClose,
        tok::kInputEos, tok::kTrigOpen, tok::kTrigClose, tok::kNone,
        tok::kColon, tok::kSemi};
    return s;
}
}  // namespace

Vocab Vocab::build(const Ontology& ontology,
                   const std::vector<EventInstance>& corpus) {
    std::set<std::string> pool;
    for (const auto& [name, t] : ontology.types) {
        for (const std::string& r : t.roles) pool.insert(r);
        for (const std::string& w : split_words(t.template_str))
            pool.insert(is_placeholder(w) ? placeholder_role(w) : w);
    }
    for (const EventInstance& inst : corpus)
        for (const std::string& w : inst.tokens) pool.insert(w);
    Vocab v;
    for (const std::string& s : special_tokens()) {
        v.index_[s] = static_cast<TokenId>(v.words_.size());
        v.words_.push_back(s);
    }
    for (const std::string& w : pool) {
        if (v.index_.count(w)) continue;
        v.index_[w] = static_cast<TokenId>(v.words_.size());
        v.words_.push_back(w);
    }
    return v;
}

TokenId Vocab::id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk() : it->second;
}

const std::string& Vocab::word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
        throw ValueError("vocab: id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(const std::vector<std::string>& words) const {
    TokenSeq out;
    out.reserve(words.size());
    for (const std::string& w : words) out.push_back(id(w));
    return out;
}

std::vector<std::string> Vocab::decode(const TokenSeq& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (TokenId i : ids) out.push_back(word(i));
    return out;
}

// ---- World ----

namespace {

const char* kEventOpeners[] = {"witnesses", "reports", "locals"};
const char* kEventVerbs[] = {"recall", "say", "saw"};
const char* kEventPreps[] = {"in", "at"};
const char* kEventNouns[] = {"episode", "affair", "incident"};
const char* kThemeOpeners[] = {"amid", "during", "after", "near"};
const char* kDecoyOpeners[] = {"meanwhile", "afterwards"};
const char* kDecoyVerbs[] = {"lingered", "stayed"};
const char* kDecoyTails[] = {"nearby", "aside"};

std::vector<std::string> make_entity_words(std::size_t count,
                                           std::set<std::string>& taken,
                                           Rng& rng) {
    static const char* onsets[] = {"b",  "d",  "f",  "g",  "k",  "l",
                                   "m",  "n",  "p",  "r",  "s",  "t",
                                   "v",  "z",  "br", "dr", "gr", "kl",
                                   "pl", "tr", "st", "sk"};
    static const char* vowels[] = {"a", "e", "i", "o", "u"};
    static const char* codas[] = {"", "n", "r", "l", "s", "k", "t", "m"};
    std::vector<std::string> out;
    while (out.size() < count) {
        std::string w;
        w += onsets[rng.below(std::size(onsets))];
        w += vowels[rng.below(std::size(vowels))];
        w += onsets[rng.below(std::size(onsets))];
        w += vowels[rng.below(std::size(vowels))];
        if (rng.chance(0.6)) w += codas[rng.below(std::size(codas))];
        if (taken.count(w)) continue;
        taken.insert(w);
        out.push_back(w);
    }
    return out;
}

World make_builtin_world() {
    World w;
    auto add_type = [&](const std::string& name,
                        std::vector<std::string> roles,
                        const std::string& tmpl,
                        std::vector<std::string> triggers,
                        std::vector<std::string> frames) {
        w.ontology.types[name] = OntologyType{std::move(roles), tmpl};
        w.triggers[name] = std::move(triggers);
        w.frame_words[name] = std::move(frames);
    };

    add_type("civic.protest", {"protester", "authority", "place"},
             "{protester} protested against {authority} at {place}",
             {"march", "rally", "strike", "picket"},
             {"banner", "chant", "crowd", "petition", "megaphone", "placard",
              "union", "boycott", "assembly", "slogan", "organizer",
              "grievance", "walkout", "dissent", "vigil", "demonstration"});
    add_type("commerce.purchase", {"buyer", "goods", "seller"},
             "{buyer} bought {goods} from {seller}",
             {"purchase", "procure", "acquire", "buyout"},
             {"market", "invoice", "merchant", "ledger", "auction", "bazaar",
              "coin", "warehouse", "cargo", "tariff", "contract", "vendor",
              "stall", "receipt", "trade", "commerce"});
    add_type("conflict.attack", {"attacker", "target", "instrument", "place"},
             "{attacker} attacked {target} using {instrument} at {place}",
             {"raid", "ambush", "strike", "bombard"},
             {"garrison", "siege", "artillery", "trench", "battalion",
              "fortress", "barricade", "skirmish", "regiment", "ammunition",
              "warfront", "casualty", "invasion", "offensive", "militia",
              "combat"});
    add_type("disaster.evacuation", {"resident", "hazard", "shelter"},
             "{resident} fled {hazard} toward {shelter}",
             {"evacuate", "flee", "embark", "retreat"},
             {"floodwater", "siren", "levee", "sandbag", "rescue", "hurricane",
              "tremor", "wildfire", "debris", "alarm", "crisis", "disaster",
              "relief", "refuge", "storm", "surge"});
    add_type("justice.seizure", {"officer", "asset", "owner"},
             "{officer} seized {asset} from {owner}",
             {"confiscate", "impound", "acquire", "forfeit"},
             {"warrant", "customs", "tribunal", "contraband", "magistrate",
              "inspection", "verdict", "bailiff", "statute", "decree",
              "enforcement", "registry", "penalty", "audit", "justice",
              "courthouse"});
    add_type("movement.voyage", {"traveler", "origin", "destination"},
             "{traveler} sailed from {origin} to {destination}",
             {"sail", "cruise", "embark", "voyage"},
             {"harbor", "tide", "compass", "mast", "anchorage", "lighthouse",
              "crossing", "current", "gale", "channel", "wharf", "deckhand",
              "logbook", "horizon", "nautical", "seaway"});

    w.partner = {{"conflict.attack", "civic.protest"},
                 {"civic.protest", "conflict.attack"},
                 {"commerce.purchase", "justice.seizure"},
                 {"justice.seizure", "commerce.purchase"},
                 {"movement.voyage", "disaster.evacuation"},
                 {"disaster.evacuation", "movement.voyage"}};

    w.neutral_words = {"the",      "village",  "town",     "remained",
                       "quiet",    "yesterday", "morning",  "evening",
                       "people",   "nearby",   "local",    "council",
                       "weather",  "calm",     "usual",    "routines",
                       "continued", "slowly",  "quietly",  "again"};

    // entity lexicons: generated pseudo-words, globally unique
    std::set<std::string> taken;
    auto reserve_all = [&](const std::vector<std::string>& ws) {
        for (const auto& s : ws) taken.insert(s);
    };
    for (const auto& [name, t] : w.ontology.types) {
        reserve_all(t.roles);
        for (const std::string& word : split_words(t.template_str))
            if (!is_placeholder(word)) taken.insert(word);
        reserve_all(w.triggers[name]);
        reserve_all(w.frame_words[name]);
    }
    reserve_all(w.neutral_words);
    for (const char* s : kEventOpeners) taken.insert(s);
    for (const char* s : kEventVerbs) taken.insert(s);
    for (const char* s : kEventPreps) taken.insert(s);
    for (const char* s : kEventNouns) taken.insert(s);
    for (const char* s : kThemeOpeners) taken.insert(s);
    for (const char* s : kDecoyOpeners) taken.insert(s);
    for (const char* s : kDecoyVerbs) taken.insert(s);
    for (const char* s : kDecoyTails) taken.insert(s);
    taken.insert({"and", "nothing", "when", "were", ".", ","});

    Rng rng(0xC0FFEEULL);
    for (const auto& [name, t] : w.ontology.types)
        for (const std::string& role : t.roles)
            w.entities[name][role] = make_entity_words(10, taken, rng);
    return w;
}

}  // namespace

const World& World::builtin() {
    static const World w = make_builtin_world();
    return w;
}

World World::for_ontology(const Ontology& ontology) {
    ontology.validate();
    const World& b = builtin();
    bool same = ontology.types.size() == b.ontology.types.size();
    if (same) {
        for (const auto& [name, t] : ontology.types) {
            auto it = b.ontology.types.find(name);
            if (it == b.ontology.types.end() ||
                it->second.roles != t.roles ||
                it->second.template_str != t.template_str) {
                same = false;
                break;
            }
        }
    }
    if (same) return b;

    World w;
    w.ontology = ontology;
    w.neutral_words = b.neutral_words;
    std::set<std::string> taken;
    for (const auto& [name, t] : ontology.types) {
        for (const auto& r : t.roles) taken.insert(r);
        for (const auto& word : split_words(t.template_str))
            if (!is_placeholder(word)) taken.insert(word);
    }
    taken.insert(w.neutral_words.begin(), w.neutral_words.end());
    for (const char* s : kEventOpeners) taken.insert(s);
    for (const char* s : kEventVerbs) taken.insert(s);
    for (const char* s : kEventPreps) taken.insert(s);
    for (const char* s : kEventNouns) taken.insert(s);
    for (const char* s : kThemeOpeners) taken.insert(s);
    for (const char* s : kDecoyOpeners) taken.insert(s);
    for (const char* s : kDecoyVerbs) taken.insert(s);
    for (const char* s : kDecoyTails) taken.insert(s);
    taken.insert({"and", "nothing", "when", "were", ".", ","});

    Rng rng(0xBADC0DEULL);
    std::vector<std::string> names;
    for (const auto& [name, t] : ontology.types) names.push_back(name);
    for (const std::string& name : names) {
        w.triggers[name] = make_entity_words(4, taken, rng);
        w.frame_words[name] = make_entity_words(12, taken, rng);
        for (const std::string& role : ontology.type(name).roles)
            w.entities[name][role] = make_entity_words(10, taken, rng);
    }
    // consecutive pairs share one trigger and act as polysemy partners
    for (std::size_t i = 0; i + 1 < names.size(); i += 2) {
        w.triggers[names[i + 1]].back() = w.triggers[names[i]].back();
        w.partner[names[i]] = names[i + 1];
        w.partner[names[i + 1]] = names[i];
    }
    if (names.size() % 2 == 1) {
        const std::string& last = names.back();
        w.partner[last] = names.size() > 1 ? names[0] : last;
    }
    if (names.size() == 1) w.partner[names[0]] = names[0];
    return w;
}

std::vector<std::string> World::all_words() const {
    std::set<std::string> pool;
    for (const auto& [name, t] : ontology.types) {
        for (const auto& r : t.roles) pool.insert(r);
        for (const auto& w : split_words(t.template_str))
            pool.insert(is_placeholder(w) ? placeholder_role(w) : w);
    }
    for (const auto& [k, v] : triggers) pool.insert(v.begin(), v.end());
    for (const auto& [k, v] : frame_words) pool.insert(v.begin(), v.end());
    for (const auto& [k, m] : entities)
        for (const auto& [r, v] : m) pool.insert(v.begin(), v.end());
    pool.insert(neutral_words.begin(), neutral_words.end());
    return {pool.begin(), pool.end()};
}

// ---- generator ----

namespace {

struct SentencePiece {
    std::vector<std::string> tokens;
    // offsets into `tokens` for event payloads; resolved after shuffling
    int event_index = -1;
    std::size_t trigger_offset = 0;
    std::vector<std::pair<std::string, std::size_t>> filler_offsets;  // role, offset
};

template <std::size_t N>
const char* pick(const char* (&arr)[N], Rng& rng) {
    return arr[rng.below(N)];
}

std::string pick_word(const std::vector<std::string>& v, Rng& rng) {
    return v[rng.below(v.size())];
}

SentencePiece theme_sentence(const World& world, const std::string& type,
                             const std::vector<std::string>& landmarks,
                             Rng& rng) {
    SentencePiece s;
    s.tokens.push_back(pick(kThemeOpeners, rng));
    const auto& frames = world.frame_words.at(type);
    std::size_t n = 2 + rng.below(2);  // 2-3 frame words
    std::set<std::size_t> used;
    while (used.size() < n) used.insert(rng.below(frames.size()));
    for (std::size_t i : used) s.tokens.push_back(frames[i]);
    for (const std::string& lm : landmarks) s.tokens.push_back(lm);
    s.tokens.push_back(".");
    return s;
}

SentencePiece neutral_sentence(const World& world, Rng& rng) {
    SentencePiece s;
    std::size_t n = 3 + rng.below(4);  // 3-6 words
    for (std::size_t i = 0; i < n; ++i)
        s.tokens.push_back(pick_word(world.neutral_words, rng));
    s.tokens.push_back(".");
    return s;
}

SentencePiece decoy_sentence(const World& world, const std::string& type,
                             Rng& rng) {
    // entity from another type's lexicons, usually the polysemy partner
    std::string src = world.partner.at(type);
    if (!rng.chance(0.75)) {
        std::vector<std::string> others;
        for (const auto& [name, t] : world.ontology.types)
            if (name != type) others.push_back(name);
        src = others[rng.below(others.size())];
    }
    const auto& roles = world.ontology.type(src).roles;
    const std::string role = roles[rng.below(roles.size())];
    const auto& lex = world.entities.at(src).at(role);
    SentencePiece s;
    s.tokens.push_back(pick(kDecoyOpeners, rng));
    s.tokens.push_back(lex[rng.below(lex.size())]);
    s.tokens.push_back(pick(kDecoyVerbs, rng));
    s.tokens.push_back(pick(kDecoyTails, rng));
    s.tokens.push_back(".");
    return s;
}

struct DraftEvent {
    std::string trigger;
    std::vector<std::pair<std::string, std::string>> fillers;  // role, entity
};

struct Episode {
    std::map<std::string, std::string> fillers;  // role -> entity
    std::vector<std::string> landmarks;
};

// episodes are derived from cfg.seed only, so every split sees the same
// incident table
std::map<std::string, std::vector<Episode>> build_episode_book(
    const World& world, const GeneratorConfig& cfg) {
    std::map<std::string, std::vector<Episode>> book;
    Rng rng(cfg.seed ^ 0xE51C0DEULL);
    std::set<std::string> taken;
    for (const std::string& w : world.all_words()) taken.insert(w);
    for (const auto& [type, t] : world.ontology.types) {
        auto& episodes = book[type];
        for (std::size_t e = 0; e < cfg.episodes_per_type; ++e) {
            Episode ep;
            for (const std::string& role : t.roles) {
                const auto& lex = world.entities.at(type).at(role);
                ep.fillers[role] = lex[rng.below(lex.size())];
            }
            ep.landmarks = make_entity_words(2, taken, rng);
            episodes.push_back(std::move(ep));
        }
    }
    return book;
}

SentencePiece event_sentence(const DraftEvent& ev, int event_index, Rng& rng) {
    SentencePiece s;
    s.event_index = event_index;
    s.tokens.push_back(pick(kEventOpeners, rng));
    s.tokens.push_back(pick(kEventVerbs, rng));
    if (ev.fillers.empty()) {
        s.tokens.push_back("nothing");
    } else {
        // fillers surface in random order with uniform separators, so the
        // surface order carries no role information
        std::vector<std::size_t> order(ev.fillers.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng sub(rng.next_u64());
        sub.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (i) s.tokens.push_back("and");
            s.filler_offsets.emplace_back(ev.fillers[order[i]].first,
                                          s.tokens.size());
            s.tokens.push_back(ev.fillers[order[i]].second);
        }
    }
    s.tokens.push_back(pick(kEventPreps, rng));
    s.tokens.push_back("the");
    s.trigger_offset = s.tokens.size();
    s.tokens.push_back(ev.trigger);
    s.tokens.push_back(pick(kEventNouns, rng));
    s.tokens.push_back(".");
    return s;
}

}  // namespace

std::vector<EventInstance> generate_split(const World& world,
                                          const GeneratorConfig& cfg,
                                          const std::string& prefix,
                                          std::size_t count,
                                          std::uint64_t split_seed) {
    std::vector<std::string> type_names;
    for (const auto& [name, t] : world.ontology.types)
        type_names.push_back(name);
    const auto episode_book = build_episode_book(world, cfg);

    Rng rng(split_seed);
    std::vector<EventInstance> out;
    out.reserve(count);
    for (std::size_t idx = 0; idx < count; ++idx) {
        const std::string type = type_names[rng.below(type_names.size())];
        const auto& roles = world.ontology.type(type).roles;
        const auto& trig_lex = world.triggers.at(type);
        const auto& episodes = episode_book.at(type);

        std::size_t n_events = rng.chance(cfg.second_event_prob) ? 2 : 1;
        std::vector<DraftEvent> drafts;
        std::set<std::string> used_entities;
        std::set<std::string> used_triggers;
        std::size_t first_episode = episodes.size();
        for (std::size_t e = 0; e < n_events; ++e) {
            DraftEvent ev;
            do {
                ev.trigger = trig_lex[rng.below(trig_lex.size())];
            } while (used_triggers.count(ev.trigger));
            used_triggers.insert(ev.trigger);
            // pick an episode whose fillers do not collide with tokens
            // already used in this document (first occurrences must stay
            // unambiguous)
            std::size_t ep_idx = 0;
            for (int tries = 0; tries < 32; ++tries) {
                ep_idx = rng.below(episodes.size());
                if (e > 0 && ep_idx == first_episode) continue;
                bool clash = false;
                for (const auto& [role, ent] : episodes[ep_idx].fillers)
                    if (used_entities.count(ent)) clash = true;
                if (!clash) break;
            }
            if (e == 0) first_episode = ep_idx;
            const Episode& ep = episodes[ep_idx];
            for (const std::string& role : roles) {
                if (!rng.chance(cfg.role_present_prob)) continue;
                const std::string& ent = ep.fillers.at(role);
                if (used_entities.count(ent)) continue;
                used_entities.insert(ent);
                ev.fillers.emplace_back(role, ent);
            }
            drafts.push_back(std::move(ev));
        }
        const std::vector<std::string>& landmarks =
            episode_book.at(type)[first_episode].landmarks;

        std::vector<SentencePiece> sentences;
        sentences.push_back(theme_sentence(world, type, landmarks, rng));
        for (std::size_t e = 0; e < n_events; ++e)
            sentences.push_back(
                event_sentence(drafts[e], static_cast<int>(e), rng));
        if (rng.chance(0.5))
            sentences.push_back(theme_sentence(world, type, landmarks, rng));
        if (world.ontology.types.size() > 1 && rng.chance(cfg.decoy_prob))
            sentences.push_back(decoy_sentence(world, type, rng));
        sentences.push_back(neutral_sentence(world, rng));
        rng.shuffle(sentences);

        std::size_t total = 0;
        for (const auto& s : sentences) total += s.tokens.size();
        while (total < cfg.min_tokens) {
            sentences.push_back(neutral_sentence(world, rng));
            total += sentences.back().tokens.size();
        }
        if (total > cfg.max_tokens)
            throw ValueError("generator: document exceeded max_tokens");

        EventInstance inst;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s-%05zu", prefix.c_str(), idx);
        inst.doc_id = buf;
        inst.events.resize(n_events);
        for (const SentencePiece& s : sentences) {
            std::size_t base = inst.tokens.size();
            inst.tokens.insert(inst.tokens.end(), s.tokens.begin(),
                               s.tokens.end());
            if (s.event_index >= 0) {
                Event& ev = inst.events[static_cast<std::size_t>(s.event_index)];
                ev.event_type = type;
                ev.trigger = {base + s.trigger_offset,
                              base + s.trigger_offset + 1};
                for (const auto& [role, off] : s.filler_offsets)
                    ev.arguments.push_back(
                        Argument{role, {base + off, base + off + 1}});
            }
        }
        out.push_back(std::move(inst));
    }
    return out;
}

void generate_corpus(const GeneratorConfig& cfg, const World& world,
                     const std::string& out_dir) {
    if (cfg.n_train == 0 || cfg.n_dev == 0 || cfg.n_test == 0)
        throw ValueError("generate_corpus: split sizes must be >= 1");
    std::filesystem::create_directories(out_dir);
    Rng seeder(cfg.seed);
    std::uint64_t s_train = seeder.next_u64();
    std::uint64_t s_dev = seeder.next_u64();
    std::uint64_t s_test = seeder.next_u64();
    write_instances_jsonl(out_dir + "/train.jsonl",
                          generate_split(world, cfg, "train", cfg.n_train,
                                         s_train));
    write_instances_jsonl(out_dir + "/dev.jsonl",
                          generate_split(world, cfg, "dev", cfg.n_dev, s_dev));
    write_instances_jsonl(out_dir + "/test.jsonl",
                          generate_split(world, cfg, "test", cfg.n_test,
                                         s_test));
    std::ofstream f(out_dir + "/ontology.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + out_dir + "/ontology.json");
    f << world.ontology.to_json() << "\n";
}

// ---- JSONL IO ----

std::string instance_to_json(const EventInstance& inst) {
    json j;
    j["doc_id"] = inst.doc_id;
    j["tokens"] = inst.tokens;
    json evs = json::array();
    for (const Event& e : inst.events) {
        json je;
        je["event_type"] = e.event_type;
        je["trigger"] = {{"start", e.trigger.start}, {"end", e.trigger.end}};
        json args = json::array();
        for (const Argument& a : e.arguments)
            args.push_back({{"role", a.role},
                            {"start", a.span.start},
                            {"end", a.span.end}});
        je["arguments"] = args;
        evs.push_back(je);
    }
    j["events"] = evs;
    return j.dump();
}

EventInstance instance_from_json(const std::string& line) {
    json j = json::parse(line);
    EventInstance inst;
    inst.doc_id = j.at("doc_id").get<std::string>();
    inst.tokens = j.at("tokens").get<std::vector<std::string>>();
    for (const json& je : j.at("events")) {
        Event e;
        e.event_type = je.at("event_type").get<std::string>();
        e.trigger.start = je.at("trigger").at("start").get<std::size_t>();
        e.trigger.end = je.at("trigger").at("end").get<std::size_t>();
        for (const json& ja : je.at("arguments")) {
            Argument a;
            a.role = ja.at("role").get<std::string>();
            a.span.start = ja.at("start").get<std::size_t>();
            a.span.end = ja.at("end").get<std::size_t>();
            e.arguments.push_back(std::move(a));
        }
        if (e.trigger.start >= e.trigger.end ||
            e.trigger.end > inst.tokens.size())
            throw ValueError("instance " + inst.doc_id +
                             ": trigger span out of bounds");
        for (const Argument& a : e.arguments)
            if (a.span.start >= a.span.end || a.span.end > inst.tokens.size())
                throw ValueError("instance " + inst.doc_id +
                                 ": argument span out of bounds");
        inst.events.push_back(std::move(e));
    }
    return inst;
}

std::vector<EventInstance> read_instances_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::vector<EventInstance> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(instance_from_json(line));
    }
    return out;
}

void write_instances_jsonl(const std::string& path,
                           const std::vector<EventInstance>& instances) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    for (const EventInstance& inst : instances)
        f << instance_to_json(inst) << "\n";
}

// ---- formatting / parsing ----

std::vector<std::string> prompt_tokens(const Ontology& ontology,
                                       const std::string& event_type) {
    std::vector<std::string> out;
    for (const std::string& w :
         split_words(ontology.type(event_type).template_str))
        out.push_back(is_placeholder(w) ? placeholder_role(w) : w);
    return out;
}

std::vector<std::string> marked_context(const EventInstance& inst,
                                        std::size_t event_index) {
    if (event_index >= inst.events.size())
        throw ValueError("marked_context: event index " +
                         std::to_string(event_index) + " out of range");
    const Event& ev = inst.events[event_index];
    std::vector<std::string> out;
    out.reserve(inst.tokens.size() + 2);
    for (std::size_t i = 0; i < inst.tokens.size(); ++i) {
        if (i == ev.trigger.start) out.push_back(tok::kTrigOpen);
        if (i == ev.trigger.end) out.push_back(tok::kTrigClose);
        out.push_back(inst.tokens[i]);
    }
    if (ev.trigger.end == inst.tokens.size()) out.push_back(tok::kTrigClose);
    return out;
}

FormattedInstance format_instance(const EventInstance& inst,
                                  std::size_t event_index,
                                  const Ontology& ontology) {
    if (event_index >= inst.events.size())
        throw ValueError("format_instance: event index " +
                         std::to_string(event_index) + " out of range");
    const Event& ev = inst.events[event_index];
    const OntologyType& ot = ontology.type(ev.event_type);

    FormattedInstance out;
    out.input.push_back(tok::kSentOpen);
    for (const std::string& w : prompt_tokens(ontology, ev.event_type))
        out.input.push_back(w);
    out.input.push_back(tok::kSentClose);
    for (const std::string& w : marked_context(inst, event_index))
        out.input.push_back(w);
    out.input.push_back(tok::kInputEos);

    for (const std::string& role : ot.roles) {
        out.target.push_back(role);
        out.target.push_back(tok::kColon);
        const Argument* found = nullptr;
        for (const Argument& a : ev.arguments)
            if (a.role == role) {
                found = &a;
                break;
            }
        if (found) {
            for (std::size_t i = found->span.start; i < found->span.end; ++i)
                out.target.push_back(inst.tokens[i]);
        } else {
            out.target.push_back(tok::kNone);
        }
        out.target.push_back(tok::kSemi);
    }
    return out;
}

Prediction parse_prediction(const std::vector<std::string>& generated,
                            const Ontology& ontology,
                            const std::string& event_type) {
    Prediction pred;
    const OntologyType& ot = ontology.type(event_type);
    std::size_t pos = 0;
    for (const std::string& role : ot.roles) {
        std::vector<std::string> value;
        for (std::size_t i = pos; i + 1 < generated.size(); ++i) {
            if (generated[i] == role && generated[i + 1] == tok::kColon) {
                std::size_t j = i + 2;
                while (j < generated.size() && generated[j] != tok::kSemi)
                    value.push_back(generated[j++]);
                pos = j < generated.size() ? j + 1 : generated.size();
                break;
            }
        }
        if (value.size() == 1 && value[0] == tok::kNone) value.clear();
        pred.roles[role] = std::move(value);
    }
    return pred;
}

// ---- metrics ----

namespace {

struct Tally {
    std::size_t tp = 0, pred = 0, gold = 0;
    void finish(double& p, double& r, double& f1) const {
        p = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
        r = gold ? static_cast<double>(tp) / static_cast<double>(gold) : 0.0;
        f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
};

bool contains_subseq(const std::vector<std::string>& hay,
                     const std::vector<std::string>& needle) {
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
        bool ok = true;
        for (std::size_t j = 0; j < needle.size(); ++j)
            if (hay[i + j] != needle[j]) {
                ok = false;
                break;
            }
        if (ok) return true;
    }
    return false;
}

std::optional<Span> first_occurrence(const std::vector<std::string>& tokens,
                                     const std::vector<std::string>& text) {
    if (text.empty() || text.size() > tokens.size()) return std::nullopt;
    for (std::size_t i = 0; i + text.size() <= tokens.size(); ++i) {
        bool ok = true;
        for (std::size_t j = 0; j < text.size(); ++j)
            if (tokens[i + j] != text[j]) {
                ok = false;
                break;
            }
        if (ok) return Span{i, i + text.size()};
    }
    return std::nullopt;
}

}  // namespace

MetricReport evaluate(const std::vector<PredRecord>& predictions,
                      const std::vector<EventInstance>& golds,
                      const Ontology& ontology) {
    std::map<std::string, const EventInstance*> by_id;
    for (const EventInstance& g : golds) by_id[g.doc_id] = &g;

    std::map<std::pair<std::string, std::size_t>, const Prediction*> pred_map;
    for (const PredRecord& p : predictions) {
        auto it = by_id.find(p.doc_id);
        if (it == by_id.end())
            throw ValueError("evaluate: prediction for unknown doc '" +
                             p.doc_id + "'");
        if (p.event_index >= it->second->events.size())
            throw ValueError("evaluate: prediction for out-of-range event " +
                             std::to_string(p.event_index) + " of '" +
                             p.doc_id + "'");
        auto key = std::make_pair(p.doc_id, p.event_index);
        if (pred_map.count(key))
            throw ValueError("evaluate: duplicate prediction for '" +
                             p.doc_id + "' event " +
                             std::to_string(p.event_index));
        pred_map[key] = &p.pred;
    }
    std::size_t gold_events = 0;
    for (const EventInstance& g : golds) gold_events += g.events.size();
    if (pred_map.size() != gold_events)
        throw ValueError("evaluate: prediction/gold id mismatch (" +
                         std::to_string(pred_map.size()) + " predictions vs " +
                         std::to_string(gold_events) + " gold events)");

    Tally strict, relaxed, arg_i, arg_c;
    for (const EventInstance& g : golds) {
        for (std::size_t e = 0; e < g.events.size(); ++e) {
            const Event& ev = g.events[e];
            const Prediction& pred = *pred_map.at({g.doc_id, e});
            const auto& roles = ontology.type(ev.event_type).roles;

            std::map<std::string, std::vector<std::string>> gold_text;
            for (const Argument& a : ev.arguments) {
                std::vector<std::string> t(g.tokens.begin() +
                                               static_cast<long>(a.span.start),
                                           g.tokens.begin() +
                                               static_cast<long>(a.span.end));
                gold_text[a.role] = std::move(t);
            }

            // generative string metrics
            for (const std::string& role : roles) {
                auto git = gold_text.find(role);
                bool has_gold = git != gold_text.end();
                auto pit = pred.roles.find(role);
                bool has_pred = pit != pred.roles.end() && !pit->second.empty();
                if (has_gold) {
                    ++strict.gold;
                    ++relaxed.gold;
                }
                if (has_pred) {
                    ++strict.pred;
                    ++relaxed.pred;
                }
                if (has_gold && has_pred) {
                    if (pit->second == git->second) ++strict.tp;
                    if (contains_subseq(pit->second, git->second))
                        ++relaxed.tp;
                }
            }

            // span metrics: map predicted text back to context offsets
            std::vector<Span> gold_spans;
            std::vector<std::pair<std::string, Span>> gold_role_spans;
            for (const Argument& a : ev.arguments) {
                gold_spans.push_back(a.span);
                gold_role_spans.emplace_back(a.role, a.span);
            }
            arg_i.gold += gold_spans.size();
            arg_c.gold += gold_spans.size();
            std::vector<bool> used_i(gold_spans.size(), false);
            std::vector<bool> used_c(gold_role_spans.size(), false);
            for (const std::string& role : roles) {
                auto pit = pred.roles.find(role);
                if (pit == pred.roles.end() || pit->second.empty()) continue;
                ++arg_i.pred;
                ++arg_c.pred;
                auto span = first_occurrence(g.tokens, pit->second);
                if (!span) continue;
                for (std::size_t k = 0; k < gold_spans.size(); ++k) {
                    if (!used_i[k] && gold_spans[k] == *span) {
                        used_i[k] = true;
                        ++arg_i.tp;
                        break;
                    }
                }
                for (std::size_t k = 0; k < gold_role_spans.size(); ++k) {
                    if (!used_c[k] && gold_role_spans[k].second == *span &&
                        gold_role_spans[k].first == role) {
                        used_c[k] = true;
                        ++arg_c.tp;
                        break;
                    }
                }
            }
        }
    }

    MetricReport rep;
    strict.finish(rep.strict_p, rep.strict_r, rep.strict_f1);
    relaxed.finish(rep.relaxed_p, rep.relaxed_r, rep.relaxed_f1);
    arg_i.finish(rep.arg_i_p, rep.arg_i_r, rep.arg_i_f1);
    arg_c.finish(rep.arg_c_p, rep.arg_c_r, rep.arg_c_f1);
    return rep;
}

}  // namespace cmr
