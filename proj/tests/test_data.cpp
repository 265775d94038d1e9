#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "cmr/data.hpp"
#include "cmr/retriever.hpp"
#include "cmr/serialize.hpp"

using namespace cmr;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) { return read_file_bytes(path); }

EventInstance attack_instance() {
    // "militia saw dalia and forgate in the raid episode ." with
    // attacker=dalia (2,3), instrument=forgate (4,5), trigger raid (7,8)
    EventInstance inst;
    inst.doc_id = "hand-0";
    inst.tokens = {"militia", "saw",  "dalia", "and",  "forgate",
                   "in",      "the",  "raid",  "episode", "."};
    Event ev;
    ev.event_type = "conflict.attack";
    ev.trigger = {7, 8};
    ev.arguments.push_back({"attacker", {2, 3}});
    ev.arguments.push_back({"instrument", {4, 5}});
    inst.events.push_back(ev);
    return inst;
}

}  // namespace

TEST_CASE("ontology validation") {
    const Ontology& ont = World::builtin().ontology;
    CHECK_NOTHROW(ont.validate());
    CHECK(ont.types.size() == 6);

    Ontology bad;
    bad.types["x.y"] = OntologyType{{"r1", "r2"}, "{r1} did something"};
    CHECK_THROWS_AS(bad.validate(), ValueError);  // r2 missing from template

    Ontology dup;
    dup.types["x.y"] = OntologyType{{"r1"}, "{r1} and {r1} again"};
    CHECK_THROWS_AS(dup.validate(), ValueError);  // r1 twice

    // json round trip
    Ontology back = Ontology::from_json(ont.to_json());
    CHECK(back.types.size() == ont.types.size());
    for (const auto& [name, t] : ont.types) {
        CHECK(back.type(name).roles == t.roles);
        CHECK(back.type(name).template_str == t.template_str);
    }
}

TEST_CASE("generator determinism and invariants") {
    GeneratorConfig cfg;
    cfg.seed = 13;
    cfg.n_train = 24;
    cfg.n_dev = 6;
    cfg.n_test = 6;
    const World& world = World::builtin();

    fs::path dir1 = fs::temp_directory_path() / "cmr_gen_a";
    fs::path dir2 = fs::temp_directory_path() / "cmr_gen_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);
    generate_corpus(cfg, world, dir1.string());
    generate_corpus(cfg, world, dir2.string());
    for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl",
                          "ontology.json"})
        CHECK(slurp((dir1 / f).string()) == slurp((dir2 / f).string()));

    auto train = read_instances_jsonl((dir1 / "train.jsonl").string());
    auto test = read_instances_jsonl((dir1 / "test.jsonl").string());
    REQUIRE(train.size() == 24);
    REQUIRE(test.size() == 6);

    std::set<std::string> ids;
    for (const auto& split : {train, test})
        for (const auto& inst : split) {
            CHECK(ids.insert(inst.doc_id).second);  // ids unique across splits
            CHECK(inst.tokens.size() >= cfg.min_tokens);
            CHECK(inst.tokens.size() <= cfg.max_tokens);
            REQUIRE(!inst.events.empty());
            for (const auto& ev : inst.events) {
                CHECK(ev.trigger.start < ev.trigger.end);
                CHECK(ev.trigger.end <= inst.tokens.size());
                const auto& roles = world.ontology.type(ev.event_type).roles;
                for (const auto& arg : ev.arguments) {
                    CHECK(arg.span.start < arg.span.end);
                    CHECK(arg.span.end <= inst.tokens.size());
                    CHECK(std::find(roles.begin(), roles.end(), arg.role) !=
                          roles.end());
                    // gold span text first occurs at the gold span itself
                    std::vector<std::string> text(
                        inst.tokens.begin() +
                            static_cast<long>(arg.span.start),
                        inst.tokens.begin() + static_cast<long>(arg.span.end));
                    for (std::size_t i = 0; i < arg.span.start; ++i)
                        CHECK(inst.tokens[i] != text[0]);
                }
            }
        }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("top-1 retrieval is type-correlated on the default corpus") {
    GeneratorConfig cfg;
    cfg.seed = 7;
    const World& world = World::builtin();
    auto train = generate_split(world, cfg, "train", 400, 1111);
    auto test = generate_split(world, cfg, "test", 80, 2222);

    RetrievalIndex index(256, ProviderKind::kHashedBow);
    for (const auto& inst : train)
        for (std::size_t e = 0; e < inst.events.size(); ++e)
            index.add(inst.doc_id + "#" + std::to_string(e),
                      format_instance(inst, e, world.ontology).input,
                      inst.events[e].event_type);

    std::size_t hits = 0, total = 0;
    for (const auto& inst : test) {
        for (std::size_t e = 0; e < inst.events.size(); ++e) {
            auto got = retrieve_topk(
                index, format_instance(inst, e, world.ontology).input, 1);
            REQUIRE(got.size() == 1);
            if (index.entry(got[0]).event_type == inst.events[e].event_type)
                ++hits;
            ++total;
        }
    }
    INFO("type-correlated top-1 hits: ", hits, "/", total);
    CHECK(static_cast<double>(hits) >= 0.9 * static_cast<double>(total));
}

TEST_CASE("format_instance shape and the attack-template example") {
    const Ontology& ont = World::builtin().ontology;
    EventInstance inst = attack_instance();
    FormattedInstance fmt = format_instance(inst, 0, ont);

    // input: <s> P </s> context-with-marked-trigger [EOS]
    std::vector<std::string> want_input = {
        "<s>", "attacker", "attacked", "target", "using", "instrument",
        "at", "place", "</s>", "militia", "saw", "dalia", "and", "forgate",
        "in", "the", "<t>", "raid", "</t>", "episode", ".", "[EOS]"};
    CHECK(fmt.input == want_input);

    // target: one "role : value ;" group per template role, absent -> ∅
    std::vector<std::string> want_target = {
        "attacker", ":", "dalia", ";", "target", ":", "∅", ";",
        "instrument", ":", "forgate", ";", "place", ":", "∅", ";"};
    CHECK(fmt.target == want_target);

    CHECK_THROWS_AS(format_instance(inst, 1, ont), ValueError);
}

TEST_CASE("format/parse round trip is the identity on gold labels") {
    GeneratorConfig cfg;
    cfg.seed = 21;
    const World& world = World::builtin();
    auto sample = generate_split(world, cfg, "rt", 40, 777);
    for (const auto& inst : sample) {
        for (std::size_t e = 0; e < inst.events.size(); ++e) {
            FormattedInstance fmt = format_instance(inst, e, world.ontology);
            Prediction pred = parse_prediction(fmt.target, world.ontology,
                                               inst.events[e].event_type);
            std::map<std::string, std::vector<std::string>> gold;
            for (const auto& role :
                 world.ontology.type(inst.events[e].event_type).roles)
                gold[role] = {};
            for (const auto& arg : inst.events[e].arguments)
                gold[arg.role] = {inst.tokens.begin() +
                                      static_cast<long>(arg.span.start),
                                  inst.tokens.begin() +
                                      static_cast<long>(arg.span.end)};
            CHECK(pred.roles == gold);
        }
    }
}

TEST_CASE("parse_prediction tolerates malformed output") {
    const Ontology& ont = World::builtin().ontology;

    Prediction empty = parse_prediction({}, ont, "conflict.attack");
    for (const auto& [role, toks] : empty.roles) CHECK(toks.empty());

    // all-absent target
    Prediction none = parse_prediction(
        {"attacker", ":", "∅", ";", "target", ":", "∅", ";", "instrument",
         ":", "∅", ";", "place", ":", "∅", ";"},
        ont, "conflict.attack");
    for (const auto& [role, toks] : none.roles) CHECK(toks.empty());

    // garbled middle: earlier slots recovered, later ones empty
    Prediction gar = parse_prediction(
        {"attacker", ":", "dalia", ";", "garbage", "target", "noise"},
        ont, "conflict.attack");
    CHECK(gar.roles.at("attacker") == std::vector<std::string>{"dalia"});
    CHECK(gar.roles.at("target").empty());
    CHECK(gar.roles.at("instrument").empty());

    // fuzz vs a permissive-regex oracle
    Rng rng(5);
    std::vector<std::string> alphabet = {"attacker", "target", "instrument",
                                         "place",    ":",      ";",
                                         "dalia",    "forgate", "∅"};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> soup;
        std::size_t len = rng.below(18);
        for (std::size_t i = 0; i < len; ++i)
            soup.push_back(alphabet[rng.below(alphabet.size())]);
        Prediction got = parse_prediction(soup, ont, "conflict.attack");

        // oracle: greedy left-to-right regex per template role over the
        // joined string, cursor advancing past each match; an unterminated
        // slot captures to the end of the string like the parser does
        std::string joined;
        for (const auto& w : soup) joined += w + " ";
        std::size_t cursor = 0;
        for (const std::string& role :
             ont.type("conflict.attack").roles) {
            std::regex re(role + " : ([^;]*)(;|$)");
            std::smatch m;
            std::string tail = joined.substr(cursor);
            std::vector<std::string> want;
            if (std::regex_search(tail, m, re)) {
                std::istringstream is(m[1].str());
                std::string w;
                while (is >> w) want.push_back(w);
                cursor += static_cast<std::size_t>(m.position(0)) +
                          static_cast<std::size_t>(m.length(0));
                if (want.size() == 1 && want[0] == "∅") want.clear();
            }
            CHECK(got.roles.at(role) == want);
        }
    }
}

TEST_CASE("evaluate: exact predictions and degenerate cases") {
    const Ontology& ont = World::builtin().ontology;
    GeneratorConfig cfg;
    cfg.seed = 31;
    auto golds = generate_split(World::builtin(), cfg, "ev", 12, 99);

    std::vector<PredRecord> exact;
    std::vector<PredRecord> blank;
    bool any_gold_arg = false;
    for (const auto& inst : golds) {
        for (std::size_t e = 0; e < inst.events.size(); ++e) {
            PredRecord r{inst.doc_id, e, {}};
            for (const auto& role :
                 ont.type(inst.events[e].event_type).roles)
                r.pred.roles[role] = {};
            PredRecord b = r;
            for (const auto& arg : inst.events[e].arguments) {
                any_gold_arg = true;
                r.pred.roles[arg.role] = {
                    inst.tokens.begin() + static_cast<long>(arg.span.start),
                    inst.tokens.begin() + static_cast<long>(arg.span.end)};
            }
            exact.push_back(r);
            blank.push_back(b);
        }
    }
    REQUIRE(any_gold_arg);

    MetricReport perfect = evaluate(exact, golds, ont);
    CHECK(perfect.strict_f1 == 1.0);
    CHECK(perfect.relaxed_f1 == 1.0);
    CHECK(perfect.arg_i_f1 == 1.0);
    CHECK(perfect.arg_c_f1 == 1.0);

    MetricReport zero = evaluate(blank, golds, ont);
    CHECK(zero.strict_r == 0.0);
    CHECK(zero.strict_f1 == 0.0);
    CHECK(zero.arg_i_f1 == 0.0);

    // id mismatch errors
    std::vector<PredRecord> wrong = exact;
    wrong[0].doc_id = "nope";
    CHECK_THROWS_AS(evaluate(wrong, golds, ont), ValueError);
    std::vector<PredRecord> missing(exact.begin(), exact.end() - 1);
    CHECK_THROWS_AS(evaluate(missing, golds, ont), ValueError);
}

TEST_CASE("evaluate: hand-counted confusion tally") {
    const Ontology& ont = World::builtin().ontology;
    // three single-event instances of commerce.purchase
    // roles: buyer, goods, seller
    std::vector<EventInstance> golds;
    for (int i = 0; i < 3; ++i) {
        EventInstance inst;
        inst.doc_id = "h" + std::to_string(i);
        inst.tokens = {"b" + std::to_string(i), "bought",
                       "g" + std::to_string(i), "from",
                       "s" + std::to_string(i), "in", "the", "market",
                       "purchase", "affair"};
        Event ev;
        ev.event_type = "commerce.purchase";
        ev.trigger = {8, 9};
        ev.arguments = {{"buyer", {0, 1}}, {"goods", {2, 3}},
                        {"seller", {4, 5}}};
        inst.events.push_back(ev);
        golds.push_back(inst);
    }
    // predictions: instance 0 exact; instance 1 one boundary error (buyer
    // predicts a token that is not in context); instance 2 one role error
    // (buyer and seller swapped)
    std::vector<PredRecord> preds;
    {
        PredRecord r{"h0", 0, {}};
        r.pred.roles = {{"buyer", {"b0"}}, {"goods", {"g0"}},
                        {"seller", {"s0"}}};
        preds.push_back(r);
        PredRecord q{"h1", 0, {}};
        q.pred.roles = {{"buyer", {"zz"}}, {"goods", {"g1"}},
                        {"seller", {"s1"}}};
        preds.push_back(q);
        PredRecord p{"h2", 0, {}};
        p.pred.roles = {{"buyer", {"s2"}}, {"goods", {"g2"}},
                        {"seller", {"b2"}}};
        preds.push_back(p);
    }
    MetricReport rep = evaluate(preds, golds, ont);
    // hand tally: 9 gold args, 9 predictions.
    // Arg-I: h0 3 hits, h1 2 hits ("zz" not in context), h2 3 hits
    //        (swapped spans still align with gold boundaries) -> 8/9
    CHECK(rep.arg_i_p == doctest::Approx(8.0 / 9.0));
    CHECK(rep.arg_i_r == doctest::Approx(8.0 / 9.0));
    // Arg-C: role must match too, so the h2 swap drops both -> 6/9
    CHECK(rep.arg_c_p == doctest::Approx(6.0 / 9.0));
    CHECK(rep.arg_c_r == doctest::Approx(6.0 / 9.0));
    CHECK(rep.arg_i_f1 > rep.arg_c_f1);
    // Strict == Arg-C here (string equality mirrors the swap + miss)
    CHECK(rep.strict_f1 == doctest::Approx(6.0 / 9.0));
    // Relaxed >= Strict always
    CHECK(rep.relaxed_f1 >= rep.strict_f1);
}

TEST_CASE("metric order invariants on fuzzed predictions") {
    const Ontology& ont = World::builtin().ontology;
    GeneratorConfig cfg;
    cfg.seed = 41;
    auto golds = generate_split(World::builtin(), cfg, "fz", 15, 3131);
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<PredRecord> preds;
        for (const auto& inst : golds) {
            for (std::size_t e = 0; e < inst.events.size(); ++e) {
                PredRecord r{inst.doc_id, e, {}};
                for (const auto& role :
                     ont.type(inst.events[e].event_type).roles) {
                    double dice = rng.uniform();
                    if (dice < 0.3) {
                        r.pred.roles[role] = {};
                    } else if (dice < 0.6) {
                        // random context token
                        r.pred.roles[role] = {
                            inst.tokens[rng.below(inst.tokens.size())]};
                    } else {
                        // gold when available
                        r.pred.roles[role] = {};
                        for (const auto& arg : inst.events[e].arguments)
                            if (arg.role == role)
                                r.pred.roles[role] = {
                                    inst.tokens.begin() +
                                        static_cast<long>(arg.span.start),
                                    inst.tokens.begin() +
                                        static_cast<long>(arg.span.end)};
                    }
                }
                preds.push_back(r);
            }
        }
        MetricReport rep = evaluate(preds, golds, ont);
        CHECK(rep.relaxed_f1 >= rep.strict_f1);
        CHECK(rep.arg_i_f1 >= rep.arg_c_f1);
        for (double v : {rep.arg_i_f1, rep.arg_c_f1, rep.strict_f1,
                         rep.relaxed_f1}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("jsonl field names are exact") {
    EventInstance inst = attack_instance();
    std::string line = instance_to_json(inst);
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("doc_id"));
    CHECK(j.contains("tokens"));
    CHECK(j.contains("events"));
    CHECK(j["events"][0].contains("event_type"));
    CHECK(j["events"][0].contains("trigger"));
    CHECK(j["events"][0]["trigger"].contains("start"));
    CHECK(j["events"][0]["trigger"].contains("end"));
    CHECK(j["events"][0].contains("arguments"));
    CHECK(j["events"][0]["arguments"][0].contains("role"));

    EventInstance back = instance_from_json(line);
    CHECK(back.doc_id == inst.doc_id);
    CHECK(back.tokens == inst.tokens);
    CHECK(back.events.size() == 1);
    CHECK(back.events[0].arguments.size() == 2);

    // out-of-bounds spans are rejected on read
    auto bad = nlohmann::json::parse(line);
    bad["events"][0]["trigger"]["end"] = 99;
    CHECK_THROWS_AS(instance_from_json(bad.dump()), ValueError);
}

TEST_CASE("vocab basics") {
    const World& world = World::builtin();
    GeneratorConfig cfg;
    auto sample = generate_split(world, cfg, "v", 10, 5);
    Vocab vocab = Vocab::build(world.ontology, sample);

    CHECK(vocab.id("<unk>") == 0);
    CHECK(vocab.id("<bos>") == 1);
    CHECK(vocab.id("<eos>") == 2);
    CHECK(vocab.word(vocab.id("∅")) == "∅");
    CHECK(vocab.id("never-seen-word-xyz") == 0);

    std::vector<std::string> words = {"<s>", "attacker", ":", ";", "[EOS]"};
    CHECK(vocab.decode(vocab.encode(words)) == words);
}

TEST_CASE("World::for_ontology synthesizes custom lexicons") {
    Ontology custom;
    custom.types["alpha.one"] = OntologyType{{"ra", "rb"}, "{ra} met {rb}"};
    custom.types["beta.two"] = OntologyType{{"rc"}, "{rc} happened"};
    World w = World::for_ontology(custom);
    CHECK(w.triggers.at("alpha.one").size() == 4);
    CHECK(w.entities.at("alpha.one").at("ra").size() == 10);
    // a shared trigger between the pair
    CHECK(w.triggers.at("beta.two").back() == w.triggers.at("alpha.one").back());

    GeneratorConfig cfg;
    auto sample = generate_split(w, cfg, "c", 8, 77);
    CHECK(sample.size() == 8);

    // matching the builtin ontology returns the builtin world
    World same = World::for_ontology(World::builtin().ontology);
    CHECK(same.triggers.at("conflict.attack") ==
          World::builtin().triggers.at("conflict.attack"));
}
