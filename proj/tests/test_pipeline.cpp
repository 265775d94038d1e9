#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <doctest.h>

#include "cmr/pipeline.hpp"
#include "cmr/verify.hpp"

using namespace cmr;

namespace {

ModelConfig pipeline_config(std::size_t vocab, Variant v = Variant::kEncoderDecoder) {
    ModelConfig c;
    c.variant = v;
    c.d_model = 8;
    c.num_heads = 2;
    c.num_layers = 1;
    c.vocab_size = vocab;
    c.max_seq_len = 160;
    c.feed_forward_dim = 16;
    c.seed = 17;
    return c;
}

std::vector<TrainItem> typed_items(const std::vector<int>& type_of) {
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < type_of.size(); ++i)
        items.push_back(TrainItem{i, 0, "type" + std::to_string(type_of[i]),
                                  "doc" + std::to_string(i) + "#0"});
    return items;
}

std::multiset<std::string> id_multiset(const std::vector<TrainItem>& items) {
    std::multiset<std::string> out;
    for (const auto& it : items) out.insert(it.item_id);
    return out;
}

}  // namespace

TEST_CASE("shuffle_rerank is a deterministic permutation") {
    std::vector<int> types;
    for (int i = 0; i < 47; ++i) types.push_back(i % 3);
    auto items = typed_items(types);

    auto a = shuffle_rerank(items, 5, 0.2, 5);
    auto b = shuffle_rerank(items, 5, 0.2, 5);
    CHECK(a.size() == items.size());
    CHECK(id_multiset(a) == id_multiset(items));
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i].item_id == b[i].item_id);

    auto c = shuffle_rerank(items, 6, 0.2, 5);
    bool different = false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].item_id != c[i].item_id) different = true;
    CHECK(different);
}

TEST_CASE("shuffle_rerank: mix 0 over a single type is a plain shuffle") {
    std::vector<int> types(20, 0);
    auto items = typed_items(types);
    auto ranked = shuffle_rerank(items, 9, 0.0, 4);

    // the reference is a straight Fisher-Yates with the same generator
    std::vector<TrainItem> expect = items;
    Rng rng(9);
    rng.shuffle(expect);
    for (std::size_t i = 0; i < ranked.size(); ++i)
        CHECK(ranked[i].item_id == expect[i].item_id);
}

TEST_CASE("shuffle_rerank: full batches are type-homogeneous") {
    std::vector<int> types;
    for (int i = 0; i < 60; ++i) types.push_back(i % 3);
    auto items = typed_items(types);
    const std::size_t batch_size = 5;
    auto ranked = shuffle_rerank(items, 3, 0.2, batch_size);
    REQUIRE(ranked.size() == 60);

    // counting oracle over the emitted batches: >= 4 of 5 share a type
    for (std::size_t b0 = 0; b0 + batch_size <= ranked.size();
         b0 += batch_size) {
        std::map<std::string, std::size_t> counts;
        for (std::size_t i = b0; i < b0 + batch_size; ++i)
            counts[ranked[i].event_type]++;
        std::size_t top = 0;
        for (const auto& [t, n] : counts) top = std::max(top, n);
        CHECK(top >= 4);
    }
}

TEST_CASE("training follows the literal memory-cycle transcription") {
    CheckResult r = check_alg1_oracle();
    INFO(r.detail, " max_err=", r.max_err);
    CHECK(r.passed);
    CHECK(r.max_err < 1e-12);
}

TEST_CASE("max_retrieval 1 degenerates to no-retrieval training") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto data = generate_split(world, gcfg, "t", 8, 55);
    for (auto& d : data) d.events.resize(1);
    Vocab vocab = Vocab::build(world.ontology, data);
    Model model(pipeline_config(vocab.size()));

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.max_retrieval = 1;
    cfg.grad_accum_steps = 1;
    cfg.learning_rate = 1e-3;
    cfg.seed = 2;
    TrainResult res = train(model, data, world.ontology, vocab, cfg);
    REQUIRE(res.log.size() == 8);
    for (const auto& row : res.log) CHECK(row.stored_count == 0);
    // cycle id increments every step
    for (std::size_t i = 0; i < res.log.size(); ++i)
        CHECK(res.log[i].cycle_id == i);
}

TEST_CASE("batch 1 with sum combine walks like sequential updates") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto data = generate_split(world, gcfg, "t", 6, 77);
    for (auto& d : data) d.events.resize(1);
    Vocab vocab = Vocab::build(world.ontology, data);
    Model model(pipeline_config(vocab.size()));

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.max_retrieval = 100;  // never reset within the run
    cfg.grad_accum_steps = 100;
    cfg.learning_rate = 1e-3;
    cfg.seed = 4;
    cfg.combine = CombineMode::kSum;

    std::vector<CompressiveMemory> batch_mems;
    std::vector<CompressiveMemory> deltas;
    TrainProbe probe;
    probe.on_batch = [&](const CompressiveMemory& m, std::size_t) {
        batch_mems.push_back(m.clone());
    };
    probe.on_delta = [&](const CompressiveMemory& d) {
        deltas.push_back(d.clone());
    };
    train(model, data, world.ontology, vocab, cfg, nullptr, &probe);

    REQUIRE(batch_mems.size() == 6);
    CompressiveMemory seq = model.make_memory();
    for (std::size_t i = 0; i < 6; ++i) {
        seq.add_scaled(deltas[i], 1.0);
        CHECK(seq.max_abs_difference(batch_mems[i]) <= 1e-12);
        CHECK(batch_mems[i].stored_count() == i + 1);
    }
}

TEST_CASE("non-finite loss aborts with a numeric error") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto data = generate_split(world, gcfg, "t", 2, 88);
    Vocab vocab = Vocab::build(world.ontology, data);
    Model model(pipeline_config(vocab.size()));
    {
        // layer norm rescales activations, so blow up a post-norm gain to
        // overflow the forward pass
        std::vector<Tensor> ps = model.parameters();
        auto& gain = ps[1].mutable_data();
        std::fill(gain.begin(), gain.end(), 1e308);
    }
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.learning_rate = 1e-3;
    CHECK_THROWS_AS(train(model, data, world.ontology, vocab, cfg),
                    NumericError);
}

TEST_CASE("preload_demos follows the literal batching transcription") {
    CheckResult r = check_alg2_oracle();
    INFO(r.detail, " max_err=", r.max_err);
    CHECK(r.passed);
    CHECK(r.max_err < 1e-12);
}

TEST_CASE("preload edge cases and the mean-of-deltas identity") {
    Model model(pipeline_config(31));
    Rng rng(3);
    auto make_demo = [&](std::size_t len) {
        TokenSeq s(len);
        for (auto& t : s) t = static_cast<TokenId>(rng.below(31));
        return s;
    };

    CompressiveMemory empty = preload_demos(model, {}, 4, CombineMode::kMean);
    CHECK(empty.empty());

    // batch size 1 with sum equals sequential storing
    std::vector<TokenSeq> two{make_demo(6), make_demo(9)};
    CompressiveMemory a = preload_demos(model, two, 1, CombineMode::kSum);
    CompressiveMemory b = model.make_memory();
    model.store_instance(two[0], b);
    model.store_instance(two[1], b);
    CHECK(a.max_abs_difference(b) <= 1e-12);
    CHECK(a.stored_count() == 2);

    // k=8, batch 4, mean: final memory is (sum of deltas) / 4
    std::vector<TokenSeq> eight;
    for (int i = 0; i < 8; ++i) eight.push_back(make_demo(5 + i));
    CompressiveMemory got = preload_demos(model, eight, 4, CombineMode::kMean);
    CompressiveMemory sum = model.make_memory();
    for (const auto& d : eight) {
        CompressiveMemory one = model.make_memory();
        model.store_instance(d, one);
        sum.add_scaled(one, 0.25);
    }
    CHECK(got.max_abs_difference(sum) <= 1e-12);

    // permutation invariance under equal groups
    std::vector<TokenSeq> perm = eight;
    Rng shuffler(11);
    shuffler.shuffle(perm);
    CompressiveMemory shuffled =
        preload_demos(model, perm, 4, CombineMode::kMean);
    CHECK(got.max_abs_difference(shuffled) <= 1e-9);
}

TEST_CASE("build_prefix_input layout, counting and truncation") {
    const World& world = World::builtin();
    EventInstance inst;
    inst.doc_id = "p0";
    inst.tokens = {"w1", "w2", "w3", "raid"};
    Event ev;
    ev.event_type = "conflict.attack";
    ev.trigger = {3, 4};
    inst.events.push_back(ev);

    // degenerate empty candidate
    auto got = build_prefix_input(inst, 0, {}, world.ontology, 160);
    std::vector<std::string> want = {
        "<s>", "</s>", "<s>", "attacker", "attacked", "target", "using",
        "instrument", "at", "place", "</s>", "w1", "w2", "w3", "<t>",
        "raid", "</t>", "[EOS]"};
    CHECK(got == want);

    // token count = |s_R| + |P| + N + 5 delimiters when untruncated
    std::vector<std::string> cand = {"c1", "c2", "c3"};
    auto full = build_prefix_input(inst, 0, cand, world.ontology, 160);
    std::size_t p_len = prompt_tokens(world.ontology, "conflict.attack").size();
    std::size_t n_ctx = marked_context(inst, 0).size();
    CHECK(full.size() == cand.size() + p_len + n_ctx + 5);

    // truncation drops the context tail, never prefix or prompt
    auto trunc = build_prefix_input(inst, 0, cand, world.ontology, 18);
    CHECK(trunc.size() == 18);
    CHECK(trunc.back() == "[EOS]");
    CHECK(std::count(trunc.begin(), trunc.end(), "c3") == 1);
    CHECK(std::count(trunc.begin(), trunc.end(), "place") == 1);

    CHECK_THROWS_AS(build_prefix_input(inst, 0, cand, world.ontology, 10),
                    ValueError);
}

TEST_CASE("infer: none mode equals k=0 and equal groups ignore order") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto train_split = generate_split(world, gcfg, "tr", 30, 11);
    auto query_split = generate_split(world, gcfg, "q", 2, 22);
    std::vector<EventInstance> all = train_split;
    all.insert(all.end(), query_split.begin(), query_split.end());
    Vocab vocab = Vocab::build(world.ontology, all);
    Model model(pipeline_config(vocab.size()));
    RetrievalIndex index = build_index(train_split, world.ontology);

    InferenceConfig none;
    none.retrieval_mode = RetrievalMode::kNone;
    none.k = 3;
    InferenceConfig zero;
    zero.retrieval_mode = RetrievalMode::kTopk;
    zero.k = 0;
    auto out_none = infer(model, query_split[0], 0, index, world.ontology,
                          vocab, none);
    auto out_zero = infer(model, query_split[0], 0, index, world.ontology,
                          vocab, zero);
    CHECK(out_none.generated_words == out_zero.generated_words);
    CHECK(out_none.memory.empty());

    InferenceConfig fwd;
    fwd.retrieval_mode = RetrievalMode::kTopk;
    fwd.k = 4;
    fwd.demo_batch_size = 4;
    InferenceConfig rev = fwd;
    rev.demo_order = DemoOrder::kReverse;
    auto out_fwd = infer(model, query_split[1], 0, index, world.ontology,
                         vocab, fwd);
    auto out_rev = infer(model, query_split[1], 0, index, world.ontology,
                         vocab, rev);
    CHECK(out_fwd.memory.max_abs_difference(out_rev.memory) <= 1e-9);
    CHECK(out_fwd.generated_words == out_rev.generated_words);
    CHECK(out_fwd.demo_ids.size() == 4);
}

TEST_CASE("optimizer: sgd step, clipping, adam state") {
    Tensor w = Tensor::from_data({1, 2}, {1.0, 2.0});
    w.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum_all(mul(w, w)));  // grad = 2w = (2, 4)
    }
    Optimizer opt(OptimizerKind::kSgd, {w}, 1e9);
    opt.step(0.1, 1.0);
    CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 2.0));
    CHECK(w.data()[1] == doctest::Approx(2.0 - 0.1 * 4.0));
    CHECK_FALSE(w.has_grad());  // grads consumed

    // clipping to unit norm
    Tensor v = Tensor::from_data({1, 2}, {0.0, 0.0});
    v.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum_all(scale(v, 30.0)));  // grad = (30, 30)
    }
    Optimizer clip_opt(OptimizerKind::kSgd, {v}, 1.0);
    clip_opt.step(1.0, 1.0);
    double norm = std::sqrt(v.data()[0] * v.data()[0] +
                            v.data()[1] * v.data()[1]);
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));

    // adam first step moves by ~lr in the gradient direction
    Tensor u = Tensor::from_data({1, 1}, {5.0});
    u.set_requires_grad(true);
    {
        Tape tape;
        tape.backward(sum_all(scale(u, 3.0)));
    }
    Optimizer adam(OptimizerKind::kAdam, {u}, 1e9);
    adam.step(0.01, 1.0);
    CHECK(u.data()[0] == doctest::Approx(5.0 - 0.01).epsilon(1e-6));
}

TEST_CASE("training runs are deterministic given the seed") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto data = generate_split(world, gcfg, "t", 10, 99);
    Vocab vocab = Vocab::build(world.ontology, data);

    auto run_once = [&]() {
        Model model(pipeline_config(vocab.size()));
        TrainConfig cfg;
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.max_retrieval = 4;
        cfg.grad_accum_steps = 4;
        cfg.learning_rate = 1e-2;
        cfg.optimizer = OptimizerKind::kAdam;
        cfg.seed = 5;
        train(model, data, world.ontology, vocab, cfg);
        std::ostringstream os(std::ios::binary);
        model.save(os);
        return os.str();
    };
    CHECK(run_once() == run_once());
}

TEST_CASE("prefix baseline training needs an index and uses prefixes") {
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    auto data = generate_split(world, gcfg, "t", 6, 44);
    Vocab vocab = Vocab::build(world.ontology, data);
    ModelConfig mc = pipeline_config(vocab.size());
    mc.max_seq_len = 220;
    Model model(mc);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.arch = ArchMode::kPrefixRag;
    cfg.learning_rate = 1e-3;
    CHECK_THROWS_AS(train(model, data, world.ontology, vocab, cfg),
                    ValueError);

    RetrievalIndex index = build_index(data, world.ontology);
    TrainResult res = train(model, data, world.ontology, vocab, cfg, &index);
    CHECK(res.log.size() >= 6);
    for (const auto& row : res.log) CHECK(row.stored_count == 0);
}

TEST_CASE("verification checks pass together") {
    for (const CheckResult& r :
         run_verification({"permutation", "empty_memory"})) {
        INFO(r.name, ": ", r.detail, " max_err=", r.max_err);
        CHECK(r.passed);
    }
}

TEST_CASE("epsilon fault injection breaks the empty-memory check") {
    set_retrieval_epsilon(0.0);
    CheckResult r = check_empty_memory();
    set_retrieval_epsilon(1e-6);
    CHECK_FALSE(r.passed);
    CHECK(r.detail.find("non-finite") != std::string::npos);
    CHECK(check_empty_memory().passed);
}
