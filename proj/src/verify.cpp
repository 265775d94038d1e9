#include "cmr/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cmr/memory.hpp"
#include "cmr/model.hpp"
#include "cmr/pipeline.hpp"

namespace cmr {

double max_grad_error(const std::function<Tensor()>& loss_fn,
                      std::vector<Tensor> params, Rng& rng,
                      std::size_t samples_per_param, double h) {
    for (Tensor& p : params) {
        p.zero_grad();
        p.set_requires_grad(true);
    }
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    double worst = 0.0;
    for (Tensor& p : params) {
        for (std::size_t s = 0; s < samples_per_param; ++s) {
            const std::size_t idx = rng.below(p.size());
            const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
            auto& data = p.mutable_data();
            const double orig = data[idx];
            double f_plus, f_minus;
            {
                NoGrad guard;
                data[idx] = orig + h;
                f_plus = loss_fn().value();
                data[idx] = orig - h;
                f_minus = loss_fn().value();
                data[idx] = orig;
            }
            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double denom =
                std::max({std::abs(analytic), std::abs(fd), 0.1});
            worst = std::max(worst, std::abs(analytic - fd) / denom);
        }
    }
    for (Tensor& p : params) {
        p.zero_grad();
        p.set_requires_grad(false);
    }
    return worst;
}

namespace {

constexpr double kGradTol = 1e-4;

// full CMR layer: memory_update -> memory_retrieve -> gated_combine,
// with the dot-attention path alongside
double layer_grad_error(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d_model = 8, heads = 2, n_demo = 5, n_q = 3;
    AttentionParams params = AttentionParams::init(d_model, heads, rng);
    params.gamma = Tensor::randn({1}, rng, 0.5);
    Tensor x_demo = Tensor::randn({n_demo, d_model}, rng, 1.0);
    Tensor x_q = Tensor::randn({n_q, d_model}, rng, 1.0);
    // fixed random upstream weights so every output entry matters
    std::vector<Tensor> upstream;
    for (std::size_t hd = 0; hd < heads; ++hd)
        upstream.push_back(
            Tensor::randn({n_q, d_model / heads}, rng, 1.0));

    auto loss_fn = [&]() {
        CompressiveMemory mem(1, heads, d_model / heads, d_model / heads);
        memory_update(mem, params, x_demo);
        std::vector<Tensor> dots = dot_attention(x_q, x_demo, params, false);
        Tensor loss = Tensor::scalar(0.0);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            Tensor q = matmul(x_q, params.heads[hd].w_q);
            Tensor a_ret = memory_retrieve(mem, 0, hd, q);
            Tensor a = gated_combine(a_ret, dots[hd], params.gamma);
            loss = add(loss, sum_all(mul(a, upstream[hd])));
        }
        return loss;
    };

    std::vector<Tensor> tracked{x_demo, x_q, params.gamma};
    for (const HeadParams& hp : params.heads) {
        tracked.push_back(hp.w_q);
        tracked.push_back(hp.w_k);
        tracked.push_back(hp.w_v);
    }
    Rng pick(seed ^ 0x5bd1e995ULL);
    return max_grad_error(loss_fn, tracked, pick, 3);
}

TokenSeq random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
    TokenSeq out(len);
    for (std::size_t i = 0; i < len; ++i)
        out[i] = static_cast<TokenId>(rng.below(vocab));
    return out;
}

double model_grad_error(Variant variant, std::uint64_t seed) {
    Rng rng(seed);
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.d_model = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.vocab_size = 11;
    cfg.max_seq_len = 32;
    cfg.feed_forward_dim = 16;
    cfg.seed = seed;
    Model model(cfg);

    // constant preloaded memory so the retrieval path is active
    CompressiveMemory mem = model.make_memory();
    {
        NoGrad guard;
        model.store_instance(random_tokens(rng, 7, cfg.vocab_size), mem);
    }
    // nonzero gate so both mixture branches carry gradient
    std::vector<Tensor> params = model.parameters();
    for (Tensor& p : params)
        if (p.size() == 1) p.mutable_data()[0] = 0.3;

    TokenSeq input = random_tokens(rng, 6, cfg.vocab_size);
    TokenSeq target = random_tokens(rng, 5, cfg.vocab_size);

    auto loss_fn = [&]() {
        if (variant == Variant::kEncoderDecoder) {
            TokenSeq dec_input{1};
            dec_input.insert(dec_input.end(), target.begin(), target.end() - 1);
            Tensor logits = model.forward_encdec(input, dec_input, &mem, true);
            return cross_entropy(logits, target);
        }
        TokenSeq seq = input;
        seq.insert(seq.end(), target.begin(), target.end());
        TokenSeq model_input(seq.begin(), seq.end() - 1);
        TokenSeq labels(seq.begin() + 1, seq.end());
        std::vector<bool> ignore(labels.size(), false);
        for (std::size_t i = 0; i + 1 < input.size(); ++i) ignore[i] = true;
        Tensor logits = model.forward_deconly(model_input, &mem, true);
        return cross_entropy(logits, labels, ignore);
    };

    Rng pick(seed ^ 0x2545f491ULL);
    return max_grad_error(loss_fn, params, pick, 2);
}

}  // namespace

CheckResult check_gradcheck(std::size_t num_seeds) {
    CheckResult r{"gradcheck", true, 0.0, ""};
    for (std::size_t s = 0; s < num_seeds; ++s) {
        r.max_err = std::max(r.max_err, layer_grad_error(1000 + s));
        r.max_err = std::max(
            r.max_err, model_grad_error(Variant::kEncoderDecoder, 2000 + s));
        r.max_err = std::max(
            r.max_err, model_grad_error(Variant::kDecoderOnly, 3000 + s));
    }
    r.passed = r.max_err < kGradTol;
    std::ostringstream os;
    os << "analytic vs central differences over " << num_seeds
       << " seeds (layer + both variants), tol " << kGradTol;
    r.detail = os.str();
    return r;
}

CheckResult check_linear_attention_equivalence(std::size_t num_cases) {
    CheckResult r{"linear_attention", true, 0.0, ""};
    for (std::size_t c = 0; c < num_cases; ++c) {
        Rng rng(500 + c);
        const std::size_t heads = 1;
        const std::size_t d_model = 2 + rng.below(5);  // d_k = d_model
        const std::size_t n_demo = 1 + rng.below(8);
        const std::size_t n_q = 1 + rng.below(6);
        AttentionParams params = AttentionParams::init(d_model, heads, rng);
        Tensor x_demo = Tensor::randn({n_demo, d_model}, rng, 1.0);
        Tensor x_q = Tensor::randn({n_q, d_model}, rng, 1.0);

        // implementation route: matrix memory
        CompressiveMemory mem(1, 1, d_model, d_model);
        memory_update(mem, params, x_demo);
        Tensor q = matmul(x_q, params.heads[0].w_q);
        Tensor got = memory_retrieve(mem, 0, 0, q);

        // oracle route: token-level linear attention, no memory matrix
        const Tensor k = matmul(x_demo, params.heads[0].w_k);
        const Tensor v = matmul(x_demo, params.heads[0].w_v);
        auto sigma = [](double x) { return x >= 0.0 ? x + 1.0 : std::exp(x); };
        const double eps = retrieval_epsilon();
        for (std::size_t i = 0; i < n_q; ++i) {
            double den = 0.0;
            for (std::size_t j = 0; j < n_demo; ++j) {
                double sim = 0.0;
                for (std::size_t a = 0; a < d_model; ++a)
                    sim += sigma(q.at(i, a)) * sigma(k.at(j, a));
                den += sim;
            }
            for (std::size_t col = 0; col < d_model; ++col) {
                double num = 0.0;
                for (std::size_t j = 0; j < n_demo; ++j) {
                    double sim = 0.0;
                    for (std::size_t a = 0; a < d_model; ++a)
                        sim += sigma(q.at(i, a)) * sigma(k.at(j, a));
                    num += sim * v.at(j, col);
                }
                double want = num / (den + eps);
                r.max_err = std::max(r.max_err,
                                     std::abs(want - got.at(i, col)));
            }
        }
    }
    r.passed = r.max_err < 1e-10;
    r.detail = "single-demo memory retrieval vs token-level linear attention, "
               "tol 1e-10";
    return r;
}

namespace {

Model tiny_model(Variant variant, std::size_t vocab, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.variant = variant;
    cfg.d_model = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 160;
    cfg.feed_forward_dim = 16;
    cfg.seed = seed;
    return Model(cfg);
}

}  // namespace

CheckResult check_alg1_oracle() {
    CheckResult r{"alg1", true, 0.0, ""};
    const World& world = World::builtin();
    GeneratorConfig gcfg;
    gcfg.seed = 99;
    std::vector<EventInstance> data =
        generate_split(world, gcfg, "oracle", 16, 424242);
    // force one event per doc so the item count is exactly 16
    for (auto& inst : data) inst.events.resize(1);
    Vocab vocab = Vocab::build(world.ontology, data);

    for (std::size_t batch_size : {std::size_t{1}, std::size_t{4}}) {
        for (std::size_t max_retrieval : {std::size_t{1}, std::size_t{4},
                                          std::size_t{8}}) {
            for (CombineMode combine : {CombineMode::kMean, CombineMode::kSum}) {
                Model model(
                    tiny_model(Variant::kEncoderDecoder, vocab.size(), 5));
                TrainConfig tcfg;
                tcfg.epochs = 1;
                tcfg.batch_size = batch_size;
                tcfg.max_retrieval = max_retrieval;
                tcfg.grad_accum_steps = max_retrieval;
                tcfg.learning_rate = 1e-3;
                tcfg.seed = 7;
                tcfg.combine = combine;

                std::vector<CompressiveMemory> deltas;
                std::vector<CompressiveMemory> batch_mems;
                std::vector<std::size_t> batch_counters;
                std::size_t resets = 0;
                TrainProbe probe;
                probe.on_delta = [&](const CompressiveMemory& d) {
                    deltas.push_back(d.clone());
                };
                probe.on_batch = [&](const CompressiveMemory& m,
                                     std::size_t t) {
                    batch_mems.push_back(m.clone());
                    batch_counters.push_back(t);
                };
                probe.on_reset = [&]() { ++resets; };
                train(model, data, world.ontology, vocab, tcfg, nullptr,
                      &probe);

                // literal transcription of Algorithm 1's memory/counter flow
                CompressiveMemory m = model.make_memory();
                std::size_t t = 1;
                std::size_t cursor = 0;
                std::size_t oracle_resets = 0;
                std::size_t bi = 0;
                const std::size_t n_items = data.size();
                for (std::size_t b0 = 0; b0 < n_items; b0 += batch_size) {
                    const std::size_t bsz =
                        std::min(batch_size, n_items - b0);
                    CompressiveMemory acc = model.make_memory();
                    for (std::size_t i = 0; i < bsz; ++i) {
                        acc.add_scaled(deltas.at(cursor++), 1.0);
                        t += 1;
                    }
                    const double f = combine == CombineMode::kMean
                                         ? 1.0 / static_cast<double>(bsz)
                                         : 1.0;
                    m.add_scaled(acc, f);
                    // acc carried bsz stored demos; add_scaled already
                    // accumulated them into m's count
                    double diff = m.max_abs_difference(batch_mems.at(bi));
                    r.max_err = std::max(r.max_err, diff);
                    if (batch_counters.at(bi) != t) {
                        r.passed = false;
                        r.detail = "counter mismatch";
                    }
                    ++bi;
                    if (t > max_retrieval) {
                        m.reset();
                        t = 1;
                        ++oracle_resets;
                    }
                }
                if (oracle_resets != resets) {
                    r.passed = false;
                    r.detail = "reset count mismatch";
                }
            }
        }
    }
    if (r.max_err >= 1e-12) r.passed = false;
    if (r.detail.empty())
        r.detail = "train memory/counter trajectory vs literal transcription, "
                   "tol 1e-12";
    return r;
}

CheckResult check_alg2_oracle() {
    CheckResult r{"alg2", true, 0.0, ""};
    Rng rng(31337);
    Model model(tiny_model(Variant::kEncoderDecoder, 29, 11));
    for (std::size_t k : {std::size_t{0}, std::size_t{1}, std::size_t{4},
                          std::size_t{5}, std::size_t{10}}) {
        std::vector<TokenSeq> demos;
        for (std::size_t i = 0; i < k; ++i)
            demos.push_back(random_tokens(rng, 5 + rng.below(8), 29));
        for (std::size_t bs : {std::size_t{1}, std::size_t{4}}) {
            for (CombineMode combine : {CombineMode::kMean, CombineMode::kSum}) {
                CompressiveMemory got =
                    preload_demos(model, demos, bs, combine);

                // literal transcription of Algorithm 2 lines 2-8
                CompressiveMemory m = model.make_memory();
                for (std::size_t b0 = 0; b0 < demos.size(); b0 += bs) {
                    const std::size_t bsz = std::min(bs, demos.size() - b0);
                    CompressiveMemory acc = model.make_memory();
                    for (std::size_t i = 0; i < bsz; ++i) {
                        CompressiveMemory mt = model.make_memory();
                        model.store_instance(demos[b0 + i], mt);
                        acc.add_scaled(mt, 1.0);
                    }
                    m.add_scaled(acc, combine == CombineMode::kMean
                                          ? 1.0 / static_cast<double>(bsz)
                                          : 1.0);
                }
                r.max_err = std::max(r.max_err, m.max_abs_difference(got));
                if (got.stored_count() != k) {
                    r.passed = false;
                    r.detail = "stored_count mismatch";
                }
            }
        }
    }
    if (r.max_err >= 1e-12) r.passed = false;
    if (r.detail.empty())
        r.detail = "preload_demos vs literal transcription over k in "
                   "{0,1,4,5,10}, batch sizes {1,4}, both combines, tol 1e-12";
    return r;
}

CheckResult check_permutation_invariance() {
    CheckResult r{"permutation", true, 0.0, ""};
    Rng rng(2024);
    // sequential memory_update order invariance
    {
        const std::size_t d_model = 8, heads = 2;
        AttentionParams params = AttentionParams::init(d_model, heads, rng);
        std::vector<Tensor> demos;
        for (int i = 0; i < 6; ++i)
            demos.push_back(Tensor::randn({4, d_model}, rng, 1.0));
        CompressiveMemory base(1, heads, 4, 4);
        for (const Tensor& d : demos) memory_update(base, params, d);
        for (int p = 0; p < 10; ++p) {
            std::vector<std::size_t> order{0, 1, 2, 3, 4, 5};
            rng.shuffle(order);
            CompressiveMemory perm(1, heads, 4, 4);
            for (std::size_t i : order) memory_update(perm, params, demos[i]);
            r.max_err = std::max(r.max_err, base.max_abs_difference(perm));
        }
        if (r.max_err >= 1e-12) {
            r.passed = false;
            r.detail = "sequential update permutation drift above 1e-12";
        }
    }
    // preload permutation invariance when k divides demo_batch_size evenly
    {
        Model model(tiny_model(Variant::kEncoderDecoder, 23, 3));
        std::vector<TokenSeq> demos;
        for (int i = 0; i < 8; ++i)
            demos.push_back(random_tokens(rng, 6 + rng.below(4), 23));
        CompressiveMemory base =
            preload_demos(model, demos, 4, CombineMode::kMean);
        double worst = 0.0;
        for (int p = 0; p < 10; ++p) {
            std::vector<TokenSeq> perm = demos;
            rng.shuffle(perm);
            CompressiveMemory m =
                preload_demos(model, perm, 4, CombineMode::kMean);
            worst = std::max(worst, base.max_abs_difference(m));
        }
        r.max_err = std::max(r.max_err, worst);
        if (worst >= 1e-9) {
            r.passed = false;
            r.detail = "preload permutation drift above 1e-9";
        }
    }
    if (r.detail.empty())
        r.detail = "update order drift <= 1e-12; preload permutation drift "
                   "<= 1e-9 (k divisible by batch)";
    return r;
}

CheckResult check_empty_memory() {
    CheckResult r{"empty_memory", true, 0.0, ""};
    Rng rng(77);
    CompressiveMemory mem(1, 1, 4, 4);
    Tensor q = Tensor::randn({3, 4}, rng, 1.0);
    Tensor got = memory_retrieve(mem, 0, 0, q);
    double den_min = 1e300;
    {
        Tensor sq = elu_plus_one(q);
        Tensor den = add_const(matmul(sq, mem.n(0, 0)), retrieval_epsilon());
        for (double v : den.data()) den_min = std::min(den_min, v);
    }
    if (!all_finite(got)) {
        r.passed = false;
        std::ostringstream os;
        os << "division produced non-finite output on empty memory "
              "(denominator minimum = "
           << den_min << ")";
        r.detail = os.str();
        return r;
    }
    for (double v : got.data())
        r.max_err = std::max(r.max_err, std::abs(v));
    if (r.max_err != 0.0) {
        r.passed = false;
        r.detail = "empty-memory retrieval is not exactly zero";
        return r;
    }
    r.detail = "empty-memory retrieval is exactly zero and finite";
    return r;
}

std::vector<CheckResult> run_verification(
    const std::vector<std::string>& only) {
    auto wanted = [&](const std::string& name) {
        if (only.empty()) return true;
        return std::find(only.begin(), only.end(), name) != only.end();
    };
    std::vector<CheckResult> out;
    if (wanted("gradcheck")) out.push_back(check_gradcheck());
    if (wanted("linear_attention"))
        out.push_back(check_linear_attention_equivalence());
    if (wanted("alg1")) out.push_back(check_alg1_oracle());
    if (wanted("alg2")) out.push_back(check_alg2_oracle());
    if (wanted("permutation")) out.push_back(check_permutation_invariance());
    if (wanted("empty_memory")) out.push_back(check_empty_memory());
    return out;
}

}  // namespace cmr
