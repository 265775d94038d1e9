#include "cmr/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>

namespace cmr {

namespace {
using Clock = std::chrono::steady_clock;
double elapsed_ms(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}
}  // namespace

// ---- enum names ----

std::string combine_name(CombineMode m) {
    return m == CombineMode::kMean ? "mean" : "sum";
}
CombineMode combine_from_name(const std::string& s) {
    if (s == "mean") return CombineMode::kMean;
    if (s == "sum") return CombineMode::kSum;
    throw ValueError("unknown combine mode '" + s + "' (want mean|sum)");
}
std::string retrieval_mode_name(RetrievalMode m) {
    switch (m) {
        case RetrievalMode::kTopk: return "topk";
        case RetrievalMode::kRandom: return "random";
        default: return "none";
    }
}
RetrievalMode retrieval_mode_from_name(const std::string& s) {
    if (s == "topk") return RetrievalMode::kTopk;
    if (s == "random") return RetrievalMode::kRandom;
    if (s == "none") return RetrievalMode::kNone;
    throw ValueError("unknown retrieval mode '" + s +
                     "' (want topk|random|none)");
}
std::string demo_order_name(DemoOrder o) {
    switch (o) {
        case DemoOrder::kNormal: return "normal";
        case DemoOrder::kReverse: return "reverse";
        default: return "shuffle";
    }
}
DemoOrder demo_order_from_name(const std::string& s) {
    if (s == "normal") return DemoOrder::kNormal;
    if (s == "reverse") return DemoOrder::kReverse;
    if (s == "shuffle") return DemoOrder::kShuffle;
    throw ValueError("unknown demo order '" + s +
                     "' (want normal|reverse|shuffle)");
}
std::string arch_name(ArchMode a) {
    return a == ArchMode::kCmr ? "cmr" : "prefix";
}
ArchMode arch_from_name(const std::string& s) {
    if (s == "cmr") return ArchMode::kCmr;
    if (s == "prefix") return ArchMode::kPrefixRag;
    throw ValueError("unknown arch '" + s + "' (want cmr|prefix)");
}
std::string optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::kSgd ? "sgd" : "adam";
}
OptimizerKind optimizer_from_name(const std::string& s) {
    if (s == "sgd") return OptimizerKind::kSgd;
    if (s == "adam") return OptimizerKind::kAdam;
    throw ValueError("unknown optimizer '" + s + "' (want sgd|adam)");
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ValueError("train: epochs must be >= 1");
    if (batch_size == 0) throw ValueError("train: batch_size must be >= 1");
    if (max_retrieval == 0)
        throw ValueError("train: max_retrieval must be >= 1");
    if (mix_fraction < 0.0 || mix_fraction >= 1.0)
        throw ValueError("train: mix_fraction must be in [0, 1)");
    if (learning_rate <= 0.0) throw ValueError("train: learning_rate <= 0");
}

void InferenceConfig::validate() const {
    if (demo_batch_size == 0)
        throw ValueError("infer: demo_batch_size must be >= 1");
    if (max_new == 0) throw ValueError("infer: max_new must be >= 1");
}

// ---- items / ordering ----

std::vector<TrainItem> make_train_items(
    const std::vector<EventInstance>& instances) {
    std::vector<TrainItem> out;
    for (std::size_t i = 0; i < instances.size(); ++i)
        for (std::size_t e = 0; e < instances[i].events.size(); ++e)
            out.push_back(TrainItem{i, e, instances[i].events[e].event_type,
                                    instances[i].doc_id + "#" +
                                        std::to_string(e)});
    return out;
}

std::vector<TrainItem> shuffle_rerank(const std::vector<TrainItem>& items,
                                      std::uint64_t seed, double mix_fraction,
                                      std::size_t batch_size) {
    if (batch_size == 0) throw ValueError("shuffle_rerank: batch_size is 0");
    if (mix_fraction < 0.0 || mix_fraction >= 1.0)
        throw ValueError("shuffle_rerank: mix_fraction must be in [0, 1)");
    Rng rng(seed);
    std::vector<TrainItem> shuffled = items;
    rng.shuffle(shuffled);
    if (shuffled.size() <= batch_size) return shuffled;

    const std::size_t n_other =
        static_cast<std::size_t>(mix_fraction * static_cast<double>(batch_size));
    const std::size_t want_home = batch_size - n_other;
    const std::size_t full_batches = shuffled.size() / batch_size;

    // per-type queues in shuffled order
    std::map<std::string, std::deque<std::size_t>> buckets;
    for (std::size_t i = 0; i < shuffled.size(); ++i)
        buckets[shuffled[i].event_type].push_back(i);

    // plan how many batches each type can anchor, so the home supply never
    // starves before the off-type pool does
    std::map<std::string, std::size_t> quota;
    std::size_t planned = 0;
    while (planned < full_batches) {
        std::string best;
        std::size_t best_spare = 0;
        for (const auto& [type, q] : buckets) {
            std::size_t reserved = quota[type] * want_home;
            std::size_t spare = q.size() > reserved ? q.size() - reserved : 0;
            if (spare >= want_home && spare > best_spare) {
                best_spare = spare;
                best = type;
            }
        }
        if (best.empty()) break;  // degenerate corpus: leftovers mix freely
        ++quota[best];
        ++planned;
    }

    auto pop_front = [&](const std::string& type) {
        std::size_t idx = buckets[type].front();
        buckets[type].pop_front();
        return idx;
    };
    auto spare_of = [&](const std::string& type) {
        std::size_t reserved = quota[type] * want_home;
        std::size_t have = buckets[type].size();
        return have > reserved ? have - reserved : 0;
    };

    // anchor types run in short blocks (two consecutive batches) so the
    // memory a batch inherits mid-cycle was built from its own event type,
    // while the type mix still rotates quickly enough for stable training
    std::vector<std::string> type_order;
    for (const auto& [type, q] : buckets)
        if (quota[type] > 0) type_order.push_back(type);
    rng.shuffle(type_order);

    std::vector<TrainItem> out;
    out.reserve(items.size());
    std::size_t rotor = 0;
    std::size_t emitted = 0;
    while (emitted < planned) {
        const std::string& home = type_order[rotor % type_order.size()];
        ++rotor;
        if (quota[home] == 0) continue;
        // keep one memory cycle's worth of batches on the same type
        const std::size_t cycle_batches =
            std::max<std::size_t>(1, (8 + batch_size - 1) / batch_size);
        const std::size_t run = std::min(cycle_batches, quota[home]);
        for (std::size_t r = 0; r < run; ++r) {
            --quota[home];
            ++emitted;
            for (std::size_t i = 0; i < want_home && !buckets[home].empty();
                 ++i)
                out.push_back(shuffled[pop_front(home)]);
            for (std::size_t i = 0; i < n_other; ++i) {
                // off-type slots drawn uniformly from types with spare items
                std::vector<std::string> eligible;
                for (const auto& [type, q] : buckets)
                    if (type != home && spare_of(type) > 0)
                        eligible.push_back(type);
                if (eligible.empty())
                    for (const auto& [type, q] : buckets)
                        if (type != home && !q.empty())
                            eligible.push_back(type);
                if (eligible.empty() && !buckets[home].empty())
                    eligible.push_back(home);
                if (eligible.empty()) break;
                out.push_back(shuffled[pop_front(
                    eligible[rng.below(eligible.size())])]);
            }
        }
    }
    // unplanned leftovers drain in shuffled order
    std::vector<std::size_t> rest;
    for (const auto& [type, q] : buckets) rest.insert(rest.end(), q.begin(),
                                                      q.end());
    std::sort(rest.begin(), rest.end());
    for (std::size_t idx : rest) out.push_back(shuffled[idx]);
    return out;
}

// ---- optimizer ----

Optimizer::Optimizer(OptimizerKind kind, std::vector<Tensor> params,
                     double clip)
    : kind_(kind), params_(std::move(params)), clip_(clip) {
    if (kind_ == OptimizerKind::kAdam) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), 0.0);
            v_[i].assign(params_[i].size(), 0.0);
        }
    }
}

void Optimizer::step(double lr, double grad_scale) {
    const double inv = 1.0 / grad_scale;
    double sq_norm = 0.0;
    for (Tensor& p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            double s = g * inv;
            sq_norm += s * s;
        }
    }
    double norm = std::sqrt(sq_norm);
    double clip_factor = norm > clip_ ? clip_ / norm : 1.0;
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const auto& grad = p.grad();
        auto& data = p.mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            double g = grad[j] * inv * clip_factor;
            if (kind_ == OptimizerKind::kSgd) {
                data[j] -= lr * g;
            } else {
                m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g;
                v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g * g;
                double mhat = m_[i][j] / bc1;
                double vhat = v_[i][j] / bc2;
                data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
        p.zero_grad();
    }
}

// ---- loss ----

Tensor instance_loss(const Model& model, const FormattedInstance& fmt,
                     const Vocab& vocab, const CompressiveMemory* mem,
                     bool use_memory, std::vector<Tensor>* memory_sources) {
    TokenSeq input_ids = vocab.encode(fmt.input);
    TokenSeq target_ids = vocab.encode(fmt.target);
    target_ids.push_back(vocab.eos());
    if (model.config().variant == Variant::kEncoderDecoder) {
        TokenSeq dec_input;
        dec_input.push_back(vocab.bos());
        dec_input.insert(dec_input.end(), target_ids.begin(),
                         target_ids.end() - 1);
        auto art = model.forward_encdec_with_sources(input_ids, dec_input, mem,
                                                     use_memory);
        if (memory_sources) *memory_sources = art.memory_sources;
        return cross_entropy(art.logits, target_ids);
    }
    TokenSeq seq = input_ids;
    seq.insert(seq.end(), target_ids.begin(), target_ids.end());
    TokenSeq model_input(seq.begin(), seq.end() - 1);
    TokenSeq labels(seq.begin() + 1, seq.end());
    std::vector<bool> ignore(labels.size(), false);
    for (std::size_t i = 0; i + 1 < input_ids.size(); ++i) ignore[i] = true;
    auto art =
        model.forward_deconly_with_sources(model_input, mem, use_memory);
    if (memory_sources) *memory_sources = art.memory_sources;
    return cross_entropy(art.logits, labels, ignore);
}

// ---- training (Algorithm 1) ----

TrainResult train(Model& model, const std::vector<EventInstance>& data,
                  const Ontology& ontology, const Vocab& vocab,
                  const TrainConfig& cfg, const RetrievalIndex* prefix_index,
                  const TrainProbe* probe) {
    cfg.validate();
    if (data.empty()) throw ValueError("train: no training data");
    if (cfg.arch == ArchMode::kPrefixRag && prefix_index == nullptr)
        throw ValueError("train: prefix-RAG arch needs a retrieval index");

    std::vector<TrainItem> items = make_train_items(data);
    std::vector<Tensor> params = model.parameters();
    for (Tensor& p : params) p.set_requires_grad(true);
    Optimizer opt(cfg.optimizer, params, cfg.grad_clip);

    // top-1 prefix per item, fixed for the whole run (embeddings are static)
    std::vector<std::vector<std::string>> prefix_words(items.size());
    if (cfg.arch == ArchMode::kPrefixRag) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            const EventInstance& inst = data[items[i].instance_idx];
            auto got = retrieve_topk(
                *prefix_index,
                format_instance(inst, items[i].event_idx, ontology).input, 1,
                items[i].item_id);
            if (!got.empty())
                prefix_words[i] = prefix_index->entry(got[0]).words;
        }
    }
    std::map<std::string, std::size_t> item_slot;
    for (std::size_t i = 0; i < items.size(); ++i) item_slot[items[i].item_id] = i;

    const std::size_t cycle_len =
        cfg.arch == ArchMode::kCmr ? cfg.max_retrieval : cfg.grad_accum_steps;
    const std::size_t total_instances = cfg.epochs * items.size();
    const std::size_t planned_updates =
        std::max<std::size_t>(1, total_instances / cycle_len);
    const std::size_t warmup_updates = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg.warmup_ratio *
                                    static_cast<double>(planned_updates)));
    auto lr_at = [&](std::size_t update_idx) {
        double w = static_cast<double>(update_idx + 1) /
                   static_cast<double>(warmup_updates);
        return cfg.learning_rate * std::min(1.0, w);
    };

    TrainResult result;
    CompressiveMemory mem = model.make_memory();
    std::size_t counter = 1;  // Alg. 1's t
    std::size_t cycle_id = 0;
    std::size_t accum = 0;
    std::size_t step = 0;
    bool first = true;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::uint64_t epoch_seed =
            cfg.seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1));
        std::vector<TrainItem> order = shuffle_rerank(
            items, epoch_seed, cfg.mix_fraction, cfg.batch_size);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            std::vector<CompressiveMemory> deltas;
            for (std::size_t i = b0; i < b1; ++i) {
                const TrainItem& item = order[i];
                const EventInstance& inst = data[item.instance_idx];
                FormattedInstance fmt =
                    format_instance(inst, item.event_idx, ontology);
                if (cfg.arch == ArchMode::kPrefixRag) {
                    fmt.input = build_prefix_input(
                        inst, item.event_idx,
                        prefix_words[item_slot.at(item.item_id)], ontology,
                        model.config().max_seq_len);
                }
                Tape tape;
                std::vector<Tensor> sources;
                const bool use_mem = cfg.arch == ArchMode::kCmr;
                Tensor loss =
                    instance_loss(model, fmt, vocab, use_mem ? &mem : nullptr,
                                  use_mem, use_mem ? &sources : nullptr);
                double loss_v = loss.value();
                if (!std::isfinite(loss_v))
                    throw NumericError("train: non-finite loss at step " +
                                       std::to_string(step + 1) + " (item " +
                                       item.item_id + ")");
                tape.backward(loss);
                ++accum;
                if (first) {
                    result.initial_loss = loss_v;
                    first = false;
                }
                result.final_loss = loss_v;
                if (use_mem) {
                    deltas.push_back(model.delta_from_sources(sources));
                    if (probe && probe->on_delta) probe->on_delta(deltas.back());
                }
                ++step;
                result.log.push_back(StepLogRow{step, loss_v,
                                                lr_at(opt.updates()),
                                                mem.stored_count(), cycle_id});
                ++counter;
            }
            if (cfg.arch == ArchMode::kCmr) {
                const double factor = cfg.combine == CombineMode::kMean
                                          ? 1.0 / static_cast<double>(deltas.size())
                                          : 1.0;
                for (const CompressiveMemory& d : deltas)
                    mem.add_scaled(d, factor);
                if (probe && probe->on_batch) probe->on_batch(mem, counter);
            }
            if (counter > cycle_len) {
                mem.reset();
                counter = 1;
                ++cycle_id;
                if (probe && probe->on_reset) probe->on_reset();
                opt.step(lr_at(opt.updates()), static_cast<double>(accum));
                accum = 0;
                model.set_step(model.step() + 1);
            }
        }
    }
    result.updates = opt.updates();
    for (Tensor& p : params) {
        p.zero_grad();
        p.set_requires_grad(false);
    }
    return result;
}

// ---- preloading (Algorithm 2) ----

CompressiveMemory preload_demos(const Model& model,
                                const std::vector<TokenSeq>& demos,
                                std::size_t demo_batch_size,
                                CombineMode combine) {
    if (demo_batch_size == 0)
        throw ValueError("preload_demos: demo_batch_size must be >= 1");
    CompressiveMemory mem = model.make_memory();
    for (std::size_t b0 = 0; b0 < demos.size(); b0 += demo_batch_size) {
        const std::size_t b1 = std::min(demos.size(), b0 + demo_batch_size);
        std::vector<CompressiveMemory> deltas(b1 - b0);
        // deltas are independent (zero base), so the batch can run in
        // parallel; combination below stays in index order
#pragma omp parallel for schedule(dynamic) if (b1 - b0 > 1)
        for (long long i = 0; i < static_cast<long long>(b1 - b0); ++i) {
            CompressiveMemory d = model.make_memory();
            model.store_instance(demos[b0 + static_cast<std::size_t>(i)], d);
            deltas[static_cast<std::size_t>(i)] = std::move(d);
        }
        const double factor = combine == CombineMode::kMean
                                  ? 1.0 / static_cast<double>(deltas.size())
                                  : 1.0;
        for (const CompressiveMemory& d : deltas) mem.add_scaled(d, factor);
    }
    return mem;
}

// ---- prefix baseline input ----

std::vector<std::string> build_prefix_input(
    const EventInstance& query, std::size_t event_index,
    const std::vector<std::string>& candidate_words, const Ontology& ontology,
    std::size_t max_seq_len) {
    std::vector<std::string> prompt = prompt_tokens(
        ontology, query.events.at(event_index).event_type);
    std::vector<std::string> context = marked_context(query, event_index);

    std::vector<std::string> out;
    out.push_back(tok::kSentOpen);
    out.insert(out.end(), candidate_words.begin(), candidate_words.end());
    out.push_back(tok::kSentClose);
    out.push_back(tok::kSentOpen);
    out.insert(out.end(), prompt.begin(), prompt.end());
    out.push_back(tok::kSentClose);

    const std::size_t fixed = out.size() + 1;  // + [EOS]
    if (fixed > max_seq_len)
        throw ValueError("build_prefix_input: prefix and prompt alone exceed "
                         "max_seq_len");
    std::size_t room = max_seq_len - fixed;
    if (context.size() > room) context.resize(room);  // drop context tail
    out.insert(out.end(), context.begin(), context.end());
    out.push_back(tok::kInputEos);
    return out;
}

// ---- index / inference ----

RetrievalIndex build_index(const std::vector<EventInstance>& corpus,
                           const Ontology& ontology,
                           std::size_t embedding_dim) {
    RetrievalIndex index(embedding_dim, ProviderKind::kHashedBow);
    for (const EventInstance& inst : corpus)
        for (std::size_t e = 0; e < inst.events.size(); ++e)
            index.add(inst.doc_id + "#" + std::to_string(e),
                      format_instance(inst, e, ontology).input,
                      inst.events[e].event_type);
    return index;
}

InferOutput infer(const Model& model, const EventInstance& query,
                  std::size_t event_index, const RetrievalIndex& index,
                  const Ontology& ontology, const Vocab& vocab,
                  const InferenceConfig& cfg) {
    cfg.validate();
    auto t0 = Clock::now();
    FormattedInstance fmt = format_instance(query, event_index, ontology);
    const std::string self_id =
        query.doc_id + "#" + std::to_string(event_index);

    std::vector<std::string> demo_ids;
    switch (cfg.retrieval_mode) {
        case RetrievalMode::kTopk:
            demo_ids = retrieve_topk(index, fmt.input, cfg.k, self_id);
            break;
        case RetrievalMode::kRandom:
            demo_ids = retrieve_random(index, cfg.k, cfg.seed, self_id);
            break;
        case RetrievalMode::kNone:
            break;
    }
    switch (cfg.demo_order) {
        case DemoOrder::kReverse:
            std::reverse(demo_ids.begin(), demo_ids.end());
            break;
        case DemoOrder::kShuffle: {
            Rng rng(cfg.seed);
            rng.shuffle(demo_ids);
            break;
        }
        case DemoOrder::kNormal:
            break;
    }

    InferOutput out;
    out.demo_ids = demo_ids;
    TokenSeq generated;
    if (cfg.arch == ArchMode::kPrefixRag) {
        std::vector<std::string> cand;
        if (!demo_ids.empty()) cand = index.entry(demo_ids[0]).words;
        std::vector<std::string> input_words = build_prefix_input(
            query, event_index, cand, ontology, model.config().max_seq_len);
        out.memory = model.make_memory();
        generated = model.greedy_decode(vocab.encode(input_words), nullptr,
                                        false, cfg.max_new, vocab.bos(),
                                        vocab.eos());
    } else {
        std::vector<TokenSeq> demo_seqs;
        demo_seqs.reserve(demo_ids.size());
        for (const std::string& id : demo_ids) {
            TokenSeq seq = vocab.encode(index.entry(id).words);
            if (cfg.store_predictions) {
                NoGrad guard;
                TokenSeq pred_toks =
                    model.greedy_decode(seq, nullptr, false, cfg.max_new,
                                        vocab.bos(), vocab.eos());
                seq.insert(seq.end(), pred_toks.begin(), pred_toks.end());
                if (seq.size() > model.config().max_seq_len)
                    seq.resize(model.config().max_seq_len);
            }
            demo_seqs.push_back(std::move(seq));
        }
        out.memory =
            preload_demos(model, demo_seqs, cfg.demo_batch_size, cfg.combine);
        generated = model.greedy_decode(vocab.encode(fmt.input), &out.memory,
                                        true, cfg.max_new, vocab.bos(),
                                        vocab.eos());
    }
    out.generated_words = vocab.decode(generated);
    out.pred = parse_prediction(out.generated_words, ontology,
                                query.events.at(event_index).event_type);
    out.wall_ms = elapsed_ms(t0);
    return out;
}

EvalRunResult run_eval(const Model& model,
                       const std::vector<EventInstance>& test_set,
                       const RetrievalIndex& index, const Ontology& ontology,
                       const Vocab& vocab, const InferenceConfig& cfg) {
    EvalRunResult out;
    auto t0 = Clock::now();
    for (const EventInstance& inst : test_set) {
        for (std::size_t e = 0; e < inst.events.size(); ++e) {
            InferOutput io = infer(model, inst, e, index, ontology, vocab, cfg);
            out.predictions.push_back(PredRecord{inst.doc_id, e, io.pred});
            out.generated.push_back(io.generated_words);
        }
    }
    out.wall_ms_total = elapsed_ms(t0);
    out.report = evaluate(out.predictions, test_set, ontology);
    return out;
}

}  // namespace cmr
