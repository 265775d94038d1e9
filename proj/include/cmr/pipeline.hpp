#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmr/data.hpp"
#include "cmr/model.hpp"
#include "cmr/retriever.hpp"

namespace cmr {

enum class CombineMode { kMean, kSum };
enum class RetrievalMode { kTopk, kRandom, kNone };
enum class DemoOrder { kNormal, kReverse, kShuffle };
enum class ArchMode { kCmr, kPrefixRag };
enum class OptimizerKind { kSgd, kAdam };

std::string combine_name(CombineMode m);
CombineMode combine_from_name(const std::string& s);
std::string retrieval_mode_name(RetrievalMode m);
RetrievalMode retrieval_mode_from_name(const std::string& s);
std::string demo_order_name(DemoOrder o);
DemoOrder demo_order_from_name(const std::string& s);
std::string arch_name(ArchMode a);
ArchMode arch_from_name(const std::string& s);
std::string optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& s);

struct TrainConfig {
    std::size_t epochs = 4;
    std::size_t batch_size = 4;
    std::size_t grad_accum_steps = 8;
    std::size_t max_retrieval = 8;
    double learning_rate = 1e-3;
    double warmup_ratio = 0.1;
    double grad_clip = 1.0;
    std::uint64_t seed = 1;
    double mix_fraction = 0.2;
    CombineMode combine = CombineMode::kMean;
    ArchMode arch = ArchMode::kCmr;
    OptimizerKind optimizer = OptimizerKind::kSgd;

    void validate() const;
};

struct InferenceConfig {
    std::size_t k = 0;
    std::size_t demo_batch_size = 4;
    RetrievalMode retrieval_mode = RetrievalMode::kTopk;
    DemoOrder demo_order = DemoOrder::kNormal;
    std::uint64_t seed = 1;
    CombineMode combine = CombineMode::kMean;
    ArchMode arch = ArchMode::kCmr;
    bool store_predictions = false;
    std::size_t max_new = 32;

    void validate() const;
};

/// One trainable unit: an (instance, event) pair.
struct TrainItem {
    std::size_t instance_idx = 0;
    std::size_t event_idx = 0;
    std::string event_type;
    std::string item_id;  // "<doc_id>#<event_idx>"
};

std::vector<TrainItem> make_train_items(
    const std::vector<EventInstance>& instances);

/// Epoch ordering: shuffle, then group into batches where each full batch
/// draws at least (1 - mix_fraction) of its members from one event type,
/// remaining slots filled from other types. Output is a permutation of the
/// input; deterministic per seed. Degenerate corpora fall back to plain
/// shuffled order.
std::vector<TrainItem> shuffle_rerank(const std::vector<TrainItem>& items,
                                      std::uint64_t seed, double mix_fraction,
                                      std::size_t batch_size);

struct StepLogRow {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    std::uint32_t stored_count = 0;
    std::size_t cycle_id = 0;
};

/// Test observer for memory/counter trajectories.
struct TrainProbe {
    std::function<void(const CompressiveMemory&)> on_delta;
    std::function<void(const CompressiveMemory&, std::size_t)> on_batch;
    std::function<void()> on_reset;
};

struct TrainResult {
    std::vector<StepLogRow> log;
    double initial_loss = 0;
    double final_loss = 0;
    std::size_t updates = 0;
};

/// Per-parameter-update optimizer with global-norm gradient clipping.
/// Adam is available behind the config switch; SGD is the default.
class Optimizer {
  public:
    Optimizer(OptimizerKind kind, std::vector<Tensor> params, double clip);
    /// Scales accumulated grads by 1/grad_scale, clips, updates, zeroes.
    void step(double lr, double grad_scale);
    std::size_t updates() const { return t_; }

  private:
    OptimizerKind kind_;
    std::vector<Tensor> params_;
    double clip_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Training loop: memory cycles and per-cycle parameter updates for the CMR
/// arch; plain gradient accumulation with a top-1 retrieved prefix for the
/// prefix-RAG baseline. `prefix_index`, required for the baseline, is the
/// training-set retrieval index.
TrainResult train(Model& model, const std::vector<EventInstance>& data,
                  const Ontology& ontology, const Vocab& vocab,
                  const TrainConfig& cfg,
                  const RetrievalIndex* prefix_index = nullptr,
                  const TrainProbe* probe = nullptr);

/// Batched demonstration preloading: per batch, every delta is computed
/// independently from a zero base, then folded into the running memory in
/// index order (mean or sum). Demos inside a batch may be evaluated
/// concurrently.
CompressiveMemory preload_demos(const Model& model,
                                const std::vector<TokenSeq>& demos,
                                std::size_t demo_batch_size,
                                CombineMode combine);

/// <s> s_R </s> <s> P </s> context [EOS]; context tail is truncated first
/// when the result exceeds max_seq_len, never the prefix or prompt.
std::vector<std::string> build_prefix_input(
    const EventInstance& query, std::size_t event_index,
    const std::vector<std::string>& candidate_words, const Ontology& ontology,
    std::size_t max_seq_len);

/// Retrieval index over a corpus; candidate text is the formatted input of
/// each (instance, event) so the embedded text matches what the model sees.
RetrievalIndex build_index(const std::vector<EventInstance>& corpus,
                           const Ontology& ontology,
                           std::size_t embedding_dim = 256);

struct InferOutput {
    Prediction pred;
    std::vector<std::string> generated_words;
    CompressiveMemory memory;
    std::vector<std::string> demo_ids;
    double wall_ms = 0;
};

InferOutput infer(const Model& model, const EventInstance& query,
                  std::size_t event_index, const RetrievalIndex& index,
                  const Ontology& ontology, const Vocab& vocab,
                  const InferenceConfig& cfg);

struct EvalRunResult {
    MetricReport report;
    std::vector<PredRecord> predictions;
    std::vector<std::vector<std::string>> generated;  // aligned with predictions
    double wall_ms_total = 0;
};

EvalRunResult run_eval(const Model& model,
                       const std::vector<EventInstance>& test_set,
                       const RetrievalIndex& index, const Ontology& ontology,
                       const Vocab& vocab, const InferenceConfig& cfg);

/// Per-instance loss used by both training and diagnostics. Builds the
/// graph when a tape is active.
Tensor instance_loss(const Model& model, const FormattedInstance& fmt,
                     const Vocab& vocab, const CompressiveMemory* mem,
                     bool use_memory,
                     std::vector<Tensor>* memory_sources = nullptr);

}  // namespace cmr
