#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmr/memory.hpp"
#include "cmr/tensor.hpp"

namespace cmr {

enum class Variant { kEncoderDecoder, kDecoderOnly };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
    Variant variant = Variant::kEncoderDecoder;
    std::size_t d_model = 32;
    std::size_t num_heads = 4;
    std::size_t num_layers = 2;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 224;
    std::size_t feed_forward_dim = 64;
    std::uint64_t seed = 1;
    bool tie_embedding = false;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct FeedForwardParams {
    Tensor w1;  // [d_model x ff]
    Tensor w2;  // [ff x d_model]
};

struct EncoderLayer {
    LayerNormParams ln1;
    AttentionParams self_attn;
    LayerNormParams ln2;
    FeedForwardParams ff;
};

struct DecoderLayer {
    LayerNormParams ln1;
    AttentionParams self_attn;   // causal, vanilla
    LayerNormParams ln2;
    AttentionParams cross_attn;  // CMR site (encoder-decoder variant)
    LayerNormParams ln3;
    FeedForwardParams ff;
};

struct DecOnlyLayer {
    LayerNormParams ln1;
    AttentionParams attn;  // CMR site (decoder-only variant)
    LayerNormParams ln2;
    FeedForwardParams ff;
};

/// Pre-layer-norm transformer with the compressive-memory retrieval fused
/// into the decoder cross-attention (encoder-decoder) or the causal
/// self-attention (decoder-only). Sinusoidal positions, no biases in the
/// projections, untied output head unless configured otherwise.
class Model {
  public:
    explicit Model(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::size_t d_k() const { return config_.d_model / config_.num_heads; }

    /// All trainable tensors in a fixed declaration order; this order is
    /// also the checkpoint serialization order.
    std::vector<Tensor> parameters() const;
    std::size_t num_parameters() const;

    /// Encoder stack output for a token sequence (encoder-decoder only).
    Tensor encode(const TokenSeq& input) const;

    /// Decoder pass against a precomputed encoder output.
    Tensor decode(const Tensor& enc_out, const TokenSeq& decoder_input,
                  const CompressiveMemory* mem, bool use_memory) const;

    /// Full encoder-decoder forward returning [T x V] logits.
    Tensor forward_encdec(const TokenSeq& input, const TokenSeq& decoder_input,
                          const CompressiveMemory* mem, bool use_memory) const;

    /// Decoder-only causal forward returning [T x V] logits.
    Tensor forward_deconly(const TokenSeq& tokens, const CompressiveMemory* mem,
                           bool use_memory) const;

    struct ForwardArtifacts {
        Tensor logits;
        /// Tensors whose keys/values the CMR sites consume: the encoder
        /// output (encoder-decoder) or each layer's attention input
        /// (decoder-only).
        std::vector<Tensor> memory_sources;
    };

    ForwardArtifacts forward_encdec_with_sources(
        const TokenSeq& input, const TokenSeq& decoder_input,
        const CompressiveMemory* mem, bool use_memory) const;
    ForwardArtifacts forward_deconly_with_sources(
        const TokenSeq& tokens, const CompressiveMemory* mem,
        bool use_memory) const;

    /// Single-demonstration memory delta built from already-computed source
    /// sequences (values only, no graph).
    CompressiveMemory delta_from_sources(
        const std::vector<Tensor>& sources) const;

    /// Zero memory matching this model's CMR sites.
    CompressiveMemory make_memory() const;

    /// Feeds one demonstration through the model with memory reads disabled
    /// and folds its keys/values into every CMR site. Model outputs are
    /// discarded; parameters are untouched; stored_count grows by one.
    void store_instance(const TokenSeq& tokens, CompressiveMemory& mem) const;

    /// Deterministic argmax decoding until `eos` or max_new tokens.
    /// Returns generated tokens, excluding the end token.
    TokenSeq greedy_decode(const TokenSeq& input, const CompressiveMemory* mem,
                           bool use_memory, std::size_t max_new, TokenId bos,
                           TokenId eos) const;

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    void save(std::ostream& os) const;
    static Model load(std::istream& is);

  private:
    Tensor embed_with_positions(const TokenSeq& tokens) const;
    Tensor output_logits(const Tensor& hidden) const;
    Tensor attention_block(const Tensor& q_in, const Tensor& kv_in,
                           const AttentionParams& params, bool causal,
                           const CompressiveMemory* mem, std::size_t layer,
                           bool use_memory) const;
    Tensor feed_forward(const Tensor& x, const FeedForwardParams& ff) const;
    Tensor deconly_hidden(const TokenSeq& tokens, const CompressiveMemory* mem,
                          bool use_memory,
                          std::vector<Tensor>* attn_inputs) const;
    void check_tokens(const TokenSeq& tokens) const;

    ModelConfig config_;
    Tensor embedding_;  // [V x d_model]
    std::vector<EncoderLayer> enc_layers_;
    LayerNormParams enc_final_ln_;
    std::vector<DecoderLayer> dec_layers_;
    std::vector<DecOnlyLayer> deconly_layers_;
    LayerNormParams final_ln_;
    Tensor w_out_;  // [d_model x V] when not tied
    Tensor positional_;  // [max_seq_len x d_model], constant
    std::uint64_t step_ = 0;
};

}  // namespace cmr
