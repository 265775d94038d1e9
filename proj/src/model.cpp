#include "cmr/model.hpp"

#include <cmath>

#include <json.hpp>

#include "cmr/serialize.hpp"

namespace cmr {

namespace {

LayerNormParams init_ln(std::size_t d) {
    return {Tensor::full({d}, 1.0), Tensor::zeros({d})};
}

FeedForwardParams init_ff(std::size_t d, std::size_t ff, Rng& rng) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(ff));
    return {Tensor::randn({d, ff}, rng, s1), Tensor::randn({ff, d}, rng, s2)};
}

void push_ln(std::vector<Tensor>& out, const LayerNormParams& ln) {
    out.push_back(ln.gain);
    out.push_back(ln.bias);
}

void push_heads(std::vector<Tensor>& out, const AttentionParams& p) {
    for (const HeadParams& h : p.heads) {
        out.push_back(h.w_q);
        out.push_back(h.w_k);
        out.push_back(h.w_v);
    }
}

void push_ff(std::vector<Tensor>& out, const FeedForwardParams& ff) {
    out.push_back(ff.w1);
    out.push_back(ff.w2);
}

}  // namespace

std::string variant_name(Variant v) {
    return v == Variant::kEncoderDecoder ? "encdec" : "deconly";
}

Variant variant_from_name(const std::string& name) {
    if (name == "encdec") return Variant::kEncoderDecoder;
    if (name == "deconly") return Variant::kDecoderOnly;
    throw ValueError("unknown variant '" + name + "' (want encdec|deconly)");
}

void ModelConfig::validate() const {
    if (num_heads == 0 || d_model % num_heads != 0)
        throw ValueError("ModelConfig: d_model must be divisible by num_heads");
    if (vocab_size == 0) throw ValueError("ModelConfig: vocab_size is zero");
    if (num_layers == 0) throw ValueError("ModelConfig: num_layers is zero");
    if (max_seq_len == 0) throw ValueError("ModelConfig: max_seq_len is zero");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["variant"] = variant_name(variant);
    j["d_model"] = d_model;
    j["num_heads"] = num_heads;
    j["num_layers"] = num_layers;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["feed_forward_dim"] = feed_forward_dim;
    j["seed"] = seed;
    j["tie_embedding"] = tie_embedding;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.d_model = j.at("d_model").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.feed_forward_dim = j.at("feed_forward_dim").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.tie_embedding = j.at("tie_embedding").get<bool>();
    return c;
}

Model::Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const std::size_t d = config_.d_model;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    embedding_ = Tensor::randn({config_.vocab_size, d}, rng, emb_std);

    if (config_.variant == Variant::kEncoderDecoder) {
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            EncoderLayer el;
            el.ln1 = init_ln(d);
            el.self_attn = AttentionParams::init(d, config_.num_heads, rng);
            el.ln2 = init_ln(d);
            el.ff = init_ff(d, config_.feed_forward_dim, rng);
            enc_layers_.push_back(std::move(el));
        }
        enc_final_ln_ = init_ln(d);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            DecoderLayer dl;
            dl.ln1 = init_ln(d);
            dl.self_attn = AttentionParams::init(d, config_.num_heads, rng);
            dl.ln2 = init_ln(d);
            dl.cross_attn = AttentionParams::init(d, config_.num_heads, rng);
            dl.ln3 = init_ln(d);
            dl.ff = init_ff(d, config_.feed_forward_dim, rng);
            dec_layers_.push_back(std::move(dl));
        }
    } else {
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            DecOnlyLayer dl;
            dl.ln1 = init_ln(d);
            dl.attn = AttentionParams::init(d, config_.num_heads, rng);
            dl.ln2 = init_ln(d);
            dl.ff = init_ff(d, config_.feed_forward_dim, rng);
            deconly_layers_.push_back(std::move(dl));
        }
    }
    final_ln_ = init_ln(d);
    if (!config_.tie_embedding) {
        w_out_ = Tensor::randn({d, config_.vocab_size}, rng, emb_std);
    }

    // fixed sinusoidal position table
    positional_ = Tensor::zeros({config_.max_seq_len, d});
    auto& pd = positional_.mutable_data();
    for (std::size_t pos = 0; pos < config_.max_seq_len; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(i) /
                                                 static_cast<double>(d));
            pd[pos * d + i] = std::sin(angle);
            if (i + 1 < d) pd[pos * d + i + 1] = std::cos(angle);
        }
    }
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    out.push_back(embedding_);
    for (const EncoderLayer& el : enc_layers_) {
        push_ln(out, el.ln1);
        push_heads(out, el.self_attn);
        push_ln(out, el.ln2);
        push_ff(out, el.ff);
    }
    if (config_.variant == Variant::kEncoderDecoder) {
        push_ln(out, enc_final_ln_);
    }
    for (const DecoderLayer& dl : dec_layers_) {
        push_ln(out, dl.ln1);
        push_heads(out, dl.self_attn);
        push_ln(out, dl.ln2);
        push_heads(out, dl.cross_attn);
        out.push_back(dl.cross_attn.gamma);  // CMR gating scalar
        push_ln(out, dl.ln3);
        push_ff(out, dl.ff);
    }
    for (const DecOnlyLayer& dl : deconly_layers_) {
        push_ln(out, dl.ln1);
        push_heads(out, dl.attn);
        out.push_back(dl.attn.gamma);  // CMR gating scalar
        push_ln(out, dl.ln2);
        push_ff(out, dl.ff);
    }
    push_ln(out, final_ln_);
    if (!config_.tie_embedding) out.push_back(w_out_);
    return out;
}

std::size_t Model::num_parameters() const {
    std::size_t n = 0;
    for (const Tensor& t : parameters()) n += t.size();
    return n;
}

void Model::check_tokens(const TokenSeq& tokens) const {
    if (tokens.size() > config_.max_seq_len)
        throw ValueError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
    for (TokenId id : tokens)
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
            throw ValueError("token id " + std::to_string(id) +
                             " out of range [0, " +
                             std::to_string(config_.vocab_size) + ")");
}

Tensor Model::embed_with_positions(const TokenSeq& tokens) const {
    check_tokens(tokens);
    Tensor x = embed_rows(embedding_, tokens);
    const std::size_t n = tokens.size(), d = config_.d_model;
    std::vector<double> pe(n * d);
    std::copy_n(positional_.data().begin(), n * d, pe.begin());
    return add(x, Tensor::from_data({n, d}, std::move(pe)));
}

Tensor Model::feed_forward(const Tensor& x, const FeedForwardParams& ff) const {
    return matmul(elu_plus_one(matmul(x, ff.w1)), ff.w2);
}

Tensor Model::attention_block(const Tensor& q_in, const Tensor& kv_in,
                              const AttentionParams& params, bool causal,
                              const CompressiveMemory* mem, std::size_t layer,
                              bool use_memory) const {
    const double inv_scale =
        1.0 / std::sqrt(static_cast<double>(params.d_model()));
    std::vector<Tensor> outs;
    outs.reserve(params.heads.size());
    for (std::size_t h = 0; h < params.heads.size(); ++h) {
        const HeadParams& hp = params.heads[h];
        Tensor q = matmul(q_in, hp.w_q);
        Tensor k = matmul(kv_in, hp.w_k);
        Tensor v = matmul(kv_in, hp.w_v);
        Tensor scores = scale(matmul_nt(q, k), inv_scale);
        Tensor attn = causal ? causal_row_softmax(scores) : row_softmax(scores);
        Tensor a_dot = matmul(attn, v);
        if (use_memory) {
            Tensor a_ret = memory_retrieve(*mem, layer, h, q);
            outs.push_back(gated_combine(a_ret, a_dot, params.gamma));
        } else {
            outs.push_back(a_dot);
        }
    }
    return concat_cols(outs);
}

Tensor Model::encode(const TokenSeq& input) const {
    if (config_.variant != Variant::kEncoderDecoder)
        throw ValueError("encode: model is not encoder-decoder");
    Tensor h = embed_with_positions(input);
    for (const EncoderLayer& el : enc_layers_) {
        Tensor a_in = layer_norm(h, el.ln1.gain, el.ln1.bias);
        h = add(h, attention_block(a_in, a_in, el.self_attn, false, nullptr, 0,
                                   false));
        Tensor f_in = layer_norm(h, el.ln2.gain, el.ln2.bias);
        h = add(h, feed_forward(f_in, el.ff));
    }
    return layer_norm(h, enc_final_ln_.gain, enc_final_ln_.bias);
}

Tensor Model::decode(const Tensor& enc_out, const TokenSeq& decoder_input,
                     const CompressiveMemory* mem, bool use_memory) const {
    if (use_memory && mem == nullptr)
        throw ValueError("decode: use_memory set but no memory given");
    Tensor h = embed_with_positions(decoder_input);
    for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
        const DecoderLayer& dl = dec_layers_[l];
        Tensor s_in = layer_norm(h, dl.ln1.gain, dl.ln1.bias);
        h = add(h, attention_block(s_in, s_in, dl.self_attn, true, nullptr, 0,
                                   false));
        Tensor c_in = layer_norm(h, dl.ln2.gain, dl.ln2.bias);
        h = add(h, attention_block(c_in, enc_out, dl.cross_attn, false, mem, l,
                                   use_memory));
        Tensor f_in = layer_norm(h, dl.ln3.gain, dl.ln3.bias);
        h = add(h, feed_forward(f_in, dl.ff));
    }
    return output_logits(layer_norm(h, final_ln_.gain, final_ln_.bias));
}

Tensor Model::output_logits(const Tensor& hidden) const {
    if (config_.tie_embedding) return matmul_nt(hidden, embedding_);
    return matmul(hidden, w_out_);
}

Tensor Model::forward_encdec(const TokenSeq& input,
                             const TokenSeq& decoder_input,
                             const CompressiveMemory* mem,
                             bool use_memory) const {
    return decode(encode(input), decoder_input, mem, use_memory);
}

Tensor Model::deconly_hidden(const TokenSeq& tokens,
                             const CompressiveMemory* mem, bool use_memory,
                             std::vector<Tensor>* attn_inputs) const {
    if (use_memory && mem == nullptr)
        throw ValueError("forward: use_memory set but no memory given");
    Tensor h = embed_with_positions(tokens);
    for (std::size_t l = 0; l < deconly_layers_.size(); ++l) {
        const DecOnlyLayer& dl = deconly_layers_[l];
        Tensor a_in = layer_norm(h, dl.ln1.gain, dl.ln1.bias);
        if (attn_inputs) attn_inputs->push_back(a_in);
        h = add(h, attention_block(a_in, a_in, dl.attn, true, mem, l,
                                   use_memory));
        Tensor f_in = layer_norm(h, dl.ln2.gain, dl.ln2.bias);
        h = add(h, feed_forward(f_in, dl.ff));
    }
    return layer_norm(h, final_ln_.gain, final_ln_.bias);
}

Tensor Model::forward_deconly(const TokenSeq& tokens,
                              const CompressiveMemory* mem,
                              bool use_memory) const {
    if (config_.variant != Variant::kDecoderOnly)
        throw ValueError("forward_deconly: model is not decoder-only");
    return output_logits(deconly_hidden(tokens, mem, use_memory, nullptr));
}

Model::ForwardArtifacts Model::forward_encdec_with_sources(
    const TokenSeq& input, const TokenSeq& decoder_input,
    const CompressiveMemory* mem, bool use_memory) const {
    Tensor enc_out = encode(input);
    Tensor logits = decode(enc_out, decoder_input, mem, use_memory);
    return {std::move(logits), {std::move(enc_out)}};
}

Model::ForwardArtifacts Model::forward_deconly_with_sources(
    const TokenSeq& tokens, const CompressiveMemory* mem,
    bool use_memory) const {
    std::vector<Tensor> sources;
    Tensor h = deconly_hidden(tokens, mem, use_memory, &sources);
    return {output_logits(h), std::move(sources)};
}

CompressiveMemory Model::delta_from_sources(
    const std::vector<Tensor>& sources) const {
    NoGrad guard;
    CompressiveMemory delta = make_memory();
    if (config_.variant == Variant::kEncoderDecoder) {
        Tensor enc = sources.at(0).detached();
        for (std::size_t l = 0; l < dec_layers_.size(); ++l)
            memory_update_layer(delta, l, dec_layers_[l].cross_attn, enc);
    } else {
        if (sources.size() != deconly_layers_.size())
            throw ValueError("delta_from_sources: need one source per layer");
        for (std::size_t l = 0; l < deconly_layers_.size(); ++l)
            memory_update_layer(delta, l, deconly_layers_[l].attn,
                                sources[l].detached());
    }
    delta.note_stored();
    return delta;
}

CompressiveMemory Model::make_memory() const {
    return CompressiveMemory(config_.num_layers, config_.num_heads, d_k(),
                             d_k());
}

void Model::store_instance(const TokenSeq& tokens,
                           CompressiveMemory& mem) const {
    if (tokens.empty())
        throw ValueError("store_instance: empty demonstration");
    NoGrad guard;
    if (config_.variant == Variant::kEncoderDecoder) {
        // Every decoder cross-attention consumes the encoder output, so the
        // memory source is the same sequence for each layer.
        Tensor enc_out = encode(tokens);
        for (std::size_t l = 0; l < dec_layers_.size(); ++l)
            memory_update_layer(mem, l, dec_layers_[l].cross_attn, enc_out);
    } else {
        std::vector<Tensor> attn_inputs;
        deconly_hidden(tokens, nullptr, false, &attn_inputs);
        for (std::size_t l = 0; l < deconly_layers_.size(); ++l)
            memory_update_layer(mem, l, deconly_layers_[l].attn,
                                attn_inputs[l]);
    }
    mem.note_stored();
}

TokenSeq Model::greedy_decode(const TokenSeq& input,
                              const CompressiveMemory* mem, bool use_memory,
                              std::size_t max_new, TokenId bos,
                              TokenId eos) const {
    if (max_new == 0) throw ValueError("greedy_decode: max_new must be >= 1");
    NoGrad guard;
    TokenSeq generated;
    if (config_.variant == Variant::kEncoderDecoder) {
        Tensor enc_out = encode(input);
        TokenSeq dec_input{bos};
        for (std::size_t i = 0; i < max_new; ++i) {
            Tensor logits = decode(enc_out, dec_input, mem, use_memory);
            TokenId next = static_cast<TokenId>(
                argmax_row(logits, logits.rows() - 1));
            if (next == eos) break;
            generated.push_back(next);
            dec_input.push_back(next);
            if (dec_input.size() >= config_.max_seq_len) break;
        }
    } else {
        TokenSeq seq = input;
        for (std::size_t i = 0; i < max_new; ++i) {
            if (seq.size() >= config_.max_seq_len) break;
            Tensor logits = forward_deconly(seq, mem, use_memory);
            TokenId next = static_cast<TokenId>(
                argmax_row(logits, logits.rows() - 1));
            if (next == eos) break;
            generated.push_back(next);
            seq.push_back(next);
        }
    }
    return generated;
}

void Model::save(std::ostream& os) const {
    nlohmann::json j;
    j["format"] = "cmr-checkpoint-v1";
    j["config"] = nlohmann::json::parse(config_.to_json());
    j["step"] = step_;
    std::string header = j.dump();
    write_u32(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Tensor& t : parameters()) write_tensor(os, t);
}

Model Model::load(std::istream& is) {
    std::uint32_t header_len = read_u32(is);
    std::string header(header_len, '\0');
    is.read(header.data(), header_len);
    if (!is) throw IoError("checkpoint: truncated header");
    nlohmann::json j = nlohmann::json::parse(header);
    if (j.at("format").get<std::string>() != "cmr-checkpoint-v1")
        throw IoError("checkpoint: unknown format tag");
    Model m(ModelConfig::from_json(j.at("config").dump()));
    m.step_ = j.at("step").get<std::uint64_t>();
    for (Tensor t : m.parameters()) read_tensor_into(is, t);
    return m;
}

}  // namespace cmr
