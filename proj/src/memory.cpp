#include "cmr/memory.hpp"

#include <cmath>
#include <cstring>

#include "cmr/serialize.hpp"

namespace cmr {

namespace {
double g_eps = 1e-6;
constexpr char kMagic[4] = {'C', 'M', 'R', 'M'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

double retrieval_epsilon() { return g_eps; }
void set_retrieval_epsilon(double eps) { g_eps = eps; }

AttentionParams AttentionParams::init(std::size_t d_model,
                                      std::size_t num_heads, Rng& rng) {
    if (num_heads == 0 || d_model % num_heads != 0)
        throw ValueError("AttentionParams: d_model " + std::to_string(d_model) +
                         " not divisible by num_heads " +
                         std::to_string(num_heads));
    const std::size_t dk = d_model / num_heads;
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(d_model));
    AttentionParams p;
    p.heads.reserve(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h) {
        HeadParams hp;
        hp.w_q = Tensor::randn({d_model, dk}, rng, std_dev);
        hp.w_k = Tensor::randn({d_model, dk}, rng, std_dev);
        hp.w_v = Tensor::randn({d_model, dk}, rng, std_dev);
        p.heads.push_back(std::move(hp));
    }
    p.gamma = Tensor::zeros({1});
    return p;
}

CompressiveMemory::CompressiveMemory(std::size_t num_layers,
                                     std::size_t num_heads, std::size_t d_k,
                                     std::size_t d_v)
    : num_layers_(num_layers), num_heads_(num_heads), d_k_(d_k), d_v_(d_v) {
    m_slots_.reserve(num_layers * num_heads);
    n_slots_.reserve(num_layers * num_heads);
    for (std::size_t i = 0; i < num_layers * num_heads; ++i) {
        m_slots_.push_back(Tensor::zeros({d_k, d_v}));
        n_slots_.push_back(Tensor::zeros({d_k, 1}));
    }
}

std::size_t CompressiveMemory::slot_index(std::size_t layer,
                                          std::size_t head) const {
    if (layer >= num_layers_ || head >= num_heads_)
        throw ValueError("CompressiveMemory: slot (" + std::to_string(layer) +
                         ", " + std::to_string(head) + ") out of range");
    return layer * num_heads_ + head;
}

const Tensor& CompressiveMemory::m(std::size_t layer, std::size_t head) const {
    return m_slots_[slot_index(layer, head)];
}

const Tensor& CompressiveMemory::n(std::size_t layer, std::size_t head) const {
    return n_slots_[slot_index(layer, head)];
}

void CompressiveMemory::set_slot(std::size_t layer, std::size_t head, Tensor m,
                                 Tensor n) {
    std::size_t i = slot_index(layer, head);
    if (m.shape() != m_slots_[i].shape() || n.shape() != n_slots_[i].shape())
        throw ShapeError("CompressiveMemory::set_slot: shape change not allowed");
    m_slots_[i] = std::move(m);
    n_slots_[i] = std::move(n);
}

void CompressiveMemory::reset() {
    for (auto& t : m_slots_) t = Tensor::zeros(t.shape());
    for (auto& t : n_slots_) t = Tensor::zeros(t.shape());
    stored_count_ = 0;
}

void CompressiveMemory::add_scaled(const CompressiveMemory& other,
                                   double factor) {
    if (other.num_layers_ != num_layers_ || other.num_heads_ != num_heads_ ||
        other.d_k_ != d_k_ || other.d_v_ != d_v_)
        throw ShapeError("CompressiveMemory::add_scaled: geometry mismatch");
    for (std::size_t i = 0; i < m_slots_.size(); ++i) {
        std::vector<double> md = m_slots_[i].data();
        const auto& od = other.m_slots_[i].data();
        for (std::size_t j = 0; j < md.size(); ++j) md[j] += factor * od[j];
        m_slots_[i] = Tensor::from_data(m_slots_[i].shape(), std::move(md));

        std::vector<double> nd = n_slots_[i].data();
        const auto& ond = other.n_slots_[i].data();
        for (std::size_t j = 0; j < nd.size(); ++j) nd[j] += factor * ond[j];
        n_slots_[i] = Tensor::from_data(n_slots_[i].shape(), std::move(nd));
    }
    stored_count_ += other.stored_count_;
}

CompressiveMemory CompressiveMemory::clone() const {
    CompressiveMemory c(num_layers_, num_heads_, d_k_, d_v_);
    for (std::size_t i = 0; i < m_slots_.size(); ++i) {
        c.m_slots_[i] = m_slots_[i].detached();
        c.n_slots_[i] = n_slots_[i].detached();
    }
    c.stored_count_ = stored_count_;
    return c;
}

double CompressiveMemory::max_abs_difference(
    const CompressiveMemory& other) const {
    double worst = 0.0;
    for (std::size_t i = 0; i < m_slots_.size(); ++i) {
        const auto& a = m_slots_[i].data();
        const auto& b = other.m_slots_[i].data();
        for (std::size_t j = 0; j < a.size(); ++j)
            worst = std::max(worst, std::abs(a[j] - b[j]));
        const auto& an = n_slots_[i].data();
        const auto& bn = other.n_slots_[i].data();
        for (std::size_t j = 0; j < an.size(); ++j)
            worst = std::max(worst, std::abs(an[j] - bn[j]));
    }
    return worst;
}

void memory_update_layer(CompressiveMemory& mem, std::size_t layer,
                         const AttentionParams& params, const Tensor& x) {
    if (x.shape().size() != 2 || x.cols() != params.d_model())
        throw ShapeError("memory_update: embedding " + shape_str(x.shape()) +
                         " does not match d_model " +
                         std::to_string(params.d_model()));
    if (x.rows() == 0)
        throw ValueError("memory_update: empty demonstration (no tokens)");
    if (params.heads.size() != mem.num_heads() || params.d_k() != mem.d_k() ||
        params.d_v() != mem.d_v())
        throw ShapeError("memory_update: params do not match memory geometry");
    for (std::size_t h = 0; h < params.heads.size(); ++h) {
        const HeadParams& hp = params.heads[h];
        Tensor k = matmul(x, hp.w_k);          // [N x d_k]
        Tensor v = matmul(x, hp.w_v);          // [N x d_v]
        Tensor sk = elu_plus_one(k);           // strictly positive
        Tensor m_delta = matmul_tn(sk, v);     // [d_k x d_v]
        // column sums of sigma(K) as [d_k x 1]
        Tensor ones = Tensor::full({x.rows(), 1}, 1.0);
        Tensor n_delta = matmul_tn(sk, ones);  // [d_k x 1]
        Tensor new_m = add(mem.m(layer, h), m_delta);
        Tensor new_n = add(mem.n(layer, h), n_delta);
        mem.set_slot(layer, h, std::move(new_m), std::move(new_n));
    }
}

void memory_update(CompressiveMemory& mem, const AttentionParams& params,
                   const Tensor& x, std::size_t layer) {
    memory_update_layer(mem, layer, params, x);
    mem.note_stored();
}

Tensor memory_retrieve(const CompressiveMemory& mem, std::size_t layer,
                       std::size_t head, const Tensor& q_proj) {
    if (q_proj.shape().size() != 2 || q_proj.cols() != mem.d_k())
        throw ShapeError("memory_retrieve: query " + shape_str(q_proj.shape()) +
                         " does not match d_k " + std::to_string(mem.d_k()));
    Tensor sq = elu_plus_one(q_proj);                     // [N x d_k]
    Tensor num = matmul(sq, mem.m(layer, head));          // [N x d_v]
    Tensor den = add_const(matmul(sq, mem.n(layer, head)), g_eps);  // [N x 1]
    return div_colvec(num, den);
}

std::vector<Tensor> dot_attention(const Tensor& x_q, const Tensor& x_kv,
                                  const AttentionParams& params, bool causal) {
    const std::size_t dm = params.d_model();
    if (x_q.shape().size() != 2 || x_q.cols() != dm)
        throw ShapeError("dot_attention: query input " +
                         shape_str(x_q.shape()) + " does not match d_model " +
                         std::to_string(dm));
    if (x_kv.shape().size() != 2 || x_kv.cols() != dm)
        throw ShapeError("dot_attention: key/value input " +
                         shape_str(x_kv.shape()) + " does not match d_model " +
                         std::to_string(dm));
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dm));
    std::vector<Tensor> outs;
    outs.reserve(params.heads.size());
    for (const HeadParams& hp : params.heads) {
        Tensor q = matmul(x_q, hp.w_q);
        Tensor k = matmul(x_kv, hp.w_k);
        Tensor v = matmul(x_kv, hp.w_v);
        Tensor scores = scale(matmul_nt(q, k), inv_scale);
        Tensor attn = causal ? causal_row_softmax(scores) : row_softmax(scores);
        outs.push_back(matmul(attn, v));
    }
    return outs;
}

Tensor gated_combine(const Tensor& a_ret, const Tensor& a_dot,
                     const Tensor& gamma) {
    if (a_ret.shape() != a_dot.shape())
        throw ShapeError("gated_combine: shape mismatch: " +
                         shape_str(a_ret.shape()) + " vs " +
                         shape_str(a_dot.shape()));
    Tensor s = sigmoid(gamma);
    Tensor one_minus_s = affine_const(s, -1.0, 1.0);
    return add(scalar_mul(s, a_ret), scalar_mul(one_minus_s, a_dot));
}

void save_memory(std::ostream& os, const CompressiveMemory& mem) {
    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(mem.num_layers()));
    write_u32(os, static_cast<std::uint32_t>(mem.num_heads()));
    write_u32(os, static_cast<std::uint32_t>(mem.d_k()));
    write_u32(os, static_cast<std::uint32_t>(mem.d_v()));
    write_u32(os, mem.stored_count());
    for (std::size_t l = 0; l < mem.num_layers(); ++l) {
        for (std::size_t h = 0; h < mem.num_heads(); ++h) {
            for (double v : mem.m(l, h).data()) write_f64(os, v);
            for (double v : mem.n(l, h).data()) write_f64(os, v);
        }
    }
}

CompressiveMemory load_memory(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("load_memory: bad magic (not a CMRM snapshot)");
    std::uint32_t version = read_u32(is);
    if (version != kFormatVersion)
        throw IoError("load_memory: unsupported format version " +
                      std::to_string(version));
    std::uint32_t layers = read_u32(is);
    std::uint32_t heads = read_u32(is);
    std::uint32_t dk = read_u32(is);
    std::uint32_t dv = read_u32(is);
    std::uint32_t count = read_u32(is);
    CompressiveMemory mem(layers, heads, dk, dv);
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> md(static_cast<std::size_t>(dk) * dv);
            for (double& v : md) v = read_f64(is);
            std::vector<double> nd(dk);
            for (double& v : nd) v = read_f64(is);
            mem.set_slot(l, h,
                         Tensor::from_data({dk, dv}, std::move(md)),
                         Tensor::from_data({dk, 1}, std::move(nd)));
        }
    }
    for (std::uint32_t i = 0; i < count; ++i) mem.note_stored();
    return mem;
}

}  // namespace cmr
