#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <vector>

#include "cmr/tensor.hpp"

namespace cmr {

/// Additive term in the retrieval denominator. Keeps the empty-memory case
/// an exact zero matrix instead of 0/0. Settable for fault-injection
/// diagnostics only.
double retrieval_epsilon();
void set_retrieval_epsilon(double eps);

/// Per-head query/key/value projections plus the per-layer gating scalar.
struct HeadParams {
    Tensor w_q;  // [d_model x d_k]
    Tensor w_k;  // [d_model x d_k]
    Tensor w_v;  // [d_model x d_v]
};

struct AttentionParams {
    std::vector<HeadParams> heads;
    Tensor gamma;  // [1], initialized to 0

    std::size_t d_model() const { return heads.at(0).w_q.shape()[0]; }
    std::size_t d_k() const { return heads.at(0).w_q.shape()[1]; }
    std::size_t d_v() const { return heads.at(0).w_v.shape()[1]; }

    static AttentionParams init(std::size_t d_model, std::size_t num_heads,
                                Rng& rng);
};

/// Fixed-size demonstration cache: per (layer, head) a matrix M [d_k x d_v]
/// accumulating sigma(K)^T V and a column n [d_k x 1] accumulating the key
/// sums. stored_count is the number of demonstrations represented;
/// stored_count == 0 iff every M and n is exactly zero.
class CompressiveMemory {
  public:
    CompressiveMemory() = default;
    CompressiveMemory(std::size_t num_layers, std::size_t num_heads,
                      std::size_t d_k, std::size_t d_v);

    std::size_t num_layers() const { return num_layers_; }
    std::size_t num_heads() const { return num_heads_; }
    std::size_t d_k() const { return d_k_; }
    std::size_t d_v() const { return d_v_; }
    std::uint32_t stored_count() const { return stored_count_; }
    bool empty() const { return stored_count_ == 0; }

    const Tensor& m(std::size_t layer, std::size_t head) const;
    const Tensor& n(std::size_t layer, std::size_t head) const;

    /// Replaces a slot's tensors. Used by memory_update to install the
    /// (possibly graph-tracked) accumulated values.
    void set_slot(std::size_t layer, std::size_t head, Tensor m, Tensor n);
    void note_stored() { ++stored_count_; }

    void reset();

    /// this += factor * other, element-wise over all slots (plain values,
    /// no graph). stored_count grows by other.stored_count.
    void add_scaled(const CompressiveMemory& other, double factor);

    /// Deep value copy; safe to hand to another task.
    CompressiveMemory clone() const;

    double max_abs_difference(const CompressiveMemory& other) const;

  private:
    std::size_t slot_index(std::size_t layer, std::size_t head) const;

    std::size_t num_layers_ = 0, num_heads_ = 0, d_k_ = 0, d_v_ = 0;
    std::vector<Tensor> m_slots_;
    std::vector<Tensor> n_slots_;
    std::uint32_t stored_count_ = 0;
};

/// Folds one demonstration embedding [N x d_model] into one layer's slots
/// (all heads): M += sigma(X W_k)^T (X W_v), n += column sums of sigma(X W_k).
/// Does not touch stored_count. Differentiable when a tape is active.
void memory_update_layer(CompressiveMemory& mem, std::size_t layer,
                         const AttentionParams& params, const Tensor& x);

/// The single-layer update operation: memory_update_layer plus the
/// stored-demonstration count bump.
void memory_update(CompressiveMemory& mem, const AttentionParams& params,
                   const Tensor& x, std::size_t layer = 0);

/// A_ret = sigma(Q) M / (sigma(Q) n + eps), row-wise divide.
/// Empty memory yields an exact zero matrix.
Tensor memory_retrieve(const CompressiveMemory& mem, std::size_t layer,
                       std::size_t head, const Tensor& q_proj);

/// Vanilla scaled dot-product attention, one output per head.
/// Scores are divided by sqrt(d_model). With `causal`, position i only
/// attends to positions <= i (requires Nq == Nk).
std::vector<Tensor> dot_attention(const Tensor& x_q, const Tensor& x_kv,
                                  const AttentionParams& params, bool causal);

/// A = S(gamma) * a_ret + (1 - S(gamma)) * a_dot.
Tensor gated_combine(const Tensor& a_ret, const Tensor& a_dot,
                     const Tensor& gamma);

/// Memory snapshot: magic "CMRM", version, dims, stored_count, then per
/// (layer, head) the M entries row-major and the n entries. Bitwise exact
/// round-trip.
void save_memory(std::ostream& os, const CompressiveMemory& mem);
CompressiveMemory load_memory(std::istream& is);

}  // namespace cmr
