#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmr/common.hpp"
#include "cmr/rng.hpp"

namespace cmr {

class Tape;

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool tracked = false;  // produced by (or feeding) a recorded op

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with optional reverse-mode
/// gradient tracking. Value semantics: ops never mutate their inputs.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v);
    static Tensor from_data(std::vector<std::size_t> shape,
                            std::vector<double> data);
    static Tensor randn(std::vector<std::size_t> shape, Rng& rng,
                        double stddev);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const;
    std::size_t size() const;
    std::size_t rows() const;  // rank-2 (or rank-1: size)
    std::size_t cols() const;  // rank-2 (or rank-1: 1)

    const std::vector<double>& data() const;
    /// Direct mutation; only meaningful for leaves between tapes
    /// (parameter updates). Never call on a tensor inside a live graph.
    std::vector<double>& mutable_data();

    double value() const;  // single-element tensors
    double at(std::size_t i, std::size_t j) const;

    void set_requires_grad(bool b);
    bool requires_grad() const;
    bool tracked() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Value copy with no graph attachment.
    Tensor detached() const;

    const detail::NodePtr& node() const { return node_; }
    static Tensor wrap(detail::NodePtr n);

  private:
    detail::NodePtr node_;
};

/// Ordered record of executed ops. Constructing a Tape makes it the active
/// recorder for the current thread; destruction restores the previous one.
/// Single-owner: do not share across threads.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Populates grads of all tracked tensors reachable from `loss`.
    /// Errors: non-scalar loss, untracked loss, repeated call without reset.
    void backward(const Tensor& loss);

    void reset();
    std::size_t num_ops() const { return ops_.size(); }

    static Tape* current();
    void record(std::function<void()> backward_fn);

  private:
    std::vector<std::function<void()>> ops_;
    bool used_ = false;
    Tape* prev_ = nullptr;
};

/// RAII guard that suspends recording (forward-only evaluation).
struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    Tape* prev_;
};

std::string shape_str(const std::vector<std::size_t>& s);

// ---- primitive ops (all record gradients when a tape is active) ----

Tensor matmul(const Tensor& a, const Tensor& b);     // a[m,k] * b[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a[m,k] * b[n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a[r,m]^T * b[r,n]
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // Hadamard, same shape
Tensor affine_const(const Tensor& a, double alpha, double beta);
Tensor scale(const Tensor& a, double alpha);
Tensor add_const(const Tensor& a, double beta);
Tensor scalar_mul(const Tensor& s, const Tensor& a);  // s has 1 element
Tensor elu_plus_one(const Tensor& x);
Tensor row_softmax(const Tensor& x);
Tensor causal_row_softmax(const Tensor& x);  // square; row i sees cols <= i
Tensor sigmoid(const Tensor& x);
Tensor div_colvec(const Tensor& a, const Tensor& c);  // a[m,n] / c[m] per row
Tensor embed_rows(const Tensor& table, const TokenSeq& ids);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor sum_all(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, const TokenSeq& targets,
                     const std::vector<bool>& ignore = {});

/// Column index of the max entry in a row; ties resolve to the lowest index.
std::size_t argmax_row(const Tensor& t, std::size_t row);

bool all_finite(const Tensor& t);

}  // namespace cmr
