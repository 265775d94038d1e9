#include "cmr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cmr/kernels.hpp"

namespace cmr {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t p = 1;
    for (std::size_t d : shape) p *= d;
    return p;
}

const detail::NodePtr& require(const Tensor& t, const char* who) {
    if (!t.defined()) throw ValueError(std::string(who) + ": undefined tensor");
    return t.node();
}

void require_rank2(const Tensor& t, const char* who) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(who) + ": expected rank-2 tensor, got " +
                         shape_str(t.shape()));
}

bool should_track(std::initializer_list<const Tensor*> inputs) {
    if (Tape::current() == nullptr) return false;
    for (const Tensor* t : inputs) {
        const auto& n = t->node();
        if (n && (n->requires_grad || n->tracked)) return true;
    }
    return false;
}

Tensor make_result(std::vector<std::size_t> shape, std::vector<double> data,
                   bool tracked) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->tracked = tracked;
    return Tensor::wrap(node);
}

// Accumulate src into dst->grad.
void axpy_grad(const detail::NodePtr& dst, const std::vector<double>& src) {
    dst->ensure_grad();
    for (std::size_t i = 0; i < src.size(); ++i) dst->grad[i] += src[i];
}

bool wants_grad(const detail::NodePtr& n) {
    return n->requires_grad || n->tracked;
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----

Tensor::Tensor(std::vector<std::size_t> shape) {
    auto node = std::make_shared<detail::TensorNode>();
    node->data.assign(shape_product(shape), 0.0);
    node->shape = std::move(shape);
    node_ = std::move(node);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data) {
    if (shape_product(shape) != data.size())
        throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                         std::to_string(shape_product(shape)) +
                         " values, got " + std::to_string(data.size()));
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return wrap(node);
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.node_->data) v = rng.normal() * stddev;
    return t;
}

const std::vector<std::size_t>& Tensor::shape() const {
    return require(*this, "shape")->shape;
}

std::size_t Tensor::size() const { return require(*this, "size")->size(); }

std::size_t Tensor::rows() const {
    const auto& s = shape();
    if (s.size() == 1) return s[0];
    if (s.size() == 2) return s[0];
    throw ShapeError("rows: rank > 2: " + shape_str(s));
}

std::size_t Tensor::cols() const {
    const auto& s = shape();
    if (s.size() == 1) return 1;
    if (s.size() == 2) return s[1];
    throw ShapeError("cols: rank > 2: " + shape_str(s));
}

const std::vector<double>& Tensor::data() const {
    return require(*this, "data")->data;
}

std::vector<double>& Tensor::mutable_data() {
    return require(*this, "mutable_data")->data;
}

double Tensor::value() const {
    if (size() != 1)
        throw ShapeError("value: tensor is not a scalar: " + shape_str(shape()));
    return data()[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return data()[i * cols() + j];
}

void Tensor::set_requires_grad(bool b) {
    require(*this, "set_requires_grad")->requires_grad = b;
}

bool Tensor::requires_grad() const {
    return require(*this, "requires_grad")->requires_grad;
}

bool Tensor::tracked() const {
    const auto& n = require(*this, "tracked");
    return n->tracked || n->requires_grad;
}

bool Tensor::has_grad() const {
    const auto& n = require(*this, "has_grad");
    return n->grad.size() == n->data.size();
}

const std::vector<double>& Tensor::grad() const {
    const auto& n = require(*this, "grad");
    if (n->grad.size() != n->data.size())
        throw ValueError("grad: no gradient present (run backward first)");
    return n->grad;
}

void Tensor::zero_grad() {
    auto& n = require(*this, "zero_grad");
    n->grad.clear();
}

Tensor Tensor::detached() const {
    const auto& n = require(*this, "detached");
    return from_data(n->shape, n->data);
}

Tensor Tensor::wrap(detail::NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

// ---- Tape ----

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void Tape::reset() {
    ops_.clear();
    used_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (used_)
        throw ValueError("backward: tape already consumed; call reset() first");
    if (!loss.defined() || !loss.tracked())
        throw ValueError("backward: loss is not tracked by any tape");
    if (loss.size() != 1)
        throw ValueError("backward: loss must be a scalar, got " +
                         shape_str(loss.shape()));
    used_ = true;
    auto n = loss.node();
    n->ensure_grad();
    n->grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

NoGrad::NoGrad() : prev_(g_current_tape) { g_current_tape = nullptr; }
NoGrad::~NoGrad() { g_current_tape = prev_; }

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ShapeError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool track = should_track({&a, &b});
    std::vector<double> out(m * n);
    kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::current()->record([an, bn, yn, m, k, n]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) {
                std::vector<double> da(m * k);
                kernels::gemm_nt(yn->grad.data(), bn->data.data(), da.data(),
                                 m, n, k);
                axpy_grad(an, da);
            }
            if (wants_grad(bn)) {
                std::vector<double> db(k * n);
                kernels::gemm_tn(an->data.data(), yn->grad.data(), db.data(),
                                 m, k, n);
                axpy_grad(bn, db);
            }
        });
    }
    return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw ShapeError("matmul_nt: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool track = should_track({&a, &b});
    std::vector<double> out(m * n);
    kernels::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::current()->record([an, bn, yn, m, k, n]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) {
                // dA = dC * B
                std::vector<double> da(m * k);
                kernels::gemm_nn(yn->grad.data(), bn->data.data(), da.data(),
                                 m, n, k);
                axpy_grad(an, da);
            }
            if (wants_grad(bn)) {
                // dB = dC^T * A
                std::vector<double> db(n * k);
                kernels::gemm_tn(yn->grad.data(), an->data.data(), db.data(),
                                 m, n, k);
                axpy_grad(bn, db);
            }
        });
    }
    return y;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    const std::size_t r = a.rows(), m = a.cols(), n = b.cols();
    if (b.rows() != r)
        throw ShapeError("matmul_tn: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bool track = should_track({&a, &b});
    std::vector<double> out(m * n);
    kernels::gemm_tn(a.data().data(), b.data().data(), out.data(), r, m, n);
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::current()->record([an, bn, yn, r, m, n]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) {
                // dA = B * dC^T
                std::vector<double> da(r * m);
                kernels::gemm_nt(bn->data.data(), yn->grad.data(), da.data(),
                                 r, n, m);
                axpy_grad(an, da);
            }
            if (wants_grad(bn)) {
                // dB = A * dC
                std::vector<double> db(r * n);
                kernels::gemm_nn(an->data.data(), yn->grad.data(), db.data(),
                                 r, m, n);
                axpy_grad(bn, db);
            }
        });
    }
    return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    bool track = should_track({&a, &b});
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
    Tensor y = make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::current()->record([an, bn, yn]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) axpy_grad(an, yn->grad);
            if (wants_grad(bn)) axpy_grad(bn, yn->grad);
        });
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    bool track = should_track({&a, &b});
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    Tensor y = make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), bn = b.node(), yn = y.node();
        Tape::current()->record([an, bn, yn]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) {
                an->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i)
                    an->grad[i] += yn->grad[i] * bn->data[i];
            }
            if (wants_grad(bn)) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i)
                    bn->grad[i] += yn->grad[i] * an->data[i];
            }
        });
    }
    return y;
}

Tensor affine_const(const Tensor& a, double alpha, double beta) {
    bool track = should_track({&a});
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * ad[i] + beta;
    Tensor y = make_result(a.shape(), std::move(out), track);
    if (track) {
        auto an = a.node(), yn = y.node();
        Tape::current()->record([an, yn, alpha]() {
            if (yn->grad.empty() || !wants_grad(an)) return;
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                an->grad[i] += alpha * yn->grad[i];
        });
    }
    return y;
}

Tensor scale(const Tensor& a, double alpha) { return affine_const(a, alpha, 0.0); }
Tensor add_const(const Tensor& a, double beta) { return affine_const(a, 1.0, beta); }

Tensor scalar_mul(const Tensor& s, const Tensor& a) {
    if (s.size() != 1)
        throw ShapeError("scalar_mul: multiplier must have one element, got " +
                         shape_str(s.shape()));
    bool track = should_track({&s, &a});
    const double sv = s.data()[0];
    std::vector<double> out(a.size());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * ad[i];
    Tensor y = make_result(a.shape(), std::move(out), track);
    if (track) {
        auto sn = s.node(), an = a.node(), yn = y.node();
        Tape::current()->record([sn, an, yn]() {
            if (yn->grad.empty()) return;
            if (wants_grad(sn)) {
                sn->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < yn->grad.size(); ++i)
                    acc += yn->grad[i] * an->data[i];
                sn->grad[0] += acc;
            }
            if (wants_grad(an)) {
                an->ensure_grad();
                const double sv2 = sn->data[0];
                for (std::size_t i = 0; i < yn->grad.size(); ++i)
                    an->grad[i] += sv2 * yn->grad[i];
            }
        });
    }
    return y;
}

Tensor elu_plus_one(const Tensor& x) {
    bool track = should_track({&x});
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = xd[i] >= 0.0 ? xd[i] + 1.0 : std::exp(xd[i]);
    Tensor y = make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), yn = y.node();
        Tape::current()->record([xn, yn]() {
            if (yn->grad.empty() || !wants_grad(xn)) return;
            xn->ensure_grad();
            // derivative at 0 is the right-branch slope, 1
            for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                double d = xn->data[i] >= 0.0 ? 1.0 : yn->data[i];
                xn->grad[i] += d * yn->grad[i];
            }
        });
    }
    return y;
}

namespace {

Tensor softmax_impl(const Tensor& x, bool causal) {
    require_rank2(x, "row_softmax");
    const std::size_t m = x.rows(), n = x.cols();
    if (causal && m != n)
        throw ShapeError("causal_row_softmax: matrix must be square, got " +
                         shape_str(x.shape()));
    bool track = should_track({&x});
    std::vector<double> out(m * n, 0.0);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t lim = causal ? i + 1 : n;
        double mx = xd[i * n];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, xd[i * n + j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            out[i * n + j] = std::exp(xd[i * n + j] - mx);
            denom += out[i * n + j];
        }
        for (std::size_t j = 0; j < lim; ++j) out[i * n + j] /= denom;
    }
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto xn = x.node(), yn = y.node();
        Tape::current()->record([xn, yn, m, n]() {
            if (yn->grad.empty() || !wants_grad(xn)) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    dot += yn->grad[i * n + j] * yn->data[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[i * n + j] +=
                        yn->data[i * n + j] * (yn->grad[i * n + j] - dot);
            }
        });
    }
    return y;
}

}  // namespace

Tensor row_softmax(const Tensor& x) { return softmax_impl(x, false); }
Tensor causal_row_softmax(const Tensor& x) { return softmax_impl(x, true); }

Tensor sigmoid(const Tensor& x) {
    bool track = should_track({&x});
    std::vector<double> out(x.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = xd[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    Tensor y = make_result(x.shape(), std::move(out), track);
    if (track) {
        auto xn = x.node(), yn = y.node();
        Tape::current()->record([xn, yn]() {
            if (yn->grad.empty() || !wants_grad(xn)) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                double s = yn->data[i];
                xn->grad[i] += yn->grad[i] * s * (1.0 - s);
            }
        });
    }
    return y;
}

Tensor div_colvec(const Tensor& a, const Tensor& c) {
    require_rank2(a, "div_colvec");
    const std::size_t m = a.rows(), n = a.cols();
    if (c.size() != m || c.cols() > 1)
        throw ShapeError("div_colvec: divisor must be a length-" +
                         std::to_string(m) + " column, got " +
                         shape_str(c.shape()));
    bool track = should_track({&a, &c});
    std::vector<double> out(m * n);
    const auto& ad = a.data();
    const auto& cd = c.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ad[i * n + j] / cd[i];
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto an = a.node(), cn = c.node(), yn = y.node();
        Tape::current()->record([an, cn, yn, m, n]() {
            if (yn->grad.empty()) return;
            if (wants_grad(an)) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        an->grad[i * n + j] += yn->grad[i * n + j] / cn->data[i];
            }
            if (wants_grad(cn)) {
                cn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc -= yn->grad[i * n + j] * yn->data[i * n + j];
                    cn->grad[i] += acc / cn->data[i];
                }
            }
        });
    }
    return y;
}

Tensor embed_rows(const Tensor& table, const TokenSeq& ids) {
    require_rank2(table, "embed_rows");
    const std::size_t v = table.rows(), d = table.cols();
    for (TokenId id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw ValueError("embed_rows: token id " + std::to_string(id) +
                             " out of range [0, " + std::to_string(v) + ")");
    bool track = should_track({&table});
    const std::size_t nt = ids.size();
    std::vector<double> out(nt * d);
    const auto& td = table.data();
    for (std::size_t i = 0; i < nt; ++i)
        std::copy_n(td.begin() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.begin() + i * d);
    Tensor y = make_result({nt, d}, std::move(out), track);
    if (track) {
        auto tn = table.node(), yn = y.node();
        TokenSeq ids_copy = ids;
        Tape::current()->record([tn, yn, ids_copy, d]() {
            if (yn->grad.empty() || !wants_grad(tn)) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                double* dst =
                    tn->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
                const double* src = yn->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    require_rank2(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n)
        throw ShapeError("layer_norm: gain/bias must have " +
                         std::to_string(n) + " entries");
    bool track = should_track({&x, &gain, &bias});
    std::vector<double> out(m * n);
    std::vector<double> xhat(m * n);
    std::vector<double> inv_sigma(m);
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xd[i * n + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double c = xd[i * n + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = inv;
        for (std::size_t j = 0; j < n; ++j) {
            double h = (xd[i * n + j] - mean) * inv;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gd[j] + bd[j];
        }
    }
    Tensor y = make_result({m, n}, std::move(out), track);
    if (track) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
        auto xhat_s = std::make_shared<std::vector<double>>(std::move(xhat));
        auto inv_s = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        Tape::current()->record([xn, gn, bn, yn, xhat_s, inv_s, m, n]() {
            if (yn->grad.empty()) return;
            const auto& h = *xhat_s;
            const auto& inv = *inv_s;
            if (wants_grad(gn)) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        gn->grad[j] += yn->grad[i * n + j] * h[i * n + j];
            }
            if (wants_grad(bn)) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        bn->grad[j] += yn->grad[i * n + j];
            }
            if (wants_grad(xn)) {
                xn->ensure_grad();
                const double nd = static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double dh = yn->grad[i * n + j] * gn->data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        double dh = yn->grad[i * n + j] * gn->data[j];
                        xn->grad[i * n + j] +=
                            inv[i] * (dh - sum_dh / nd - h[i * n + j] * sum_dh_h / nd);
                    }
                }
            }
        });
    }
    return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_cols: no parts");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m)
            throw ShapeError("concat_cols: row count mismatch: " +
                             shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.cols();
    }
    bool track = false;
    for (const Tensor& p : parts)
        if (p.node() && (p.node()->requires_grad || p.node()->tracked))
            track = true;
    track = track && Tape::current() != nullptr;
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        const auto& pd = p.data();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(pd.begin() + i * pc, pc, out.begin() + i * total + off);
        off += pc;
    }
    Tensor y = make_result({m, total}, std::move(out), track);
    if (track) {
        std::vector<detail::NodePtr> nodes;
        nodes.reserve(parts.size());
        for (const Tensor& p : parts) nodes.push_back(p.node());
        auto yn = y.node();
        Tape::current()->record([nodes, yn, m, total]() {
            if (yn->grad.empty()) return;
            std::size_t off2 = 0;
            for (const auto& pn : nodes) {
                const std::size_t pc = pn->shape[1];
                if (wants_grad(pn)) {
                    pn->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < pc; ++j)
                            pn->grad[i * pc + j] += yn->grad[i * total + off2 + j];
                }
                off2 += pc;
            }
        });
    }
    return y;
}

Tensor sum_all(const Tensor& x) {
    bool track = should_track({&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor y = make_result({1}, {acc}, track);
    if (track) {
        auto xn = x.node(), yn = y.node();
        Tape::current()->record([xn, yn]() {
            if (yn->grad.empty() || !wants_grad(xn)) return;
            xn->ensure_grad();
            for (double& g : xn->grad) g += yn->grad[0];
        });
    }
    return y;
}

Tensor cross_entropy(const Tensor& logits, const TokenSeq& targets,
                     const std::vector<bool>& ignore) {
    require_rank2(logits, "cross_entropy");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t)
        throw ShapeError("cross_entropy: " + std::to_string(t) +
                         " logit rows vs " + std::to_string(targets.size()) +
                         " targets");
    if (!ignore.empty() && ignore.size() != t)
        throw ShapeError("cross_entropy: ignore mask length mismatch");
    std::size_t count = 0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!ignore.empty() && ignore[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
            throw ValueError("cross_entropy: target id " +
                             std::to_string(targets[i]) + " out of range [0, " +
                             std::to_string(v) + ")");
        ++count;
    }
    if (count == 0)
        throw ValueError("cross_entropy: no unmasked positions to score");
    bool track = should_track({&logits});
    const auto& ld = logits.data();
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!ignore.empty() && ignore[i]) continue;
        double mx = ld[i * v];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, ld[i * v + j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < v; ++j) denom += std::exp(ld[i * v + j] - mx);
        double lse = mx + std::log(denom);
        total += lse - ld[i * v + static_cast<std::size_t>(targets[i])];
    }
    Tensor y = make_result({1}, {total / static_cast<double>(count)}, track);
    if (track) {
        auto ln = logits.node(), yn = y.node();
        TokenSeq tgt = targets;
        std::vector<bool> ign = ignore;
        Tape::current()->record([ln, yn, tgt, ign, t, v, count]() {
            if (yn->grad.empty() || !wants_grad(ln)) return;
            ln->ensure_grad();
            const double g = yn->grad[0] / static_cast<double>(count);
            for (std::size_t i = 0; i < t; ++i) {
                if (!ign.empty() && ign[i]) continue;
                double mx = ln->data[i * v];
                for (std::size_t j = 1; j < v; ++j)
                    mx = std::max(mx, ln->data[i * v + j]);
                double denom = 0.0;
                for (std::size_t j = 0; j < v; ++j)
                    denom += std::exp(ln->data[i * v + j] - mx);
                for (std::size_t j = 0; j < v; ++j) {
                    double p = std::exp(ln->data[i * v + j] - mx) / denom;
                    double onehot =
                        j == static_cast<std::size_t>(tgt[i]) ? 1.0 : 0.0;
                    ln->grad[i * v + j] += g * (p - onehot);
                }
            }
        });
    }
    return y;
}

std::size_t argmax_row(const Tensor& t, std::size_t row) {
    const std::size_t n = t.cols();
    const auto& d = t.data();
    std::size_t best = 0;
    double bv = d[row * n];
    for (std::size_t j = 1; j < n; ++j) {
        if (d[row * n + j] > bv) {
            bv = d[row * n + j];
            best = j;
        }
    }
    return best;
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace cmr
