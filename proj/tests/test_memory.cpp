#include <cmath>
#include <sstream>

#include <doctest.h>

#include "cmr/memory.hpp"
#include "cmr/verify.hpp"

using namespace cmr;

namespace {

AttentionParams scalar_params(double wq, double wk, double wv) {
    AttentionParams p;
    HeadParams h;
    h.w_q = Tensor::from_data({1, 1}, {wq});
    h.w_k = Tensor::from_data({1, 1}, {wk});
    h.w_v = Tensor::from_data({1, 1}, {wv});
    p.heads.push_back(std::move(h));
    p.gamma = Tensor::zeros({1});
    return p;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("memory_update: zero embedding leaves M and grows n by N") {
    Rng rng(1);
    AttentionParams p = AttentionParams::init(8, 2, rng);
    CompressiveMemory mem(1, 2, 4, 4);
    Tensor x = Tensor::zeros({3, 8});
    memory_update(mem, p, x);
    CHECK(mem.stored_count() == 1);
    for (std::size_t h = 0; h < 2; ++h) {
        for (double v : mem.m(0, h).data()) CHECK(v == 0.0);
        // sigma(0) = 1 summed over 3 tokens
        for (double v : mem.n(0, h).data()) CHECK(v == 3.0);
    }
}

TEST_CASE("memory_update: scalar worked example") {
    AttentionParams p = scalar_params(1.0, 1.0, 1.0);
    CompressiveMemory mem(1, 1, 1, 1);
    Tensor x = Tensor::from_data({1, 1}, {1.0});
    memory_update(mem, p, x);
    // K = V = [1], sigma(1) = 2 -> M += 2, n += 2
    CHECK(mem.m(0, 0).data()[0] == 2.0);
    CHECK(mem.n(0, 0).data()[0] == 2.0);
}

TEST_CASE("memory_update: order of additive updates commutes to 1e-12") {
    Rng rng(17);
    AttentionParams p = AttentionParams::init(6, 2, rng);
    Tensor d1 = Tensor::randn({4, 6}, rng, 1.0);
    Tensor d2 = Tensor::randn({5, 6}, rng, 1.0);
    CompressiveMemory a(1, 2, 3, 3), b(1, 2, 3, 3);
    memory_update(a, p, d1);
    memory_update(a, p, d2);
    memory_update(b, p, d2);
    memory_update(b, p, d1);
    CHECK(a.max_abs_difference(b) <= 1e-12);
}

TEST_CASE("memory_update errors") {
    Rng rng(2);
    AttentionParams p = AttentionParams::init(8, 2, rng);
    CompressiveMemory mem(1, 2, 4, 4);
    CHECK_THROWS_AS(memory_update(mem, p, Tensor::zeros({3, 5})), ShapeError);
    CHECK_THROWS_AS(memory_update(mem, p, Tensor::zeros({0, 8})), ValueError);
    CHECK(mem.stored_count() == 0);  // untouched after failed updates
}

TEST_CASE("memory_retrieve: empty memory yields the exact zero matrix") {
    CompressiveMemory mem(1, 1, 4, 4);
    Rng rng(3);
    Tensor q = Tensor::randn({5, 4}, rng, 2.0);
    Tensor out = memory_retrieve(mem, 0, 0, q);
    for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("memory_retrieve: scalar worked example with epsilon") {
    CompressiveMemory mem(1, 1, 1, 1);
    mem.set_slot(0, 0, Tensor::from_data({1, 1}, {4.0}),
                 Tensor::from_data({1, 1}, {2.0}));
    mem.note_stored();
    // sigma(1) = 2
    Tensor q = Tensor::from_data({1, 1}, {1.0});
    Tensor out = memory_retrieve(mem, 0, 0, q);
    CHECK(out.value() == (2.0 * 4.0) / (2.0 * 2.0 + 1e-6));
    CHECK(out.value() == doctest::Approx(2.0).epsilon(1e-6));
    CHECK_THROWS_AS(memory_retrieve(mem, 0, 0, Tensor::zeros({1, 3})),
                    ShapeError);
}

TEST_CASE("single-demo retrieval equals token-level linear attention") {
    CheckResult r = check_linear_attention_equivalence(50);
    INFO(r.detail, " max_err=", r.max_err);
    CHECK(r.passed);
}

TEST_CASE("dot_attention: single key returns its value row") {
    Rng rng(5);
    AttentionParams p = AttentionParams::init(6, 2, rng);
    Tensor xq = Tensor::randn({3, 6}, rng, 1.0);
    Tensor xkv = Tensor::randn({1, 6}, rng, 1.0);
    auto outs = dot_attention(xq, xkv, p, false);
    for (std::size_t h = 0; h < 2; ++h) {
        Tensor v = matmul(xkv, p.heads[h].w_v);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j)
                CHECK(outs[h].at(i, j) == doctest::Approx(v.at(0, j)).epsilon(1e-15));
    }
}

TEST_CASE("dot_attention: identical keys average the values") {
    Rng rng(6);
    // two heads so w_k is 4x2 and has a null space; perturbing inputs along
    // it keeps K rows identical while V rows differ
    AttentionParams p = AttentionParams::init(4, 2, rng);
    const Tensor& wk = p.heads[0].w_k;
    std::vector<double> c1(4), c2(4);
    for (int i = 0; i < 4; ++i) {
        c1[i] = wk.at(i, 0);
        c2[i] = wk.at(i, 1);
    }
    // solve n . c1 = n . c2 = 0 exactly with n = (x, y, 1, 0)
    const double det = c1[0] * c2[1] - c1[1] * c2[0];
    REQUIRE(std::abs(det) > 1e-9);
    const double x = (-c1[2] * c2[1] + c1[1] * c2[2]) / det;
    const double y = (-c1[0] * c2[2] + c2[0] * c1[2]) / det;
    std::vector<double> nvec{x, y, 1.0, 0.0};

    Tensor base = Tensor::randn({1, 4}, rng, 1.0);
    std::vector<double> stacked;
    for (int r = 0; r < 3; ++r)
        for (int i = 0; i < 4; ++i)
            stacked.push_back(base.data()[i] + r * nvec[i]);
    Tensor xkv = Tensor::from_data({3, 4}, stacked);

    Tensor k = matmul(xkv, wk);
    for (std::size_t j = 0; j < 2; ++j) {
        CHECK(std::abs(k.at(0, j) - k.at(1, j)) < 1e-12);
        CHECK(std::abs(k.at(0, j) - k.at(2, j)) < 1e-12);
    }
    Tensor v = matmul(xkv, p.heads[0].w_v);
    CHECK(std::abs(v.at(0, 0) - v.at(1, 0)) > 1e-6);  // values do differ

    Tensor xq = Tensor::randn({2, 4}, rng, 1.0);
    auto outs = dot_attention(xq, xkv, p, false);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
            CHECK(outs[0].at(i, j) == doctest::Approx(mean).epsilon(1e-9));
        }
}

TEST_CASE("dot_attention: two-token brute-force expansion") {
    Rng rng(7);
    AttentionParams p = AttentionParams::init(2, 1, rng);
    Tensor xq = Tensor::randn({2, 2}, rng, 1.0);
    Tensor xkv = Tensor::randn({2, 2}, rng, 1.0);
    auto outs = dot_attention(xq, xkv, p, false);

    Tensor q = matmul(xq, p.heads[0].w_q);
    Tensor k = matmul(xkv, p.heads[0].w_k);
    Tensor v = matmul(xkv, p.heads[0].w_v);
    const double scale = 1.0 / std::sqrt(2.0);  // sqrt(d_model)
    for (std::size_t i = 0; i < 2; ++i) {
        double s0 = (q.at(i, 0) * k.at(0, 0) + q.at(i, 1) * k.at(0, 1)) * scale;
        double s1 = (q.at(i, 0) * k.at(1, 0) + q.at(i, 1) * k.at(1, 1)) * scale;
        double mx = std::max(s0, s1);
        double w0 = std::exp(s0 - mx), w1 = std::exp(s1 - mx);
        double z = w0 + w1;
        for (std::size_t j = 0; j < 2; ++j) {
            double want = (w0 * v.at(0, j) + w1 * v.at(1, j)) / z;
            CHECK(outs[0].at(i, j) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("dot_attention: causal masking") {
    Rng rng(8);
    AttentionParams p = AttentionParams::init(4, 1, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0);
    auto outs = dot_attention(x, x, p, true);
    // row 0 only sees token 0, so it must equal V row 0
    Tensor v = matmul(x, p.heads[0].w_v);
    for (std::size_t j = 0; j < 4; ++j)
        CHECK(outs[0].at(0, j) == doctest::Approx(v.at(0, j)).epsilon(1e-15));
}

TEST_CASE("gated_combine values and gradient through gamma") {
    Tensor a_ret = Tensor::from_data({1, 1}, {4.0});
    Tensor a_dot = Tensor::from_data({1, 1}, {0.0});

    Tensor g0 = Tensor::zeros({1});
    Tensor mid = gated_combine(a_ret, a_dot, g0);
    CHECK(mid.value() == 2.0);  // S(0) = 0.5 exactly

    CHECK(gated_combine(a_ret, a_dot, Tensor::scalar(40.0)).value() ==
          doctest::Approx(4.0).epsilon(1e-12));
    CHECK(gated_combine(a_ret, a_dot, Tensor::scalar(-40.0)).value() ==
          doctest::Approx(0.0).epsilon(1e-12));

    Tensor g3 = Tensor::scalar(std::log(3.0));
    CHECK(gated_combine(a_ret, a_dot, g3).value() ==
          doctest::Approx(3.0).epsilon(1e-12));

    CHECK_THROWS_AS(gated_combine(Tensor::zeros({2, 2}), a_dot, g0),
                    ShapeError);

    Tensor gamma = Tensor::scalar(0.2);
    gamma.set_requires_grad(true);
    Tape tape;
    tape.backward(sum_all(gated_combine(a_ret, a_dot, gamma)));
    CHECK(gamma.grad()[0] != 0.0);
}

TEST_CASE("homogeneity: scaling demonstration values scales retrieval") {
    Rng rng(12);
    const double c = 3.0;
    AttentionParams p1 = AttentionParams::init(6, 1, rng);
    AttentionParams p2 = p1;
    p2.heads[0].w_v = scale(p1.heads[0].w_v, c);

    Tensor demo = Tensor::randn({4, 6}, rng, 1.0);
    Tensor xq = Tensor::randn({3, 6}, rng, 1.0);
    CompressiveMemory m1(1, 1, 6, 6), m2(1, 1, 6, 6);
    memory_update(m1, p1, demo);
    memory_update(m2, p2, demo);
    Tensor q = matmul(xq, p1.heads[0].w_q);
    Tensor r1 = memory_retrieve(m1, 0, 0, q);
    Tensor r2 = memory_retrieve(m2, 0, 0, q);
    for (std::size_t i = 0; i < r1.size(); ++i)
        CHECK(std::abs(r2.data()[i] - c * r1.data()[i]) <= 1e-12);
}

TEST_CASE("reset erases everything") {
    Rng rng(13);
    AttentionParams p = AttentionParams::init(4, 1, rng);
    Tensor demo = Tensor::randn({3, 4}, rng, 1.0);

    CompressiveMemory a(1, 1, 4, 4);
    memory_update(a, p, demo);
    a.reset();
    CHECK(a.stored_count() == 0);
    Tensor q = Tensor::randn({2, 4}, rng, 1.0);
    Tensor after_reset = memory_retrieve(a, 0, 0, q);
    for (double v : after_reset.data()) CHECK(v == 0.0);

    // update-then-reset-then-update == update on a fresh memory, bitwise
    memory_update(a, p, demo);
    CompressiveMemory b(1, 1, 4, 4);
    memory_update(b, p, demo);
    CHECK(bitwise_equal(a.m(0, 0), b.m(0, 0)));
    CHECK(bitwise_equal(a.n(0, 0), b.n(0, 0)));
}

TEST_CASE("memory snapshot round-trips bitwise") {
    Rng rng(14);
    AttentionParams p = AttentionParams::init(8, 2, rng);
    CompressiveMemory mem(2, 2, 4, 4);
    memory_update(mem, p, Tensor::randn({5, 8}, rng, 1.0), 0);
    memory_update(mem, p, Tensor::randn({4, 8}, rng, 1.0), 1);

    std::ostringstream os(std::ios::binary);
    save_memory(os, mem);
    std::string bytes = os.str();
    CHECK(bytes.substr(0, 4) == "CMRM");

    std::istringstream is(bytes, std::ios::binary);
    CompressiveMemory back = load_memory(is);
    CHECK(back.stored_count() == mem.stored_count());
    CHECK(back.max_abs_difference(mem) == 0.0);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t h = 0; h < 2; ++h) {
            CHECK(bitwise_equal(back.m(l, h), mem.m(l, h)));
            CHECK(bitwise_equal(back.n(l, h), mem.n(l, h)));
        }

    std::istringstream bad("XXXX", std::ios::binary);
    CHECK_THROWS_AS(load_memory(bad), IoError);
}

TEST_CASE("full-layer gradient fidelity (update -> retrieve -> combine)") {
    CheckResult r = check_gradcheck(3);
    INFO(r.detail, " max_err=", r.max_err);
    CHECK(r.passed);
}

TEST_CASE("n stays nonnegative and retrieval denominators stay positive") {
    Rng rng(15);
    AttentionParams p = AttentionParams::init(6, 2, rng);
    CompressiveMemory mem(1, 2, 3, 3);
    for (int i = 0; i < 5; ++i)
        memory_update(mem, p, Tensor::randn({4, 6}, rng, 2.0));
    for (std::size_t h = 0; h < 2; ++h)
        for (double v : mem.n(0, h).data()) CHECK(v >= 0.0);
    Tensor q = Tensor::randn({6, 3}, rng, 2.0);
    for (std::size_t h = 0; h < 2; ++h)
        CHECK(all_finite(memory_retrieve(mem, 0, h, q)));
}
