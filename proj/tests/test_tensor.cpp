#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"

#include "abdkit/error.hpp"
#include "abdkit/tensor.hpp"

using namespace abdkit;
using namespace abdkit::ad;

namespace {

Tensor randn(Shape s, std::mt19937_64& rng, double sd = 1.0, bool requires_grad = false) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> d(shape_numel(s));
    for (auto& x : d) x = n(rng);
    return Tensor(std::move(s), std::move(d), requires_grad);
}

// Values bounded away from zero so relu kinks are not crossed by +-h.
Tensor rand_off_zero(Shape s, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> d(shape_numel(s));
    for (auto& x : d) x = sign(rng) ? u(rng) : -u(rng);
    return Tensor(std::move(s), std::move(d));
}

Tensor random_distribution(int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> d(static_cast<std::size_t>(n));
    double z = 0;
    for (auto& x : d) z += (x = u(rng));
    for (auto& x : d) x /= z;
    return Tensor({n}, d);
}

// Direct triple-loop softmax(QK^T/sqrt(dk))V used as an independent oracle.
std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, int nq, int nv, int dk, int dv) {
    std::vector<double> out(static_cast<std::size_t>(nq * dv), 0.0);
    for (int i = 0; i < nq; ++i) {
        std::vector<double> s(static_cast<std::size_t>(nv));
        double mx = -1e300;
        for (int j = 0; j < nv; ++j) {
            double dot = 0;
            for (int t = 0; t < dk; ++t) dot += q[i * dk + t] * k[j * dk + t];
            s[j] = dot / std::sqrt(static_cast<double>(dk));
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (int j = 0; j < nv; ++j)
            for (int t = 0; t < dv; ++t) out[i * dv + t] += s[j] / z * v[j * dv + t];
    }
    return out;
}

}  // namespace

TEST_CASE("tensor construction checks element count") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    CHECK(Tensor::zeros({2, 3, 4}).numel() == 24);
}

TEST_CASE("conv2d hand cases") {
    SUBCASE("1x1 unit kernel is identity") {
        std::mt19937_64 rng(1);
        Tensor x = randn({1, 1, 4, 5}, rng);
        Tensor k({1, 1, 1, 1}, {1.0});
        Tensor y = conv2d(x, k, nullptr, {});
        CHECK(y.shape() == x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
    }
    SUBCASE("all-ones 3x3 on all-ones 5x5 gives 9") {
        Tensor y = conv2d(Tensor::full({1, 1, 5, 5}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), nullptr, {});
        CHECK(y.shape() == Shape{1, 1, 3, 3});
        for (double v : y.data()) CHECK(v == 9.0);
    }
    SUBCASE("stride 2 pad 1 on 8x8") {
        Tensor y = conv2d(Tensor::zeros({1, 1, 8, 8}), Tensor::zeros({1, 1, 3, 3}), nullptr, {2, 2, 1, 1});
        CHECK(y.shape() == Shape{1, 1, 4, 4});
    }
    SUBCASE("channel mismatch") {
        CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), nullptr, {}), ShapeError);
    }
}

TEST_CASE("conv3d hand cases") {
    std::mt19937_64 rng(2);
    Tensor x = randn({1, 1, 3, 4, 5}, rng);
    Tensor y = conv3d(x, Tensor({1, 1, 1, 1, 1}, {1.0}), nullptr, {});
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);

    Tensor s = conv3d(Tensor::zeros({1, 1, 8, 6, 4}), Tensor::zeros({2, 1, 3, 3, 3}), nullptr, {2, 2, 2, 1, 1, 1});
    CHECK(s.shape() == Shape{1, 2, 4, 3, 2});

    Tensor e = conv3d(Tensor::full({1, 1, 4, 4, 4}, 1.0), Tensor::full({1, 1, 2, 2, 2}, 1.0), nullptr, {});
    CHECK(e.shape() == Shape{1, 1, 3, 3, 3});
    for (double v : e.data()) CHECK(v == 8.0);
}

TEST_CASE("scaled_dot_attention") {
    SUBCASE("identical keys give uniform weights and mean of V") {
        Tensor q({2, 2}, {1.0, -2.0, 0.5, 3.0});
        Tensor k({3, 2}, {0.3, 0.7, 0.3, 0.7, 0.3, 0.7});
        Tensor v({3, 2}, {1.0, 2.0, 4.0, 8.0, 7.0, -1.0});
        Tensor o = scaled_dot_attention(q, k, v);
        for (int i = 0; i < 2; ++i) {
            CHECK(o[static_cast<std::size_t>(2 * i)] == doctest::Approx(4.0));
            CHECK(o[static_cast<std::size_t>(2 * i + 1)] == doctest::Approx(3.0));
        }
    }
    SUBCASE("single value row") {
        Tensor o = scaled_dot_attention(Tensor({2, 2}, {9, -9, 3, 1}), Tensor({1, 2}, {1, 1}), Tensor({1, 3}, {5, 6, 7}));
        for (int i = 0; i < 2; ++i)
            for (int t = 0; t < 3; ++t) CHECK(o[static_cast<std::size_t>(3 * i + t)] == 5.0 + t);
    }
    SUBCASE("2x2 integer case vs oracle") {
        const std::vector<double> q{1, 2, 3, 4}, k{2, 0, 1, 1}, v{1, 5, -2, 3};
        Tensor o = scaled_dot_attention(Tensor({2, 2}, q), Tensor({2, 2}, k), Tensor({2, 2}, v));
        const auto ref = attention_oracle(q, k, v, 2, 2, 2, 2);
        for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(o[i] - ref[i]) <= 1e-9);
    }
    SUBCASE("rows sum to one and output within V's hull") {
        std::mt19937_64 rng(7);
        for (int seed = 0; seed < 20; ++seed) {
            Tensor q = randn({4, 3}, rng, 2.0), k = randn({5, 3}, rng, 2.0), v = randn({5, 2}, rng);
            Tensor w = attention_weights(q, k);
            for (int i = 0; i < 4; ++i) {
                double s = 0;
                for (int j = 0; j < 5; ++j) s += w[static_cast<std::size_t>(5 * i + j)];
                CHECK(std::abs(s - 1.0) <= 1e-6);
            }
            Tensor o = scaled_dot_attention(q, k, v);
            for (int t = 0; t < 2; ++t) {
                double lo = 1e300, hi = -1e300;
                for (int j = 0; j < 5; ++j) {
                    lo = std::min(lo, v[static_cast<std::size_t>(2 * j + t)]);
                    hi = std::max(hi, v[static_cast<std::size_t>(2 * j + t)]);
                }
                for (int i = 0; i < 4; ++i) {
                    CHECK(o[static_cast<std::size_t>(2 * i + t)] >= lo - 1e-12);
                    CHECK(o[static_cast<std::size_t>(2 * i + t)] <= hi + 1e-12);
                }
            }
        }
    }
    SUBCASE("d_k mismatch") {
        CHECK_THROWS_AS(scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4})),
                        ShapeError);
    }
}

TEST_CASE("softmax is a shift-invariant distribution") {
    std::mt19937_64 rng(3);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor x = randn({3, 7}, rng, 5.0);
        Tensor y = softmax(x);
        std::vector<double> shifted(x.data().begin(), x.data().end());
        for (auto& v : shifted) v += 123.25;
        Tensor ys = softmax(Tensor({3, 7}, shifted));
        for (int r = 0; r < 3; ++r) {
            double s = 0;
            for (int c = 0; c < 7; ++c) {
                const auto i = static_cast<std::size_t>(7 * r + c);
                CHECK(y[i] >= 0.0);
                CHECK(std::abs(y[i] - ys[i]) <= 1e-9);
                s += y[i];
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
    // axis 0 of a [3, 2] tensor normalizes each column
    Tensor c = softmax(Tensor({3, 2}, {1, 0, 2, 0, 3, 0}), 0);
    CHECK(c[1] + c[3] + c[5] == doctest::Approx(1.0));
    CHECK(c[5] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("kl_div") {
    std::mt19937_64 rng(4);
    for (int seed = 0; seed < 20; ++seed) {
        Tensor p = random_distribution(9, rng), q = random_distribution(9, rng);
        CHECK(std::abs(kl_div(p, p).item()) <= 1e-15);
        CHECK(kl_div(p, q).item() >= 0.0);
    }
    CHECK(kl_div(Tensor({2}, {1.0, 0.0}), Tensor({2}, {0.5, 0.5})).item() == doctest::Approx(std::log(2.0)));
    CHECK_THROWS_AS(kl_div(Tensor({2}, {1.0, 0.0}), Tensor({3}, {0.2, 0.3, 0.5})), ShapeError);
    // zero prediction under nonzero target is clamped, not infinite
    CHECK(std::isfinite(kl_div(Tensor({2}, {0.5, 0.5}), Tensor({2}, {1.0, 0.0})).item()));
}

TEST_CASE("backward hand cases") {
    SUBCASE("sum gives ones") {
        Tensor x({3}, {1, 2, 3}, true);
        Tape t;
        t.backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares") {
        Tensor x({3}, {1, 2, 3}, true);
        Tape t;
        t.backward(sum(mul(x, x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
        CHECK(x.grad()[2] == 6.0);
    }
    SUBCASE("fan-out doubles the contribution") {
        Tensor x({2}, {0.5, -1.0}, true);
        Tape t;
        Tensor y = scale(x, 3.0);
        t.backward(sum(add(y, y)));
        CHECK(x.grad()[0] == 6.0);
        CHECK(x.grad()[1] == 6.0);
    }
    SUBCASE("fan-out equals the sum of per-path gradients") {
        std::mt19937_64 rng(5);
        Tensor x = randn({4}, rng, 1.0, true);
        Tensor w1 = randn({4}, rng), w2 = randn({4}, rng);
        auto path1 = [&](const Tensor& v) { return sum(mul(mul(v, v), w1)); };
        auto path2 = [&](const Tensor& v) { return sum(mul(softmax(v), w2)); };
        std::vector<double> g1, g2;
        {
            Tape t;
            t.backward(path1(x));
            g1.assign(x.grad().begin(), x.grad().end());
        }
        x.zero_grad();
        {
            Tape t;
            t.backward(path2(x));
            g2.assign(x.grad().begin(), x.grad().end());
        }
        x.zero_grad();
        Tape t;
        t.backward(add(path1(x), path2(x)));
        for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-14));
    }
    SUBCASE("second backward without reset is an error") {
        Tensor x({1}, {2.0}, true);
        Tape t;
        Tensor l = mul(x, x);
        t.backward(l);
        CHECK_THROWS_AS(t.backward(l), ContractError);
        t.reset();
        Tensor l2 = mul(x, x);
        CHECK_NOTHROW(t.backward(l2));
    }
    SUBCASE("non-scalar loss") {
        Tensor x({2}, {1, 2}, true);
        Tape t;
        CHECK_THROWS_AS(t.backward(scale(x, 2.0)), ContractError);
    }
    SUBCASE("relu subgradient at zero is zero") {
        Tensor x({3}, {-1.0, 0.0, 2.0}, true);
        Tape t;
        t.backward(sum(relu(x)));
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 0.0);
        CHECK(x.grad()[2] == 1.0);
    }
    SUBCASE("non-finite results are rejected") {
        CHECK_THROWS_AS(scale(Tensor({1}, {1e300}), 1e300), ContractError);
    }
}

TEST_CASE("no tape means nothing is recorded") {
    Tensor x({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite_diff_check on every differentiable op, 20 seeds") {
    constexpr double h = 1e-5;
    constexpr double tol = 1e-4;
    for (unsigned seed = 0; seed < 20; ++seed) {
        CAPTURE(seed);
        std::mt19937_64 rng(seed + 100);
        Tensor a = randn({3, 4}, rng), b = randn({3, 4}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(add(x, b), sub(x, b))); }, a, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(scale(x, 0.7), b)); }, a, h) < tol);
        Tensor off = rand_off_zero({3, 4}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(relu(x), b)); }, off, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(softmax(x, 0), b)); }, a, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(softmax(x, -1), b)); }, a, h) < tol);
        Tensor m = randn({4, 5}, rng), w = randn({3, 5}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(matmul(x, m), matmul(x, m))); }, a, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(matmul(a, x), matmul(a, x))); }, m, h) < tol);
        Tensor bias = randn({3}, rng);
        Tensor lin_in = randn({2, 3, 5}, rng);
        auto lin_sq = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
            Tensor y = linear(xx, ww, &bb);
            return sum(mul(y, y));
        };
        CHECK(finite_diff_check([&](const Tensor& x) { return lin_sq(x, w, bias); }, lin_in, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return lin_sq(lin_in, x, bias); }, w, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return lin_sq(lin_in, w, x); }, bias, h) < tol);
        Tensor bm = randn({2, 3, 4}, rng), bn = randn({2, 4, 2}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(matmul(x, bn), matmul(x, bn))); }, bm, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) {
                  Tensor t = transpose_last2(x);
                  return sum(mul(t, transpose_last2(bm)));
              }, bm, h) < tol);
        Tensor r5 = randn({2, 3, 2, 2}, rng), w5 = randn({2, 3}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(mean_trailing(x, 2), w5)); }, r5, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return mul(mean(x), mean(x)); }, r5, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) {
                  Tensor y = reshape(x, {4, 6});
                  return sum(mul(y, y));
              }, r5, h) < tol);

        Tensor img = randn({2, 2, 6, 5}, rng), k2 = randn({3, 2, 3, 3}, rng), b2 = randn({3}, rng);
        auto c2 = [&](const Tensor& xx, const Tensor& kk, const Tensor& bb) {
            Tensor y = conv2d(xx, kk, &bb, {2, 1, 1, 1});
            return sum(mul(y, y));
        };
        CHECK(finite_diff_check([&](const Tensor& x) { return c2(x, k2, b2); }, img, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return c2(img, x, b2); }, k2, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return c2(img, k2, x); }, b2, h) < tol);

        Tensor vol = randn({1, 2, 4, 5, 3}, rng), k3 = randn({2, 2, 3, 3, 3}, rng), b3 = randn({2}, rng);
        auto c3 = [&](const Tensor& xx, const Tensor& kk, const Tensor& bb) {
            Tensor y = conv3d(xx, kk, &bb, {2, 2, 1, 1, 1, 1});
            return sum(mul(y, y));
        };
        CHECK(finite_diff_check([&](const Tensor& x) { return c3(x, k3, b3); }, vol, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return c3(vol, x, b3); }, k3, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return c3(vol, k3, x); }, b3, h) < tol);

        Tensor q = randn({3, 4}, rng), kk = randn({5, 4}, rng), vv = randn({5, 2}, rng), wo = randn({3, 2}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(scaled_dot_attention(x, kk, vv), wo)); }, q, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(scaled_dot_attention(q, x, vv), wo)); }, kk, h) < tol);
        CHECK(finite_diff_check([&](const Tensor& x) { return sum(mul(scaled_dot_attention(q, kk, x), wo)); }, vv, h) < tol);

        Tensor target = random_distribution(6, rng);
        Tensor logits = randn({6}, rng);
        CHECK(finite_diff_check([&](const Tensor& x) { return kl_div(target, softmax(x)); }, logits, h) < tol);
    }
}

TEST_CASE("finite_diff_check on a composed conv-relu-attention-kl pipeline") {
    for (unsigned seed = 0; seed < 20; ++seed) {
        CAPTURE(seed);
        std::mt19937_64 rng(seed + 900);
        Tensor k = randn({4, 1, 3, 3}, rng, 0.5);
        Tensor wq = randn({4, 4}, rng, 0.5);
        Tensor head = randn({5, 16}, rng, 0.5);
        Tensor target = random_distribution(5, rng);
        // nudge: redraw the input until no conv pre-activation sits near the relu kink
        Tensor x = randn({1, 1, 8, 6}, rng);
        for (;;) {
            Tensor pre = conv2d(x, k, nullptr, {2, 2, 1, 1});
            if (std::all_of(pre.data().begin(), pre.data().end(), [](double v) { return std::abs(v) > 1e-2; })) break;
            x = randn({1, 1, 8, 6}, rng);
        }
        auto g = [&](const Tensor& in) {
            Tensor feat = relu(conv2d(in, k, nullptr, {2, 2, 1, 1}));  // [1,4,4,3]
            Tensor tokens = transpose_last2(reshape(mean_trailing(feat, 1), {4, 4}));
            Tensor fused = add(scaled_dot_attention(linear(tokens, wq), tokens, tokens), tokens);
            Tensor logits = linear(reshape(fused, {1, 16}), head);
            return kl_div(reshape(target, {1, 5}), softmax(logits));
        };
        CHECK(finite_diff_check(g, x, 1e-4) < 1e-4);
    }
}

TEST_CASE("finite_diff_check detects a corrupted backward rule") {
    // y = x^2 with a deliberately wrong backward of 5x instead of 2x
    auto bad_square = [](const Tensor& x) {
        std::vector<double> out(x.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
        const bool rec = Tape::recording({&x});
        Tensor r(x.shape(), out, rec);
        if (rec) {
            Tape::current()->record(r, [r, x]() mutable {
                std::vector<double> g(x.numel());
                for (std::size_t i = 0; i < g.size(); ++i) g[i] = 5.0 * x[i] * r.grad()[i];
                accumulate_grad(x, g);
            });
        }
        return r;
    };
    Tensor x({3}, {0.5, 1.0, -2.0});
    CHECK(finite_diff_check([&](const Tensor& v) { return sum(bad_square(v)); }, x, 1e-4) > 1e-2);
    CHECK(finite_diff_check([&](const Tensor& v) { return sum(scale(v, 3.0)); }, x, 1e-4) < 1e-10);
}

TEST_CASE("adam_step") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        std::vector<Tensor> p{Tensor({3}, {1, 2, 3})};
        AdamState s;
        std::vector<std::vector<double>> g{{0, 0, 0}};
        adam_step(p, g, s);
        CHECK(p[0][0] == 1.0);
        CHECK(p[0][2] == 3.0);
    }
    SUBCASE("first step moves by about lr against the gradient sign") {
        std::vector<Tensor> p{Tensor({3}, {0, 0, 0})};
        AdamState s;
        std::vector<std::vector<double>> g{{0.3, -4.0, 1e-3}};
        adam_step(p, g, s);
        // m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        CHECK(p[0][0] == doctest::Approx(-1e-3 * 0.3 / (0.3 + 1e-8)));
        CHECK(p[0][1] == doctest::Approx(1e-3 * 4.0 / (4.0 + 1e-8)));
        CHECK(p[0][2] == doctest::Approx(-1e-3 * 1e-3 / (1e-3 + 1e-8)));
    }
    SUBCASE("identical gradients give identical bias-corrected steps") {
        std::vector<Tensor> p{Tensor({1}, {0.0})};
        AdamState s;
        std::vector<std::vector<double>> g{{0.25}};
        adam_step(p, g, s);
        const double step1 = p[0][0];
        adam_step(p, g, s);
        CHECK(p[0][0] - step1 == doctest::Approx(step1).epsilon(1e-12));
    }
    SUBCASE("step shrinks when the gradient flips sign") {
        std::vector<Tensor> p{Tensor({1}, {0.0})};
        AdamState s;
        std::vector<std::vector<double>> g1{{1.0}}, g2{{-1.0}};
        adam_step(p, g1, s);
        const double after1 = p[0][0];
        adam_step(p, g2, s);
        const double step2 = p[0][0] - after1;
        const double m = (0.9 * 0.1 * 1.0 + 0.1 * -1.0) / (1 - 0.81);
        const double v = (0.999 * 0.001 + 0.001) / (1 - 0.999 * 0.999);
        CHECK(step2 == doctest::Approx(-1e-3 * m / (std::sqrt(v) + 1e-8)));
        CHECK(std::abs(step2) < std::abs(after1));
    }
    SUBCASE("shape mismatch") {
        std::vector<Tensor> p{Tensor({2}, {0, 0})};
        AdamState s;
        std::vector<std::vector<double>> g{{1.0}};
        CHECK_THROWS_AS(adam_step(p, g, s), ShapeError);
    }
}
