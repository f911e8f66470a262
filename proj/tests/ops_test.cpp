#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "util.hpp"
#include "xmgc/ops.hpp"
#include "xmgc/tensor.hpp"

using namespace xmgc;
using testutil::close;
using testutil::random_tensor;

namespace {

// Brute-force cross-correlation, all six loops spelled out, f64 accumulation.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& k, const Tensor& b, int stride,
                                int padding, int& oh, int& ow) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    oh = (h + 2 * padding - kh) / stride + 1;
    ow = (w + 2 * padding - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(n) * cout * oh * ow, 0.0);
    auto xv = x.values();
    auto kv = k.values();
    auto bv = b.values();
    for (int ni = 0; ni < n; ++ni)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bv[co];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v) {
                                const int iy = oy * stride - padding + u;
                                const int ix = ox * stride - padding + v;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(
                                           xv[((ni * cin + ci) * h + iy) * w + ix]) *
                                       kv[((co * cin + ci) * kh + u) * kw + v];
                            }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
    return out;
}

// Fractionally-strided convolution by its defining scatter: every input
// pixel deposits kernel-weighted contributions onto the output grid.
std::vector<double> convt_oracle(const Tensor& x, const Tensor& k, const Tensor& b, int stride,
                                 int padding, int& oh, int& ow) {
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    oh = (h - 1) * stride - 2 * padding + kh;
    ow = (w - 1) * stride - 2 * padding + kw;
    std::vector<double> out(static_cast<std::size_t>(n) * cout * oh * ow, 0.0);
    auto xv = x.values();
    auto kv = k.values();
    auto bv = b.values();
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < cin; ++ci)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < w; ++ix)
                    for (int co = 0; co < cout; ++co)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v) {
                                const int oy = iy * stride - padding + u;
                                const int ox = ix * stride - padding + v;
                                if (oy < 0 || oy >= oh || ox < 0 || ox >= ow) continue;
                                out[((ni * cout + co) * oh + oy) * ow + ox] +=
                                    static_cast<double>(xv[((ni * cin + ci) * h + iy) * w + ix]) *
                                    kv[((ci * cout + co) * kh + u) * kw + v];
                            }
    for (int ni = 0; ni < n; ++ni)
        for (int co = 0; co < cout; ++co)
            for (int i = 0; i < oh * ow; ++i) out[(ni * cout + co) * oh * ow + i] += bv[co];
    return out;
}

void check_against(const Tensor& got, const std::vector<double>& want) {
    REQUIRE(static_cast<std::size_t>(got.numel()) == want.size());
    auto gv = got.values();
    for (std::size_t i = 0; i < want.size(); ++i) {
        if (!close(gv[i], want[i])) {
            CAPTURE(i);
            CHECK(gv[i] == doctest::Approx(want[i]).epsilon(1e-4));
            return;
        }
    }
    CHECK(true);
}

}  // namespace

TEST_CASE("conv2d matches the six-loop oracle") {
    Rng rng(1, RngStream::Test);
    for (const auto& [stride, padding] : {std::pair{1, 0}, {1, 1}, {2, 1}, {2, 0}, {3, 2}}) {
        Tensor x = random_tensor({2, 3, 9, 8}, rng);
        Tensor k = random_tensor({4, 3, 3, 3}, rng);
        Tensor b = random_tensor({4}, rng);
        Tensor y = conv2d(x, k, b, stride, padding);
        int oh = 0, ow = 0;
        const auto want = conv_oracle(x, k, b, stride, padding, oh, ow);
        CHECK(y.shape() == Shape{2, 4, oh, ow});
        check_against(y, want);
    }
}

TEST_CASE("conv2d stride-2 k4 halves the spatial dims") {
    Rng rng(2, RngStream::Test);
    Tensor x = random_tensor({1, 3, 64, 64}, rng);
    Tensor k = random_tensor({8, 3, 4, 4}, rng);
    Tensor b = Tensor::zeros({8});
    CHECK(conv2d(x, k, b, 2, 1).shape() == Shape{1, 8, 32, 32});
}

TEST_CASE("conv2d rejects bad geometry") {
    Tensor x = Tensor::zeros({1, 3, 8, 8});
    Tensor k = Tensor::zeros({4, 2, 3, 3});  // channel mismatch
    Tensor b = Tensor::zeros({4});
    CHECK_THROWS_AS(conv2d(x, k, b, 1, 0), ShapeError);
    Tensor k2 = Tensor::zeros({4, 3, 11, 11});  // window larger than padded input
    CHECK_THROWS_AS(conv2d(x, k2, Tensor::zeros({4}), 1, 0), ShapeError);
    Tensor k3 = Tensor::zeros({4, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, k3, b, 0, 0), ValueError);   // stride
    CHECK_THROWS_AS(conv2d(x, k3, b, 1, -1), ValueError);  // padding
    CHECK_THROWS_AS(conv2d(x, k3, Tensor::zeros({5}), 1, 0), ShapeError);  // bias size
}

TEST_CASE("conv2d_transpose matches the scatter oracle") {
    Rng rng(3, RngStream::Test);
    for (const auto& [stride, padding] : {std::pair{1, 0}, {2, 1}, {2, 0}, {3, 1}}) {
        Tensor x = random_tensor({2, 3, 5, 6}, rng);
        Tensor k = random_tensor({3, 4, 4, 4}, rng);
        Tensor b = random_tensor({4}, rng);
        Tensor y = conv2d_transpose(x, k, b, stride, padding);
        int oh = 0, ow = 0;
        const auto want = convt_oracle(x, k, b, stride, padding, oh, ow);
        CHECK(y.shape() == Shape{2, 4, oh, ow});
        check_against(y, want);
    }
}

TEST_CASE("conv2d_transpose stride-2 k4 doubles the spatial dims") {
    Rng rng(4, RngStream::Test);
    Tensor x = random_tensor({1, 8, 16, 16}, rng);
    Tensor k = random_tensor({8, 3, 4, 4}, rng);
    CHECK(conv2d_transpose(x, k, Tensor::zeros({3}), 2, 1).shape() == Shape{1, 3, 32, 32});
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
    // <conv(x), y> == <x, convT(y)> with the shared kernel buffer.
    Rng rng(5, RngStream::Test);
    for (const auto& [stride, padding] : {std::pair{1, 0}, {2, 1}, {1, 1}}) {
        Tensor x = random_tensor({2, 2, 8, 8}, rng);
        std::vector<float> kbuf;
        {
            Tensor tmp = random_tensor({3, 2, 4, 4}, rng);
            kbuf.assign(tmp.values().begin(), tmp.values().end());
        }
        Tensor k_fwd = Tensor::from({3, 2, 4, 4}, std::vector<float>(kbuf));   // [Cout,Cin,kh,kw]
        Tensor k_adj = Tensor::from({3, 2, 4, 4}, std::vector<float>(kbuf));   // [Cin,Cout,kh,kw]
        Tensor zero_fwd = Tensor::zeros({3});
        Tensor zero_adj = Tensor::zeros({2});

        Tensor cx = conv2d(x, k_fwd, zero_fwd, stride, padding);
        Tensor y = random_tensor(cx.shape(), rng);
        Tensor ty = conv2d_transpose(y, k_adj, zero_adj, stride, padding);
        REQUIRE(ty.shape() == x.shape());

        const double lhs = dot(cx, y).item64();
        const double rhs = dot(x, ty).item64();
        CHECK(std::abs(lhs - rhs) <=
              1e-4 * std::max({std::abs(lhs), std::abs(rhs), 1.0}));
    }
}

TEST_CASE("batchnorm2d train mode matches batch statistics oracle") {
    Rng rng(6, RngStream::Test);
    const int n = 3, c = 4, h = 5, w = 5;
    Tensor x = random_tensor({n, c, h, w}, rng);
    Tensor gamma = random_tensor({c}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({c}, rng, -0.5, 0.5);
    Tensor rmean = Tensor::zeros({c});
    Tensor rvar = Tensor::full({c}, 1.0f);
    const float momentum = 0.99f, eps = 1e-5f;

    Tensor y = batchnorm2d(x, gamma, beta, rmean, rvar, true, momentum, eps);

    auto xv = x.values();
    const int m = n * h * w;
    for (int ci = 0; ci < c; ++ci) {
        double sum = 0, sq = 0;
        for (int ni = 0; ni < n; ++ni)
            for (int i = 0; i < h * w; ++i) sum += xv[(ni * c + ci) * h * w + i];
        const double mean = sum / m;
        for (int ni = 0; ni < n; ++ni)
            for (int i = 0; i < h * w; ++i) {
                const double d = xv[(ni * c + ci) * h * w + i] - mean;
                sq += d * d;
            }
        const double var_biased = sq / m;
        const double var_unbiased = sq / (m - 1);
        const double istd = 1.0 / std::sqrt(var_biased + eps);

        auto yv = y.values();
        for (int ni = 0; ni < n; ++ni)
            for (int i = 0; i < h * w; ++i) {
                const std::size_t idx = (ni * c + ci) * h * w + i;
                const double want = gamma.values()[ci] * (xv[idx] - mean) * istd +
                                    beta.values()[ci];
                REQUIRE(close(yv[idx], want));
            }
        CHECK(close(rmean.values()[ci], momentum * 0.0 + (1 - momentum) * mean, 1e-4, 1e-6));
        CHECK(close(rvar.values()[ci], momentum * 1.0 + (1 - momentum) * var_unbiased, 1e-4,
                    1e-6));
    }
}

TEST_CASE("batchnorm2d infer mode reads running buffers") {
    Rng rng(7, RngStream::Test);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor gamma = Tensor::full({3}, 2.0f);
    Tensor beta = Tensor::full({3}, 0.25f);
    Tensor rmean = Tensor::from({3}, {0.1f, -0.2f, 0.3f});
    Tensor rvar = Tensor::from({3}, {1.5f, 0.5f, 2.0f});
    Tensor rmean_copy = rmean.clone(), rvar_copy = rvar.clone();

    Tensor y = batchnorm2d(x, gamma, beta, rmean, rvar, false, 0.99f, 1e-5f);
    auto xv = x.values();
    auto yv = y.values();
    for (int ci = 0; ci < 3; ++ci) {
        const double istd = 1.0 / std::sqrt(rvar.values()[ci] + 1e-5);
        for (int ni = 0; ni < 2; ++ni)
            for (int i = 0; i < 16; ++i) {
                const std::size_t idx = (ni * 3 + ci) * 16 + i;
                REQUIRE(close(yv[idx],
                              2.0 * (xv[idx] - rmean.values()[ci]) * istd + 0.25));
            }
    }
    // Inference must not move the running stats.
    CHECK(testutil::max_abs_diff(rmean.values(), rmean_copy.values()) == 0.0);
    CHECK(testutil::max_abs_diff(rvar.values(), rvar_copy.values()) == 0.0);
}

TEST_CASE("batchnorm2d rejects single-element statistics in train mode") {
    Tensor x = Tensor::zeros({1, 2, 1, 1});
    Tensor g = Tensor::full({2}, 1.0f), b = Tensor::zeros({2});
    Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0f);
    CHECK_THROWS_AS(batchnorm2d(x, g, b, rm, rv, true, 0.99f, 1e-5f), ValueError);
    CHECK_NOTHROW(batchnorm2d(x, g, b, rm, rv, false, 0.99f, 1e-5f));
}

TEST_CASE("activations match their definitions pointwise") {
    Tensor x = Tensor::from({7}, {-3.0f, -1.0f, -0.25f, 0.0f, 0.25f, 1.0f, 3.0f});
    Tensor r = relu(x), l = leaky_relu(x, 0.2f), s = sigmoid(x), t = xmgc::tanh(x);
    for (int i = 0; i < 7; ++i) {
        const double v = x.values()[i];
        CHECK(r.values()[i] == doctest::Approx(std::max(0.0, v)));
        CHECK(l.values()[i] == doctest::Approx(v > 0 ? v : 0.2 * v));
        CHECK(s.values()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-v))).epsilon(1e-6));
        CHECK(t.values()[i] == doctest::Approx(std::tanh(v)).epsilon(1e-6));
    }
    // Saturation stays finite.
    Tensor big = Tensor::from({2}, {100.0f, -100.0f});
    Tensor sb = sigmoid(big), tb = xmgc::tanh(big);
    for (float v : sb.values()) CHECK(std::isfinite(v));
    for (float v : tb.values()) CHECK(std::isfinite(v));
    CHECK(sb.values()[0] == doctest::Approx(1.0));
    CHECK(sb.values()[1] == doctest::Approx(0.0));
}

TEST_CASE("concat_channels stacks along C and checks the rest") {
    Tensor a = Tensor::from({1, 2, 1, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({1, 1, 1, 2}, {9, 8});
    Tensor c = concat_channels(a, b);
    CHECK(c.shape() == Shape{1, 3, 1, 2});
    CHECK(c.values()[4] == 9.0f);
    CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({1, 1, 2, 2})), ShapeError);
    CHECK_THROWS_AS(concat_channels(a, Tensor::zeros({2, 1, 1, 2})), ShapeError);
}

TEST_CASE("linear matches the affine oracle") {
    Rng rng(8, RngStream::Test);
    Tensor x = random_tensor({3, 5}, rng);
    Tensor wt = random_tensor({2, 5}, rng);
    Tensor b = random_tensor({2}, rng);
    Tensor y = linear(x, wt, b);
    CHECK(y.shape() == Shape{3, 2});
    for (int n = 0; n < 3; ++n)
        for (int k = 0; k < 2; ++k) {
            double acc = b.values()[k];
            for (int f = 0; f < 5; ++f)
                acc += static_cast<double>(x.values()[n * 5 + f]) * wt.values()[k * 5 + f];
            CHECK(close(y.values()[n * 2 + k], acc));
        }
    CHECK_THROWS_AS(linear(x, Tensor::zeros({2, 4}), b), ShapeError);
}

TEST_CASE("flatten2d and global_avg_pool") {
    Tensor x = Tensor::from({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor f = flatten2d(x);
    CHECK(f.shape() == Shape{2, 4});
    CHECK(f.values()[5] == 6.0f);

    Tensor p = global_avg_pool(x);
    CHECK(p.shape() == Shape{2, 2});
    CHECK(p.values()[0] == doctest::Approx(1.5));
    CHECK(p.values()[3] == doctest::Approx(7.5));
}

TEST_CASE("elementwise arithmetic and shape guards") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 2}, {10, 20, 30, 40});
    CHECK(add(a, b).values()[2] == 33.0f);
    CHECK(mul(a, b).values()[3] == 160.0f);
    CHECK(scale(a, -2.0f).values()[1] == -4.0f);
    CHECK_THROWS_AS(add(a, Tensor::zeros({4})), ShapeError);
    CHECK_THROWS_AS(mul(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("reductions accumulate in double") {
    Tensor a = Tensor::from({4}, {0.1f, 0.2f, 0.3f, 0.4f});
    CHECK(sum(a).item64() ==
          doctest::Approx(static_cast<double>(0.1f) + static_cast<double>(0.2f) +
                          static_cast<double>(0.3f) + static_cast<double>(0.4f))
              .epsilon(1e-15));
    CHECK(mean(a).item64() == doctest::Approx(sum(a).item64() / 4).epsilon(1e-15));
    Tensor b = Tensor::from({4}, {1, 2, 3, 4});
    CHECK(dot(a, b).item64() ==
          doctest::Approx(static_cast<double>(0.1f) * 1 + static_cast<double>(0.2f) * 2 +
                          static_cast<double>(0.3f) * 3 + static_cast<double>(0.4f) * 4)
              .epsilon(1e-15));
    CHECK_THROWS_AS(dot(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("bce_loss frozen values and clamping") {
    Tensor half = Tensor::from({1}, {0.5f});
    CHECK(bce_loss(half, 1).item64() == doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK(bce_loss(half, 0).item64() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

    // Probabilities at the boundary hit the clamp instead of infinity.
    Tensor zero = Tensor::from({1}, {0.0f});
    CHECK(bce_loss(zero, 1).item64() == doctest::Approx(-std::log(kBceClamp)).epsilon(1e-9));
    Tensor one = Tensor::from({1}, {1.0f});
    CHECK(bce_loss(one, 0).item64() == doctest::Approx(-std::log(kBceClamp)).epsilon(1e-9));
    CHECK(std::isfinite(bce_loss(zero, 1).item64()));
    CHECK_THROWS_AS(bce_loss(half, 2), ValueError);

    // Mean over elements.
    Tensor two = Tensor::from({2}, {0.5f, 0.25f});
    CHECK(bce_loss(two, 1).item64() ==
          doctest::Approx((-std::log(0.5) - std::log(0.25)) / 2).epsilon(1e-9));
}

TEST_CASE("l1_loss value and subgradient at zero") {
    Tensor a = Tensor::from({2}, {1.0f, -2.0f}, true);
    Tensor b = Tensor::from({2}, {0.0f, 0.0f});
    CHECK(l1_loss(a, b).item64() == doctest::Approx(1.5).epsilon(1e-12));

    // sign(0) = 0: equal inputs give a zero gradient, not garbage.
    Tensor c = Tensor::from({2}, {3.0f, 4.0f}, true);
    Tensor d = Tensor::from({2}, {3.0f, 4.0f});
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(l1_loss(c, d));
    }
    CHECK(c.grad()[0] == 0.0f);
    CHECK(c.grad()[1] == 0.0f);
    c.clear_grad();
    CHECK_THROWS_AS(l1_loss(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("softmax_cross_entropy frozen value and gradient") {
    Tensor logits = Tensor::from({1, 2}, {0.0f, 0.0f}, true);
    Tensor loss = softmax_cross_entropy(logits, {0});
    CHECK(loss.item64() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor l = softmax_cross_entropy(logits, {0});
        tape.backward(l);
    }
    // p - onehot = (0.5-1, 0.5-0)
    CHECK(logits.grad()[0] == doctest::Approx(-0.5).epsilon(1e-6));
    CHECK(logits.grad()[1] == doctest::Approx(0.5).epsilon(1e-6));
    logits.clear_grad();

    CHECK_THROWS_AS(softmax_cross_entropy(logits, {2}), ValueError);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), ShapeError);

    // Large logits stay finite (log-sum-exp shift).
    Tensor big = Tensor::from({1, 2}, {1000.0f, -1000.0f});
    CHECK(std::isfinite(softmax_cross_entropy(big, {0}).item64()));
    CHECK(softmax_cross_entropy(big, {0}).item64() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("softmax rows and argmax tie-break") {
    Tensor logits = Tensor::from({2, 3}, {1, 2, 3, 5, 5, 0});
    Tensor p = softmax(logits);
    for (int n = 0; n < 2; ++n) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += p.values()[n * 3 + k];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    const auto am = argmax_rows(logits);
    CHECK(am[0] == 2);
    CHECK(am[1] == 0);  // first maximum wins the tie
}
