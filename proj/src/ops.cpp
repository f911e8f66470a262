#include "xmgc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "xmgc/threads.hpp"

namespace xmgc {

namespace {

// ---------------------------------------------------------------------------
// Scratch buffers, reused across calls on the same thread.

std::vector<float>& scratch(int slot) {
    thread_local std::vector<float> buffers[4];
    return buffers[slot];
}

float* scratch_resize(int slot, std::int64_t n) {
    auto& buf = scratch(slot);
    if (static_cast<std::int64_t>(buf.size()) < n) buf.resize(static_cast<std::size_t>(n));
    return buf.data();
}

// ---------------------------------------------------------------------------
// Matrix kernels. f32 accumulation in a fixed order; work is only ever split
// at output-row boundaries, so results do not depend on the worker count.

constexpr int kRowTile = 4;
constexpr int kColTile = 16;

// Explicit vector types: the compiler lowers these to the widest unit the
// target supports, and the codegen no longer depends on the calling context
// (the autovectorizer picks narrow vectors for the same loop in some
// surroundings).
using vf16 = float __attribute__((vector_size(64)));
using vf8 = float __attribute__((vector_size(32)));

inline vf16 load16(const float* p) {
    vf16 v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}

inline void store16(float* p, vf16 v) { __builtin_memcpy(p, &v, sizeof(v)); }

inline vf8 load8(const float* p) {
    vf8 v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}

// One R x 16 output tile held in registers across the whole K loop.
template <int R>
void nn_tile(const float* __restrict A, std::int64_t lda, const float* __restrict B,
             std::int64_t ldb, int K, float* __restrict C, std::int64_t ldc, bool accumulate) {
    vf16 acc[R] = {};
    for (int k = 0; k < K; ++k) {
        const vf16 bv = load16(B + k * ldb);
        for (int r = 0; r < R; ++r) acc[r] += bv * A[r * lda + k];
    }
    for (int r = 0; r < R; ++r) {
        float* crow = C + r * ldc;
        store16(crow, accumulate ? load16(crow) + acc[r] : acc[r]);
    }
}

void gemm_nt(int M, int N, int K, const float* A, const float* B, float* C, bool accumulate);
void transpose(const float* src, float* dst, int rows, int cols);

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(int M, int N, int K, const float* __restrict A, const float* __restrict B,
             float* __restrict C, bool accumulate) {
    if (N < kColTile && K >= 4 * kColTile) {
        // Narrow output: dot-product form over a transposed B wins.
        float* bt = scratch_resize(3, static_cast<std::int64_t>(N) * K);
        transpose(B, bt, K, N);
        gemm_nt(M, N, K, A, bt, C, accumulate);
        return;
    }
    const int full_j = N - N % kColTile;
    parallel_for(0, (M + kRowTile - 1) / kRowTile, 8, [&](std::int64_t blk_lo, std::int64_t blk_hi) {
        for (std::int64_t blk = blk_lo; blk < blk_hi; ++blk) {
            const int i0 = static_cast<int>(blk) * kRowTile;
            const int rows = std::min(kRowTile, M - i0);
            const float* __restrict abase = A + static_cast<std::int64_t>(i0) * K;
            for (int j0 = 0; j0 < full_j; j0 += kColTile) {
                float* ctile = C + static_cast<std::int64_t>(i0) * N + j0;
                switch (rows) {
                    case 4: nn_tile<4>(abase, K, B + j0, N, K, ctile, N, accumulate); break;
                    case 3: nn_tile<3>(abase, K, B + j0, N, K, ctile, N, accumulate); break;
                    case 2: nn_tile<2>(abase, K, B + j0, N, K, ctile, N, accumulate); break;
                    default: nn_tile<1>(abase, K, B + j0, N, K, ctile, N, accumulate); break;
                }
            }
            if (full_j < N) {
                const int cols = N - full_j;
                float acc[kRowTile * kColTile] = {};
                for (int k = 0; k < K; ++k) {
                    const float* __restrict b = B + static_cast<std::int64_t>(k) * N + full_j;
                    for (int r = 0; r < rows; ++r) {
                        const float a = abase[static_cast<std::int64_t>(r) * K + k];
                        float* __restrict arow = acc + r * kColTile;
                        for (int l = 0; l < cols; ++l) arow[l] += a * b[l];
                    }
                }
                for (int r = 0; r < rows; ++r) {
                    float* __restrict crow = C + static_cast<std::int64_t>(i0 + r) * N + full_j;
                    const float* __restrict arow = acc + r * kColTile;
                    if (accumulate) {
                        for (int l = 0; l < cols; ++l) crow[l] += arow[l];
                    } else {
                        for (int l = 0; l < cols; ++l) crow[l] = arow[l];
                    }
                }
            }
        }
    });
}

float dot_span(const float* __restrict a, const float* __restrict b, int K) {
    vf8 lanes = {};
    int k = 0;
    for (; k + 8 <= K; k += 8) lanes += load8(a + k) * load8(b + k);
    float tail = 0.0f;
    for (; k < K; ++k) tail += a[k] * b[k];
    float s0 = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    float s1 = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    return (s0 + s1) + tail;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(int M, int N, int K, const float* __restrict A, const float* __restrict B,
             float* __restrict C, bool accumulate) {
    if (K < 8 && N >= kColTile) {
        // Short reductions starve the dot kernel; rebuild as row-major B.
        float* bt = scratch_resize(3, static_cast<std::int64_t>(K) * N);
        transpose(B, bt, N, K);
        gemm_nn(M, N, K, A, bt, C, accumulate);
        return;
    }
    // Column tile sized so the B tile stays cache-resident across the m loop.
    int nt = K > 0 ? static_cast<int>(std::clamp<std::int64_t>((512 * 1024) / (K * 4), 16, N)) : N;
    for (int n0 = 0; n0 < N; n0 += nt) {
        int n1 = std::min(N, n0 + nt);
        parallel_for(0, M, 16, [&](std::int64_t m_lo, std::int64_t m_hi) {
            for (std::int64_t m = m_lo; m < m_hi; ++m) {
                const float* arow = A + m * K;
                float* crow = C + m * N;
                for (int n = n0; n < n1; ++n) {
                    float v = dot_span(arow, B + static_cast<std::int64_t>(n) * K, K);
                    if (accumulate) {
                        crow[n] += v;
                    } else {
                        crow[n] = v;
                    }
                }
            }
        });
    }
}

// dst[c*rows + r] = src[r*cols + c]
void transpose(const float* src, float* dst, int rows, int cols) {
    constexpr int T = 16;
    for (int r0 = 0; r0 < rows; r0 += T) {
        int r1 = std::min(rows, r0 + T);
        for (int c0 = 0; c0 < cols; c0 += T) {
            int c1 = std::min(cols, c0 + T);
            for (int r = r0; r < r1; ++r) {
                for (int c = c0; c < c1; ++c) {
                    dst[static_cast<std::int64_t>(c) * rows + r] =
                        src[static_cast<std::int64_t>(r) * cols + c];
                }
            }
        }
    }
}

// col[(c*kh+ki)*kw+kj][oh*Wo+ow] = x[c][oh*s-p+ki][ow*s-p+kj], zero outside.
void im2col(const float* __restrict x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, float* __restrict col) {
    const std::int64_t ohw = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        const float* plane = x + static_cast<std::int64_t>(c) * H * W;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                float* row = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) * ohw;
                for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride - pad + ki;
                    float* dst = row + static_cast<std::int64_t>(oh) * Wo;
                    if (ih < 0 || ih >= H) {
                        std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(Wo));
                        continue;
                    }
                    const float* srow = plane + static_cast<std::int64_t>(ih) * W;
                    // valid ow range: 0 <= ow*stride - pad + kj < W
                    int lo = 0;
                    int shift = pad - kj;
                    if (shift > 0) lo = (shift + stride - 1) / stride;
                    int hi = Ho > 0 ? std::min(Wo, (W - 1 + shift) / stride + 1) : 0;
                    if (hi < lo) hi = lo;
                    for (int ow = 0; ow < lo; ++ow) dst[ow] = 0.0f;
                    if (stride == 1) {
                        if (hi > lo)
                            std::memcpy(dst + lo, srow + (lo - shift),
                                        sizeof(float) * static_cast<std::size_t>(hi - lo));
                    } else {
                        for (int ow = lo; ow < hi; ++ow) dst[ow] = srow[ow * stride - shift];
                    }
                    for (int ow = hi; ow < Wo; ++ow) dst[ow] = 0.0f;
                }
            }
        }
    }
}

// Adjoint of im2col with the column matrix in [position, patch-element]
// layout: x[c][oh*s-p+ki][ow*s-p+kj] += colT[oh*Wo+ow][(c*kh+ki)*kw+kj].
void col2im_rowpos(const float* __restrict colT, int C, int H, int W, int kh, int kw,
                   int stride, int pad, int Ho, int Wo, float* __restrict x) {
    const std::int64_t ckk = static_cast<std::int64_t>(C) * kh * kw;
    for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
            const float* row = colT + (static_cast<std::int64_t>(oh) * Wo + ow) * ckk;
            for (int c = 0; c < C; ++c) {
                float* plane = x + static_cast<std::int64_t>(c) * H * W;
                for (int ki = 0; ki < kh; ++ki) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    float* xrow = plane + static_cast<std::int64_t>(ih) * W;
                    const float* crow = row + (static_cast<std::int64_t>(c) * kh + ki) * kw;
                    for (int kj = 0; kj < kw; ++kj) {
                        int iw = ow * stride - pad + kj;
                        if (iw < 0 || iw >= W) continue;
                        xrow[iw] += crow[kj];
                    }
                }
            }
        }
    }
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

void record_if(bool rec, const char* op, std::vector<std::shared_ptr<TensorData>> inputs,
               Tensor& out, std::function<void()> backward) {
    if (!rec) return;
    out.set_requires_grad(true);
    Tape::active()->record(Tape::Node{op, std::move(inputs), out.data(), std::move(backward)});
}

Tensor make_scalar(double value) {
    Tensor t = Tensor::from({1}, {static_cast<float>(value)});
    t.data()->scalar64 = value;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
    require(input.rank() == 4, "conv2d input must be [N,C,H,W], got " + shape_str(input.shape()));
    require(kernel.rank() == 4,
            "conv2d kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    }
    require(bias.rank() == 1 && bias.dim(0) == cout,
            "conv2d bias must be [" + std::to_string(cout) + "], got " + shape_str(bias.shape()));
    if (stride < 1) throw ValueError("conv2d stride must be positive");
    if (padding < 0) throw ValueError("conv2d padding must be non-negative");
    require(h + 2 * padding >= kh && w + 2 * padding >= kw,
            "conv2d window " + std::to_string(kh) + "x" + std::to_string(kw) +
                " exceeds padded input " + shape_str(input.shape()));

    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;
    const std::int64_t ckk = static_cast<std::int64_t>(cin) * kh * kw;
    const std::int64_t ohw = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t in_plane = static_cast<std::int64_t>(cin) * h * w;
    const std::int64_t out_plane = static_cast<std::int64_t>(cout) * ohw;

    Tensor out = Tensor::zeros({n, cout, ho, wo});
    {
        float* col = scratch_resize(0, ckk * ohw);
        const float* xp = input.values().data();
        const float* kp = kernel.values().data();
        const float* bp = bias.values().data();
        float* op = out.mutable_values().data();
        for (int i = 0; i < n; ++i) {
            im2col(xp + i * in_plane, cin, h, w, kh, kw, stride, padding, ho, wo, col);
            gemm_nn(cout, static_cast<int>(ohw), static_cast<int>(ckk), kp, col,
                    op + i * out_plane, false);
            for (int c = 0; c < cout; ++c) {
                float b = bp[c];
                float* row = op + i * out_plane + c * ohw;
                for (std::int64_t j = 0; j < ohw; ++j) row[j] += b;
            }
        }
    }

    bool rec = recording({&input, &kernel, &bias});
    auto xd = input.data(), kd = kernel.data(), bd = bias.data(), od = out.data();
    record_if(rec, "conv2d", {xd, kd, bd}, out,
              [=]() {
                  const std::int64_t ckk2 = ckk, ohw2 = ohw;
                  const float* gy = od->grad.data();
                  const bool need_gx = xd->requires_grad;
                  const bool need_gk = kd->requires_grad;
                  const bool need_gb = bd->requires_grad;
                  float* gx = need_gx ? xd->grad_buffer().data() : nullptr;
                  float* gk = need_gk ? kd->grad_buffer().data() : nullptr;
                  float* gb = need_gb ? bd->grad_buffer().data() : nullptr;
                  float* col = need_gk ? scratch_resize(0, ckk2 * ohw2) : nullptr;
                  float* gyt = need_gx ? scratch_resize(1, static_cast<std::int64_t>(cout) * ohw2) : nullptr;
                  float* gcolt = need_gx ? scratch_resize(2, ohw2 * ckk2) : nullptr;
                  for (int i = 0; i < n; ++i) {
                      const float* gyn = gy + i * out_plane;
                      if (need_gk) {
                          im2col(xd->values.data() + i * in_plane, cin, h, w, kh, kw, stride,
                                 padding, ho, wo, col);
                          gemm_nt(cout, static_cast<int>(ckk2), static_cast<int>(ohw2), gyn, col,
                                  gk, true);
                      }
                      if (need_gx) {
                          transpose(gyn, gyt, cout, static_cast<int>(ohw2));
                          gemm_nn(static_cast<int>(ohw2), static_cast<int>(ckk2), cout, gyt,
                                  kd->values.data(), gcolt, false);
                          col2im_rowpos(gcolt, cin, h, w, kh, kw, stride, padding, ho, wo,
                                        gx + i * in_plane);
                      }
                      if (need_gb) {
                          for (int c = 0; c < cout; ++c) {
                              double s = 0.0;
                              const float* row = gyn + c * ohw2;
                              for (std::int64_t j = 0; j < ohw2; ++j) s += row[j];
                              gb[c] += static_cast<float>(s);
                          }
                      }
                  }
              });
    return out;
}

Tensor conv2d_transpose(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        int stride, int padding) {
    require(input.rank() == 4,
            "conv2d_transpose input must be [N,C,H,W], got " + shape_str(input.shape()));
    require(kernel.rank() == 4,
            "conv2d_transpose kernel must be [Cin,Cout,kh,kw], got " + shape_str(kernel.shape()));
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(0) != cin) {
        throw ShapeError("conv2d_transpose channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    }
    require(bias.rank() == 1 && bias.dim(0) == cout,
            "conv2d_transpose bias must be [" + std::to_string(cout) + "], got " +
                shape_str(bias.shape()));
    if (stride < 1) throw ValueError("conv2d_transpose stride must be positive");
    if (padding < 0) throw ValueError("conv2d_transpose padding must be non-negative");
    const int ho = (h - 1) * stride - 2 * padding + kh;
    const int wo = (w - 1) * stride - 2 * padding + kw;
    if (ho < 1 || wo < 1) {
        throw ShapeError("conv2d_transpose output would be " + std::to_string(ho) + "x" +
                         std::to_string(wo) + " for input " + shape_str(input.shape()));
    }

    const std::int64_t ckk = static_cast<std::int64_t>(cout) * kh * kw;  // patch side
    const std::int64_t ihw = static_cast<std::int64_t>(h) * w;
    const std::int64_t in_plane = static_cast<std::int64_t>(cin) * ihw;
    const std::int64_t out_plane = static_cast<std::int64_t>(cout) * ho * wo;

    Tensor out = Tensor::zeros({n, cout, ho, wo});
    {
        float* xt = scratch_resize(0, static_cast<std::int64_t>(cin) * ihw);
        float* colt = scratch_resize(1, ihw * ckk);
        const float* xp = input.values().data();
        const float* kp = kernel.values().data();  // viewed as [Cin, Cout*kh*kw]
        const float* bp = bias.values().data();
        float* op = out.mutable_values().data();
        for (int i = 0; i < n; ++i) {
            transpose(xp + i * in_plane, xt, cin, static_cast<int>(ihw));
            gemm_nn(static_cast<int>(ihw), static_cast<int>(ckk), cin, xt, kp, colt, false);
            col2im_rowpos(colt, cout, ho, wo, kh, kw, stride, padding, h, w, op + i * out_plane);
            for (int c = 0; c < cout; ++c) {
                float b = bp[c];
                float* row = op + i * out_plane + static_cast<std::int64_t>(c) * ho * wo;
                for (std::int64_t j = 0; j < static_cast<std::int64_t>(ho) * wo; ++j) row[j] += b;
            }
        }
    }

    bool rec = recording({&input, &kernel, &bias});
    auto xd = input.data(), kd = kernel.data(), bd = bias.data(), od = out.data();
    record_if(rec, "conv2d_transpose", {xd, kd, bd}, out,
              [=]() {
                  const float* gy = od->grad.data();
                  const bool need_gx = xd->requires_grad;
                  const bool need_gk = kd->requires_grad;
                  const bool need_gb = bd->requires_grad;
                  float* gx = need_gx ? xd->grad_buffer().data() : nullptr;
                  float* gk = need_gk ? kd->grad_buffer().data() : nullptr;
                  float* gb = need_gb ? bd->grad_buffer().data() : nullptr;
                  float* gcol = scratch_resize(0, ckk * ihw);
                  for (int i = 0; i < n; ++i) {
                      const float* gyn = gy + i * out_plane;
                      im2col(gyn, cout, ho, wo, kh, kw, stride, padding, h, w, gcol);
                      if (need_gx) {
                          gemm_nn(cin, static_cast<int>(ihw), static_cast<int>(ckk),
                                  kd->values.data(), gcol, gx + i * in_plane, true);
                      }
                      if (need_gk) {
                          gemm_nt(cin, static_cast<int>(ckk), static_cast<int>(ihw),
                                  xd->values.data() + i * in_plane, gcol, gk, true);
                      }
                      if (need_gb) {
                          for (int c = 0; c < cout; ++c) {
                              double s = 0.0;
                              const float* row = gyn + static_cast<std::int64_t>(c) * ho * wo;
                              for (std::int64_t j = 0; j < static_cast<std::int64_t>(ho) * wo; ++j)
                                  s += row[j];
                              gb[c] += static_cast<float>(s);
                          }
                      }
                  }
              });
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, bool training, float momentum,
                   float epsilon) {
    require(input.rank() == 4,
            "batchnorm2d input must be [N,C,H,W], got " + shape_str(input.shape()));
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    auto check_param = [&](const Tensor& t, const char* name) {
        require(t.rank() == 1 && t.dim(0) == c,
                std::string("batchnorm2d ") + name + " must be [" + std::to_string(c) +
                    "], got " + shape_str(t.shape()));
    };
    check_param(gamma, "gamma");
    check_param(beta, "beta");
    check_param(running_mean, "running_mean");
    check_param(running_var, "running_var");
    const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
    if (training && m < 2) {
        throw ValueError("batchnorm2d train mode needs at least 2 values per channel");
    }

    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t sample = static_cast<std::int64_t>(c) * plane;
    Tensor out = Tensor::zeros(input.shape());
    std::vector<float> xhat(static_cast<std::size_t>(input.numel()));
    std::vector<double> invstd(static_cast<std::size_t>(c));

    const float* xp = input.values().data();
    const float* gp = gamma.values().data();
    const float* bp = beta.values().data();
    float* op = out.mutable_values().data();

    for (int ch = 0; ch < c; ++ch) {
        double mu, var;
        if (training) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* row = xp + i * sample + ch * plane;
                for (std::int64_t j = 0; j < plane; ++j) s += row[j];
            }
            mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (int i = 0; i < n; ++i) {
                const float* row = xp + i * sample + ch * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    double d = row[j] - mu;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(m);
            double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            auto rm = running_mean.mutable_values();
            auto rv = running_var.mutable_values();
            rm[static_cast<std::size_t>(ch)] = static_cast<float>(
                momentum * rm[static_cast<std::size_t>(ch)] + (1.0 - momentum) * mu);
            rv[static_cast<std::size_t>(ch)] = static_cast<float>(
                momentum * rv[static_cast<std::size_t>(ch)] + (1.0 - momentum) * unbiased);
        } else {
            mu = running_mean.values()[static_cast<std::size_t>(ch)];
            var = running_var.values()[static_cast<std::size_t>(ch)];
        }
        double istd = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
        invstd[static_cast<std::size_t>(ch)] = istd;
        double g = gp[ch], b = bp[ch];
        for (int i = 0; i < n; ++i) {
            const float* row = xp + i * sample + ch * plane;
            float* xh = xhat.data() + i * sample + ch * plane;
            float* orow = op + i * sample + ch * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
                double hat = (row[j] - mu) * istd;
                xh[j] = static_cast<float>(hat);
                orow[j] = static_cast<float>(g * hat + b);
            }
        }
    }

    bool rec = recording({&input, &gamma, &beta});
    auto xd = input.data(), gd = gamma.data(), bd = beta.data(), od = out.data();
    auto xhat_cache = std::make_shared<std::vector<float>>(std::move(xhat));
    auto invstd_cache = std::make_shared<std::vector<double>>(std::move(invstd));
    record_if(rec, "batchnorm2d", {xd, gd, bd}, out,
              [=]() {
                  const float* gy = od->grad.data();
                  const bool need_gx = xd->requires_grad;
                  const bool need_gg = gd->requires_grad;
                  const bool need_gb = bd->requires_grad;
                  float* gx = need_gx ? xd->grad_buffer().data() : nullptr;
                  float* gg = need_gg ? gd->grad_buffer().data() : nullptr;
                  float* gb = need_gb ? bd->grad_buffer().data() : nullptr;
                  const float* xh = xhat_cache->data();
                  for (int ch = 0; ch < c; ++ch) {
                      double s_gy = 0.0, s_gyxh = 0.0;
                      for (int i = 0; i < n; ++i) {
                          const float* gyr = gy + i * sample + ch * plane;
                          const float* xhr = xh + i * sample + ch * plane;
                          for (std::int64_t j = 0; j < plane; ++j) {
                              s_gy += gyr[j];
                              s_gyxh += static_cast<double>(gyr[j]) * xhr[j];
                          }
                      }
                      if (need_gg) gg[ch] += static_cast<float>(s_gyxh);
                      if (need_gb) gb[ch] += static_cast<float>(s_gy);
                      if (need_gx) {
                          double g = gd->values[static_cast<std::size_t>(ch)];
                          double istd = (*invstd_cache)[static_cast<std::size_t>(ch)];
                          double gi = g * istd;
                          if (training) {
                              double mean_gy = s_gy / static_cast<double>(m);
                              double mean_gyxh = s_gyxh / static_cast<double>(m);
                              for (int i = 0; i < n; ++i) {
                                  float* gxr = gx + i * sample + ch * plane;
                                  const float* gyr = gy + i * sample + ch * plane;
                                  const float* xhr = xh + i * sample + ch * plane;
                                  for (std::int64_t j = 0; j < plane; ++j) {
                                      gxr[j] += static_cast<float>(
                                          gi * (gyr[j] - mean_gy - xhr[j] * mean_gyxh));
                                  }
                              }
                          } else {
                              for (int i = 0; i < n; ++i) {
                                  float* gxr = gx + i * sample + ch * plane;
                                  const float* gyr = gy + i * sample + ch * plane;
                                  for (std::int64_t j = 0; j < plane; ++j) {
                                      gxr[j] += static_cast<float>(gi * gyr[j]);
                                  }
                              }
                          }
                      }
                  }
              });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xp = x.values().data();
    float* op = out.mutable_values().data();
    const std::int64_t count = x.numel();
    for (std::int64_t i = 0; i < count; ++i) op[i] = fwd(xp[i]);
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, name, {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float* gy = od->grad.data();
        float* gx = xd->grad_buffer().data();
        const float* xv = xd->values.data();
        const float* yv = od->values.data();
        for (std::int64_t i = 0; i < count; ++i) gx[i] += gy[i] * bwd(xv[i], yv[i]);
    });
    return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
    return unary_op(
        "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
        [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor leaky_relu(const Tensor& x, float slope) {
    return unary_op(
        "leaky_relu", x, [slope](float v) { return v > 0.0f ? v : slope * v; },
        [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        "sigmoid", x,
        [](float v) {
            double d = v;
            double s = d >= 0.0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
            return static_cast<float>(s);
        },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        "tanh", x, [](float v) { return static_cast<float>(std::tanh(static_cast<double>(v))); },
        [](float, float y) { return 1.0f - y * y; });
}

// ---------------------------------------------------------------------------
// Structure ops

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4, "concat_channels expects [N,C,H,W] inputs");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw ShapeError("concat_channels mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor out = Tensor::zeros({n, ca + cb, h, w});
    float* op = out.mutable_values().data();
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    for (int i = 0; i < n; ++i) {
        std::memcpy(op + i * (ca + cb) * plane, ap + i * ca * plane,
                    sizeof(float) * static_cast<std::size_t>(ca * plane));
        std::memcpy(op + (i * (ca + cb) + ca) * plane, bp + i * cb * plane,
                    sizeof(float) * static_cast<std::size_t>(cb * plane));
    }
    bool rec = recording({&a, &b});
    auto ad = a.data(), bd = b.data(), od = out.data();
    record_if(rec, "concat_channels", {ad, bd}, out, [=]() {
        const float* gy = od->grad.data();
        if (ad->requires_grad) {
            float* ga = ad->grad_buffer().data();
            for (int i = 0; i < n; ++i) {
                const float* src = gy + i * (ca + cb) * plane;
                float* dst = ga + i * ca * plane;
                for (std::int64_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
            }
        }
        if (bd->requires_grad) {
            float* gb = bd->grad_buffer().data();
            for (int i = 0; i < n; ++i) {
                const float* src = gy + (i * (ca + cb) + ca) * plane;
                float* dst = gb + i * cb * plane;
                for (std::int64_t j = 0; j < cb * plane; ++j) dst[j] += src[j];
            }
        }
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(x.rank() == 2, "linear input must be [N,F], got " + shape_str(x.shape()));
    require(weight.rank() == 2, "linear weight must be [K,F], got " + shape_str(weight.shape()));
    const int n = x.dim(0), f = x.dim(1), k = weight.dim(0);
    if (weight.dim(1) != f) {
        throw ShapeError("linear feature mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    require(bias.rank() == 1 && bias.dim(0) == k,
            "linear bias must be [" + std::to_string(k) + "], got " + shape_str(bias.shape()));
    Tensor out = Tensor::zeros({n, k});
    gemm_nt(n, k, f, x.values().data(), weight.values().data(), out.mutable_values().data(),
            false);
    {
        float* op = out.mutable_values().data();
        const float* bp = bias.values().data();
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) op[i * k + j] += bp[j];
        }
    }
    bool rec = recording({&x, &weight, &bias});
    auto xd = x.data(), wd = weight.data(), bd = bias.data(), od = out.data();
    record_if(rec, "linear", {xd, wd, bd}, out, [=]() {
        const float* gy = od->grad.data();
        if (xd->requires_grad) {
            gemm_nn(n, f, k, gy, wd->values.data(), xd->grad_buffer().data(), true);
        }
        if (wd->requires_grad) {
            float* gyt = scratch_resize(0, static_cast<std::int64_t>(k) * n);
            transpose(gy, gyt, n, k);
            gemm_nn(k, f, n, gyt, xd->values.data(), wd->grad_buffer().data(), true);
        }
        if (bd->requires_grad) {
            float* gb = bd->grad_buffer().data();
            for (int j = 0; j < k; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += gy[i * k + j];
                gb[j] += static_cast<float>(s);
            }
        }
    });
    return out;
}

Tensor flatten2d(const Tensor& x) {
    require(x.rank() == 4, "flatten2d expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0);
    const std::int64_t rest = x.numel() / n;
    Tensor out = Tensor::from({n, static_cast<int>(rest)},
                              {x.values().begin(), x.values().end()});
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, "flatten2d", {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float* gy = od->grad.data();
        float* gx = xd->grad_buffer().data();
        const std::int64_t count = xd->numel();
        for (std::int64_t i = 0; i < count; ++i) gx[i] += gy[i];
    });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    require(x.rank() == 4, "global_avg_pool expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor out = Tensor::zeros({n, c});
    const float* xp = x.values().data();
    float* op = out.mutable_values().data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0;
            const float* row = xp + (static_cast<std::int64_t>(i) * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) s += row[j];
            op[i * c + ch] = static_cast<float>(s / static_cast<double>(plane));
        }
    }
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, "global_avg_pool", {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float* gy = od->grad.data();
        float* gx = xd->grad_buffer().data();
        const float inv = 1.0f / static_cast<float>(plane);
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                float g = gy[i * c + ch] * inv;
                float* row = gx + (static_cast<std::int64_t>(i) * c + ch) * plane;
                for (std::int64_t j = 0; j < plane; ++j) row[j] += g;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    float* op = out.mutable_values().data();
    const std::int64_t count = a.numel();
    for (std::int64_t i = 0; i < count; ++i) op[i] = ap[i] + bp[i];
    if (count == 1 && a.data()->scalar64 && b.data()->scalar64) {
        out.data()->scalar64 = *a.data()->scalar64 + *b.data()->scalar64;
    }
    bool rec = recording({&a, &b});
    auto ad = a.data(), bd = b.data(), od = out.data();
    record_if(rec, "add", {ad, bd}, out, [=]() {
        const float* gy = od->grad.data();
        if (ad->requires_grad) {
            float* g = ad->grad_buffer().data();
            for (std::int64_t i = 0; i < count; ++i) g[i] += gy[i];
        }
        if (bd->requires_grad) {
            float* g = bd->grad_buffer().data();
            for (std::int64_t i = 0; i < count; ++i) g[i] += gy[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    float* op = out.mutable_values().data();
    const std::int64_t count = a.numel();
    for (std::int64_t i = 0; i < count; ++i) op[i] = ap[i] * bp[i];
    bool rec = recording({&a, &b});
    auto ad = a.data(), bd = b.data(), od = out.data();
    record_if(rec, "mul", {ad, bd}, out, [=]() {
        const float* gy = od->grad.data();
        if (ad->requires_grad) {
            float* g = ad->grad_buffer().data();
            const float* bv = bd->values.data();
            for (std::int64_t i = 0; i < count; ++i) g[i] += gy[i] * bv[i];
        }
        if (bd->requires_grad) {
            float* g = bd->grad_buffer().data();
            const float* av = ad->values.data();
            for (std::int64_t i = 0; i < count; ++i) g[i] += gy[i] * av[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& x, float factor) {
    Tensor out = Tensor::zeros(x.shape());
    const float* xp = x.values().data();
    float* op = out.mutable_values().data();
    const std::int64_t count = x.numel();
    for (std::int64_t i = 0; i < count; ++i) op[i] = xp[i] * factor;
    if (count == 1 && x.data()->scalar64) {
        out.data()->scalar64 = *x.data()->scalar64 * static_cast<double>(factor);
    }
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, "scale", {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float* gy = od->grad.data();
        float* gx = xd->grad_buffer().data();
        for (std::int64_t i = 0; i < count; ++i) gx[i] += gy[i] * factor;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.values()) s += v;
    Tensor out = make_scalar(s);
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, "sum", {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float g = od->grad[0];
        float* gx = xd->grad_buffer().data();
        const std::int64_t count = xd->numel();
        for (std::int64_t i = 0; i < count; ++i) gx[i] += g;
    });
    return out;
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.values()) s += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = make_scalar(s * inv);
    bool rec = recording({&x});
    auto xd = x.data(), od = out.data();
    record_if(rec, "mean", {xd}, out, [=]() {
        if (!xd->requires_grad) return;
        const float g = static_cast<float>(od->grad[0] * inv);
        float* gx = xd->grad_buffer().data();
        const std::int64_t count = xd->numel();
        for (std::int64_t i = 0; i < count; ++i) gx[i] += g;
    });
    return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("dot shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    double s = 0.0;
    const std::int64_t count = a.numel();
    for (std::int64_t i = 0; i < count; ++i) s += static_cast<double>(ap[i]) * bp[i];
    Tensor out = make_scalar(s);
    bool rec = recording({&a, &b});
    auto ad = a.data(), bd = b.data(), od = out.data();
    record_if(rec, "dot", {ad, bd}, out, [=]() {
        const float g = od->grad[0];
        if (ad->requires_grad) {
            float* ga = ad->grad_buffer().data();
            const float* bv = bd->values.data();
            for (std::int64_t i = 0; i < count; ++i) ga[i] += g * bv[i];
        }
        if (bd->requires_grad) {
            float* gb = bd->grad_buffer().data();
            const float* av = ad->values.data();
            for (std::int64_t i = 0; i < count; ++i) gb[i] += g * av[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Losses

Tensor bce_loss(const Tensor& probabilities, int label) {
    if (label != 0 && label != 1) throw ValueError("bce_loss label must be 0 or 1");
    const std::int64_t count = probabilities.numel();
    const float* pp = probabilities.values().data();
    double s = 0.0;
    for (std::int64_t i = 0; i < count; ++i) {
        double p = std::clamp(static_cast<double>(pp[i]), kBceClamp, 1.0 - kBceClamp);
        s += label == 1 ? -std::log(p) : -std::log(1.0 - p);
    }
    const double inv = 1.0 / static_cast<double>(count);
    Tensor out = make_scalar(s * inv);
    bool rec = recording({&probabilities});
    auto pd = probabilities.data(), od = out.data();
    record_if(rec, "bce_loss", {pd}, out, [=]() {
        if (!pd->requires_grad) return;
        const double g = static_cast<double>(od->grad[0]) * inv;
        float* gp = pd->grad_buffer().data();
        const float* pv = pd->values.data();
        for (std::int64_t i = 0; i < count; ++i) {
            double p = std::clamp(static_cast<double>(pv[i]), kBceClamp, 1.0 - kBceClamp);
            double d = label == 1 ? -1.0 / p : 1.0 / (1.0 - p);
            gp[i] += static_cast<float>(g * d);
        }
    });
    return out;
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("l1_loss shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::int64_t count = a.numel();
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    double s = 0.0;
    for (std::int64_t i = 0; i < count; ++i) s += std::abs(static_cast<double>(ap[i]) - bp[i]);
    const double inv = 1.0 / static_cast<double>(count);
    Tensor out = make_scalar(s * inv);
    bool rec = recording({&a, &b});
    auto ad = a.data(), bd = b.data(), od = out.data();
    record_if(rec, "l1_loss", {ad, bd}, out, [=]() {
        const float g = static_cast<float>(od->grad[0] * inv);
        const float* av = ad->values.data();
        const float* bv = bd->values.data();
        float* ga = ad->requires_grad ? ad->grad_buffer().data() : nullptr;
        float* gb = bd->requires_grad ? bd->grad_buffer().data() : nullptr;
        for (std::int64_t i = 0; i < count; ++i) {
            float diff = av[i] - bv[i];
            float sgn = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
            if (ga) ga[i] += g * sgn;
            if (gb) gb[i] -= g * sgn;
        }
    });
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.rank() == 2,
            "softmax_cross_entropy expects [N,K] logits, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw ShapeError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
    }
    for (int lab : labels) {
        if (lab < 0 || lab >= k) throw ValueError("label out of range: " + std::to_string(lab));
    }
    const float* lp = logits.values().data();
    std::vector<float> probs(static_cast<std::size_t>(n) * k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = lp + static_cast<std::int64_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        double lse = mx + std::log(z);
        loss += lse - row[labels[static_cast<std::size_t>(i)]];
        for (int j = 0; j < k; ++j) {
            probs[static_cast<std::size_t>(i) * k + j] =
                static_cast<float>(std::exp(row[j] - lse));
        }
    }
    const double inv = 1.0 / static_cast<double>(n);
    Tensor out = make_scalar(loss * inv);
    bool rec = recording({&logits});
    auto ld = logits.data(), od = out.data();
    auto prob_cache = std::make_shared<std::vector<float>>(std::move(probs));
    auto label_cache = std::make_shared<std::vector<int>>(labels);
    record_if(rec, "softmax_cross_entropy", {ld}, out, [=]() {
        if (!ld->requires_grad) return;
        const float g = static_cast<float>(od->grad[0] * inv);
        float* gl = ld->grad_buffer().data();
        const float* pv = prob_cache->data();
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) {
                float onehot = j == (*label_cache)[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
                gl[static_cast<std::int64_t>(i) * k + j] +=
                    g * (pv[static_cast<std::int64_t>(i) * k + j] - onehot);
            }
        }
    });
    return out;
}

Tensor softmax(const Tensor& logits) {
    require(logits.rank() == 2, "softmax expects [N,K] logits, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    Tensor out = Tensor::zeros(logits.shape());
    const float* lp = logits.values().data();
    float* op = out.mutable_values().data();
    for (int i = 0; i < n; ++i) {
        const float* row = lp + static_cast<std::int64_t>(i) * k;
        float* orow = op + static_cast<std::int64_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < k; ++j) orow[j] = static_cast<float>(std::exp(row[j] - mx) / z);
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    require(logits.rank() == 2,
            "argmax_rows expects [N,K] logits, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    const float* lp = logits.values().data();
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* row = lp + static_cast<std::int64_t>(i) * k;
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

}  // namespace xmgc
