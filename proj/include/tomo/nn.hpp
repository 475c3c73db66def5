#pragma once

// Minimal dense-tensor NN kernel: 3x3 same-size convolution, batch
// normalization and ReLU with hand-written forward and reverse passes,
// plus an Adam optimizer over a flat parameter vector. No autodiff graph:
// the callers compose reverse passes by hand.
//
// All loops run in a fixed order (parallel units write disjoint slices),
// so results are bit-identical for any thread count.

#include <cassert>
#include <cmath>
#include <cstring>
#include <span>
#include <stdexcept>
#include <vector>

#include "tomo/parallel.hpp"
#include "tomo/rng.hpp"

namespace tomo {

struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_),
          v(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {
        if (n_ < 0 || c_ < 1 || h_ < 1 || w_ < 1)
            throw std::invalid_argument("Tensor: bad shape");
    }

    std::size_t size() const { return v.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    double* slice(int b, int ch) { return v.data() + (static_cast<std::size_t>(b) * c + ch) * plane(); }
    const double* slice(int b, int ch) const {
        return v.data() + (static_cast<std::size_t>(b) * c + ch) * plane();
    }
    double& at(int b, int ch, int y, int x) { return slice(b, ch)[static_cast<std::size_t>(y) * w + x]; }
    double at(int b, int ch, int y, int x) const {
        return slice(b, ch)[static_cast<std::size_t>(y) * w + x];
    }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

inline void debug_check_finite(const Tensor& t) {
#ifndef NDEBUG
    for (double x : t.v) assert(std::isfinite(x));
#else
    (void)t;
#endif
}

namespace detail {
// Zero-pads each plane by one pixel on every side.
inline Tensor pad1(const Tensor& x) {
    Tensor p(x.n, x.c, x.h + 2, x.w + 2, 0.0);
    for (int b = 0; b < x.n; ++b)
        for (int ch = 0; ch < x.c; ++ch) {
            const double* src = x.slice(b, ch);
            double* dst = p.slice(b, ch);
            for (int y = 0; y < x.h; ++y)
                std::memcpy(dst + static_cast<std::size_t>(y + 1) * (x.w + 2) + 1,
                            src + static_cast<std::size_t>(y) * x.w, sizeof(double) * x.w);
        }
    return p;
}

// One output row of a 3x3 gather over a padded plane: nine fused streams in
// a single pass, accumulated on top of the existing row contents.
inline void conv_row_accumulate(double* out, const double* pin_row, int pw, int w,
                                const double* k) {
    const double* r0 = pin_row;
    const double* r1 = pin_row + pw;
    const double* r2 = pin_row + 2 * pw;
    const double k0 = k[0], k1 = k[1], k2 = k[2];
    const double k3 = k[3], k4 = k[4], k5 = k[5];
    const double k6 = k[6], k7 = k[7], k8 = k[8];
    for (int x = 0; x < w; ++x) {
        out[x] += k0 * r0[x] + k1 * r0[x + 1] + k2 * r0[x + 2] + k3 * r1[x] + k4 * r1[x + 1] +
                  k5 * r1[x + 2] + k6 * r2[x] + k7 * r2[x + 1] + k8 * r2[x + 2];
    }
}
}  // namespace detail

// 3x3 cross-correlation, stride 1, padding 1.
struct ConvLayer {
    int in_ch = 0, out_ch = 0;
    std::vector<double> weight;  // [out_ch][in_ch][3][3]
    std::vector<double> bias;    // [out_ch]

    ConvLayer() = default;
    ConvLayer(int in, int out)
        : in_ch(in), out_ch(out),
          weight(static_cast<std::size_t>(out) * in * 9, 0.0), bias(out, 0.0) {
        if (in < 1 || out < 1) throw std::invalid_argument("ConvLayer: bad channel counts");
    }

    double* kernel(int oc, int ic) { return weight.data() + (static_cast<std::size_t>(oc) * in_ch + ic) * 9; }
    const double* kernel(int oc, int ic) const {
        return weight.data() + (static_cast<std::size_t>(oc) * in_ch + ic) * 9;
    }
};

// Kaiming-uniform fan-in initialization, zero bias.
inline ConvLayer make_conv(int in_ch, int out_ch, CounterRng& rng) {
    ConvLayer layer(in_ch, out_ch);
    const double bound = std::sqrt(6.0 / (static_cast<double>(in_ch) * 9.0));
    for (auto& w : layer.weight) w = uniform(rng, -bound, bound);
    return layer;
}

inline Tensor conv_forward(const ConvLayer& L, const Tensor& x) {
    if (x.c != L.in_ch) throw std::invalid_argument("conv_forward: channel mismatch");
    const Tensor padded = detail::pad1(x);
    Tensor out(x.n, L.out_ch, x.h, x.w);
    const int pw = x.w + 2;
    parallel_for(static_cast<std::size_t>(x.n) * L.out_ch, [&](std::size_t unit) {
        const int b = static_cast<int>(unit) / L.out_ch;
        const int oc = static_cast<int>(unit) % L.out_ch;
        double* o = out.slice(b, oc);
        const double bias = L.bias[oc];
        for (std::size_t i = 0; i < out.plane(); ++i) o[i] = bias;
        for (int ic = 0; ic < L.in_ch; ++ic) {
            const double* pin = padded.slice(b, ic);
            const double* k = L.kernel(oc, ic);
            for (int y = 0; y < x.h; ++y)
                detail::conv_row_accumulate(o + static_cast<std::size_t>(y) * x.w,
                                            pin + static_cast<std::size_t>(y) * pw, pw, x.w, k);
        }
    });
    debug_check_finite(out);
    return out;
}

struct ConvGrads {
    Tensor x;
    std::vector<double> weight;
    std::vector<double> bias;
};

inline ConvGrads conv_backward(const ConvLayer& L, const Tensor& x, const Tensor& gout) {
    if (x.c != L.in_ch || gout.c != L.out_ch || gout.n != x.n || gout.h != x.h || gout.w != x.w)
        throw std::invalid_argument("conv_backward: shape mismatch");
    const Tensor padded = detail::pad1(x);
    const int pw = x.w + 2;

    ConvGrads g{Tensor(x.n, x.c, x.h, x.w),
                std::vector<double>(L.weight.size(), 0.0),
                std::vector<double>(L.bias.size(), 0.0)};

    parallel_for(static_cast<std::size_t>(L.out_ch), [&](std::size_t oc) {
        double sum = 0.0;
        for (int b = 0; b < gout.n; ++b) {
            const double* go = gout.slice(b, static_cast<int>(oc));
            for (std::size_t i = 0; i < gout.plane(); ++i) sum += go[i];
        }
        g.bias[oc] = sum;
    });

    parallel_for(static_cast<std::size_t>(L.out_ch) * L.in_ch, [&](std::size_t unit) {
        const int oc = static_cast<int>(unit) / L.in_ch;
        const int ic = static_cast<int>(unit) % L.in_ch;
        double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
        for (int b = 0; b < x.n; ++b) {
            const double* go = gout.slice(b, oc);
            const double* pin = padded.slice(b, ic);
            for (int y = 0; y < x.h; ++y) {
                const double* grow = go + static_cast<std::size_t>(y) * x.w;
                const double* r0 = pin + static_cast<std::size_t>(y) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                for (int xx = 0; xx < x.w; ++xx) {
                    const double gv = grow[xx];
                    a0 += gv * r0[xx];
                    a1 += gv * r0[xx + 1];
                    a2 += gv * r0[xx + 2];
                    a3 += gv * r1[xx];
                    a4 += gv * r1[xx + 1];
                    a5 += gv * r1[xx + 2];
                    a6 += gv * r2[xx];
                    a7 += gv * r2[xx + 1];
                    a8 += gv * r2[xx + 2];
                }
            }
        }
        double* dst = g.weight.data() + unit * 9;
        dst[0] = a0;
        dst[1] = a1;
        dst[2] = a2;
        dst[3] = a3;
        dst[4] = a4;
        dst[5] = a5;
        dst[6] = a6;
        dst[7] = a7;
        dst[8] = a8;
    });

    // grad wrt the input: correlation of the padded cotangent with the
    // flipped kernel, same row kernel as the forward pass
    const Tensor gpadded = detail::pad1(gout);
    const int gpw = x.w + 2;
    parallel_for(static_cast<std::size_t>(x.n) * L.in_ch, [&](std::size_t unit) {
        const int b = static_cast<int>(unit) / L.in_ch;
        const int ic = static_cast<int>(unit) % L.in_ch;
        double* gx = g.x.slice(b, ic);
        for (int oc = 0; oc < L.out_ch; ++oc) {
            const double* gp = gpadded.slice(b, oc);
            const double* k = L.kernel(oc, ic);
            const double flipped[9] = {k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]};
            for (int y = 0; y < x.h; ++y)
                detail::conv_row_accumulate(gx + static_cast<std::size_t>(y) * x.w,
                                            gp + static_cast<std::size_t>(y) * gpw, gpw, x.w,
                                            flipped);
        }
    });
    return g;
}

struct BatchNormLayer {
    int channels = 0;
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNormLayer() = default;
    explicit BatchNormLayer(int ch)
        : channels(ch), gamma(ch, 1.0), beta(ch, 0.0),
          running_mean(ch, 0.0), running_var(ch, 1.0) {
        if (ch < 1) throw std::invalid_argument("BatchNormLayer: bad channel count");
    }
};

struct BnCache {
    Tensor xhat;
    std::vector<double> inv_std;
    std::size_t count = 0;  // normalization set size (n * h * w)
    bool train = false;
};

// Train mode normalizes by batch statistics per channel and updates the
// running stats (unbiased variance, torch-style); eval mode uses the
// running stats.
inline Tensor bn_forward(BatchNormLayer& L, const Tensor& x, bool train, BnCache* cache = nullptr) {
    if (x.c != L.channels) throw std::invalid_argument("bn_forward: channel mismatch");
    if (x.n < 1) throw std::invalid_argument("bn_forward: empty batch");
    Tensor out(x.n, x.c, x.h, x.w);
    const std::size_t m = static_cast<std::size_t>(x.n) * x.plane();
    if (cache) {
        cache->xhat = Tensor(x.n, x.c, x.h, x.w);
        cache->inv_std.assign(x.c, 0.0);
        cache->count = m;
        cache->train = train;
    }
    parallel_for(static_cast<std::size_t>(x.c), [&](std::size_t ch) {
        double mean, var;
        if (train) {
            double s = 0.0;
            for (int b = 0; b < x.n; ++b) {
                const double* p = x.slice(b, static_cast<int>(ch));
                for (std::size_t i = 0; i < x.plane(); ++i) s += p[i];
            }
            mean = s / static_cast<double>(m);
            double s2 = 0.0;
            for (int b = 0; b < x.n; ++b) {
                const double* p = x.slice(b, static_cast<int>(ch));
                for (std::size_t i = 0; i < x.plane(); ++i) {
                    const double d = p[i] - mean;
                    s2 += d * d;
                }
            }
            var = s2 / static_cast<double>(m);
            const double var_unbiased = m > 1 ? s2 / static_cast<double>(m - 1) : var;
            L.running_mean[ch] = (1.0 - L.momentum) * L.running_mean[ch] + L.momentum * mean;
            L.running_var[ch] = (1.0 - L.momentum) * L.running_var[ch] + L.momentum * var_unbiased;
        } else {
            mean = L.running_mean[ch];
            var = L.running_var[ch];
        }
        const double inv_std = 1.0 / std::sqrt(var + L.eps);
        const double gamma = L.gamma[ch];
        const double beta = L.beta[ch];
        for (int b = 0; b < x.n; ++b) {
            const double* p = x.slice(b, static_cast<int>(ch));
            double* o = out.slice(b, static_cast<int>(ch));
            double* xh = cache ? cache->xhat.slice(b, static_cast<int>(ch)) : nullptr;
            for (std::size_t i = 0; i < x.plane(); ++i) {
                const double norm = (p[i] - mean) * inv_std;
                if (xh) xh[i] = norm;
                o[i] = gamma * norm + beta;
            }
        }
        if (cache) cache->inv_std[ch] = inv_std;
    });
    debug_check_finite(out);
    return out;
}

struct BnGrads {
    Tensor x;
    std::vector<double> gamma, beta;
};

inline BnGrads bn_backward(const BatchNormLayer& L, const BnCache& cache, const Tensor& gout) {
    if (!cache.train) throw std::invalid_argument("bn_backward: cache must come from train mode");
    if (gout.c != L.channels || !gout.same_shape(cache.xhat))
        throw std::invalid_argument("bn_backward: shape mismatch");
    BnGrads g{Tensor(gout.n, gout.c, gout.h, gout.w),
              std::vector<double>(L.channels, 0.0), std::vector<double>(L.channels, 0.0)};
    const double m = static_cast<double>(cache.count);
    parallel_for(static_cast<std::size_t>(gout.c), [&](std::size_t ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int b = 0; b < gout.n; ++b) {
            const double* go = gout.slice(b, static_cast<int>(ch));
            const double* xh = cache.xhat.slice(b, static_cast<int>(ch));
            for (std::size_t i = 0; i < gout.plane(); ++i) {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
        }
        g.beta[ch] = sum_g;
        g.gamma[ch] = sum_gx;
        const double k = L.gamma[ch] * cache.inv_std[ch];
        const double mean_g = sum_g / m;
        const double mean_gx = sum_gx / m;
        for (int b = 0; b < gout.n; ++b) {
            const double* go = gout.slice(b, static_cast<int>(ch));
            const double* xh = cache.xhat.slice(b, static_cast<int>(ch));
            double* gx = g.x.slice(b, static_cast<int>(ch));
            for (std::size_t i = 0; i < gout.plane(); ++i)
                gx[i] = k * (go[i] - mean_g - xh[i] * mean_gx);
        }
    });
    return g;
}

inline Tensor relu_forward(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.v) v = v > 0.0 ? v : 0.0;
    return out;
}

// Gradient passes where the forward value was positive (subgradient 0 at 0).
// `ref` may be either the forward input or its output: the masks agree.
inline Tensor relu_backward(const Tensor& ref, const Tensor& gout) {
    if (!ref.same_shape(gout)) throw std::invalid_argument("relu_backward: shape mismatch");
    Tensor g = gout;
    for (std::size_t i = 0; i < g.v.size(); ++i)
        if (!(ref.v[i] > 0.0)) g.v[i] = 0.0;
    return g;
}

// Adam over one flat parameter vector with bias correction.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::vector<double> m, v;

    AdamState() = default;
    explicit AdamState(std::size_t size, double lr_ = 1e-4)
        : lr(lr_), m(size, 0.0), v(size, 0.0) {}
};

inline void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size() || params.size() != s.m.size())
        throw std::invalid_argument("adam_step: size mismatch");
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
}

}  // namespace tomo
