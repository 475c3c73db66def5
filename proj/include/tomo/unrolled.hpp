#pragma once

// K-stage unrolled preconditioned proximal forward-backward splitting.
//
// Stage k (0-based):
//   x^{k+1/2} = x^k - theta1_k * P(A x^k - y)                 data fidelity
//   x^{k+1}   = x^{k+1/2} - CNN_k([x^{1/2} ... x^{k+1/2}])    learned prox
// with x^0 = FBP(y). P is the FBP operator (fbp mode, "AIR") or A^T
// (adjoint mode, "IR"); the two modes share every other code path.
//
// Stage k's CNN takes the dense concatenation of all previous half
// iterates (k+1 input channels): Conv+ReLU, 3x[Conv+BN+ReLU], Conv[+ReLU];
// its output is subtracted from x^{k+1/2}.
//
// Training minimizes the mean over samples of ||R(y_j) - x_j||^2 with
// exact reverse-mode gradients composed by hand through all stages,
// including the concatenation fan-out (each half iterate receives
// gradient from every later stage's CNN input) and the operator
// transposes A^T and P^T.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tomo/core.hpp"
#include "tomo/fbp.hpp"
#include "tomo/io.hpp"
#include "tomo/metrics.hpp"
#include "tomo/nn.hpp"
#include "tomo/projector.hpp"
#include "tomo/rng.hpp"

namespace tomo {

enum class PrecondMode { fbp, adjoint };  // AIR / IR

inline std::string to_string(PrecondMode m) {
    return m == PrecondMode::fbp ? "fbp" : "adjoint";
}
inline PrecondMode precond_mode_from_string(const std::string& s) {
    if (s == "fbp") return PrecondMode::fbp;
    if (s == "adjoint") return PrecondMode::adjoint;
    throw std::invalid_argument("unknown preconditioner mode: " + s);
}

// ---------------------------------------------------------------------------
// Per-stage CNN

struct CnnStage {
    ConvLayer conv_in;                  // (k+1) -> channels, no BN
    std::array<ConvLayer, 3> conv_mid;  // channels -> channels
    std::array<BatchNormLayer, 3> bn_mid;
    ConvLayer conv_out;                 // channels -> 1, no BN
    bool final_relu = true;
};

inline CnnStage make_cnn_stage(int in_channels, int width, bool final_relu, CounterRng& rng) {
    CnnStage s;
    s.conv_in = make_conv(in_channels, width, rng);
    for (int i = 0; i < 3; ++i) {
        s.conv_mid[i] = make_conv(width, width, rng);
        s.bn_mid[i] = BatchNormLayer(width);
    }
    s.conv_out = make_conv(width, 1, rng);
    // The output conv starts near zero so the untrained network reproduces
    // the preconditioned iteration (residual ~ 0); a full-scale start buries
    // the data-fidelity iterate under CNN noise that small learning rates
    // cannot unwind. Kept strictly nonzero: an exactly-zero start would be
    // stuck behind the final ReLU's zero subgradient.
    for (auto& w : s.conv_out.weight) w *= 0.01;
    s.final_relu = final_relu;
    return s;
}

struct CnnStageCache {
    Tensor input;           // concat input
    Tensor a0, a1, a2, a3;  // ReLU outputs (double as masks and conv inputs)
    Tensor out;             // stage output (mask for the final ReLU)
    std::array<BnCache, 3> bn;
};

inline Tensor cnn_stage_forward(CnnStage& s, const Tensor& input, bool train,
                                CnnStageCache* cache) {
    Tensor a0 = relu_forward(conv_forward(s.conv_in, input));
    Tensor a1 = relu_forward(bn_forward(s.bn_mid[0], conv_forward(s.conv_mid[0], a0), train,
                                        cache ? &cache->bn[0] : nullptr));
    Tensor a2 = relu_forward(bn_forward(s.bn_mid[1], conv_forward(s.conv_mid[1], a1), train,
                                        cache ? &cache->bn[1] : nullptr));
    Tensor a3 = relu_forward(bn_forward(s.bn_mid[2], conv_forward(s.conv_mid[2], a2), train,
                                        cache ? &cache->bn[2] : nullptr));
    Tensor out = conv_forward(s.conv_out, a3);
    if (s.final_relu) out = relu_forward(out);
    if (cache) {
        cache->input = input;
        cache->a0 = std::move(a0);
        cache->a1 = std::move(a1);
        cache->a2 = std::move(a2);
        cache->a3 = std::move(a3);
        cache->out = out;
    }
    return out;
}

struct CnnStageGrads {
    Tensor input;  // gradient w.r.t. the concat input
    std::vector<double> w_in, b_in;
    std::array<std::vector<double>, 3> w_mid, b_mid, gamma_mid, beta_mid;
    std::vector<double> w_out, b_out;
};

inline CnnStageGrads cnn_stage_backward(const CnnStage& s, const CnnStageCache& cache,
                                        const Tensor& gout) {
    CnnStageGrads g;
    Tensor cur = s.final_relu ? relu_backward(cache.out, gout) : gout;
    {
        ConvGrads cg = conv_backward(s.conv_out, cache.a3, cur);
        g.w_out = std::move(cg.weight);
        g.b_out = std::move(cg.bias);
        cur = std::move(cg.x);
    }
    const Tensor* ins[3] = {&cache.a0, &cache.a1, &cache.a2};
    const Tensor* outs[3] = {&cache.a1, &cache.a2, &cache.a3};
    for (int i = 2; i >= 0; --i) {
        cur = relu_backward(*outs[i], cur);
        BnGrads bg = bn_backward(s.bn_mid[i], cache.bn[i], cur);
        g.gamma_mid[i] = std::move(bg.gamma);
        g.beta_mid[i] = std::move(bg.beta);
        ConvGrads cg = conv_backward(s.conv_mid[i], *ins[i], bg.x);
        g.w_mid[i] = std::move(cg.weight);
        g.b_mid[i] = std::move(cg.bias);
        cur = std::move(cg.x);
    }
    cur = relu_backward(cache.a0, cur);
    ConvGrads cg = conv_backward(s.conv_in, cache.input, cur);
    g.w_in = std::move(cg.weight);
    g.b_in = std::move(cg.bias);
    g.input = std::move(cg.x);
    return g;
}

// ---------------------------------------------------------------------------
// Model

struct UnrolledModel {
    ScanGeometry geometry;
    int img_width = 0, img_height = 0;
    double pixel_size = 0.0;
    PrecondMode mode = PrecondMode::fbp;
    int stages = 0;  // K
    int channels = 64;
    bool final_relu = true;
    std::vector<double> step_scalars;  // theta1, one per stage
    std::vector<CnnStage> cnn;         // theta2, one per stage

    Projector projector;
    FbpOperator fbp;

    bool matches(const Image& x) const { return projector.matches(x); }
    bool matches(const Sinogram& y) const { return projector.matches(y); }
};

inline Image apply_precond(const UnrolledModel& m, const Sinogram& s) {
    return m.mode == PrecondMode::fbp ? fbp_reconstruct(m.fbp, s)
                                      : back_project(m.projector, s);
}
inline Sinogram apply_precond_adjoint(const UnrolledModel& m, const Image& x) {
    return m.mode == PrecondMode::fbp ? fbp_adjoint(m.fbp, x)
                                      : forward_project(m.projector, x);
}

// x^0 is the analytic reconstruction in both modes; an A^T y start would be
// hopelessly mis-scaled in adjoint mode.
inline Image initial_iterate(const UnrolledModel& m, const Sinogram& y) {
    return fbp_reconstruct(m.fbp, y);
}

// Model skeleton without step-scalar initialization (checkpoint loading).
inline UnrolledModel make_unrolled_model_raw(const ScanGeometry& geometry, int width, int height,
                                             double pixel_size, int stages, int channels,
                                             PrecondMode mode, std::uint64_t seed,
                                             bool final_relu = true) {
    if (stages < 0) throw std::invalid_argument("make_unrolled_model: stages must be >= 0");
    if (channels < 1) throw std::invalid_argument("make_unrolled_model: channels must be >= 1");
    UnrolledModel m;
    m.geometry = geometry;
    m.img_width = width;
    m.img_height = height;
    m.pixel_size = pixel_size;
    m.mode = mode;
    m.stages = stages;
    m.channels = channels;
    m.final_relu = final_relu;
    m.projector = Projector(geometry, width, height, pixel_size);
    m.fbp = FbpOperator(geometry, width, height, pixel_size);
    m.step_scalars.assign(static_cast<std::size_t>(stages), 0.0);
    m.cnn.reserve(static_cast<std::size_t>(stages));
    for (int k = 0; k < stages; ++k) {
        CounterRng rng(seed, 0x7c0ull, static_cast<std::uint64_t>(k));
        m.cnn.push_back(make_cnn_stage(k + 1, channels, final_relu, rng));
    }
    return m;
}

// theta1 starts at 1 in fbp mode (the preconditioner is already
// scale-correct) and at 1/||A||^2 in adjoint mode, so the first untrained
// step is a sane gradient step.
inline UnrolledModel make_unrolled_model(const ScanGeometry& geometry, int width, int height,
                                         double pixel_size, int stages, int channels,
                                         PrecondMode mode, std::uint64_t seed,
                                         bool final_relu = true) {
    UnrolledModel m = make_unrolled_model_raw(geometry, width, height, pixel_size, stages,
                                              channels, mode, seed, final_relu);
    double theta = 1.0;
    if (mode == PrecondMode::adjoint) {
        const double norm = operator_norm_estimate(m.projector);
        theta = norm > 0.0 ? 1.0 / (norm * norm) : 1.0;
    }
    m.step_scalars.assign(static_cast<std::size_t>(stages), theta);
    return m;
}

// x - theta1_k * P(A x - y)
inline Image data_fidelity_step(const UnrolledModel& m, int k, const Image& x,
                                const Sinogram& y) {
    if (k < 0 || k >= m.stages) throw std::invalid_argument("data_fidelity_step: bad stage");
    if (!m.matches(x) || !m.matches(y))
        throw std::invalid_argument("data_fidelity_step: shape mismatch");
    Sinogram residual = forward_project(m.projector, x);
    for (std::size_t i = 0; i < residual.values.size(); ++i) residual.values[i] -= y.values[i];
    Image correction = apply_precond(m, residual);
    Image out = x;
    const double theta = m.step_scalars[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] -= theta * correction.values[i];
    return out;
}

struct StageTrace {
    Tensor x0;                       // P(y), batched
    std::vector<Tensor> half;        // x^{k+1/2}
    std::vector<Tensor> correction;  // P(A x^k - y), for theta1 gradients
    std::vector<CnnStageCache> cnn;
};

namespace detail {

inline Image tensor_plane_to_image(const Tensor& t, int b, int w, int h, double px) {
    Image img(w, h, px, 0.0);
    const double* src = t.slice(b, 0);
    std::copy(src, src + img.size(), img.values.begin());
    return img;
}

inline void image_to_tensor_plane(const Image& img, Tensor& t, int b) {
    std::copy(img.values.begin(), img.values.end(), t.slice(b, 0));
}

}  // namespace detail

// Batched unrolled forward pass over pointers to the batch sinograms. BN
// uses batch statistics when train is true (and updates running stats),
// running statistics otherwise.
inline Tensor unrolled_forward(UnrolledModel& m, const std::vector<const Sinogram*>& batch,
                               bool train, StageTrace* trace) {
    const int B = static_cast<int>(batch.size());
    if (B < 1) throw std::invalid_argument("unrolled_forward: empty batch");
    for (const Sinogram* y : batch)
        if (!y || !m.matches(*y)) throw std::invalid_argument("unrolled_forward: sinogram mismatch");

    Tensor cur(B, 1, m.img_height, m.img_width);
    for (int b = 0; b < B; ++b)
        detail::image_to_tensor_plane(initial_iterate(m, *batch[b]), cur, b);
    if (trace) {
        trace->x0 = cur;
        trace->half.clear();
        trace->correction.clear();
        trace->cnn.assign(static_cast<std::size_t>(m.stages), CnnStageCache{});
    }

    std::vector<Tensor> halves;
    halves.reserve(static_cast<std::size_t>(m.stages));
    for (int k = 0; k < m.stages; ++k) {
        Tensor correction(B, 1, m.img_height, m.img_width);
        for (int b = 0; b < B; ++b) {
            Image xb =
                detail::tensor_plane_to_image(cur, b, m.img_width, m.img_height, m.pixel_size);
            Sinogram residual = forward_project(m.projector, xb);
            for (std::size_t i = 0; i < residual.values.size(); ++i)
                residual.values[i] -= batch[b]->values[i];
            detail::image_to_tensor_plane(apply_precond(m, residual), correction, b);
        }
        Tensor half = cur;
        const double theta = m.step_scalars[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < half.v.size(); ++i) half.v[i] -= theta * correction.v[i];
        halves.push_back(half);
        if (trace) {
            trace->half.push_back(half);
            trace->correction.push_back(std::move(correction));
        }

        Tensor cat(B, k + 1, m.img_height, m.img_width);
        for (int b = 0; b < B; ++b)
            for (int ch = 0; ch <= k; ++ch)
                std::copy(halves[static_cast<std::size_t>(ch)].slice(b, 0),
                          halves[static_cast<std::size_t>(ch)].slice(b, 0) + cat.plane(),
                          cat.slice(b, ch));
        Tensor cnn_out = cnn_stage_forward(m.cnn[static_cast<std::size_t>(k)], cat, train,
                                           trace ? &trace->cnn[static_cast<std::size_t>(k)] : nullptr);
        cur = std::move(half);
        for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] -= cnn_out.v[i];
    }
    return cur;
}

// Single-sample forward; BN in eval mode unless train is requested.
inline Image unrolled_reconstruct(UnrolledModel& m, const Sinogram& y, bool train = false,
                                  StageTrace* trace = nullptr) {
    std::vector<const Sinogram*> batch{&y};
    Tensor out = unrolled_forward(m, batch, train, trace);
    return detail::tensor_plane_to_image(out, 0, m.img_width, m.img_height, m.pixel_size);
}

// ---------------------------------------------------------------------------
// Canonical parameter layout

struct ParamRef {
    std::string name;
    double* data = nullptr;
    std::size_t len = 0;
    std::vector<std::size_t> shape;
};

inline std::vector<ParamRef> model_params(UnrolledModel& m) {
    std::vector<ParamRef> refs;
    const auto us = [](int v) { return static_cast<std::size_t>(v); };
    for (int k = 0; k < m.stages; ++k) {
        const std::string base = "stage" + std::to_string(k) + "/";
        CnnStage& s = m.cnn[us(k)];
        refs.push_back({base + "step", &m.step_scalars[us(k)], 1, {1}});
        refs.push_back({base + "conv_in/weight", s.conv_in.weight.data(), s.conv_in.weight.size(),
                        {us(s.conv_in.out_ch), us(s.conv_in.in_ch), 3, 3}});
        refs.push_back({base + "conv_in/bias", s.conv_in.bias.data(), s.conv_in.bias.size(),
                        {us(s.conv_in.out_ch)}});
        for (int i = 0; i < 3; ++i) {
            const std::string mid = base + "conv_mid" + std::to_string(i) + "/";
            ConvLayer& c = s.conv_mid[us(i)];
            refs.push_back({mid + "weight", c.weight.data(), c.weight.size(),
                            {us(c.out_ch), us(c.in_ch), 3, 3}});
            refs.push_back({mid + "bias", c.bias.data(), c.bias.size(), {us(c.out_ch)}});
            const std::string bn = base + "bn" + std::to_string(i) + "/";
            BatchNormLayer& b = s.bn_mid[us(i)];
            refs.push_back({bn + "gamma", b.gamma.data(), b.gamma.size(), {us(b.channels)}});
            refs.push_back({bn + "beta", b.beta.data(), b.beta.size(), {us(b.channels)}});
        }
        refs.push_back({base + "conv_out/weight", s.conv_out.weight.data(),
                        s.conv_out.weight.size(),
                        {us(s.conv_out.out_ch), us(s.conv_out.in_ch), 3, 3}});
        refs.push_back({base + "conv_out/bias", s.conv_out.bias.data(), s.conv_out.bias.size(),
                        {us(s.conv_out.out_ch)}});
    }
    return refs;
}

// Non-trained state that still belongs in checkpoints.
inline std::vector<ParamRef> model_buffers(UnrolledModel& m) {
    std::vector<ParamRef> refs;
    const auto us = [](int v) { return static_cast<std::size_t>(v); };
    for (int k = 0; k < m.stages; ++k) {
        const std::string base = "stage" + std::to_string(k) + "/";
        CnnStage& s = m.cnn[us(k)];
        for (int i = 0; i < 3; ++i) {
            const std::string bn = base + "bn" + std::to_string(i) + "/";
            BatchNormLayer& b = s.bn_mid[us(i)];
            refs.push_back({bn + "running_mean", b.running_mean.data(), b.running_mean.size(),
                            {us(b.channels)}});
            refs.push_back({bn + "running_var", b.running_var.data(), b.running_var.size(),
                            {us(b.channels)}});
        }
    }
    return refs;
}

struct ParamLayout {
    std::vector<ParamRef> refs;
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    std::map<std::string, std::size_t> index;  // name -> position in refs

    static ParamLayout of(UnrolledModel& m) {
        ParamLayout layout;
        layout.refs = model_params(m);
        layout.offsets.reserve(layout.refs.size());
        for (std::size_t i = 0; i < layout.refs.size(); ++i) {
            layout.offsets.push_back(layout.total);
            layout.total += layout.refs[i].len;
            layout.index[layout.refs[i].name] = i;
        }
        return layout;
    }

    void gather(std::vector<double>& flat) const {
        flat.resize(total);
        for (std::size_t i = 0; i < refs.size(); ++i)
            std::copy(refs[i].data, refs[i].data + refs[i].len, flat.data() + offsets[i]);
    }
    void scatter(const std::vector<double>& flat) const {
        for (std::size_t i = 0; i < refs.size(); ++i)
            std::copy(flat.data() + offsets[i], flat.data() + offsets[i] + refs[i].len,
                      refs[i].data);
    }
    std::span<double> slice(std::vector<double>& flat, const std::string& name) const {
        const auto it = index.find(name);
        if (it == index.end()) throw std::invalid_argument("unknown parameter: " + name);
        return {flat.data() + offsets[it->second], refs[it->second].len};
    }
};

namespace detail {
struct GradSink {
    const ParamLayout* layout;
    std::vector<double>* flat;

    void add(const std::string& name, const double* g, std::size_t len) {
        std::span<double> dst = layout->slice(*flat, name);
        if (dst.size() != len) throw std::invalid_argument("gradient size mismatch: " + name);
        for (std::size_t i = 0; i < len; ++i) dst[i] += g[i];
    }
    void add(const std::string& name, const std::vector<double>& g) { add(name, g.data(), g.size()); }
    void add_scalar(const std::string& name, double g) { add(name, &g, 1); }
};
}  // namespace detail

// ---------------------------------------------------------------------------
// Loss and exact gradients

// Mean over the batch of ||R(y_j) - x_j||^2. Fills `grads` (layout order)
// and, when requested, per-sample gradients w.r.t. the input sinograms.
inline double loss_and_gradients(UnrolledModel& m, const std::vector<const Image*>& targets,
                                 const std::vector<const Sinogram*>& data,
                                 const ParamLayout& layout, std::vector<double>& grads,
                                 std::vector<Sinogram>* input_grads = nullptr) {
    const int B = static_cast<int>(targets.size());
    if (B < 1 || data.size() != targets.size())
        throw std::invalid_argument("loss_and_gradients: bad batch");
    for (const Image* t : targets)
        if (!t || !m.matches(*t)) throw std::invalid_argument("loss_and_gradients: target mismatch");

    StageTrace trace;
    Tensor out = unrolled_forward(m, data, /*train=*/true, &trace);

    double loss = 0.0;
    Tensor cot = out;
    for (int b = 0; b < B; ++b) {
        double* c = cot.slice(b, 0);
        const std::vector<double>& target = targets[static_cast<std::size_t>(b)]->values;
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double d = c[i] - target[i];
            loss += d * d;
            c[i] = 2.0 * d / B;
        }
    }
    loss /= B;

    grads.assign(layout.total, 0.0);
    detail::GradSink sink{&layout, &grads};
    if (input_grads) {
        input_grads->assign(static_cast<std::size_t>(B),
                            Sinogram(m.geometry.n_views, m.geometry.n_bins));
    }

    std::vector<Tensor> cot_half(static_cast<std::size_t>(m.stages));
    for (auto& t : cot_half) t = Tensor(B, 1, m.img_height, m.img_width, 0.0);

    for (int k = m.stages - 1; k >= 0; --k) {
        const std::string base = "stage" + std::to_string(k) + "/";
        const std::size_t uk = static_cast<std::size_t>(k);
        // x^{k+1} = x^{k+1/2} - CNN(cat): the CNN sees the negated cotangent
        Tensor neg_cot = cot;
        for (auto& v : neg_cot.v) v = -v;
        CnnStageGrads sg = cnn_stage_backward(m.cnn[uk], trace.cnn[uk], neg_cot);
        sink.add(base + "conv_in/weight", sg.w_in);
        sink.add(base + "conv_in/bias", sg.b_in);
        for (int i = 0; i < 3; ++i) {
            const std::size_t ui = static_cast<std::size_t>(i);
            sink.add(base + "conv_mid" + std::to_string(i) + "/weight", sg.w_mid[ui]);
            sink.add(base + "conv_mid" + std::to_string(i) + "/bias", sg.b_mid[ui]);
            sink.add(base + "bn" + std::to_string(i) + "/gamma", sg.gamma_mid[ui]);
            sink.add(base + "bn" + std::to_string(i) + "/beta", sg.beta_mid[ui]);
        }
        sink.add(base + "conv_out/weight", sg.w_out);
        sink.add(base + "conv_out/bias", sg.b_out);

        // identity path into channel k, plus the concat fan-out into every
        // half iterate (sg.input already carries the minus sign)
        for (std::size_t i = 0; i < cot.v.size(); ++i) cot_half[uk].v[i] += cot.v[i];
        for (int ch = 0; ch <= k; ++ch) {
            Tensor& dst = cot_half[static_cast<std::size_t>(ch)];
            for (int b = 0; b < B; ++b) {
                const double* src = sg.input.slice(b, ch);
                double* d = dst.slice(b, 0);
                for (std::size_t i = 0; i < dst.plane(); ++i) d[i] += src[i];
            }
        }

        // Data-fidelity step k: theta1 gradient and propagation to x^k.
        const Tensor& g = cot_half[uk];
        double theta_grad = 0.0;
        for (std::size_t i = 0; i < g.v.size(); ++i)
            theta_grad -= g.v[i] * trace.correction[uk].v[i];
        sink.add_scalar(base + "step", theta_grad);

        const double theta = m.step_scalars[uk];
        Tensor next(B, 1, m.img_height, m.img_width);
        for (int b = 0; b < B; ++b) {
            Image gb = detail::tensor_plane_to_image(g, b, m.img_width, m.img_height, m.pixel_size);
            Sinogram pg = apply_precond_adjoint(m, gb);
            if (input_grads) {
                Sinogram& acc = (*input_grads)[static_cast<std::size_t>(b)];
                for (std::size_t i = 0; i < acc.values.size(); ++i)
                    acc.values[i] += theta * pg.values[i];
            }
            Image atpg = back_project(m.projector, pg);
            double* nb = next.slice(b, 0);
            const double* gbp = g.slice(b, 0);
            for (std::size_t i = 0; i < next.plane(); ++i)
                nb[i] = gbp[i] - theta * atpg.values[i];
        }
        cot = std::move(next);
    }

    // x^0 = FBP(y) in both modes.
    if (input_grads) {
        for (int b = 0; b < B; ++b) {
            Image gb = detail::tensor_plane_to_image(cot, b, m.img_width, m.img_height, m.pixel_size);
            Sinogram pg = fbp_adjoint(m.fbp, gb);
            Sinogram& acc = (*input_grads)[static_cast<std::size_t>(b)];
            for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += pg.values[i];
        }
    }
    return loss;
}

// Forward-only batch loss with the same (train-mode) semantics the
// gradients refer to.
inline double batch_loss(UnrolledModel& m, const std::vector<const Image*>& targets,
                         const std::vector<const Sinogram*>& data) {
    const int B = static_cast<int>(targets.size());
    if (B < 1 || data.size() != targets.size())
        throw std::invalid_argument("batch_loss: bad batch");
    Tensor out = unrolled_forward(m, data, /*train=*/true, nullptr);
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const double* c = out.slice(b, 0);
        const std::vector<double>& target = targets[static_cast<std::size_t>(b)]->values;
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double d = c[i] - target[i];
            loss += d * d;
        }
    }
    return loss / B;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::uint64_t geometry_hash(const ScanGeometry& g) {
    std::string s = format_double(g.source_to_isocenter) + ";" +
                    format_double(g.source_to_detector) + ";" +
                    format_double(g.detector_pixel_size) + ";" + std::to_string(g.n_bins) + ";" +
                    std::to_string(g.n_views) + ";" + format_double(g.angular_span) + ";" +
                    format_double(g.image_fov);
    return fnv1a_bytes(s);
}

inline nlohmann::json geometry_to_json(const ScanGeometry& g) {
    return nlohmann::json{{"source_to_isocenter", g.source_to_isocenter},
                          {"source_to_detector", g.source_to_detector},
                          {"detector_pixel_size", g.detector_pixel_size},
                          {"n_bins", g.n_bins},
                          {"n_views", g.n_views},
                          {"angular_span", g.angular_span},
                          {"image_fov", g.image_fov}};
}

inline ScanGeometry geometry_from_json(const nlohmann::json& j) {
    ScanGeometry g;
    g.source_to_isocenter = j.at("source_to_isocenter").get<double>();
    g.source_to_detector = j.at("source_to_detector").get<double>();
    g.detector_pixel_size = j.at("detector_pixel_size").get<double>();
    g.n_bins = j.at("n_bins").get<int>();
    g.n_views = j.at("n_views").get<int>();
    g.angular_span = j.at("angular_span").get<double>();
    g.image_fov = j.at("image_fov").get<double>();
    g.validate();
    return g;
}

namespace detail {
inline std::string param_file_name(const std::string& name) {
    std::string s = name;
    for (char& c : s)
        if (c == '/') c = '_';
    return s + ".tomo";
}

inline void save_named_blobs(UnrolledModel& m, const std::string& dir,
                             const std::vector<ParamRef>& refs, nlohmann::json& list) {
    for (const ParamRef& r : refs) {
        TomoBlob blob;
        blob.kind = "tensor";
        blob.dims = r.shape;
        blob.data.assign(r.data, r.data + r.len);
        const std::string file = param_file_name(r.name);
        write_blob(dir + "/" + file, blob);
        list.push_back({{"name", r.name}, {"file", file}, {"shape", r.shape}});
    }
}

inline void load_named_blobs(UnrolledModel& m, const std::string& dir,
                             const std::vector<ParamRef>& refs) {
    for (const ParamRef& r : refs) {
        TomoBlob blob = read_blob(dir + "/" + param_file_name(r.name));
        if (blob.element_count() != r.len)
            throw std::runtime_error("checkpoint: size mismatch for " + r.name);
        std::copy(blob.data.begin(), blob.data.end(), r.data);
    }
}
}  // namespace detail

// Checkpoint directory: manifest.json + one TOMO1 tensor per named
// parameter/buffer + flat Adam moment blobs.
inline void save_checkpoint(UnrolledModel& m, const AdamState& adam, int epoch,
                            const std::string& dir,
                            const nlohmann::json& extra = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "pfbs-checkpoint-v1";
    manifest["mode"] = to_string(m.mode);
    manifest["stages"] = m.stages;
    manifest["channels"] = m.channels;
    manifest["final_relu"] = m.final_relu;
    manifest["epoch"] = epoch;
    manifest["geometry"] = geometry_to_json(m.geometry);
    manifest["geometry_hash"] = geometry_hash(m.geometry);
    manifest["image"] = {{"width", m.img_width}, {"height", m.img_height},
                         {"pixel_size", m.pixel_size}};
    manifest["adam"] = {{"lr", adam.lr},     {"beta1", adam.beta1}, {"beta2", adam.beta2},
                        {"eps", adam.eps},   {"step", adam.step}};
    if (!extra.empty()) manifest["training"] = extra;

    nlohmann::json params = nlohmann::json::array();
    detail::save_named_blobs(m, dir, model_params(m), params);
    manifest["params"] = params;
    nlohmann::json buffers = nlohmann::json::array();
    detail::save_named_blobs(m, dir, model_buffers(m), buffers);
    manifest["buffers"] = buffers;

    if (!adam.m.empty()) {
        TomoBlob mb;
        mb.kind = "tensor";
        mb.dims = {adam.m.size()};
        mb.data = adam.m;
        write_blob(dir + "/adam_m.tomo", mb);
        TomoBlob vb;
        vb.kind = "tensor";
        vb.dims = {adam.v.size()};
        vb.data = adam.v;
        write_blob(dir + "/adam_v.tomo", vb);
        manifest["adam"]["moments"] = true;
    }

    std::ofstream out(dir + "/manifest.json");
    if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

struct Checkpoint {
    UnrolledModel model;
    AdamState adam;
    int epoch = 0;
};

inline Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("missing checkpoint manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(in);
    if (manifest.at("format").get<std::string>() != "pfbs-checkpoint-v1")
        throw std::runtime_error("unknown checkpoint format in " + dir);

    Checkpoint ck;
    const ScanGeometry geometry = geometry_from_json(manifest.at("geometry"));
    ck.model = make_unrolled_model_raw(
        geometry, manifest.at("image").at("width").get<int>(),
        manifest.at("image").at("height").get<int>(),
        manifest.at("image").at("pixel_size").get<double>(), manifest.at("stages").get<int>(),
        manifest.at("channels").get<int>(),
        precond_mode_from_string(manifest.at("mode").get<std::string>()), /*seed=*/0,
        manifest.at("final_relu").get<bool>());
    detail::load_named_blobs(ck.model, dir, model_params(ck.model));
    detail::load_named_blobs(ck.model, dir, model_buffers(ck.model));
    ck.epoch = manifest.at("epoch").get<int>();

    const nlohmann::json& adam = manifest.at("adam");
    ParamLayout layout = ParamLayout::of(ck.model);
    ck.adam = AdamState(layout.total, adam.at("lr").get<double>());
    ck.adam.beta1 = adam.at("beta1").get<double>();
    ck.adam.beta2 = adam.at("beta2").get<double>();
    ck.adam.eps = adam.at("eps").get<double>();
    ck.adam.step = adam.at("step").get<long long>();
    if (adam.value("moments", false)) {
        TomoBlob mb = read_blob(dir + "/adam_m.tomo");
        TomoBlob vb = read_blob(dir + "/adam_v.tomo");
        if (mb.data.size() != layout.total || vb.data.size() != layout.total)
            throw std::runtime_error("checkpoint: Adam moment size mismatch in " + dir);
        ck.adam.m = std::move(mb.data);
        ck.adam.v = std::move(vb.data);
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Training

struct TrainingConfig {
    int epochs = 50;
    int batch_size = 4;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    int start_epoch = 0;          // completed epochs (resume)
    std::string checkpoint_dir;   // per-epoch checkpoints when set
    std::string log_path;         // JSONL log when set

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainingConfig: batch_size must be >= 1");
        if (epochs < 0 || start_epoch < 0 || start_epoch > epochs)
            throw std::invalid_argument("TrainingConfig: bad epoch range");
        if (!(lr >= 0.0)) throw std::invalid_argument("TrainingConfig: bad learning rate");
    }
};

struct EpochRecord {
    int epoch = 0;          // 1-based
    double train_loss = 0;  // mean per-sample loss over the epoch
    double test_psnr = 0;   // mean PSNR over the test set (0 when empty)
    double wall_time_s = 0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},
                {"train_loss", train_loss},
                {"test_psnr", test_psnr},
                {"wall_time_s", wall_time_s}};
    }
};

inline double mean_test_psnr(UnrolledModel& m, const SampleSet& test_set) {
    if (test_set.size() == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
        Image recon = unrolled_reconstruct(m, test_set.sinograms[i]);
        sum += psnr(test_set.images[i], recon);
    }
    return sum / static_cast<double>(test_set.size());
}

// Mini-batch Adam training. Deterministic given (model, datasets, config):
// the per-epoch shuffle is drawn from a counter stream keyed on
// (seed, epoch), so resuming from a checkpoint continues bit-exactly.
inline std::vector<EpochRecord> train(UnrolledModel& m, const SampleSet& train_set,
                                      const SampleSet& test_set, const TrainingConfig& cfg,
                                      AdamState* adam_state = nullptr) {
    cfg.validate();
    const std::size_t n = train_set.size();
    if (n == 0) throw std::invalid_argument("train: empty dataset");
    for (std::size_t i = 0; i < n; ++i)
        if (!m.matches(train_set.images[i]) || !m.matches(train_set.sinograms[i]))
            throw std::invalid_argument("train: sample shape mismatch");

    ParamLayout layout = ParamLayout::of(m);
    AdamState local_adam(layout.total, cfg.lr);
    AdamState& adam = adam_state ? *adam_state : local_adam;
    if (adam.m.empty()) adam = AdamState(layout.total, cfg.lr);
    if (adam.m.size() != layout.total)
        throw std::invalid_argument("train: Adam state does not match the model");
    adam.lr = cfg.lr;
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.eps;

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::app);
        if (!log) throw std::runtime_error("train: cannot open log " + cfg.log_path);
    }

    std::vector<EpochRecord> records;
    std::vector<double> flat, grads;
    std::vector<std::size_t> order(n);
    for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), 0);
        CounterRng rng(cfg.seed, 0x5efful, static_cast<std::uint64_t>(epoch));
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng() % i);
            std::swap(order[i - 1], order[j]);
        }

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const Image*> targets;
            std::vector<const Sinogram*> data;
            for (std::size_t i = start; i < stop; ++i) {
                targets.push_back(&train_set.images[order[i]]);
                data.push_back(&train_set.sinograms[order[i]]);
            }
            const double loss = loss_and_gradients(m, targets, data, layout, grads);
            if (!std::isfinite(loss)) throw std::runtime_error("train: non-finite loss");
            layout.gather(flat);
            adam_step(adam, flat, grads);
            layout.scatter(flat);
            loss_sum += loss * static_cast<double>(stop - start);
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.test_psnr = mean_test_psnr(m, test_set);
        rec.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        records.push_back(rec);

        if (!cfg.checkpoint_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%03d", rec.epoch);
            nlohmann::json extra = {{"epochs", cfg.epochs},
                                    {"batch_size", cfg.batch_size},
                                    {"lr", cfg.lr},
                                    {"seed", cfg.seed}};
            save_checkpoint(m, adam, rec.epoch, cfg.checkpoint_dir + "/" + name, extra);
        }
        if (log) log << rec.to_json().dump() << "\n" << std::flush;
    }
    return records;
}

}  // namespace tomo
