#pragma once

// Branch interactive attention fusion: parallel enhancement of the three
// disentangled streams, SE-style fusion, and a per-channel softmax gate that
// selects between the enhanced streams.

#include <cmath>
#include <string>

#include <torch/torch.h>

#include "dbifaunet/ddfd.hpp"
#include "dbifaunet/errors.hpp"
#include "dbifaunet/spectral_ops.hpp"

namespace dbifaunet {

enum class FusionMode { Add, Mul };

inline std::string to_string(FusionMode m) { return m == FusionMode::Add ? "add" : "mul"; }

inline FusionMode fusion_mode_from_string(const std::string &s) {
    if (s == "add") return FusionMode::Add;
    if (s == "mul") return FusionMode::Mul;
    throw ValidationError("fusion_mode must be add or mul, got '" + s + "'");
}

struct BiafOptions {
    int64_t channels = 32;
    int64_t heads = 1;
    int64_t dynamic_kernels = 4;
    double norm_eps = 1e-5;
    double norm_momentum = 0.1;
    double tau_init = 0.1;
    int64_t reduction = 4;
    FusionMode fusion = FusionMode::Add;
    // Spectral attention is quadratic in the token count; larger maps are
    // average-pooled by powers of two until they fit, then lifted back.
    int64_t max_attention_tokens = 256;
    double low_cut = 0.25;
    double high_cut = 0.75;
};

/// Masks over an unshifted FFT grid, radius (|fy| + |fx|) normalised to [0, 1].
inline spectral::BandMasks fft_band_masks(int64_t h, int64_t w, double low_cut, double high_cut,
                                          const torch::TensorOptions &options) {
    auto fy = torch::fft::fftfreq(h, torch::kFloat64).abs().unsqueeze(1);
    auto fx = torch::fft::fftfreq(w, torch::kFloat64).abs().unsqueeze(0);
    auto r = fy + fx; // each term at most 0.5
    auto low = r.lt(low_cut);
    auto high = r.ge(high_cut);
    auto mid = low.logical_or(high).logical_not();
    return {low.to(options), mid.to(options), high.to(options)};
}

/// Self-attention over FFT tokens. Scores are magnitudes of the (unconjugated)
/// complex products F(Q) F(K)^T so the softmax stays real; the attended spectrum
/// is mixed per frequency band by learnable channel maps (cross-band
/// correlation) and brought back with an inverse FFT.
class GlobalSpectralAttentionImpl : public torch::nn::Module {
public:
    explicit GlobalSpectralAttentionImpl(const BiafOptions &o) : o_(o) {
        const int64_t c = o.channels;
        if (o.heads < 1 || c / o.heads == 0 || c % o.heads != 0) {
            throw ValidationError("global_attention: d_k = channels / heads must be a positive integer");
        }
        query = register_module("query", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1).bias(false)));
        key = register_module("key", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1).bias(false)));
        value = register_module("value", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1).bias(false)));
        const double bound = 1.0 / std::sqrt(static_cast<double>(c));
        cfc = register_parameter("cfc", torch::empty({3, c, c}).uniform_(-bound, bound));
    }

    int64_t pool_factor(int64_t h, int64_t w) const {
        int64_t f = 1;
        while ((h / f) * (w / f) > o_.max_attention_tokens && h % (2 * f) == 0 && w % (2 * f) == 0) f *= 2;
        return f;
    }

    /// Row-stochastic attention matrix per batch entry and head: (N, heads, T, T).
    torch::Tensor attention_weights(const torch::Tensor &x) { return attend(x).weights; }

    torch::Tensor forward(const torch::Tensor &x) { return attend(x).output; }

    torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr};
    torch::Tensor cfc; // (band, out, in)

private:
    struct Attended {
        torch::Tensor output, weights;
    };

    Attended attend(const torch::Tensor &x) {
        spectral::check_feature_map(x, "global_attention", false);
        namespace F = torch::nn::functional;
        const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
        const int64_t factor = pool_factor(h, w);
        auto src = factor > 1 ? F::avg_pool2d(x, F::AvgPool2dFuncOptions(factor)) : x;
        const int64_t ph = src.size(2), pw = src.size(3), t = ph * pw;
        const int64_t heads = o_.heads, dk = c / heads;

        // (N, heads, T, dk) real and imaginary token matrices.
        auto tokens = [&](const torch::Tensor &m) {
            auto spec = torch::fft::fft2(m);
            auto re = torch::real(spec).reshape({n, heads, dk, t}).transpose(2, 3);
            auto im = torch::imag(spec).reshape({n, heads, dk, t}).transpose(2, 3);
            return std::pair{re, im};
        };
        auto [qr, qi] = tokens(query->forward(src));
        auto [kr, ki] = tokens(key->forward(src));
        auto [vr, vi] = tokens(value->forward(src));

        auto sre = torch::matmul(qr, kr.transpose(2, 3)) - torch::matmul(qi, ki.transpose(2, 3));
        auto sim = torch::matmul(qr, ki.transpose(2, 3)) + torch::matmul(qi, kr.transpose(2, 3));
        auto scores = torch::sqrt(sre.square() + sim.square() + 1e-12) / std::sqrt(static_cast<double>(dk));
        auto weights = torch::softmax(scores, -1);

        auto back = [&](const torch::Tensor &m) { return m.transpose(2, 3).reshape({n, c, ph, pw}); };
        auto are = back(torch::matmul(weights, vr));
        auto aim = back(torch::matmul(weights, vi));

        auto masks = fft_band_masks(ph, pw, o_.low_cut, o_.high_cut, x.options());
        const torch::Tensor band[3] = {masks.low, masks.mid, masks.high};
        torch::Tensor mre, mim;
        for (int64_t g = 0; g < 3; ++g) {
            auto wg = cfc[g];
            auto r = torch::einsum("oc,nchw->nohw", {wg, are * band[g]});
            auto i = torch::einsum("oc,nchw->nohw", {wg, aim * band[g]});
            mre = g == 0 ? r : mre + r;
            mim = g == 0 ? i : mim + i;
        }
        auto y = torch::real(torch::fft::ifft2(torch::complex(mre, mim)));
        if (factor > 1) {
            y = F::interpolate(y, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{h, w})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
        }
        return {y, weights};
    }

    BiafOptions o_;
};
TORCH_MODULE(GlobalSpectralAttention);

/// K content-gated 3x3 kernels, each response divided by the root of its batch
/// variance (running estimate in eval mode), averaged over kernels.
class LocalDynamicConvImpl : public torch::nn::Module {
public:
    explicit LocalDynamicConvImpl(const BiafOptions &o) : o_(o) {
        const int64_t c = o.channels, k = o.dynamic_kernels;
        if (k < 1) throw ValidationError("local_dynamic_conv: need at least one kernel");
        kernels = register_module(
            "kernels", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, k * c, 3).padding(1).bias(false)));
        gates = register_module("gates", torch::nn::Linear(torch::nn::LinearOptions(c, k * c).bias(false)));
        running_var = register_buffer("running_var", torch::ones({k, c}));
    }

    /// Per-kernel normalised, gated responses: (N, K, C, H, W).
    torch::Tensor branch_outputs(const torch::Tensor &x) {
        spectral::check_feature_map(x, "local_dynamic_conv", false);
        const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3), k = o_.dynamic_kernels;
        auto responses = kernels->forward(x).view({n, k, c, h, w});
        auto gate = torch::sigmoid(gates->forward(x.mean({2, 3}))).view({n, k, c, 1, 1});
        torch::Tensor var;
        if (is_training()) {
            var = responses.var({0, 3, 4}, false);
            torch::NoGradGuard guard;
            running_var.mul_(1.0 - o_.norm_momentum).add_(var.detach() * o_.norm_momentum);
        } else {
            var = running_var;
        }
        return gate * responses * torch::rsqrt(var + o_.norm_eps).view({1, k, c, 1, 1});
    }

    torch::Tensor forward(const torch::Tensor &x) { return branch_outputs(x).mean(1); }

    torch::nn::Conv2d kernels{nullptr};
    torch::nn::Linear gates{nullptr};
    torch::Tensor running_var;

private:
    BiafOptions o_;
};
TORCH_MODULE(LocalDynamicConv);

inline torch::Tensor soft_threshold(const torch::Tensor &z, const torch::Tensor &tau) {
    return torch::sign(z) * torch::relu(z.abs() - tau);
}

/// 3x3 deformable convolution. Offsets are predicted per position (2 per tap,
/// dy then dx); sampling is bilinear on the zero-padded input and clamps to the
/// border of that padded grid. weight is (C_out, C_in, 9), taps in row-major order.
inline torch::Tensor deform_conv3x3(const torch::Tensor &x, const torch::Tensor &offsets, const torch::Tensor &weight) {
    namespace F = torch::nn::functional;
    const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto xp = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}));
    const double hp = static_cast<double>(h + 2), wp = static_cast<double>(w + 2);
    auto opts = x.options();
    auto tap = torch::arange(9, opts);
    auto tap_y = torch::floor(tap / 3.0) - 1.0; // (9)
    auto tap_x = torch::remainder(tap, 3.0) - 1.0;
    auto rows = torch::arange(h, opts).view({1, 1, h, 1}) + 1.0;
    auto cols = torch::arange(w, opts).view({1, 1, 1, w}) + 1.0;
    auto off = offsets.view({n, 9, 2, h, w});
    auto py = rows + tap_y.view({1, 9, 1, 1}) + off.select(2, 0);
    auto px = cols + tap_x.view({1, 9, 1, 1}) + off.select(2, 1);
    auto grid = torch::stack({px * (2.0 / (wp - 1.0)) - 1.0, py * (2.0 / (hp - 1.0)) - 1.0}, -1)
                    .reshape({n, 9 * h, w, 2});
    auto sampled = F::grid_sample(xp, grid,
                                  F::GridSampleFuncOptions()
                                      .mode(torch::kBilinear)
                                      .padding_mode(torch::kBorder)
                                      .align_corners(true));
    sampled = sampled.view({n, c, 9, h * w}).reshape({n, c * 9, h * w});
    // bmm on the broadcast weight; matmul would fold and copy `sampled`
    auto wk = weight.reshape({1, weight.size(0), c * 9}).expand({n, weight.size(0), c * 9});
    return torch::bmm(wk, sampled).view({n, weight.size(0), h, w});
}

/// Two deformable 3x3 convolutions, each soft-thresholded, multiplied together.
class ChannelDeformThresholdImpl : public torch::nn::Module {
public:
    explicit ChannelDeformThresholdImpl(const BiafOptions &o) {
        const int64_t c = o.channels;
        auto offset_conv = [&](const std::string &name) {
            auto conv = register_module(name, torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 18, 3).padding(1)));
            torch::NoGradGuard guard;
            conv->weight.zero_();
            conv->bias.zero_();
            return conv;
        };
        offset_p = offset_conv("offset_p");
        offset_q = offset_conv("offset_q");
        const double bound = std::sqrt(6.0 / static_cast<double>(9 * c));
        weight_p = register_parameter("weight_p", torch::empty({c, c, 9}).uniform_(-bound, bound));
        weight_q = register_parameter("weight_q", torch::empty({c, c, 9}).uniform_(-bound, bound));
        // softplus(tau_raw) = tau_init
        tau_raw = register_parameter("tau_raw", torch::full({c}, std::log(std::expm1(o.tau_init))));
    }

    torch::Tensor threshold() const { return torch::softplus(tau_raw); }

    struct Parts {
        torch::Tensor conv_p, conv_q, output;
    };

    Parts parts(const torch::Tensor &x) {
        spectral::check_feature_map(x, "channel_deform_threshold", false);
        auto cp = deform_conv3x3(x, offset_p->forward(x), weight_p);
        auto cq = deform_conv3x3(x, offset_q->forward(x), weight_q);
        auto tau = threshold().view({1, -1, 1, 1});
        return {cp, cq, soft_threshold(cp, tau) * soft_threshold(cq, tau)};
    }

    torch::Tensor forward(const torch::Tensor &x) { return parts(x).output; }

    torch::nn::Conv2d offset_p{nullptr}, offset_q{nullptr};
    torch::Tensor weight_p, weight_q, tau_raw;
};
TORCH_MODULE(ChannelDeformThreshold);

/// Z = [A_g*X1, A_l*X2, A_c*X3]; Y = s + Z (add) or s * Z (mul) with s the SE vector of Z.
class BranchFuseImpl : public torch::nn::Module {
public:
    explicit BranchFuseImpl(const BiafOptions &o) : mode_(o.fusion) {
        const int64_t z = 3 * o.channels, hidden = std::max<int64_t>(1, z / o.reduction);
        fc1 = register_module("fc1", torch::nn::Linear(torch::nn::LinearOptions(z, hidden).bias(false)));
        fc2 = register_module("fc2", torch::nn::Linear(torch::nn::LinearOptions(hidden, z).bias(false)));
    }

    torch::Tensor forward(const torch::Tensor &ag, const torch::Tensor &al, const torch::Tensor &ac,
                          const torch::Tensor &x1, const torch::Tensor &x2, const torch::Tensor &x3) {
        for (const auto *t : {&al, &ac, &x1, &x2, &x3}) {
            if (t->sizes() != ag.sizes()) throw ValidationError("branch_fuse: all six maps must share one shape");
        }
        auto z = torch::cat({ag * x1, al * x2, ac * x3}, 1);
        if (z.size(1) != fc1->options.in_features()) {
            throw ValidationError("branch_fuse: channel count does not match the configured width");
        }
        auto s = torch::sigmoid(fc2->forward(torch::relu(fc1->forward(z.mean({2, 3}))))).unsqueeze(-1).unsqueeze(-1);
        return mode_ == FusionMode::Add ? z + s : z * s;
    }

    FusionMode mode() const { return mode_; }

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};

private:
    FusionMode mode_;
};
TORCH_MODULE(BranchFuse);

/// B_i = softmax_i(W_bi GAP(Y)), O = sum_i B_i * Y_i.
class InteractiveGateImpl : public torch::nn::Module {
public:
    explicit InteractiveGateImpl(const BiafOptions &o) : channels_(o.channels) {
        logits = register_module(
            "logits", torch::nn::Linear(torch::nn::LinearOptions(3 * o.channels, 3 * o.channels).bias(false)));
    }

    /// (N, 3, C), a simplex along dim 1.
    torch::Tensor gate_weights(const torch::Tensor &y) {
        if (y.dim() != 4 || y.size(1) != 3 * channels_) {
            throw ValidationError("interactive_gate: expected 3C channels");
        }
        return torch::softmax(logits->forward(y.mean({2, 3})).view({y.size(0), 3, channels_}), 1);
    }

    torch::Tensor forward(const torch::Tensor &y) {
        auto b = gate_weights(y).unsqueeze(-1).unsqueeze(-1);
        auto streams = y.view({y.size(0), 3, channels_, y.size(2), y.size(3)});
        return (b * streams).sum(1);
    }

    torch::nn::Linear logits{nullptr};

private:
    int64_t channels_;
};
TORCH_MODULE(InteractiveGate);

class BiafImpl : public torch::nn::Module {
public:
    explicit BiafImpl(const BiafOptions &o)
        : global(register_module("global", GlobalSpectralAttention(o))),
          local(register_module("local", LocalDynamicConv(o))),
          channel(register_module("channel", ChannelDeformThreshold(o))), fuse(register_module("fuse", BranchFuse(o))),
          gate(register_module("gate", InteractiveGate(o))) {}

    torch::Tensor forward(const DisentangledFeatures &d) {
        if (d.local_edge.sizes() != d.global_ctx.sizes() || d.channel_texture.sizes() != d.global_ctx.sizes()) {
            throw ValidationError("biaf: the three streams must share one shape");
        }
        auto ag = global->forward(d.global_ctx);
        auto al = local->forward(d.local_edge);
        auto ac = channel->forward(d.channel_texture);
        return gate->forward(fuse->forward(ag, al, ac, d.global_ctx, d.local_edge, d.channel_texture));
    }

    GlobalSpectralAttention global;
    LocalDynamicConv local;
    ChannelDeformThreshold channel;
    BranchFuse fuse;
    InteractiveGate gate;
};
TORCH_MODULE(Biaf);

} // namespace dbifaunet
