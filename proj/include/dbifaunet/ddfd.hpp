#pragma once

// Dual-domain feature disentanglement: splits the (deep, current, shallow)
// skip features of one nested node into a global-context stream, a local-edge
// stream and a channel-texture stream, all at the current node's (C, H, W).

#include <array>
#include <numbers>
#include <string>

#include <torch/torch.h>

#include "dbifaunet/errors.hpp"
#include "dbifaunet/spectral_ops.hpp"

namespace dbifaunet {

struct MultiLevelFeatures {
    torch::Tensor deep;    // (N, 2C, H/2, W/2)
    torch::Tensor current; // (N, C, H, W)
    torch::Tensor shallow; // (N, C/2, 2H, 2W); (N, C/2, H, W) on the outermost row
};

struct DisentangledFeatures {
    torch::Tensor global_ctx;
    torch::Tensor local_edge;
    torch::Tensor channel_texture;
};

struct GaborBankOptions {
    std::array<double, 4> orientations{0.0, std::numbers::pi / 4, std::numbers::pi / 2, 3 * std::numbers::pi / 4};
    double frequency = 0.25;
    double gamma = 0.5;
    double sigma = 2.0;
    double phi = 0.0;
    int64_t size = 7;
};

struct DdfdOptions {
    int64_t channels = 32;
    int64_t reduction = 4; // bottleneck ratio of the frequency channel attention
    double low_cut = 0.25;
    double high_cut = 0.75;
    GaborBankOptions gabor{};
};

/// Scale each sample to unit root-mean-square over (C, H, W). Zero stays zero.
inline torch::Tensor rms_normalize(const torch::Tensor &x, double eps = 1e-5) {
    return x * torch::rsqrt(x.square().mean({1, 2, 3}, true) + eps);
}

class FreqChannelAttentionImpl : public torch::nn::Module {
public:
    FreqChannelAttentionImpl(int64_t channels, int64_t reduction)
        : fc1(register_module("fc1", torch::nn::Linear(channels, std::max<int64_t>(1, channels / reduction)))),
          fc2(register_module("fc2", torch::nn::Linear(std::max<int64_t>(1, channels / reduction), channels))) {}

    spectral::ChannelAttentionOutput forward(const torch::Tensor &x) {
        return spectral::freq_channel_attention(x, fc1->weight, fc2->weight, fc1->bias, fc2->bias);
    }

    torch::nn::Linear fc1, fc2;
};
TORCH_MODULE(FreqChannelAttention);

/// Deep features -> channel-modulated, projected to C, bilinearly lifted to H x W.
class GlobalBranchImpl : public torch::nn::Module {
public:
    explicit GlobalBranchImpl(const DdfdOptions &o)
        : attention(register_module("attention", FreqChannelAttention(2 * o.channels, o.reduction))),
          project(register_module(
              "project", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * o.channels, o.channels, 1).bias(false)))) {}

    torch::Tensor forward(const torch::Tensor &deep, int64_t height, int64_t width) {
        spectral::check_feature_map(deep, "global_branch", false);
        if (deep.size(2) * 2 != height || deep.size(3) * 2 != width) {
            throw ValidationError("global_branch: deep features " + std::to_string(deep.size(2)) + "x" +
                                  std::to_string(deep.size(3)) + " are not half of " + std::to_string(height) +
                                  "x" + std::to_string(width));
        }
        auto ctx = attention->forward(deep).context;
        auto y = project->forward(deep * ctx.unsqueeze(-1).unsqueeze(-1));
        namespace F = torch::nn::functional;
        return F::interpolate(y, F::InterpolateFuncOptions()
                                     .size(std::vector<int64_t>{height, width})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
    }

    FreqChannelAttention attention;
    torch::nn::Conv2d project;
};
TORCH_MODULE(GlobalBranch);

/// Strip-pooling attention over shallow detail, weighting a Gabor bank applied to
/// the Haar LL and HH bands of the same features.
class LocalBranchImpl : public torch::nn::Module {
public:
    explicit LocalBranchImpl(const DdfdOptions &o) : bank_(o.gabor) {
        const int64_t c = o.channels;
        shallow_proj = register_module(
            "shallow_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(c / 2, c, 1).bias(false)));
        strip_proj =
            register_module("strip_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, c, 1).bias(false)));
        align = register_module("align", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1).bias(false)));
        theta = register_parameter(
            "theta", torch::tensor(std::vector<double>(bank_.orientations.begin(), bank_.orientations.end()))
                         .to(torch::kFloat32));
        frequency = register_parameter("frequency", torch::full({1}, bank_.frequency));
    }

    /// Mean-subtracted kernels, one per orientation: (orientations, 1, k, k).
    torch::Tensor gabor_bank() const {
        std::vector<torch::Tensor> ks;
        for (int64_t o = 0; o < theta.size(0); ++o) {
            auto k = spectral::gabor_kernel(theta[o], frequency[0], bank_.gamma, bank_.sigma, bank_.phi, bank_.size);
            ks.push_back(k - k.mean());
        }
        return torch::stack(ks).unsqueeze(1);
    }

    torch::Tensor forward(const torch::Tensor &shallow, const torch::Tensor &current) {
        spectral::check_feature_map(shallow, "local_branch", false);
        const int64_t n = current.size(0), c = current.size(1), h = current.size(2), w = current.size(3);
        namespace F = torch::nn::functional;
        auto s = shallow;
        if (s.size(2) == 2 * h && s.size(3) == 2 * w) {
            s = F::avg_pool2d(s, F::AvgPool2dFuncOptions(2));
        } else if (s.size(2) != h || s.size(3) != w) {
            throw ValidationError("local_branch: shallow features must be at 2x or 1x the current resolution");
        }
        s = shallow_proj->forward(s);

        auto strips = spectral::strip_pool(s);
        auto weights = torch::sigmoid(strip_proj->forward(
            torch::cat({strips.horizontal.expand({n, c, h, w}), strips.vertical.expand({n, c, h, w})}, 1)));

        auto bands = spectral::dwt2_haar(s);
        auto up = [&](const torch::Tensor &b) {
            return F::interpolate(b, F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{h, w})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
        };
        // Filtering is linear: summing the orientation responses of LL and HH equals one pass of
        // the summed kernel over LL + HH, applied depthwise.
        auto detail = up(bands.LL) + up(bands.HH);
        const int64_t pad = bank_.size / 2;
        detail = F::pad(detail, F::PadFuncOptions({pad, pad, pad, pad}).mode(torch::kReplicate));
        auto kernel = gabor_bank().sum(0, true).expand({c, 1, bank_.size, bank_.size});
        auto response = F::conv2d(detail, kernel, F::Conv2dFuncOptions().groups(c));

        return rms_normalize(align->forward(weights * response));
    }

    torch::nn::Conv2d shallow_proj{nullptr}, strip_proj{nullptr}, align{nullptr};
    torch::Tensor theta, frequency;

private:
    GaborBankOptions bank_;
};
TORCH_MODULE(LocalBranch);

/// DCT -> three-band split -> per-band, per-channel gains -> IDCT.
class ChannelBranchImpl : public torch::nn::Module {
public:
    explicit ChannelBranchImpl(const DdfdOptions &o) : low_cut_(o.low_cut), high_cut_(o.high_cut) {
        gains = register_parameter("gains", torch::ones({3, o.channels}));
    }

    torch::Tensor forward(const torch::Tensor &current) {
        auto coeffs = spectral::dct2(current);
        auto m = spectral::band_masks(coeffs.size(2), coeffs.size(3), low_cut_, high_cut_, coeffs.options());
        auto g = gains.view({3, 1, -1, 1, 1});
        auto scale = g[0] * m.low + g[1] * m.mid + g[2] * m.high;
        return spectral::idct2(coeffs * scale);
    }

    torch::Tensor gains; // rows: low, mid, high

private:
    double low_cut_, high_cut_;
};
TORCH_MODULE(ChannelBranch);

class DdfdImpl : public torch::nn::Module {
public:
    explicit DdfdImpl(const DdfdOptions &o)
        : options_(o), global(register_module("global", GlobalBranch(o))),
          local(register_module("local", LocalBranch(o))), channel(register_module("channel", ChannelBranch(o))) {}

    DisentangledFeatures forward(const MultiLevelFeatures &m) {
        spectral::check_feature_map(m.current, "ddfd", false);
        const int64_t c = m.current.size(1), h = m.current.size(2), w = m.current.size(3);
        if (c != options_.channels) {
            throw ValidationError("ddfd: current features have " + std::to_string(c) + " channels, expected " +
                                  std::to_string(options_.channels));
        }
        if (m.deep.dim() != 4 || m.deep.size(1) != 2 * c) {
            throw ValidationError("ddfd: deep features must carry 2C channels");
        }
        if (m.shallow.dim() != 4 || m.shallow.size(1) != c / 2) {
            throw ValidationError("ddfd: shallow features must carry C/2 channels");
        }
        return {global->forward(m.deep, h, w), local->forward(m.shallow, m.current), channel->forward(m.current)};
    }

    const DdfdOptions &options() const { return options_; }

private:
    DdfdOptions options_;

public:
    GlobalBranch global;
    LocalBranch local;
    ChannelBranch channel;
};
TORCH_MODULE(Ddfd);

} // namespace dbifaunet
