#pragma once

// Densely nested U-shaped backbone. Node X(i,j) sits on row i (resolution
// H/2^i, width C0*2^i) and column j. Column 0 is the encoder; every other node
// aggregates its row predecessors with the upsampled node below-left, then
// (in the full variant) runs DDFD -> BIAF on the triple
//   deep    = X(i+1, j-1)        (2C channels, half resolution)
//   current = that aggregation   (C channels)
//   shallow = X(i-1, j-1)        (C/2 channels, double resolution),
// with a 3x3 conv + ReLU stem on the image standing in for `shallow` on row 0.
// Interior rows reuse the neighbour pattern of the top row.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "dbifaunet/biaf.hpp"
#include "dbifaunet/ddfd.hpp"
#include "dbifaunet/errors.hpp"
#include "dbifaunet/supervision.hpp"

namespace dbifaunet {

enum class Ablation { Full, NoDdfdBiaf, NoNestedDs };

inline std::string to_string(Ablation a) {
    switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoDdfdBiaf: return "no_ddfd_biaf";
    case Ablation::NoNestedDs: return "no_nested_ds";
    }
    return "full";
}

/// Accepts both the underscore names and the CLI spellings (no-ddfd-biaf, no-ds).
inline Ablation ablation_from_string(const std::string &s) {
    if (s == "full") return Ablation::Full;
    if (s == "no_ddfd_biaf" || s == "no-ddfd-biaf") return Ablation::NoDdfdBiaf;
    if (s == "no_nested_ds" || s == "no-nested-ds" || s == "no_ds" || s == "no-ds") return Ablation::NoNestedDs;
    throw ValidationError("ablation: unknown variant '" + s + "'");
}

struct NetworkConfig {
    int64_t depth = 5;
    int64_t base_channels = 32;
    int64_t input_channels = 1;
    FusionMode fusion_mode = FusionMode::Add;
    Ablation ablation = Ablation::Full;
    int64_t max_attention_tokens = 256; // larger maps are average-pooled before spectral attention

    void validate() const {
        if (depth < 3) throw ValidationError("NetworkConfig.depth must be >= 3, got " + std::to_string(depth));
        if (base_channels < 8)
            throw ValidationError("NetworkConfig.base_channels must be >= 8, got " + std::to_string(base_channels));
        if (input_channels < 1)
            throw ValidationError("NetworkConfig.input_channels must be >= 1, got " + std::to_string(input_channels));
        if (max_attention_tokens < 1) throw ValidationError("NetworkConfig.max_attention_tokens must be >= 1");
    }

    int64_t supervision_points() const { return depth - 1; }
    int64_t divisor() const { return int64_t{1} << (depth - 1); }
    int64_t channels(int64_t row) const { return base_channels << row; }
};

inline void to_json(nlohmann::json &j, const NetworkConfig &c) {
    j = nlohmann::json{{"depth", c.depth},
                       {"base_channels", c.base_channels},
                       {"input_channels", c.input_channels},
                       {"fusion_mode", to_string(c.fusion_mode)},
                       {"ablation", to_string(c.ablation)},
                       {"max_attention_tokens", c.max_attention_tokens}};
}

inline void from_json(const nlohmann::json &j, NetworkConfig &c) {
    c.depth = j.at("depth").get<int64_t>();
    c.base_channels = j.at("base_channels").get<int64_t>();
    c.input_channels = j.at("input_channels").get<int64_t>();
    c.fusion_mode = fusion_mode_from_string(j.at("fusion_mode").get<std::string>());
    c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    c.max_attention_tokens = j.at("max_attention_tokens").get<int64_t>();
}

/// Names of the fields on which two configs disagree.
inline std::vector<std::string> config_mismatches(const NetworkConfig &a, const NetworkConfig &b) {
    nlohmann::json ja = a, jb = b;
    std::vector<std::string> out;
    for (auto it = ja.begin(); it != ja.end(); ++it) {
        if (!jb.contains(it.key()) || jb[it.key()] != it.value()) out.push_back(it.key());
    }
    return out;
}

inline torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

inline void kaiming_init(torch::nn::Conv2d &conv) {
    torch::NoGradGuard guard;
    torch::nn::init::kaiming_uniform_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
    if (conv->bias.defined()) conv->bias.zero_();
}

/// Two 3x3 conv + ReLU; the first conv may stride by 2.
class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int64_t in, int64_t out, int64_t stride = 1)
        : conv1(register_module("conv1", conv3x3(in, out, stride))), conv2(register_module("conv2", conv3x3(out, out))) {
        kaiming_init(conv1);
        kaiming_init(conv2);
    }

    torch::Tensor forward(const torch::Tensor &x) { return torch::relu(conv2->forward(torch::relu(conv1->forward(x)))); }

    torch::nn::Conv2d conv1, conv2;
};
TORCH_MODULE(ConvBlock);

inline torch::Tensor resize_bilinear(const torch::Tensor &x, int64_t h, int64_t w) {
    if (x.size(2) == h && x.size(3) == w) return x;
    namespace F = torch::nn::functional;
    return F::interpolate(
        x, F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kBilinear).align_corners(false));
}

/// 3x3 conv -> ReLU -> 1x1 conv -> sigmoid, resized to the requested resolution.
class SupervisionHeadImpl : public torch::nn::Module {
public:
    explicit SupervisionHeadImpl(int64_t channels)
        : conv(register_module("conv", conv3x3(channels, channels))),
          classify(register_module("classify", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)))) {
        kaiming_init(conv);
        kaiming_init(classify);
    }

    torch::Tensor forward(const torch::Tensor &x, int64_t height, int64_t width) {
        auto p = torch::sigmoid(classify->forward(torch::relu(conv->forward(x))));
        return resize_bilinear(p, height, width);
    }

    torch::nn::Conv2d conv, classify;
};
TORCH_MODULE(SupervisionHead);

class DbifAunetImpl : public torch::nn::Module {
public:
    explicit DbifAunetImpl(const NetworkConfig &cfg) : cfg_(cfg) {
        cfg.validate();
        const int64_t depth = cfg.depth;
        const bool fused = cfg.ablation != Ablation::NoDdfdBiaf;
        for (int64_t i = 0; i < depth; ++i) {
            const int64_t in = i == 0 ? cfg.input_channels : cfg.channels(i - 1);
            encoder_.push_back(register_module("enc" + std::to_string(i), ConvBlock(in, cfg.channels(i), i == 0 ? 1 : 2)));
        }
        if (fused) {
            stem_ = register_module("stem", conv3x3(cfg.input_channels, cfg.base_channels / 2));
            kaiming_init(stem_);
        }
        nodes_.resize(depth);
        for (int64_t j = 1; j < depth; ++j) {
            for (int64_t i = 0; i + j < depth; ++i) {
                const int64_t c = cfg.channels(i);
                const std::string name = "node" + std::to_string(i) + "_" + std::to_string(j);
                Node n;
                n.aggregate = register_module(name + "_aggregate", conv3x3(c * j + cfg.channels(i + 1), c));
                kaiming_init(n.aggregate);
                if (fused) {
                    DdfdOptions d;
                    d.channels = c;
                    n.ddfd = register_module(name + "_ddfd", Ddfd(d));
                    BiafOptions b;
                    b.channels = c;
                    b.fusion = cfg.fusion_mode;
                    b.max_attention_tokens = cfg.max_attention_tokens;
                    n.biaf = register_module(name + "_biaf", Biaf(b));
                    n.output = register_module(name + "_output", ConvBlock(2 * c, c, 1));
                } else {
                    n.output = register_module(name + "_output", ConvBlock(c, c, 1));
                }
                nodes_[i].push_back(n);
            }
        }
        for (int64_t j = 1; j < depth; ++j) {
            u_heads_.push_back(register_module("u_head" + std::to_string(j), SupervisionHead(cfg.base_channels)));
            if (cfg.ablation != Ablation::NoNestedDs) {
                b_heads_.push_back(register_module("b_head" + std::to_string(j), SupervisionHead(cfg.base_channels)));
            }
        }
    }

    const NetworkConfig &config() const { return cfg_; }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto &p : parameters()) n += p.numel();
        return n;
    }

    /// All supervision maps, or only `final` when with_auxiliary_heads is false.
    SupervisionOutputs forward(const torch::Tensor &image, bool with_auxiliary_heads = true) {
        validate_input(image);
        const int64_t depth = cfg_.depth, h = image.size(2), w = image.size(3);
        // grid[i][j] = X(i, j); taps[j-1] = the BIAF output (or the plain aggregation) feeding X(0, j)
        std::vector<std::vector<torch::Tensor>> grid(depth);
        std::vector<torch::Tensor> taps;
        grid[0].push_back(encoder_[0]->forward(image));
        for (int64_t i = 1; i < depth; ++i) grid[i].push_back(encoder_[i]->forward(grid[i - 1][0]));
        torch::Tensor stem;
        if (stem_) stem = torch::relu(stem_->forward(image));

        for (int64_t j = 1; j < depth; ++j) {
            for (int64_t i = 0; i + j < depth; ++i) {
                auto &node = nodes_[i][j - 1];
                const auto &row = grid[i];
                const auto &deep = grid[i + 1][j - 1];
                std::vector<torch::Tensor> parts(row.begin(), row.begin() + j);
                parts.push_back(resize_bilinear(deep, row[0].size(2), row[0].size(3)));
                auto current = torch::relu(node.aggregate->forward(torch::cat(parts, 1)));
                torch::Tensor tap, x;
                if (node.ddfd) {
                    const auto &shallow = i == 0 ? stem : grid[i - 1][j - 1];
                    auto streams = node.ddfd->forward({deep, current, shallow});
                    tap = node.biaf->forward(streams);
                    x = node.output->forward(torch::cat({current, tap}, 1));
                } else {
                    tap = current;
                    x = node.output->forward(current);
                }
                if (i == 0) taps.push_back(tap);
                grid[i].push_back(x);
            }
        }

        SupervisionOutputs out;
        const int64_t last = depth - 1;
        if (with_auxiliary_heads) {
            for (int64_t j = 1; j <= last; ++j) {
                out.u_heads.push_back(u_heads_[j - 1]->forward(grid[0][j], h, w));
                if (!b_heads_.empty()) out.b_heads.push_back(b_heads_[j - 1]->forward(taps[j - 1], h, w));
            }
            out.final = out.u_heads.back();
        } else {
            out.final = u_heads_[last - 1]->forward(grid[0][last], h, w);
        }
        return out;
    }

    const std::vector<SupervisionHead> &u_heads() const { return u_heads_; }
    const std::vector<SupervisionHead> &b_heads() const { return b_heads_; }

private:
    struct Node {
        torch::nn::Conv2d aggregate{nullptr};
        Ddfd ddfd{nullptr};
        Biaf biaf{nullptr};
        ConvBlock output{nullptr};
    };

    void validate_input(const torch::Tensor &image) const {
        if (image.dim() != 4 || image.size(1) != cfg_.input_channels) {
            throw ValidationError("forward: expected (N, " + std::to_string(cfg_.input_channels) + ", H, W) input");
        }
        const int64_t d = cfg_.divisor();
        if (image.size(2) % d != 0 || image.size(3) % d != 0) {
            throw ValidationError("forward: height and width must be divisible by " + std::to_string(d) + ", got " +
                                  std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)));
        }
    }

    NetworkConfig cfg_;
    std::vector<ConvBlock> encoder_;
    torch::nn::Conv2d stem_{nullptr};
    std::vector<std::vector<Node>> nodes_;
    std::vector<SupervisionHead> u_heads_;
    std::vector<SupervisionHead> b_heads_;
};
TORCH_MODULE(DbifAunet);

/// Seeded construction: identical seeds give bit-identical initial parameters.
inline DbifAunet build_network(const NetworkConfig &cfg, uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
    cfg.validate();
    torch::manual_seed(seed);
    DbifAunet m(cfg);
    m->to(dtype);
    return m;
}

} // namespace dbifaunet
