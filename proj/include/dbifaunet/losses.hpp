#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "dbifaunet/errors.hpp"
#include "dbifaunet/supervision.hpp"

namespace dbifaunet {

struct LossHyperParams {
    double lambda_dice = 0.4;
    double lambda_focal = 0.3;
    double lambda_bce = 0.3;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double dice_eps = 1.0;
    double clamp_eps = 1e-7;
    // supervision weighting: softmax(base * scale * depth_ratio)
    double weight_base = 1.5;
    double b_head_scale = 0.7;
    double u_head_scale = 0.9;

    void validate() const {
        auto nonneg = [](double v, const char *name) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string("LossHyperParams.") + name + " must be finite and >= 0");
        };
        nonneg(lambda_dice, "lambda_dice");
        nonneg(lambda_focal, "lambda_focal");
        nonneg(lambda_bce, "lambda_bce");
        nonneg(focal_gamma, "focal_gamma");
        if (std::abs(lambda_dice + lambda_focal + lambda_bce - 1.0) > 1e-9)
            throw ValidationError("LossHyperParams.lambda_*: weights must sum to 1");
        if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) throw ValidationError("LossHyperParams.focal_alpha must lie in (0, 1)");
        if (!(dice_eps > 0.0)) throw ValidationError("LossHyperParams.dice_eps must be > 0");
        if (!(clamp_eps > 0.0 && clamp_eps < 0.5)) throw ValidationError("LossHyperParams.clamp_eps must lie in (0, 0.5)");
        nonneg(weight_base, "weight_base");
        nonneg(b_head_scale, "b_head_scale");
        nonneg(u_head_scale, "u_head_scale");
    }
};

namespace detail {

inline void check_pair(const torch::Tensor &pred, const torch::Tensor &truth, const char *op) {
    if (!pred.defined() || !truth.defined()) throw ValidationError(std::string(op) + ": undefined tensor");
    if (pred.sizes() != truth.sizes()) throw ValidationError(std::string(op) + ": prediction and mask shapes differ");
    if (pred.numel() == 0) throw ValidationError(std::string(op) + ": empty input");
}

} // namespace detail

/// 1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps), pooled over the whole batch.
inline torch::Tensor dice_loss(const torch::Tensor &pred, const torch::Tensor &truth, double eps = 1.0) {
    detail::check_pair(pred, truth, "dice_loss");
    auto inter = (pred * truth).sum();
    return 1.0 - (2.0 * inter + eps) / (truth.sum() + pred.sum() + eps);
}

inline torch::Tensor focal_loss(const torch::Tensor &pred, const torch::Tensor &truth, double alpha = 0.25,
                                double gamma = 2.0, double clamp_eps = 1e-7) {
    detail::check_pair(pred, truth, "focal_loss");
    auto p = pred.clamp(clamp_eps, 1.0 - clamp_eps);
    auto pos = alpha * torch::pow(1.0 - p, gamma) * truth * torch::log(p);
    auto neg = (1.0 - alpha) * torch::pow(p, gamma) * (1.0 - truth) * torch::log(1.0 - p);
    return -(pos + neg).mean();
}

inline torch::Tensor bce_loss(const torch::Tensor &pred, const torch::Tensor &truth, double clamp_eps = 1e-7) {
    detail::check_pair(pred, truth, "bce_loss");
    auto p = pred.clamp(clamp_eps, 1.0 - clamp_eps);
    return -(truth * torch::log(p) + (1.0 - truth) * torch::log(1.0 - p)).mean();
}

struct HybridTerms {
    torch::Tensor dice, focal, bce, hybrid;
};

inline HybridTerms hybrid_terms(const torch::Tensor &pred, const torch::Tensor &truth, const LossHyperParams &h = {}) {
    HybridTerms t;
    t.dice = dice_loss(pred, truth, h.dice_eps);
    t.focal = focal_loss(pred, truth, h.focal_alpha, h.focal_gamma, h.clamp_eps);
    t.bce = bce_loss(pred, truth, h.clamp_eps);
    t.hybrid = h.lambda_dice * t.dice + h.lambda_focal * t.focal + h.lambda_bce * t.bce;
    return t;
}

inline torch::Tensor hybrid_loss(const torch::Tensor &pred, const torch::Tensor &truth, const LossHyperParams &h = {}) {
    return hybrid_terms(pred, truth, h).hybrid;
}

struct SupervisionWeights {
    std::vector<double> depth_ratio; // 4^(j-1) / sum_m 4^(m-1)
    std::vector<double> u_heads;
    std::vector<double> b_heads;
};

inline std::vector<double> softmax(const std::vector<double> &z) {
    double m = z.empty() ? 0.0 : z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> e(z.size());
    double s = 0.0;
    for (size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - m);
    for (double &v : e) v /= s;
    return e;
}

/// Weights for `points` supervision points per head group (4 for the default depth).
inline SupervisionWeights supervision_weights(int64_t points = 4, const LossHyperParams &h = {}) {
    if (points < 1) throw ValidationError("supervision_weights: need at least one point");
    SupervisionWeights w;
    double total = 0.0;
    for (int64_t j = 0; j < points; ++j) total += std::ldexp(1.0, static_cast<int>(2 * j));
    std::vector<double> zu, zb;
    for (int64_t j = 0; j < points; ++j) {
        const double r = std::ldexp(1.0, static_cast<int>(2 * j)) / total;
        w.depth_ratio.push_back(r);
        zu.push_back(h.weight_base * h.u_head_scale * r);
        zb.push_back(h.weight_base * h.b_head_scale * r);
    }
    w.u_heads = softmax(zu);
    w.b_heads = softmax(zb);
    return w;
}

enum class SupervisionMode {
    Nested,          // softmax-weighted u-heads and b-heads
    UniformUpsampling // equal weights over the u-heads only
};

struct PointLoss {
    std::string name;
    double weight = 0.0;
    double dice = 0.0, focal = 0.0, bce = 0.0, hybrid = 0.0;
};

struct LossBreakdown {
    torch::Tensor total;
    std::vector<PointLoss> points;

    double total_value() const { return total.item<double>(); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["total"] = total_value();
        j["points"] = nlohmann::json::array();
        for (const auto &p : points) {
            j["points"].push_back(
                {{"name", p.name}, {"weight", p.weight}, {"dice", p.dice}, {"focal", p.focal}, {"bce", p.bce}, {"hybrid", p.hybrid}});
        }
        return j;
    }
};

inline LossBreakdown total_loss(const SupervisionOutputs &out, const torch::Tensor &truth, const LossHyperParams &h = {},
                                SupervisionMode mode = SupervisionMode::Nested) {
    h.validate();
    const auto n = static_cast<int64_t>(out.u_heads.size());
    if (n == 0) throw ValidationError("total_loss: no supervision outputs");
    if (mode == SupervisionMode::Nested && static_cast<int64_t>(out.b_heads.size()) != n) {
        throw ValidationError("total_loss: nested supervision needs one b-head per u-head");
    }
    LossBreakdown b;
    std::vector<torch::Tensor> terms;
    auto add = [&](const std::string &name, const torch::Tensor &pred, double weight) {
        auto t = hybrid_terms(pred, truth, h);
        terms.push_back(weight * t.hybrid);
        b.points.push_back({name, weight, t.dice.item<double>(), t.focal.item<double>(), t.bce.item<double>(),
                            t.hybrid.item<double>()});
    };
    if (mode == SupervisionMode::Nested) {
        const auto w = supervision_weights(n, h);
        for (int64_t j = 0; j < n; ++j) add("u" + std::to_string(j + 1), out.u_heads[j], w.u_heads[j]);
        for (int64_t j = 0; j < n; ++j) add("b" + std::to_string(j + 1), out.b_heads[j], w.b_heads[j]);
    } else {
        for (int64_t j = 0; j < n; ++j) add("u" + std::to_string(j + 1), out.u_heads[j], 1.0 / static_cast<double>(n));
    }
    b.total = torch::stack(terms).sum();
    return b;
}

} // namespace dbifaunet
