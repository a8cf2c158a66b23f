#pragma once

// Central finite-difference probes for comparing against autograd. Everything
// is expected to run at float64.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace gradcheck {

struct TensorReport {
    std::string name;
    double relative_error = 0.0; // ||analytic - numeric|| / max(||analytic||, ||numeric||) over probed entries
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    int64_t probed = 0;
};

/// Probe up to `per_tensor` entries of each named tensor. `loss` must recompute
/// the scalar from scratch each call.
inline std::vector<TensorReport> compare(const std::vector<std::pair<std::string, torch::Tensor>> &tensors,
                                         const std::function<torch::Tensor()> &loss, double step,
                                         int64_t per_tensor = 6, uint64_t seed = 3) {
    for (const auto &[name, t] : tensors) {
        if (t.grad().defined()) t.mutable_grad().zero_();
    }
    loss().backward();
    std::vector<TensorReport> out;
    std::mt19937_64 rng(seed);
    for (const auto &[name, t] : tensors) {
        TensorReport r;
        r.name = name;
        auto grad = t.grad().defined() ? t.grad().reshape({-1}).clone() : torch::zeros({t.numel()}, t.options());
        auto flat = t.detach().view({-1});
        std::vector<int64_t> idx(t.numel());
        for (int64_t i = 0; i < t.numel(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min<int64_t>(per_tensor, t.numel()));
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        torch::NoGradGuard guard;
        for (int64_t i : idx) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + step;
            const double up = loss().item<double>();
            flat[i] = orig - step;
            const double down = loss().item<double>();
            flat[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = grad[i].item<double>();
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        r.analytic_norm = std::sqrt(a2);
        r.numeric_norm = std::sqrt(n2);
        const double denom = std::max(r.analytic_norm, r.numeric_norm);
        r.relative_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
        r.probed = static_cast<int64_t>(idx.size());
        out.push_back(r);
    }
    return out;
}

inline std::vector<std::pair<std::string, torch::Tensor>> named(const torch::nn::Module &m) {
    std::vector<std::pair<std::string, torch::Tensor>> v;
    for (const auto &p : m.named_parameters()) v.emplace_back(p.key(), p.value());
    return v;
}

/// Redraw every parameter from N(0, std) so probes avoid the kinks that
/// zero-initialised offsets and thresholds sit on.
inline void randomize(torch::nn::Module &m, double std, uint64_t seed) {
    torch::manual_seed(seed);
    torch::NoGradGuard guard;
    for (auto &p : m.parameters()) p.normal_(0.0, std);
}

} // namespace gradcheck
