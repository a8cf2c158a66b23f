#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "dbifaunet/errors.hpp"

namespace dbifaunet {

struct ScheduleParams {
    double lr0 = 0.001;
    int64_t restart_period = 20;
    double restart_gamma = 0.5;
};

/// Cosine annealing with fixed-length warm restarts; each restart's peak decays by gamma.
inline double lr_schedule(int64_t epoch, const ScheduleParams &p) {
    if (epoch < 0) throw ValidationError("lr_schedule: epoch must be >= 0");
    if (!(p.lr0 > 0.0)) throw ValidationError("lr_schedule: lr0 must be > 0");
    if (p.restart_period < 1) throw ValidationError("lr_schedule: restart_period must be >= 1");
    if (!(p.restart_gamma > 0.0 && p.restart_gamma <= 1.0)) throw ValidationError("lr_schedule: restart_gamma must lie in (0, 1]");
    const int64_t cycle = epoch / p.restart_period;
    const int64_t t = epoch % p.restart_period;
    const double peak = p.lr0 * std::pow(p.restart_gamma, static_cast<double>(cycle));
    const double lr = peak * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(p.restart_period)));
    return std::max(lr, 0.0);
}

/// SGD with heavy-ball momentum: buf = mu * buf + g (buf = g on first use), p -= lr * buf.
/// State is exposed by parameter name so it can be checkpointed.
class Sgd {
public:
    Sgd(std::vector<std::pair<std::string, torch::Tensor>> params, double momentum = 0.9, double weight_decay = 0.0)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("Sgd: momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ValidationError("Sgd: weight_decay must be >= 0");
    }

    void zero_grad() {
        for (auto &[_, p] : params_)
            if (p.grad().defined()) p.mutable_grad().zero_();
    }

    void step(double lr) {
        torch::NoGradGuard guard;
        for (auto &[name, p] : params_) {
            if (!p.grad().defined()) continue;
            auto g = p.grad();
            if (weight_decay_ > 0.0) g = g + weight_decay_ * p;
            torch::Tensor d = g;
            if (momentum_ > 0.0) {
                auto it = buffers_.find(name);
                if (it == buffers_.end()) it = buffers_.emplace(name, g.detach().clone()).first;
                else it->second.mul_(momentum_).add_(g);
                d = it->second;
            }
            p.add_(d, -lr);
        }
    }

    const std::map<std::string, torch::Tensor> &state() const { return buffers_; }

    void load_state(std::map<std::string, torch::Tensor> buffers) {
        for (const auto &[name, b] : buffers) {
            bool known = false;
            for (const auto &[pn, p] : params_) {
                if (pn != name) continue;
                known = true;
                if (b.sizes() != p.sizes()) throw CheckpointError("optimizer state for " + name + " has the wrong shape");
            }
            if (!known) throw CheckpointError("optimizer state names unknown parameter " + name);
        }
        buffers_ = std::move(buffers);
    }

private:
    std::vector<std::pair<std::string, torch::Tensor>> params_;
    std::map<std::string, torch::Tensor> buffers_;
    double momentum_;
    double weight_decay_;
};

} // namespace dbifaunet
