#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "dbifaunet/errors.hpp"

namespace dbifaunet {

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;

    int64_t total() const { return tp + fp + fn + tn; }

    ConfusionCounts &operator+=(const ConfusionCounts &o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts &b) { return a += b; }
    friend bool operator==(const ConfusionCounts &, const ConfusionCounts &) = default;
};

/// 1 where pred >= threshold, else 0; keeps the input dtype.
inline torch::Tensor binarize(const torch::Tensor &pred, double threshold = 0.5) {
    return pred.ge(threshold).to(pred.scalar_type());
}

inline ConfusionCounts accumulate(const torch::Tensor &pred_bin, const torch::Tensor &truth) {
    if (pred_bin.sizes() != truth.sizes()) throw ValidationError("accumulate: prediction and mask shapes differ");
    auto p = pred_bin.ne(0);
    auto t = truth.ne(0);
    ConfusionCounts c;
    c.tp = (p & t).sum().item<int64_t>();
    c.fp = (p & ~t).sum().item<int64_t>();
    c.fn = (~p & t).sum().item<int64_t>();
    c.tn = p.numel() - c.tp - c.fp - c.fn;
    return c;
}

struct MetricReport {
    double iou = 0, dice = 0, accuracy = 0, precision = 0, recall = 0, specificity = 0;
    ConfusionCounts counts;
    int64_t n_images = 0;
    std::vector<std::string> degenerate; // scores whose ratio was 0/0 and were set to 1
    std::vector<MetricReport> per_image;

    /// Per-image (macro) means of the six scores; empty when no per-image reports were kept.
    std::optional<MetricReport> macro() const {
        if (per_image.empty()) return std::nullopt;
        MetricReport m;
        for (const auto &r : per_image) {
            m.iou += r.iou;
            m.dice += r.dice;
            m.accuracy += r.accuracy;
            m.precision += r.precision;
            m.recall += r.recall;
            m.specificity += r.specificity;
            m.counts += r.counts;
        }
        const double n = static_cast<double>(per_image.size());
        m.iou /= n;
        m.dice /= n;
        m.accuracy /= n;
        m.precision /= n;
        m.recall /= n;
        m.specificity /= n;
        m.n_images = static_cast<int64_t>(per_image.size());
        return m;
    }
};

inline MetricReport report(const ConfusionCounts &c) {
    if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) throw ValidationError("report: negative confusion count");
    if (c.total() == 0) throw ValidationError("report: no pixels were evaluated");
    MetricReport r;
    r.counts = c;
    r.n_images = 1;
    auto ratio = [&](int64_t num, int64_t den, const char *name) {
        if (den == 0) {
            r.degenerate.emplace_back(name);
            return 1.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou");
    r.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "dice");
    r.accuracy = ratio(c.tp + c.tn, c.total(), "accuracy");
    r.precision = ratio(c.tp, c.tp + c.fp, "precision");
    r.recall = ratio(c.tp, c.tp + c.fn, "recall");
    r.specificity = ratio(c.tn, c.tn + c.fp, "specificity");
    return r;
}

/// Pools counts over a split and keeps each image's own report for macro averages.
class MetricAccumulator {
public:
    void add(const torch::Tensor &pred_bin, const torch::Tensor &truth) {
        auto c = accumulate(pred_bin, truth);
        pooled_ += c;
        per_image_.push_back(report(c));
    }

    /// Batched input (N, 1, H, W): one record per image.
    void add_batch(const torch::Tensor &pred_bin, const torch::Tensor &truth) {
        if (pred_bin.sizes() != truth.sizes()) throw ValidationError("add_batch: prediction and mask shapes differ");
        for (int64_t i = 0; i < pred_bin.size(0); ++i) add(pred_bin[i], truth[i]);
    }

    const ConfusionCounts &pooled() const { return pooled_; }

    MetricReport finish(bool keep_per_image = true) const {
        auto r = report(pooled_);
        r.n_images = static_cast<int64_t>(per_image_.size());
        if (keep_per_image) r.per_image = per_image_;
        return r;
    }

private:
    ConfusionCounts pooled_;
    std::vector<MetricReport> per_image_;
};

inline double percent_1dp(double fraction) { return std::round(fraction * 1000.0) / 10.0; }

inline nlohmann::json scores_json(const MetricReport &r) {
    nlohmann::json j{{"iou", r.iou},           {"dice", r.dice},     {"accuracy", r.accuracy},
                     {"precision", r.precision}, {"recall", r.recall}, {"specificity", r.specificity}};
    nlohmann::json pct;
    for (auto it = j.begin(); it != j.end(); ++it) pct[it.key()] = percent_1dp(it.value().get<double>());
    j["percent"] = pct;
    return j;
}

inline nlohmann::json to_json(const MetricReport &r) {
    nlohmann::json j;
    j["n_images"] = r.n_images;
    j["counts"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}};
    j["pooled"] = scores_json(r);
    j["degenerate"] = r.degenerate;
    if (auto m = r.macro()) j["macro"] = scores_json(*m);
    if (!r.per_image.empty()) {
        j["per_image"] = nlohmann::json::array();
        for (const auto &p : r.per_image) {
            auto e = scores_json(p);
            e["counts"] = {{"tp", p.counts.tp}, {"fp", p.counts.fp}, {"fn", p.counts.fn}, {"tn", p.counts.tn}};
            e["degenerate"] = p.degenerate;
            j["per_image"].push_back(e);
        }
    }
    return j;
}

/// One-line table row: IoU Dice ACC Pre Re Sp as percentages.
inline std::string format_row(const MetricReport &r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "IoU %.1f  Dice %.1f  ACC %.1f  Pre %.1f  Re %.1f  Sp %.1f", 100 * r.iou, 100 * r.dice,
                  100 * r.accuracy, 100 * r.precision, 100 * r.recall, 100 * r.specificity);
    return buf;
}

} // namespace dbifaunet
