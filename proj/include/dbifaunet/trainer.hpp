#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "json.hpp"

#include "dbifaunet/checkpoint.hpp"
#include "dbifaunet/config.hpp"
#include "dbifaunet/data.hpp"
#include "dbifaunet/losses.hpp"
#include "dbifaunet/metrics.hpp"
#include "dbifaunet/network.hpp"
#include "dbifaunet/schedule.hpp"

namespace dbifaunet {

/// Honors DBIF_DETERMINISTIC=1: one intra-op thread and deterministic kernels. Returns whether it applied.
inline bool configure_determinism() {
    const char *v = std::getenv("DBIF_DETERMINISTIC");
    if (!v || std::string(v) != "1") return false;
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
    return true;
}

struct TensorSet {
    torch::Tensor images; // (N, 1, H, W)
    torch::Tensor masks;  // (N, 1, H, W)
    std::vector<std::string> ids;

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

inline TensorSet stack_samples(const std::vector<SamplePair> &samples, torch::Dtype dtype) {
    TensorSet s;
    if (samples.empty()) return s;
    std::vector<torch::Tensor> im, mk;
    for (const auto &p : samples) {
        im.push_back(p.image);
        mk.push_back(p.mask);
        s.ids.push_back(p.id);
    }
    s.images = torch::stack(im).to(dtype);
    s.masks = torch::stack(mk).to(dtype);
    return s;
}

/// Permutation of [0, n) for one epoch, fixed by (seed, epoch).
inline std::vector<int64_t> epoch_order(int64_t n, uint64_t seed, int64_t epoch) {
    std::vector<int64_t> idx(n);
    for (int64_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
    shuffle_with(idx, rng);
    return idx;
}

inline SupervisionMode supervision_mode(const NetworkConfig &c) {
    return c.ablation == Ablation::NoNestedDs ? SupervisionMode::UniformUpsampling : SupervisionMode::Nested;
}

/// Pooled and per-image metrics of the final map, binarized at `threshold`.
inline MetricReport evaluate_model(DbifAunet &model, const TensorSet &data, double threshold = 0.5, int64_t batch = 8) {
    if (data.size() == 0) throw ValidationError("evaluate: empty split");
    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard guard;
    MetricAccumulator acc;
    for (int64_t s = 0; s < data.size(); s += batch) {
        const int64_t e = std::min(s + batch, data.size());
        auto out = model->forward(data.images.slice(0, s, e), false);
        acc.add_batch(binarize(out.final, threshold), data.masks.slice(0, s, e));
    }
    model->train(was_training);
    return acc.finish();
}

// ---------------------------------------------------------------- records

struct EpochRecord {
    int64_t epoch = 0; // zero-based
    double lr = 0.0;
    double train_loss = 0.0;
    std::vector<PointLoss> points; // per-point means over the epoch
    std::optional<MetricReport> val;
    double seconds = 0.0;

    nlohmann::json to_json(bool with_timing = true) const {
        nlohmann::json j{{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}};
        j["points"] = nlohmann::json::array();
        for (const auto &p : points)
            j["points"].push_back(
                {{"name", p.name}, {"weight", p.weight}, {"dice", p.dice}, {"focal", p.focal}, {"bce", p.bce}, {"hybrid", p.hybrid}});
        if (val) {
            auto v = dbifaunet::to_json(*val);
            v.erase("per_image");
            j["val"] = v;
        }
        if (with_timing) j["seconds"] = seconds;
        return j;
    }

    static EpochRecord from_json(const nlohmann::json &j) {
        EpochRecord e;
        e.epoch = j.at("epoch");
        e.lr = j.at("lr");
        e.train_loss = j.at("train_loss");
        for (const auto &p : j.at("points"))
            e.points.push_back({p.at("name"), p.at("weight"), p.at("dice"), p.at("focal"), p.at("bce"), p.at("hybrid")});
        if (j.contains("val")) {
            const auto &c = j["val"].at("counts");
            e.val = report({c.at("tp"), c.at("fp"), c.at("fn"), c.at("tn")});
            e.val->n_images = j["val"].at("n_images");
        }
        e.seconds = j.value("seconds", 0.0);
        return e;
    }
};

struct RunRecord {
    int64_t parameter_count = 0;
    std::vector<EpochRecord> epochs;
    int64_t best_epoch = -1;
    double best_val_dice = -1.0;
    std::optional<MetricReport> test;
    double seconds = 0.0;

    std::vector<double> lr_trace() const {
        std::vector<double> lr;
        for (const auto &e : epochs) lr.push_back(e.lr);
        return lr;
    }

    nlohmann::json to_json(bool with_timing = true) const {
        nlohmann::json j{{"parameter_count", parameter_count}, {"best_epoch", best_epoch}, {"best_val_dice", best_val_dice}};
        j["epochs"] = nlohmann::json::array();
        for (const auto &e : epochs) j["epochs"].push_back(e.to_json(with_timing));
        j["lr_trace"] = lr_trace();
        if (test) j["test"] = dbifaunet::to_json(*test);
        if (with_timing) j["seconds"] = seconds;
        return j;
    }
};

// ---------------------------------------------------------------- checkpoints

inline std::vector<std::pair<std::string, torch::Tensor>> model_state(const DbifAunet &m) {
    std::vector<std::pair<std::string, torch::Tensor>> s;
    for (const auto &p : m->named_parameters()) s.emplace_back(p.key(), p.value());
    for (const auto &b : m->named_buffers()) s.emplace_back(b.key(), b.value());
    return s;
}

inline std::vector<std::pair<std::string, torch::Tensor>> named_parameters_of(const DbifAunet &m) {
    std::vector<std::pair<std::string, torch::Tensor>> s;
    for (const auto &p : m->named_parameters()) s.emplace_back(p.key(), p.value());
    return s;
}

inline void load_model_state(DbifAunet &m, const std::vector<std::pair<std::string, torch::Tensor>> &state) {
    auto params = m->named_parameters();
    auto buffers = m->named_buffers();
    std::vector<std::string> missing, unexpected, wrong_shape;
    std::map<std::string, const torch::Tensor *> given;
    for (const auto &[n, t] : state) given[n] = &t;
    torch::NoGradGuard guard;
    auto copy = [&](const std::string &name, torch::Tensor &dst) {
        auto it = given.find(name);
        if (it == given.end()) {
            missing.push_back(name);
            return;
        }
        if (it->second->sizes() != dst.sizes()) wrong_shape.push_back(name);
        else dst.copy_(*it->second);
        given.erase(it);
    };
    for (auto &p : params) copy(p.key(), p.value());
    for (auto &b : buffers) copy(b.key(), b.value());
    for (const auto &[n, _] : given) unexpected.push_back(n);
    if (!missing.empty() || !unexpected.empty() || !wrong_shape.empty()) {
        std::string msg = "checkpoint does not match the model:";
        auto list = [&](const char *what, const std::vector<std::string> &v) {
            if (v.empty()) return;
            msg += std::string(" ") + what + " [";
            for (size_t i = 0; i < v.size() && i < 5; ++i) msg += (i ? ", " : "") + v[i];
            if (v.size() > 5) msg += ", ...";
            msg += "]";
        };
        list("missing", missing);
        list("unexpected", unexpected);
        list("wrong shape", wrong_shape);
        throw CheckpointError(msg);
    }
}

struct TrainingState {
    RunConfig config;
    int64_t epochs_done = 0;
    RunRecord record;
};

inline Checkpoint make_checkpoint(const TrainingState &s, const DbifAunet &model, const Sgd *opt) {
    Checkpoint c;
    c.meta = {{"format", kCheckpointTag},
              {"config", config_to_json(s.config)},
              {"epochs_done", s.epochs_done},
              {"record", s.record.to_json(false)}};
    for (const auto &[n, t] : model_state(model)) c.tensors.emplace_back("model/" + n, t);
    if (opt)
        for (const auto &[n, t] : opt->state()) c.tensors.emplace_back("optim/" + n, t);
    c.tensors.emplace_back("rng/cpu", at::detail::getDefaultCPUGenerator().get_state());
    return c;
}

struct LoadedModel {
    RunConfig config;
    DbifAunet model{nullptr};
    Checkpoint checkpoint;
};

/// Rebuild the model a checkpoint was written from. With `expected`, the echoed network
/// config must agree field by field.
inline LoadedModel load_model(const std::filesystem::path &path, const NetworkConfig *expected = nullptr) {
    LoadedModel l;
    l.checkpoint = read_checkpoint(path);
    try {
        l.config = config_from_json(l.checkpoint.meta.at("config"));
    } catch (const std::exception &e) {
        throw CheckpointError(path.string() + ": unreadable config echo: " + e.what());
    }
    if (expected) {
        auto diff = config_mismatches(*expected, l.config.network);
        if (!diff.empty()) {
            std::string msg = path.string() + ": config mismatch in";
            for (const auto &d : diff) msg += " " + d;
            throw CheckpointError(msg);
        }
    }
    l.model = build_network(l.config.network, l.config.train.seed, l.config.train.dtype());
    load_model_state(l.model, l.checkpoint.section("model/"));
    l.model->eval();
    return l;
}

// ---------------------------------------------------------------- training

struct TrainOptions {
    std::string resume_from;          // checkpoint to continue from
    int64_t stop_after_epochs = -1;   // end early once this many epochs are done (for pause/resume)
    bool quiet = true;
    std::function<void(const EpochRecord &)> on_epoch;
};

namespace detail {

inline void write_json(const std::filesystem::path &p, const nlohmann::json &j) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << j.dump(2) << "\n";
}

inline std::filesystem::path resolve_manifest(const RunConfig &c) {
    if (c.train.manifest.empty()) throw ValidationError("TrainConfig.manifest is not set");
    return std::filesystem::path(c.train.manifest);
}

} // namespace detail

struct RunData {
    SplitManifest manifest;
    TensorSet train, val, test;
};

inline RunData load_run_data(const RunConfig &c) {
    const auto mpath = detail::resolve_manifest(c);
    SampleStore store(mpath.parent_path());
    RunData d;
    d.manifest = SampleStore::load_manifest(mpath);
    const auto dtype = c.train.dtype();
    d.train = stack_samples(store.load_split(d.manifest, "train"), dtype);
    d.val = stack_samples(store.load_split(d.manifest, "val"), dtype);
    d.test = stack_samples(store.load_split(d.manifest, "test"), dtype);
    if (d.train.size() == 0) throw ValidationError("manifest has an empty train split");
    const int64_t div = c.network.divisor();
    if (d.train.images.size(2) % div != 0 || d.train.images.size(3) % div != 0)
        throw ValidationError("training images must have sides divisible by " + std::to_string(div));
    return d;
}

/// Train per the config. Writes last.ckpt, best.ckpt, optional epoch snapshots, train_log.jsonl
/// and run.json under out_dir.
inline RunRecord train(const RunConfig &cfg, const TrainOptions &opts = {}) {
    cfg.validate();
    configure_determinism();
    const auto t0 = std::chrono::steady_clock::now();
    namespace fs = std::filesystem;
    const fs::path out(cfg.train.out_dir);
    fs::create_directories(out);

    TrainingState state;
    state.config = cfg;
    auto model = build_network(cfg.network, cfg.train.seed, cfg.train.dtype());
    Sgd opt(named_parameters_of(model), cfg.train.momentum, cfg.train.weight_decay);
    std::vector<std::pair<std::string, torch::Tensor>> best_state;

    if (!opts.resume_from.empty()) {
        auto ck = read_checkpoint(opts.resume_from);
        auto saved = config_from_json(ck.meta.at("config"));
        auto diff = config_mismatches(cfg.network, saved.network);
        if (!diff.empty()) throw CheckpointError("resume: network config differs in " + diff.front());
        load_model_state(model, ck.section("model/"));
        std::map<std::string, torch::Tensor> buf;
        for (auto &[n, t] : ck.section("optim/")) buf[n] = t.to(cfg.train.dtype());
        opt.load_state(std::move(buf));
        if (auto *g = ck.find("rng/cpu")) {
            auto gen = at::detail::getDefaultCPUGenerator();
            gen.set_state(*g);
        }
        state.epochs_done = ck.meta.at("epochs_done").get<int64_t>();
        const auto &rec = ck.meta.at("record");
        state.record.best_epoch = rec.at("best_epoch");
        state.record.best_val_dice = rec.at("best_val_dice");
        for (const auto &e : rec.at("epochs")) state.record.epochs.push_back(EpochRecord::from_json(e));
        const fs::path best_path = out / "best.ckpt";
        if (fs::exists(best_path)) {
            for (auto &[n, t] : read_checkpoint(best_path).section("model/")) best_state.emplace_back(n, t);
        }
    }
    state.record.parameter_count = model->parameter_count();

    auto data = load_run_data(cfg);
    const auto mode = supervision_mode(cfg.network);
    std::ofstream log(out / "train_log.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + (out / "train_log.jsonl").string());

    const int64_t n = data.train.size(), bs = cfg.train.batch_size;
    int64_t last_epoch = cfg.train.epochs;
    if (opts.stop_after_epochs >= 0) last_epoch = std::min(last_epoch, opts.stop_after_epochs);

    for (int64_t epoch = state.epochs_done; epoch < last_epoch; ++epoch) {
        const auto te = std::chrono::steady_clock::now();
        EpochRecord er;
        er.epoch = epoch;
        er.lr = lr_schedule(epoch, cfg.train.schedule());
        model->train();
        const auto order = epoch_order(n, cfg.train.seed, epoch);
        int64_t steps = 0;
        for (int64_t s = 0; s < n; s += bs, ++steps) {
            const int64_t e = std::min(s + bs, n);
            auto idx = torch::tensor(std::vector<int64_t>(order.begin() + s, order.begin() + e), torch::kInt64);
            auto x = data.train.images.index_select(0, idx);
            auto y = data.train.masks.index_select(0, idx);
            LossBreakdown br;
            try {
                br = total_loss(model->forward(x), y, cfg.loss, mode);
            } catch (const NonFiniteError &e) {
                // store images are always finite, so this comes from overflowing activations
                log.flush();
                throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                                          std::to_string(steps),
                                      epoch, steps);
            }
            const double total = br.total_value();
            nlohmann::json line = br.to_json();
            line["epoch"] = epoch;
            line["step"] = steps;
            line["lr"] = er.lr;
            log << line.dump() << "\n";
            if (!std::isfinite(total)) {
                log.flush();
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps),
                                      epoch, steps);
            }
            opt.zero_grad();
            br.total.backward();
            opt.step(er.lr);
            // a finite loss can still produce an overflowing update
            for (const auto &p : model->parameters()) {
                if (!torch::isfinite(p).all().item<bool>()) {
                    log.flush();
                    throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch) + ", step " +
                                              std::to_string(steps),
                                          epoch, steps);
                }
            }
            er.train_loss += total;
            if (er.points.empty()) er.points = br.points;
            else
                for (size_t k = 0; k < er.points.size(); ++k) {
                    er.points[k].dice += br.points[k].dice;
                    er.points[k].focal += br.points[k].focal;
                    er.points[k].bce += br.points[k].bce;
                    er.points[k].hybrid += br.points[k].hybrid;
                }
        }
        log.flush();
        er.train_loss /= static_cast<double>(steps);
        for (auto &p : er.points) {
            p.dice /= steps;
            p.focal /= steps;
            p.bce /= steps;
            p.hybrid /= steps;
        }
        if (data.val.size() > 0) er.val = evaluate_model(model, data.val, cfg.train.threshold, bs);
        const double score = er.val ? er.val->dice : -er.train_loss;
        state.epochs_done = epoch + 1;
        er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - te).count();
        state.record.epochs.push_back(er);
        if (state.record.best_epoch < 0 || score > state.record.best_val_dice) {
            state.record.best_epoch = epoch;
            state.record.best_val_dice = score;
            best_state.clear();
            for (const auto &[nm, t] : model_state(model)) best_state.emplace_back(nm, t.detach().clone());
            write_checkpoint(out / "best.ckpt", make_checkpoint(state, model, nullptr));
        }
        auto ck = make_checkpoint(state, model, &opt);
        write_checkpoint(out / "last.ckpt", ck);
        if (cfg.train.checkpoint_every > 0 && state.epochs_done % cfg.train.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04lld.ckpt", static_cast<long long>(state.epochs_done));
            write_checkpoint(out / name, ck);
        }
        if (opts.on_epoch) opts.on_epoch(er);
        if (!opts.quiet) {
            std::printf("epoch %3lld  lr %.6f  loss %.5f", static_cast<long long>(epoch), er.lr, er.train_loss);
            if (er.val) std::printf("  val dice %.4f", er.val->dice);
            std::printf("  (%.1fs)\n", er.seconds);
            std::fflush(stdout);
        }
    }

    if (state.epochs_done >= cfg.train.epochs && data.test.size() > 0) {
        if (!best_state.empty()) load_model_state(model, best_state);
        state.record.test = evaluate_model(model, data.test, cfg.train.threshold, bs);
    }
    state.record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::write_json(out / "run.json", state.record.to_json());
    return state.record;
}

// ---------------------------------------------------------------- inference

inline MetricReport evaluate_checkpoint(const std::filesystem::path &checkpoint, const std::filesystem::path &manifest,
                                        const std::string &split, const NetworkConfig *expected = nullptr) {
    configure_determinism();
    auto l = load_model(checkpoint, expected);
    SampleStore store(manifest.parent_path());
    auto m = SampleStore::load_manifest(manifest);
    auto data = stack_samples(store.load_split(m, split), l.config.train.dtype());
    return evaluate_model(l.model, data, l.config.train.threshold, l.config.train.batch_size);
}

struct Prediction {
    torch::Tensor mask; // (H, W) float in {0, 1}
    std::filesystem::path mask_path, overlay_path;
};

/// Reflect-pad a (1, 1, H, W) image on the bottom/right to multiples of `div`.
inline torch::Tensor pad_to_multiple(const torch::Tensor &x, int64_t div) {
    const int64_t h = x.size(2), w = x.size(3);
    const int64_t ph = (div - h % div) % div, pw = (div - w % div) % div;
    if (ph == 0 && pw == 0) return x;
    if (ph >= h || pw >= w) throw ValidationError("predict: image too small to pad to a multiple of " + std::to_string(div));
    namespace F = torch::nn::functional;
    return F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReflect));
}

inline torch::Tensor predict_mask(DbifAunet &model, const torch::Tensor &image, double threshold = 0.5) {
    model->eval();
    torch::NoGradGuard guard;
    const int64_t h = image.size(2), w = image.size(3);
    auto padded = pad_to_multiple(image, model->config().divisor());
    auto p = model->forward(padded, false).final;
    return binarize(p.slice(2, 0, h).slice(3, 0, w), threshold);
}

inline Prediction predict_file(const std::filesystem::path &checkpoint, const std::filesystem::path &input,
                               const std::filesystem::path &out_dir) {
    configure_determinism();
    auto l = load_model(checkpoint);
    cv::Mat gray = to_gray8(read_image_file(input), input.string());
    auto x = (mat_to_tensor(gray) / 255.0).unsqueeze(0).to(l.config.train.dtype());
    auto mask = predict_mask(l.model, x, l.config.train.threshold)[0][0].to(torch::kFloat64);

    Prediction p;
    p.mask = mask;
    const auto stem = input.stem().string();
    p.mask_path = out_dir / (stem + "_mask.png");
    p.overlay_path = out_dir / (stem + "_overlay.png");
    write_mask_file(p.mask_path, mask);

    cv::Mat m8;
    tensor_to_mat(mask * 255.0).convertTo(m8, CV_8U);
    std::vector<std::vector<cv::Point>> contours;
    cv::findContours(m8, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
    cv::Mat overlay;
    cv::cvtColor(gray, overlay, cv::COLOR_GRAY2BGR);
    cv::drawContours(overlay, contours, -1, cv::Scalar(0, 0, 255), 1);
    write_image_file(p.overlay_path, overlay);
    return p;
}

} // namespace dbifaunet
