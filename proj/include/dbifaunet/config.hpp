#pragma once

// Flat key = value run configuration. '#' starts a comment; blank lines are
// ignored; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dbifaunet/errors.hpp"
#include "dbifaunet/losses.hpp"
#include "dbifaunet/network.hpp"
#include "dbifaunet/schedule.hpp"

namespace dbifaunet {

struct TrainConfig {
    double lr0 = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0;
    int64_t batch_size = 8;
    int64_t epochs = 200;
    int64_t restart_period = 20;
    double restart_gamma = 0.5;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0; // keep an epoch-numbered snapshot every N epochs; 0 disables
    std::string manifest;
    std::string out_dir = "runs/default";
    std::string precision = "float32"; // float32 | float64
    double threshold = 0.5;

    ScheduleParams schedule() const { return {lr0, restart_period, restart_gamma}; }

    torch::Dtype dtype() const { return precision == "float64" ? torch::kFloat64 : torch::kFloat32; }

    void validate() const {
        if (!(lr0 > 0.0)) throw ValidationError("TrainConfig.lr0 must be > 0");
        if (epochs < 1) throw ValidationError("TrainConfig.epochs must be >= 1");
        if (restart_period < 1) throw ValidationError("TrainConfig.restart_period must be >= 1");
        if (!(restart_gamma > 0.0 && restart_gamma <= 1.0)) throw ValidationError("TrainConfig.restart_gamma must lie in (0, 1]");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("TrainConfig.momentum must lie in [0, 1)");
        if (!(weight_decay >= 0.0)) throw ValidationError("TrainConfig.weight_decay must be >= 0");
        if (batch_size < 1) throw ValidationError("TrainConfig.batch_size must be >= 1");
        if (checkpoint_every < 0) throw ValidationError("TrainConfig.checkpoint_every must be >= 0");
        if (precision != "float32" && precision != "float64") throw ValidationError("TrainConfig.precision must be float32 or float64");
        if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("TrainConfig.threshold must lie in (0, 1)");
    }
};

struct RunConfig {
    TrainConfig train;
    NetworkConfig network;
    LossHyperParams loss;

    void validate() const {
        train.validate();
        network.validate();
        loss.validate();
    }
};

namespace detail {

template <typename T> T parse_number(const std::string &key, const std::string &v) {
    T out{};
    const char *b = v.data(), *e = v.data() + v.size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc() || p != e) throw ValidationError("config: bad value '" + v + "' for " + key);
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

struct Field {
    std::function<void(RunConfig &, const std::string &)> set;
    std::function<std::string(const RunConfig &)> get;
};

inline const std::map<std::string, Field> &fields() {
    using C = RunConfig;
    auto d = [](auto get) {
        return Field{[get](C &c, const std::string &v) { get(c) = parse_number<double>("value", v); },
                     [get](const C &c) { return format_double(get(const_cast<C &>(c))); }};
    };
    auto i = [](auto get) {
        return Field{[get](C &c, const std::string &v) { get(c) = parse_number<int64_t>("value", v); },
                     [get](const C &c) { return std::to_string(get(const_cast<C &>(c))); }};
    };
    auto u = [](auto get) {
        return Field{[get](C &c, const std::string &v) { get(c) = parse_number<uint64_t>("value", v); },
                     [get](const C &c) { return std::to_string(get(const_cast<C &>(c))); }};
    };
    auto s = [](auto get) {
        return Field{[get](C &c, const std::string &v) { get(c) = v; }, [get](const C &c) { return get(const_cast<C &>(c)); }};
    };
    static const std::map<std::string, Field> table = {
        {"lr0", d([](C &c) -> double & { return c.train.lr0; })},
        {"momentum", d([](C &c) -> double & { return c.train.momentum; })},
        {"weight_decay", d([](C &c) -> double & { return c.train.weight_decay; })},
        {"batch_size", i([](C &c) -> int64_t & { return c.train.batch_size; })},
        {"epochs", i([](C &c) -> int64_t & { return c.train.epochs; })},
        {"restart_period", i([](C &c) -> int64_t & { return c.train.restart_period; })},
        {"restart_gamma", d([](C &c) -> double & { return c.train.restart_gamma; })},
        {"seed", u([](C &c) -> uint64_t & { return c.train.seed; })},
        {"checkpoint_every", i([](C &c) -> int64_t & { return c.train.checkpoint_every; })},
        {"manifest", s([](C &c) -> std::string & { return c.train.manifest; })},
        {"out_dir", s([](C &c) -> std::string & { return c.train.out_dir; })},
        {"precision", s([](C &c) -> std::string & { return c.train.precision; })},
        {"threshold", d([](C &c) -> double & { return c.train.threshold; })},
        {"depth", i([](C &c) -> int64_t & { return c.network.depth; })},
        {"base_channels", i([](C &c) -> int64_t & { return c.network.base_channels; })},
        {"input_channels", i([](C &c) -> int64_t & { return c.network.input_channels; })},
        {"max_attention_tokens", i([](C &c) -> int64_t & { return c.network.max_attention_tokens; })},
        {"fusion_mode",
         Field{[](C &c, const std::string &v) { c.network.fusion_mode = fusion_mode_from_string(v); },
               [](const C &c) { return to_string(c.network.fusion_mode); }}},
        {"ablation",
         Field{[](C &c, const std::string &v) { c.network.ablation = ablation_from_string(v); },
               [](const C &c) { return to_string(c.network.ablation); }}},
        {"lambda_dice", d([](C &c) -> double & { return c.loss.lambda_dice; })},
        {"lambda_focal", d([](C &c) -> double & { return c.loss.lambda_focal; })},
        {"lambda_bce", d([](C &c) -> double & { return c.loss.lambda_bce; })},
        {"focal_alpha", d([](C &c) -> double & { return c.loss.focal_alpha; })},
        {"focal_gamma", d([](C &c) -> double & { return c.loss.focal_gamma; })},
        {"dice_eps", d([](C &c) -> double & { return c.loss.dice_eps; })},
        {"clamp_eps", d([](C &c) -> double & { return c.loss.clamp_eps; })},
        {"weight_base", d([](C &c) -> double & { return c.loss.weight_base; })},
        {"b_head_scale", d([](C &c) -> double & { return c.loss.b_head_scale; })},
        {"u_head_scale", d([](C &c) -> double & { return c.loss.u_head_scale; })},
    };
    return table;
}

inline std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

inline std::vector<std::string> config_keys() {
    std::vector<std::string> k;
    for (const auto &[name, _] : detail::fields()) k.push_back(name);
    return k;
}

/// Set one field from its textual value.
inline void set_config_value(RunConfig &c, const std::string &key, const std::string &value) {
    auto it = detail::fields().find(key);
    if (it == detail::fields().end()) throw ValidationError("config: unknown key '" + key + "'");
    try {
        it->second.set(c, value);
    } catch (const ValidationError &) {
        throw ValidationError("config: bad value '" + value + "' for " + key);
    }
}

inline std::string get_config_value(const RunConfig &c, const std::string &key) {
    auto it = detail::fields().find(key);
    if (it == detail::fields().end()) throw ValidationError("config: unknown key '" + key + "'");
    return it->second.get(c);
}

/// Apply "key=value" text on top of `base`.
inline RunConfig parse_config(const std::string &text, RunConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return base;
}

inline RunConfig load_config(const std::string &path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Every field as key = value, sorted by key; parse_config(to_config_text(c)) == c.
inline std::string to_config_text(const RunConfig &c) {
    std::string out;
    for (const auto &[k, f] : detail::fields()) out += k + " = " + f.get(c) + "\n";
    return out;
}

inline nlohmann::json config_to_json(const RunConfig &c) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto &[k, f] : detail::fields()) j[k] = f.get(c);
    return j;
}

inline RunConfig config_from_json(const nlohmann::json &j) {
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) set_config_value(c, it.key(), it.value().get<std::string>());
    return c;
}

} // namespace dbifaunet
