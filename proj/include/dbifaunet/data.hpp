#pragma once

// Sample pairs, the on-disk sample store, patient-stratified splitting and the
// synthetic phantom generator. Images are kept as float64 (1, H, W) tensors in
// [0, 1]; masks as float64 {0, 1}.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "json.hpp"

#include "dbifaunet/errors.hpp"

namespace dbifaunet {

namespace fs = std::filesystem;

enum class SampleSource { Phantom, Imported };

inline std::string to_string(SampleSource s) { return s == SampleSource::Phantom ? "phantom" : "imported"; }

inline SampleSource sample_source_from_string(const std::string &s) {
    if (s == "phantom") return SampleSource::Phantom;
    if (s == "imported") return SampleSource::Imported;
    throw ValidationError("unknown sample source '" + s + "'");
}

struct SamplePair {
    std::string id;
    std::string patient_id;
    SampleSource source = SampleSource::Imported;
    torch::Tensor image; // (1, H, W) float64 in [0, 1]
    torch::Tensor mask;  // (1, H, W) float64 in {0, 1}

    void validate() const {
        if (!image.defined() || !mask.defined()) throw ValidationError("sample " + id + ": missing image or mask");
        if (image.dim() != 3 || image.size(0) != 1) throw ValidationError("sample " + id + ": image must be (1, H, W)");
        if (image.sizes() != mask.sizes()) throw ValidationError("sample " + id + ": image and mask sizes differ");
        if (!(mask.eq(0) | mask.eq(1)).all().item<bool>()) throw ValidationError("sample " + id + ": mask is not binary");
    }
};

// ---------------------------------------------------------------- image I/O

inline torch::Tensor mat_to_tensor(const cv::Mat &m) {
    cv::Mat d;
    m.convertTo(d, CV_64F);
    return torch::from_blob(d.ptr<double>(), {1, d.rows, d.cols}, torch::kFloat64).clone();
}

/// (1, H, W) or (H, W) tensor -> CV_64F matrix.
inline cv::Mat tensor_to_mat(const torch::Tensor &t) {
    auto c = t.detach().to(torch::kFloat64).contiguous().reshape({t.size(-2), t.size(-1)});
    cv::Mat m(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), CV_64F);
    std::memcpy(m.ptr<double>(), c.data_ptr<double>(), sizeof(double) * c.numel());
    return m;
}

inline cv::Mat read_image_file(const fs::path &p) {
    cv::Mat m = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw IoError("cannot read image " + p.string());
    return m;
}

inline void write_image_file(const fs::path &p, const cv::Mat &m) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    if (!cv::imwrite(p.string(), m)) throw IoError("cannot write image " + p.string());
}

/// Grayscale view of an 8-bit image: 3/4-channel input goes through luminance conversion.
inline cv::Mat to_gray8(const cv::Mat &m, const std::string &what) {
    if (m.depth() != CV_8U) throw ValidationError(what + ": expected an 8-bit image");
    cv::Mat g;
    if (m.channels() == 1) g = m;
    else if (m.channels() == 3) cv::cvtColor(m, g, cv::COLOR_BGR2GRAY);
    else if (m.channels() == 4) cv::cvtColor(m, g, cv::COLOR_BGRA2GRAY);
    else throw ValidationError(what + ": unsupported channel count " + std::to_string(m.channels()));
    return g;
}

/// Store format: 16-bit PNG, value round(x * 65535). 8-bit inputs v map to v * 257 exactly.
inline void write_store_image(const fs::path &p, const torch::Tensor &image) {
    cv::Mat m = tensor_to_mat(image.clamp(0.0, 1.0) * 65535.0), out;
    m.convertTo(out, CV_16U); // rounds to nearest
    write_image_file(p, out);
}

inline torch::Tensor read_store_image(const fs::path &p) {
    cv::Mat m = read_image_file(p);
    if (m.channels() != 1) throw IoError(p.string() + ": store images are single-channel");
    if (m.depth() == CV_16U) return mat_to_tensor(m) / 65535.0;
    if (m.depth() == CV_8U) return mat_to_tensor(m) / 255.0;
    throw IoError(p.string() + ": unsupported bit depth");
}

inline void write_mask_file(const fs::path &p, const torch::Tensor &mask) {
    cv::Mat m = tensor_to_mat(mask.gt(0).to(torch::kFloat64) * 255.0), out;
    m.convertTo(out, CV_8U);
    write_image_file(p, out);
}

inline torch::Tensor read_mask_file(const fs::path &p) {
    cv::Mat m = read_image_file(p);
    if (m.channels() != 1) throw IoError(p.string() + ": store masks are single-channel");
    return mat_to_tensor(m).gt(0).to(torch::kFloat64);
}

// ---------------------------------------------------------------- ingestion

/// Foreground iff H in [0, 10] (0-179 scale), S and V in [200, 255]. Input is BGR as loaded by OpenCV.
inline torch::Tensor extract_mask_hsv(const cv::Mat &bgr) {
    if (bgr.channels() != 3) throw ValidationError("extract_mask_hsv: expected a 3-channel image, got " + std::to_string(bgr.channels()));
    if (bgr.depth() != CV_8U) throw ValidationError("extract_mask_hsv: expected 8-bit channels");
    cv::Mat hsv, bin;
    cv::cvtColor(bgr, hsv, cv::COLOR_BGR2HSV);
    cv::inRange(hsv, cv::Scalar(0, 200, 200), cv::Scalar(10, 255, 255), bin);
    return mat_to_tensor(bin).gt(0).to(torch::kFloat64);
}

/// Patient id of an imported file: the stem up to the first underscore.
inline std::string patient_from_stem(const std::string &stem) {
    auto pos = stem.find('_');
    return pos == std::string::npos ? stem : stem.substr(0, pos);
}

inline torch::Tensor mask_from_file(const cv::Mat &m, const std::string &what) {
    if (m.depth() != CV_8U) throw ValidationError(what + ": expected an 8-bit mask");
    if (m.channels() == 1) return mat_to_tensor(m).gt(0).to(torch::kFloat64);
    cv::Mat bgr = m;
    if (m.channels() == 4) cv::cvtColor(m, bgr, cv::COLOR_BGRA2BGR);
    if (bgr.channels() != 3) throw ValidationError(what + ": unsupported channel count");
    // color files whose channels all agree are grayscale masks saved as RGB
    std::vector<cv::Mat> ch;
    cv::split(bgr, ch);
    if (cv::countNonZero(ch[0] != ch[1]) == 0 && cv::countNonZero(ch[1] != ch[2]) == 0) {
        return mat_to_tensor(ch[0]).gt(0).to(torch::kFloat64);
    }
    return extract_mask_hsv(bgr);
}

inline SamplePair pair_and_normalize(const fs::path &image_file, const fs::path &mask_file) {
    if (image_file.stem() != mask_file.stem()) {
        throw PairingError("stem mismatch: image '" + image_file.filename().string() + "' vs mask '" +
                           mask_file.filename().string() + "'");
    }
    SamplePair s;
    s.id = image_file.stem().string();
    s.patient_id = patient_from_stem(s.id);
    s.source = SampleSource::Imported;
    s.image = mat_to_tensor(to_gray8(read_image_file(image_file), image_file.string())) / 255.0;
    s.mask = mask_from_file(read_image_file(mask_file), mask_file.string());
    s.validate();
    return s;
}

// ---------------------------------------------------------------- splitting

struct SampleRecord {
    std::string id;
    std::string patient_id;
    SampleSource source = SampleSource::Imported;
};

struct SplitManifest {
    static constexpr const char *kFormat = "dbifaunet-manifest-v1";

    std::vector<SampleRecord> samples;
    std::vector<std::string> train, val, test;
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
    uint64_t seed = 0;
    nlohmann::json generator; // phantom settings when the store was synthesized

    const std::vector<std::string> &split(const std::string &name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw ValidationError("unknown split '" + name + "' (expected train, val or test)");
    }
};

inline void to_json(nlohmann::json &j, const SplitManifest &m) {
    j = nlohmann::json::object();
    j["format"] = SplitManifest::kFormat;
    j["seed"] = m.seed;
    j["ratios"] = m.ratios;
    j["samples"] = nlohmann::json::array();
    for (const auto &s : m.samples)
        j["samples"].push_back({{"id", s.id}, {"patient_id", s.patient_id}, {"source", to_string(s.source)}});
    j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
    if (!m.generator.is_null()) j["generator"] = m.generator;
}

inline void from_json(const nlohmann::json &j, SplitManifest &m) {
    if (j.value("format", "") != SplitManifest::kFormat) throw ValidationError("manifest: unknown format tag");
    m.seed = j.at("seed").get<uint64_t>();
    m.ratios = j.at("ratios").get<std::array<double, 3>>();
    m.samples.clear();
    for (const auto &s : j.at("samples"))
        m.samples.push_back({s.at("id"), s.at("patient_id"), sample_source_from_string(s.at("source"))});
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    m.generator = j.value("generator", nlohmann::json());
}

/// In-place Fisher-Yates driven by mt19937_64, so the order is fixed across standard libraries.
template <typename T> void shuffle_with(std::vector<T> &v, std::mt19937_64 &rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

namespace detail {

/// Choose the subset of `sizes` (bitmask over at most 20 items) whose total is closest to
/// `target`, keeping at least `leave` items unselected and at least `need` selected. Ties go
/// to the first mask in increasing order.
inline uint32_t closest_subset(const std::vector<int64_t> &sizes, double target, int leave, int need) {
    const int n = static_cast<int>(sizes.size());
    uint32_t best = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    for (uint32_t mask = 0; mask < (uint32_t{1} << n); ++mask) {
        const int picked = __builtin_popcount(mask);
        if (picked < need || n - picked < leave) continue;
        int64_t total = 0;
        for (int i = 0; i < n; ++i)
            if (mask & (uint32_t{1} << i)) total += sizes[i];
        const double gap = std::abs(static_cast<double>(total) - target);
        if (gap < best_gap) {
            best_gap = gap;
            best = mask;
        }
    }
    return best;
}

} // namespace detail

/// Patients are shuffled with the seed, then placed so image counts approach the target
/// ratios. Up to 20 patients the train and val sets are chosen by exhaustive search
/// (closest achievable counts); larger sets use largest-deficit greedy assignment.
inline SplitManifest stratified_split(const std::vector<SampleRecord> &samples, std::array<double, 3> ratios,
                                      uint64_t seed) {
    for (double r : ratios)
        if (!(r >= 0.0)) throw ValidationError("stratified_split: ratios must be nonnegative");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ValidationError("stratified_split: ratios must sum to 1");

    std::map<std::string, std::vector<std::string>> by_patient;
    std::set<std::string> ids;
    for (const auto &s : samples) {
        if (s.patient_id.empty()) throw ValidationError("stratified_split: sample " + s.id + " has no patient id");
        if (!ids.insert(s.id).second) throw ValidationError("stratified_split: duplicate sample id " + s.id);
        by_patient[s.patient_id].push_back(s.id);
    }
    std::vector<std::string> patients;
    for (const auto &[p, _] : by_patient) patients.push_back(p);
    int nonzero = 0;
    for (double r : ratios) nonzero += r > 0.0 ? 1 : 0;
    if (static_cast<int>(patients.size()) < nonzero) {
        throw ValidationError("stratified_split: " + std::to_string(patients.size()) + " patients cannot fill " +
                              std::to_string(nonzero) + " splits");
    }
    std::mt19937_64 rng(seed);
    shuffle_with(patients, rng);

    const double total = static_cast<double>(samples.size());
    std::vector<int> assign(patients.size(), 0);
    std::vector<int64_t> sizes;
    for (const auto &p : patients) sizes.push_back(static_cast<int64_t>(by_patient[p].size()));

    if (patients.size() <= 20) {
        auto need = [&](int k) { return ratios[k] > 0.0 ? 1 : 0; };
        std::vector<int> rest(patients.size());
        for (size_t i = 0; i < rest.size(); ++i) rest[i] = static_cast<int>(i);
        for (int k = 0; k < 2; ++k) {
            std::vector<int64_t> sub;
            for (int i : rest) sub.push_back(sizes[i]);
            int leave = 0;
            for (int m = k + 1; m < 3; ++m) leave += need(m);
            const uint32_t mask = detail::closest_subset(sub, ratios[k] * total, leave, need(k));
            std::vector<int> next;
            for (size_t i = 0; i < rest.size(); ++i) {
                if (mask & (uint32_t{1} << i)) assign[rest[i]] = k;
                else next.push_back(rest[i]);
            }
            rest = next;
        }
        for (int i : rest) assign[i] = 2;
    } else {
        std::array<double, 3> have{0, 0, 0};
        for (size_t i = 0; i < patients.size(); ++i) {
            int k = 0;
            double best = -std::numeric_limits<double>::infinity();
            for (int m = 0; m < 3; ++m) {
                if (ratios[m] <= 0.0) continue;
                const double deficit = ratios[m] * total - have[m];
                if (deficit > best) {
                    best = deficit;
                    k = m;
                }
            }
            assign[i] = k;
            have[k] += static_cast<double>(sizes[i]);
        }
    }

    SplitManifest m;
    m.samples = samples;
    m.ratios = ratios;
    m.seed = seed;
    std::array<std::vector<std::string> *, 3> out{&m.train, &m.val, &m.test};
    // splits list samples in input order, not patient order
    std::map<std::string, int> where;
    for (size_t i = 0; i < patients.size(); ++i) where[patients[i]] = assign[i];
    for (const auto &s : samples) out[where[s.patient_id]]->push_back(s.id);
    return m;
}

// ---------------------------------------------------------------- phantoms

enum class LesionShape { Ellipse, Crescent, Ring };

inline std::string to_string(LesionShape s) {
    switch (s) {
    case LesionShape::Ellipse: return "ellipse";
    case LesionShape::Crescent: return "crescent";
    case LesionShape::Ring: return "ring";
    }
    return "ellipse";
}

inline LesionShape lesion_shape_from_string(const std::string &s) {
    if (s == "ellipse") return LesionShape::Ellipse;
    if (s == "crescent") return LesionShape::Crescent;
    if (s == "ring" || s == "annular-ring") return LesionShape::Ring;
    throw ValidationError("unknown lesion shape '" + s + "'");
}

struct PhantomSpec {
    int64_t size = 64;
    LesionShape shape = LesionShape::Ellipse;
    // geometry in pixels; angle in radians
    double center_x = 32, center_y = 32, radius_a = 14, radius_b = 10, angle = 0;
    double inner = 0.5; // ring: inner/outer axis ratio; crescent: bite offset as a fraction of radius_a
    double lesion_mean = 0.7, lesion_std = 0.03;
    double background_mean = 0.3, background_std = 0.03;
    double texture_amplitude = 0.15; // relative modulation of the background
    double blur_radius = 2.0;        // Gaussian sigma in pixels
    double noise_std = 0.05;
    uint64_t seed = 0;

    void validate() const {
        auto unit = [](double v, const char *name) {
            if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("PhantomSpec.") + name + " must lie in [0, 1]");
        };
        if (size < 8) throw ValidationError("PhantomSpec.size must be >= 8");
        unit(lesion_mean, "lesion_mean");
        unit(background_mean, "background_mean");
        unit(texture_amplitude, "texture_amplitude");
        if (!(lesion_std >= 0 && background_std >= 0 && noise_std >= 0)) throw ValidationError("PhantomSpec: std values must be >= 0");
        if (!(blur_radius >= 0.0)) throw ValidationError("PhantomSpec.blur_radius must be >= 0");
        if (!(radius_a > 0 && radius_b > 0)) throw ValidationError("PhantomSpec: radii must be positive");
        if (!(inner > 0.0 && inner < 1.0)) throw ValidationError("PhantomSpec.inner must lie in (0, 1)");
        const double r = std::max(radius_a, radius_b), s = static_cast<double>(size);
        if (center_x - r < 0 || center_x + r > s || center_y - r < 0 || center_y + r > s) {
            throw ValidationError("PhantomSpec: lesion extends beyond the canvas");
        }
    }

    bool contains(double x, double y) const {
        const double c = std::cos(angle), sn = std::sin(angle);
        auto inside = [&](double dx, double dy, double a, double b) {
            const double u = (dx * c + dy * sn) / a, v = (-dx * sn + dy * c) / b;
            return u * u + v * v <= 1.0;
        };
        const double dx = x - center_x, dy = y - center_y;
        if (!inside(dx, dy, radius_a, radius_b)) return false;
        switch (shape) {
        case LesionShape::Ellipse: return true;
        case LesionShape::Ring: return !inside(dx, dy, inner * radius_a, inner * radius_b);
        case LesionShape::Crescent: {
            const double off = inner * radius_a;
            return !inside(dx - off * c, dy - off * sn, radius_a, radius_b);
        }
        }
        return true;
    }

    nlohmann::json to_json() const {
        return {{"size", size},
                {"lesion_mean", lesion_mean},
                {"lesion_std", lesion_std},
                {"background_mean", background_mean},
                {"background_std", background_std},
                {"texture_amplitude", texture_amplitude},
                {"blur_radius", blur_radius},
                {"noise_std", noise_std}};
    }
};

/// splitmix64 finalizer: decorrelates per-sample seeds derived from one run seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Copy of `base` with shape and geometry drawn from `seed`.
inline PhantomSpec random_phantom_spec(const PhantomSpec &base, uint64_t seed) {
    PhantomSpec s = base;
    s.seed = seed;
    std::mt19937_64 rng(mix_seed(seed, 0xA11CE));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double n = static_cast<double>(s.size);
    s.shape = static_cast<LesionShape>(rng() % 3);
    s.radius_a = n * (0.16 + 0.16 * u(rng));
    s.radius_b = n * (0.12 + 0.14 * u(rng));
    s.angle = std::numbers::pi * u(rng);
    s.inner = s.shape == LesionShape::Ring ? 0.5 + 0.1 * u(rng) : 0.45 + 0.2 * u(rng);
    const double r = std::max(s.radius_a, s.radius_b);
    s.center_x = r + (n - 2 * r) * u(rng);
    s.center_y = r + (n - 2 * r) * u(rng);
    return s;
}

inline SamplePair generate_phantom(const PhantomSpec &s) {
    s.validate();
    std::mt19937_64 rng(s.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double lesion = std::clamp(s.lesion_mean + s.lesion_std * gauss(rng), 0.0, 1.0);
    const double background = std::clamp(s.background_mean + s.background_std * gauss(rng), 0.0, 1.0);
    const double fx = 1.0 + 2.0 * u(rng), fy = 1.0 + 2.0 * u(rng);
    const double px = 2 * std::numbers::pi * u(rng), py = 2 * std::numbers::pi * u(rng);

    const int n = static_cast<int>(s.size);
    cv::Mat img(n, n, CV_64F), mask(n, n, CV_64F);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const bool in = s.contains(x + 0.5, y + 0.5);
            const double tex = 1.0 + s.texture_amplitude * 0.5 *
                                         (std::sin(2 * std::numbers::pi * fx * x / n + px) +
                                          std::sin(2 * std::numbers::pi * fy * y / n + py));
            img.at<double>(y, x) = in ? lesion : background * tex;
            mask.at<double>(y, x) = in ? 1.0 : 0.0;
        }
    }
    if (s.blur_radius > 0.0) cv::GaussianBlur(img, img, cv::Size(0, 0), s.blur_radius, s.blur_radius, cv::BORDER_REFLECT);
    if (s.noise_std > 0.0) {
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) img.at<double>(y, x) += s.noise_std * gauss(rng);
    }
    cv::min(cv::max(img, 0.0), 1.0, img);

    SamplePair p;
    p.source = SampleSource::Phantom;
    p.image = mat_to_tensor(img);
    p.mask = mat_to_tensor(mask);
    return p;
}

struct PhantomSetOptions {
    int64_t count = 200;
    int64_t size = 64;
    uint64_t seed = 0;
    int64_t per_patient = 4; // consecutive phantoms share a synthetic patient id
    PhantomSpec base;
};

inline std::vector<SamplePair> generate_phantom_set(const PhantomSetOptions &o) {
    if (o.count < 1) throw ValidationError("generate_phantom_set: count must be >= 1");
    if (o.per_patient < 1) throw ValidationError("generate_phantom_set: per_patient must be >= 1");
    PhantomSpec base = o.base;
    base.size = o.size;
    std::vector<SamplePair> out;
    for (int64_t i = 0; i < o.count; ++i) {
        auto p = generate_phantom(random_phantom_spec(base, mix_seed(o.seed, static_cast<uint64_t>(i))));
        char pid[32], sid[64];
        std::snprintf(pid, sizeof pid, "p%04lld", static_cast<long long>(i / o.per_patient));
        std::snprintf(sid, sizeof sid, "%s_%02lld", pid, static_cast<long long>(i % o.per_patient));
        p.patient_id = pid;
        p.id = sid;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------- sample store

/// Layout: <root>/images/<id>.png (16-bit), <root>/masks/<id>.png (8-bit 0/255), <root>/manifest.json.
class SampleStore {
public:
    explicit SampleStore(fs::path root) : root_(std::move(root)) {}

    const fs::path &root() const { return root_; }
    fs::path manifest_path() const { return root_ / "manifest.json"; }
    fs::path image_path(const std::string &id) const { return root_ / "images" / (id + ".png"); }
    fs::path mask_path(const std::string &id) const { return root_ / "masks" / (id + ".png"); }

    void write_sample(const SamplePair &s) const {
        s.validate();
        write_store_image(image_path(s.id), s.image);
        write_mask_file(mask_path(s.id), s.mask);
    }

    void write_manifest(const SplitManifest &m) const {
        fs::create_directories(root_);
        std::ofstream f(manifest_path(), std::ios::binary);
        if (!f) throw IoError("cannot write " + manifest_path().string());
        f << nlohmann::json(m).dump(2) << "\n";
    }

    SplitManifest read_manifest() const { return load_manifest(manifest_path()); }

    SamplePair load(const SampleRecord &r) const {
        SamplePair s;
        s.id = r.id;
        s.patient_id = r.patient_id;
        s.source = r.source;
        s.image = read_store_image(image_path(r.id));
        s.mask = read_mask_file(mask_path(r.id));
        s.validate();
        return s;
    }

    std::vector<SamplePair> load_split(const SplitManifest &m, const std::string &split) const {
        std::map<std::string, const SampleRecord *> index;
        for (const auto &r : m.samples) index[r.id] = &r;
        std::vector<SamplePair> out;
        for (const auto &id : m.split(split)) {
            auto it = index.find(id);
            if (it == index.end()) throw ValidationError("manifest: split lists unknown sample " + id);
            out.push_back(load(*it->second));
        }
        return out;
    }

    static SplitManifest load_manifest(const fs::path &p) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw IoError("cannot read manifest " + p.string());
        try {
            return nlohmann::json::parse(f).get<SplitManifest>();
        } catch (const nlohmann::json::exception &e) {
            throw ValidationError("manifest " + p.string() + ": " + e.what());
        }
    }

private:
    fs::path root_;
};

inline std::vector<SampleRecord> records_of(const std::vector<SamplePair> &samples) {
    std::vector<SampleRecord> r;
    for (const auto &s : samples) r.push_back({s.id, s.patient_id, s.source});
    return r;
}

/// Generate phantoms, split them by patient and write the store. Returns the manifest.
inline SplitManifest write_phantom_store(const fs::path &out, const PhantomSetOptions &o,
                                         std::array<double, 3> ratios = {0.8, 0.1, 0.1}) {
    auto samples = generate_phantom_set(o);
    SampleStore store(out);
    for (const auto &s : samples) store.write_sample(s);
    auto m = stratified_split(records_of(samples), ratios, o.seed);
    m.generator = o.base.to_json();
    m.generator["count"] = o.count;
    m.generator["per_patient"] = o.per_patient;
    m.generator["size"] = o.size;
    store.write_manifest(m);
    return m;
}

inline bool is_image_file(const fs::path &p) {
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".png" || e == ".bmp" || e == ".jpg" || e == ".jpeg" || e == ".tif" || e == ".tiff";
}

/// Pair every image in `images` with the mask of the same stem in `masks`, normalize, split
/// by patient and write the store to `out`.
inline SplitManifest ingest(const fs::path &images, const fs::path &masks, const fs::path &out,
                            std::array<double, 3> ratios, uint64_t seed) {
    if (!fs::is_directory(images)) throw IoError("not a directory: " + images.string());
    if (!fs::is_directory(masks)) throw IoError("not a directory: " + masks.string());
    std::map<std::string, fs::path> mask_by_stem;
    for (const auto &e : fs::directory_iterator(masks)) {
        if (!e.is_regular_file() || !is_image_file(e.path())) continue;
        const auto stem = e.path().stem().string();
        if (mask_by_stem.count(stem)) throw PairingError("two masks share the stem '" + stem + "'");
        mask_by_stem[stem] = e.path();
    }
    std::vector<fs::path> files;
    for (const auto &e : fs::directory_iterator(images))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no images found in " + images.string());

    SampleStore store(out);
    std::vector<SampleRecord> records;
    std::set<std::string> seen;
    for (const auto &f : files) {
        const auto stem = f.stem().string();
        if (!seen.insert(stem).second) throw PairingError("two images share the stem '" + stem + "'");
        auto it = mask_by_stem.find(stem);
        if (it == mask_by_stem.end()) throw PairingError("no mask for image '" + f.filename().string() + "'");
        auto s = pair_and_normalize(f, it->second);
        store.write_sample(s);
        records.push_back({s.id, s.patient_id, s.source});
    }
    auto m = stratified_split(records, ratios, seed);
    store.write_manifest(m);
    return m;
}

} // namespace dbifaunet
