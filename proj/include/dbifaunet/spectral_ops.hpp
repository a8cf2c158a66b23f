#pragma once

// Spectral and pooling primitives shared by the disentanglement and fusion blocks.
//
// Feature maps are torch tensors laid out (batch, channel, row, col). Every
// operation here is a pure function of its arguments and works at either
// float32 or float64; the transforms are written as dense matrix products so
// autograd differentiates through them exactly.

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include <torch/torch.h>

#include "dbifaunet/errors.hpp"

namespace dbifaunet::spectral {

inline void check_feature_map(const torch::Tensor &x, std::string_view op, bool require_finite = true) {
    if (!x.defined() || x.dim() != 4) {
        throw ValidationError(std::string(op) + ": expected a (batch, channel, height, width) tensor");
    }
    for (int64_t d = 0; d < 4; ++d) {
        if (x.size(d) < 1) {
            throw ValidationError(std::string(op) + ": every dimension must be >= 1");
        }
    }
    if (require_finite && !torch::isfinite(x).all().item<bool>()) {
        throw NonFiniteError(std::string(op) + ": input contains NaN or Inf");
    }
}

/// Orthonormal DCT-II basis, row u holds alpha(u) * cos(pi (2i+1) u / 2n).
inline torch::Tensor dct_matrix(int64_t n, const torch::TensorOptions &options = torch::kFloat64) {
    auto m = torch::empty({n, n}, torch::kFloat64);
    auto acc = m.accessor<double, 2>();
    const double dc = std::sqrt(1.0 / static_cast<double>(n));
    const double ac = std::sqrt(2.0 / static_cast<double>(n));
    for (int64_t u = 0; u < n; ++u) {
        for (int64_t i = 0; i < n; ++i) {
            acc[u][i] = (u == 0 ? dc : ac) *
                        std::cos(std::numbers::pi * static_cast<double>((2 * i + 1) * u) /
                                 (2.0 * static_cast<double>(n)));
        }
    }
    return m.to(options);
}

// Both 2-D transforms accumulate in float64 and hand back the caller's dtype,
// which keeps float32 roundtrips inside one output rounding step.
inline torch::Tensor dct2(const torch::Tensor &x) {
    check_feature_map(x, "dct2");
    auto dh = dct_matrix(x.size(2));
    auto dw = dct_matrix(x.size(3));
    return torch::matmul(torch::matmul(dh, x.to(torch::kFloat64)), dw.t()).to(x.scalar_type());
}

inline torch::Tensor idct2(const torch::Tensor &coeffs) {
    check_feature_map(coeffs, "idct2");
    auto dh = dct_matrix(coeffs.size(2));
    auto dw = dct_matrix(coeffs.size(3));
    return torch::matmul(torch::matmul(dh.t(), coeffs.to(torch::kFloat64)), dw).to(coeffs.scalar_type());
}

/// Inverse with the spatial size the caller expects; a mismatch is a validation error.
inline torch::Tensor idct2(const torch::Tensor &coeffs, int64_t height, int64_t width) {
    check_feature_map(coeffs, "idct2");
    if (coeffs.size(2) != height || coeffs.size(3) != width) {
        throw ValidationError("idct2: coefficient grid is " + std::to_string(coeffs.size(2)) + "x" +
                              std::to_string(coeffs.size(3)) + ", expected " + std::to_string(height) +
                              "x" + std::to_string(width));
    }
    return idct2(coeffs);
}

/// 1-D orthonormal DCT-II along the last axis of a (batch, n) tensor.
inline torch::Tensor dct1(const torch::Tensor &v) {
    return torch::matmul(v, dct_matrix(v.size(-1), v.options()).t());
}

struct BandMasks {
    torch::Tensor low, mid, high;
};

/// Disjoint masks over an h x w coefficient grid, keyed on r(u,v) = (u/h + v/w) / 2.
inline BandMasks band_masks(int64_t h, int64_t w, double low_cut, double high_cut,
                            const torch::TensorOptions &options = torch::kFloat64) {
    if (!(low_cut > 0.0 && low_cut < high_cut && high_cut <= 1.0)) {
        throw ValidationError("band_split: require 0 < low_cut < high_cut <= 1");
    }
    auto u = torch::arange(h, torch::kFloat64).div(static_cast<double>(h)).unsqueeze(1);
    auto v = torch::arange(w, torch::kFloat64).div(static_cast<double>(w)).unsqueeze(0);
    auto r = (u + v) * 0.5;
    auto low = r.lt(low_cut);
    auto high = r.ge(high_cut);
    auto mid = low.logical_or(high).logical_not();
    return {low.to(options), mid.to(options), high.to(options)};
}

struct Bands {
    torch::Tensor low, mid, high;
};

inline Bands band_split(const torch::Tensor &coeffs, double low_cut = 0.25, double high_cut = 0.75) {
    check_feature_map(coeffs, "band_split");
    auto m = band_masks(coeffs.size(2), coeffs.size(3), low_cut, high_cut, coeffs.options());
    return {coeffs * m.low, coeffs * m.mid, coeffs * m.high};
}

struct WaveletBands {
    torch::Tensor LL, LH, HL, HH;
    int64_t height = 0; // spatial size before even-padding
    int64_t width = 0;
};

/// Single-level orthonormal Haar analysis. Odd sides are padded by repeating the
/// last row/column (symmetric padding of width one) and cropped again on synthesis.
/// LH responds to horizontal edges (change along rows), HL to vertical edges.
inline WaveletBands dwt2_haar(const torch::Tensor &x) {
    check_feature_map(x, "dwt2_haar");
    const int64_t h = x.size(2), w = x.size(3);
    auto xp = x;
    if (h % 2 != 0 || w % 2 != 0) {
        namespace F = torch::nn::functional;
        xp = F::pad(x, F::PadFuncOptions({0, w % 2, 0, h % 2}).mode(torch::kReplicate));
    }
    using torch::indexing::Slice;
    using torch::indexing::None;
    auto a = xp.index({Slice(), Slice(), Slice(0, None, 2), Slice(0, None, 2)});
    auto b = xp.index({Slice(), Slice(), Slice(0, None, 2), Slice(1, None, 2)});
    auto c = xp.index({Slice(), Slice(), Slice(1, None, 2), Slice(0, None, 2)});
    auto d = xp.index({Slice(), Slice(), Slice(1, None, 2), Slice(1, None, 2)});
    return {(a + b + c + d) * 0.5, (a + b - c - d) * 0.5, (a - b + c - d) * 0.5, (a - b - c + d) * 0.5, h, w};
}

inline torch::Tensor idwt2_haar(const WaveletBands &bands) {
    const auto &ll = bands.LL;
    auto a = (ll + bands.LH + bands.HL + bands.HH) * 0.5;
    auto b = (ll + bands.LH - bands.HL - bands.HH) * 0.5;
    auto c = (ll - bands.LH + bands.HL - bands.HH) * 0.5;
    auto d = (ll - bands.LH - bands.HL + bands.HH) * 0.5;
    const int64_t n = ll.size(0), ch = ll.size(1), h = ll.size(2), w = ll.size(3);
    auto even = torch::stack({a, b}, -1).reshape({n, ch, h, 2 * w});
    auto odd = torch::stack({c, d}, -1).reshape({n, ch, h, 2 * w});
    auto full = torch::stack({even, odd}, 3).reshape({n, ch, 2 * h, 2 * w});
    using torch::indexing::Slice;
    return full.index({Slice(), Slice(), Slice(0, bands.height), Slice(0, bands.width)});
}

struct GaborParams {
    double theta = 0.0;     // orientation, radians
    double frequency = 0.25; // cycles per pixel
    double gamma = 0.5;     // aspect ratio
    double sigma = 2.0;     // envelope std, pixels
    double phi = 0.0;       // phase, radians
    int64_t size = 7;       // odd side length

    void validate() const {
        if (!(sigma > 0.0)) throw ValidationError("gabor: sigma must be > 0");
        if (!(frequency > 0.0)) throw ValidationError("gabor: frequency must be > 0");
        if (size < 3 || size % 2 == 0) throw ValidationError("gabor: size must be odd and >= 3");
    }
};

/// Gabor kernel with orientation and frequency given as (scalar) tensors so they can be learned.
/// Row offset i and column offset j are measured from the kernel centre.
inline torch::Tensor gabor_kernel(const torch::Tensor &theta, const torch::Tensor &frequency, double gamma,
                                  double sigma, double phi, int64_t size) {
    GaborParams{0.0, 1.0, gamma, sigma, phi, size}.validate();
    const auto opts = theta.options();
    const double half = static_cast<double>(size / 2);
    auto i = (torch::arange(size, opts) - half).unsqueeze(1);
    auto j = (torch::arange(size, opts) - half).unsqueeze(0);
    auto ct = torch::cos(theta), st = torch::sin(theta);
    auto ip = i * ct + j * st;
    auto jp = -i * st + j * ct;
    auto envelope = torch::exp(-(ip * ip + gamma * gamma * jp * jp) / (2.0 * sigma * sigma));
    return envelope * torch::cos(2.0 * std::numbers::pi * frequency * ip + phi);
}

inline torch::Tensor gabor_kernel(const GaborParams &p) {
    p.validate();
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    return gabor_kernel(torch::tensor(p.theta, opts), torch::tensor(p.frequency, opts), p.gamma, p.sigma, p.phi,
                        p.size);
}

struct StripMaps {
    torch::Tensor horizontal; // (N, C, H, 1): mean of each row
    torch::Tensor vertical;   // (N, C, 1, W): mean of each column
};

inline StripMaps strip_pool(const torch::Tensor &x) {
    check_feature_map(x, "strip_pool", false);
    return {x.mean(3, true), x.mean(2, true)};
}

struct ChannelAttentionOutput {
    torch::Tensor coefficients; // DCT of the pooled channel vector, (N, C)
    torch::Tensor gate;         // sigmoid gate, (N, C), each entry in (0, 1)
    torch::Tensor context;      // gate * coefficients
};

/// Frequency channel attention. w1 is (hidden, C), w2 is (C, hidden) in the usual
/// linear-layer orientation; the absolute value feeds the gate only, the product
/// uses the signed coefficients.
inline ChannelAttentionOutput freq_channel_attention(const torch::Tensor &x, const torch::Tensor &w1,
                                                     const torch::Tensor &w2, const torch::Tensor &b1,
                                                     const torch::Tensor &b2) {
    check_feature_map(x, "freq_channel_attention", false);
    const int64_t c = x.size(1);
    if (w1.dim() != 2 || w1.size(1) != c || w2.dim() != 2 || w2.size(0) != c || w2.size(1) != w1.size(0) ||
        b1.numel() != w1.size(0) || b2.numel() != c) {
        throw ValidationError("freq_channel_attention: weight shapes do not match " + std::to_string(c) +
                              " input channels");
    }
    auto pooled = x.mean({2, 3});
    auto coeffs = dct1(pooled);
    auto hidden = torch::relu(torch::matmul(coeffs.abs(), w1.t()) + b1.reshape({1, -1}));
    auto gate = torch::sigmoid(torch::matmul(hidden, w2.t()) + b2.reshape({1, -1}));
    return {coeffs, gate, gate * coeffs};
}

} // namespace dbifaunet::spectral
