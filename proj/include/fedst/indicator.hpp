#pragma once

#include <cmath>
#include <string>

#include "fedst/tensor.hpp"

namespace fedst {

enum class IndicatorKind { TextHash, Random, Gaussian, OneHot };

inline const char* indicator_kind_name(IndicatorKind k) {
    switch (k) {
        case IndicatorKind::TextHash: return "text_hash";
        case IndicatorKind::Random: return "random";
        case IndicatorKind::Gaussian: return "gaussian";
        case IndicatorKind::OneHot: return "one_hot";
    }
    return "?";
}

inline IndicatorKind indicator_kind_from_name(const std::string& s) {
    if (s == "text_hash") return IndicatorKind::TextHash;
    if (s == "random") return IndicatorKind::Random;
    if (s == "gaussian") return IndicatorKind::Gaussian;
    if (s == "one_hot") return IndicatorKind::OneHot;
    throw ConfigError("unknown indicator kind: " + s);
}

/// Frozen site-specific embedding steering channel selection. Never receives
/// a gradient and is a pure function of (kind, site text / id, seed).
struct Indicator {
    IndicatorKind kind = IndicatorKind::TextHash;
    Tensor xi; // [dim], requires_grad = false
};

inline Indicator build_indicator(IndicatorKind kind, const std::string& site_text, int site_id,
                                 std::uint64_t seed, int dim, double gaussian_sigma = 0.1) {
    if (dim <= 0) throw ConfigError("indicator dim must be positive");
    Indicator ind;
    ind.kind = kind;
    ind.xi = Tensor(Shape{dim});
    auto& v = ind.xi.data();
    switch (kind) {
        case IndicatorKind::TextHash: {
            // Surrogate for a frozen text encoder: a unit vector drawn from a
            // stream seeded by a stable hash of the site description.
            Rng rng(fnv1a64(site_text));
            double norm2 = 0.0;
            for (int i = 0; i < dim; ++i) {
                v[static_cast<std::size_t>(i)] = rng.normal();
                norm2 += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (double& x : v) x *= inv;
            break;
        }
        case IndicatorKind::Random: {
            Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(site_id) + 0x5eedULL);
            double norm2 = 0.0;
            for (int i = 0; i < dim; ++i) {
                v[static_cast<std::size_t>(i)] = rng.normal();
                norm2 += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (double& x : v) x *= inv;
            break;
        }
        case IndicatorKind::Gaussian: {
            // exp(-(x - site_id)^2 / (2 sigma^2)) over embedding positions x.
            const double s2 = 2.0 * gaussian_sigma * gaussian_sigma;
            for (int i = 0; i < dim; ++i) {
                const double d = static_cast<double>(i - site_id);
                v[static_cast<std::size_t>(i)] = std::exp(-(d * d) / s2);
            }
            break;
        }
        case IndicatorKind::OneHot: {
            if (site_id < 0 || site_id >= dim)
                throw ConfigError("one-hot indicator needs site_id < dim");
            v[static_cast<std::size_t>(site_id)] = 1.0;
            break;
        }
    }
    return ind;
}

/// All-zero indicator; stands in when the textual prompt is ablated away.
inline Indicator zero_indicator(int dim) {
    Indicator ind;
    ind.kind = IndicatorKind::TextHash;
    ind.xi = Tensor(Shape{dim});
    return ind;
}

} // namespace fedst
