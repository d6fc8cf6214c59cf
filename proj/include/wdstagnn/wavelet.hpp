#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/log.hpp"
#include "wdstagnn/numerics/tensor.hpp"
#include "wdstagnn/parallel.hpp"

namespace wdstagnn::wavelet {

using Series = std::vector<double>;

/// Orthonormal wavelet filter pair (unit-energy DWT taps). MODWT taps are
/// these divided by sqrt(2).
struct WaveletFilter {
    std::string name;
    std::vector<double> scaling; // g
    std::vector<double> wavelet; // h

    std::size_t length() const { return scaling.size(); }

    static WaveletFilter haar() {
        const double r = 1.0 / std::sqrt(2.0);
        return {"haar", {r, r}, {r, -r}};
    }

    /// Daubechies extremal-phase filter with 4 taps.
    static WaveletFilter d4() {
        const double s3 = std::sqrt(3.0);
        const double k = 1.0 / (4.0 * std::sqrt(2.0));
        std::vector<double> g{(1 + s3) * k, (3 + s3) * k, (3 - s3) * k, (1 - s3) * k};
        // quadrature mirror: h_l = (-1)^l g_{L-1-l}
        std::vector<double> h{g[3], -g[2], g[1], -g[0]};
        return {"d4", std::move(g), std::move(h)};
    }

    static WaveletFilter by_name(std::string_view name) {
        if (name == "haar") {
            return haar();
        }
        if (name == "d4") {
            return d4();
        }
        throw ParameterError("unknown wavelet filter '" + std::string(name) + "' (expected haar or d4)");
    }
};

/// Width of the level-j equivalent filter: (2^j - 1)(L - 1) + 1.
inline std::size_t equivalent_filter_length(std::size_t base_length, int level) {
    return ((std::size_t{1} << level) - 1) * (base_length - 1) + 1;
}

/// MODWT wavelet coefficients W_1..W_J and scaling coefficients V_J.
struct ModwtCoefficients {
    std::vector<Series> wavelet;
    Series scaling;

    int level() const { return static_cast<int>(wavelet.size()); }
    std::size_t length() const { return scaling.size(); }
};

/// Additive multiresolution decomposition: details D̃_1..D̃_J plus smooth S̃_J.
struct MraDecomposition {
    int level = 0;
    std::vector<Series> details;
    Series smooth;
    std::string filter;
    std::size_t length = 0;

    std::size_t components() const { return details.size() + 1; }

    /// Component j in [0, J): detail j+1; component J: the smooth.
    const Series &component(std::size_t j) const { return j < details.size() ? details[j] : smooth; }
};

namespace detail {

inline void validate(std::size_t n, const WaveletFilter &filter, int level) {
    if (n == 0) {
        throw DimensionError("MODWT of an empty series");
    }
    if (level < 1) {
        throw ParameterError("MODWT level must be >= 1, got " + std::to_string(level));
    }
    if (n < filter.length()) {
        throw DimensionError("series length " + std::to_string(n) + " is shorter than the " + filter.name +
                             " filter (" + std::to_string(filter.length()) + " taps)");
    }
    const std::size_t lj = equivalent_filter_length(filter.length(), level);
    if (lj > n) {
        warn("MODWT level " + std::to_string(level) + " equivalent filter width " + std::to_string(lj) +
             " exceeds series length " + std::to_string(n) + "; circular wrap-around dominates");
    }
}

// One analysis stage: out[t] = sum_l taps[l] * in[(t - step*l) mod n].
inline void analysis_stage(const Series &in, const std::vector<double> &taps, std::size_t step, Series &out) {
    const std::size_t n = in.size();
    const double norm = 1.0 / std::sqrt(2.0);
    out.assign(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        double acc = 0.0;
        for (std::size_t l = 0; l < taps.size(); ++l) {
            const std::size_t shift = (step * l) % n;
            acc += taps[l] * norm * in[(t + n - shift) % n];
        }
        out[t] = acc;
    }
}

// One synthesis stage: out[t] = sum_l h[l] w[(t + step*l) mod n] + sum_l g[l] v[(t + step*l) mod n].
// Either input may be null (treated as zero).
inline Series synthesis_stage(const Series *w, const Series *v, const WaveletFilter &filter, std::size_t step,
                              std::size_t n) {
    const double norm = 1.0 / std::sqrt(2.0);
    Series out(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        double acc = 0.0;
        for (std::size_t l = 0; l < filter.length(); ++l) {
            const std::size_t idx = (t + step * l) % n;
            if (w) {
                acc += filter.wavelet[l] * norm * (*w)[idx];
            }
            if (v) {
                acc += filter.scaling[l] * norm * (*v)[idx];
            }
        }
        out[t] = acc;
    }
    return out;
}

} // namespace detail

/// Pyramid MODWT with circular boundary handling.
inline ModwtCoefficients modwt(std::span<const double> u, const WaveletFilter &filter, int level) {
    detail::validate(u.size(), filter, level);
    ModwtCoefficients out;
    Series v(u.begin(), u.end());
    Series next;
    for (int j = 1; j <= level; ++j) {
        const std::size_t step = std::size_t{1} << (j - 1);
        Series w;
        detail::analysis_stage(v, filter.wavelet, step, w);
        detail::analysis_stage(v, filter.scaling, step, next);
        out.wavelet.push_back(std::move(w));
        std::swap(v, next);
    }
    out.scaling = std::move(v);
    return out;
}

/// Inverse pyramid: reconstructs the series from MODWT coefficients.
inline Series inverse_modwt(const ModwtCoefficients &c, const WaveletFilter &filter) {
    const std::size_t n = c.length();
    for (const auto &w : c.wavelet) {
        if (w.size() != n) {
            throw DimensionError("inverse MODWT: coefficient series lengths differ");
        }
    }
    Series v = c.scaling;
    for (int j = c.level(); j >= 1; --j) {
        const std::size_t step = std::size_t{1} << (j - 1);
        v = detail::synthesis_stage(&c.wavelet[j - 1], &v, filter, step, n);
    }
    return v;
}

/// Multiresolution analysis: each detail is the synthesis of one wavelet
/// level alone, the smooth is the synthesis of the scaling coefficients.
inline MraDecomposition mra(std::span<const double> u, const WaveletFilter &filter, int level) {
    const ModwtCoefficients c = modwt(u, filter, level);
    const std::size_t n = u.size();
    MraDecomposition out;
    out.level = level;
    out.filter = filter.name;
    out.length = n;
    for (int j = 1; j <= level; ++j) {
        Series x = detail::synthesis_stage(&c.wavelet[j - 1], nullptr, filter, std::size_t{1} << (j - 1), n);
        for (int k = j - 1; k >= 1; --k) {
            x = detail::synthesis_stage(nullptr, &x, filter, std::size_t{1} << (k - 1), n);
        }
        out.details.push_back(std::move(x));
    }
    Series s = c.scaling;
    for (int k = level; k >= 1; --k) {
        s = detail::synthesis_stage(nullptr, &s, filter, std::size_t{1} << (k - 1), n);
    }
    out.smooth = std::move(s);
    return out;
}

/// Synthesis from MRA components: Σ_j D̃_j + S̃_J.
inline Series imodwt(const MraDecomposition &d) {
    const std::size_t n = d.smooth.size();
    for (const auto &detail : d.details) {
        if (detail.size() != n) {
            throw DimensionError("imodwt: component lengths differ (" + std::to_string(detail.size()) + " vs " +
                                 std::to_string(n) + ")");
        }
    }
    Series out = d.smooth;
    for (const auto &detail : d.details) {
        for (std::size_t t = 0; t < n; ++t) {
            out[t] += detail[t];
        }
    }
    return out;
}

/// MRA of every (node, channel) series of a (N, c, M) tensor along time.
/// Returns J+1 tensors of the input's shape: details 1..J, then the smooth.
inline std::vector<Tensor> mra_batch(const Tensor &x, const WaveletFilter &filter, int level,
                                     std::size_t threads = 1) {
    if (x.rank() == 0) {
        throw DimensionError("mra_batch needs a time axis");
    }
    const std::size_t m = x.shape().back();
    const std::size_t rows = x.size() / m;
    detail::validate(m, filter, level);
    std::vector<Tensor> out(static_cast<std::size_t>(level) + 1, Tensor(x.shape()));
    WarningCapture quiet; // the length warning was already issued once above
    parallel_for(rows, threads, [&](std::size_t r) {
        const auto d = mra(std::span<const double>(x.data() + r * m, m), filter, level);
        for (std::size_t c = 0; c < d.components(); ++c) {
            std::copy(d.component(c).begin(), d.component(c).end(), out[c].data() + r * m);
        }
    });
    return out;
}

/// M×M matrix R with (R u)[t] = component `component` of mra(u)[t]. MRA is
/// linear, so this is the exact operator form used inside the network.
inline Tensor mra_operator(std::size_t length, const WaveletFilter &filter, int level, std::size_t component) {
    static std::mutex cache_mutex;
    static std::map<std::tuple<std::string, std::size_t, int, std::size_t>, Tensor> cache;
    const auto key = std::make_tuple(filter.name, length, level, component);
    {
        std::lock_guard lock(cache_mutex);
        if (auto it = cache.find(key); it != cache.end()) {
            return it->second;
        }
    }
    if (component > static_cast<std::size_t>(level)) {
        throw ParameterError("mra_operator: component index out of range");
    }
    Tensor r({length, length});
    Series unit(length, 0.0);
    WarningCapture quiet;
    for (std::size_t s = 0; s < length; ++s) {
        unit.assign(length, 0.0);
        unit[s] = 1.0;
        const auto d = mra(unit, filter, level);
        const Series &col = d.component(component);
        for (std::size_t t = 0; t < length; ++t) {
            r(t, s) = col[t];
        }
    }
    std::lock_guard lock(cache_mutex);
    cache.emplace(key, r);
    return r;
}

} // namespace wdstagnn::wavelet
