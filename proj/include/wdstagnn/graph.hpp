#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/log.hpp"
#include "wdstagnn/numerics/tensor.hpp"
#include "wdstagnn/parallel.hpp"

namespace wdstagnn::graph {

/// Normalised 1-D Wasserstein-1 distance between two non-negative volume
/// series, each scaled to unit mass over the window and divided by the
/// largest attainable transport cost (length - 1). Result lies in [0, 1].
///
/// Two all-zero series are at distance 0; an all-zero series is at
/// distance 1 from any series with mass.
inline double stad_distance(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw DimensionError("stad_distance: series lengths differ (" + std::to_string(u.size()) + " vs " +
                             std::to_string(v.size()) + ")");
    }
    if (u.empty()) {
        throw DimensionError("stad_distance: empty series");
    }
    double su = 0.0, sv = 0.0;
    for (std::size_t t = 0; t < u.size(); ++t) {
        if (u[t] < 0.0 || v[t] < 0.0 || !std::isfinite(u[t]) || !std::isfinite(v[t])) {
            throw DataError("stad_distance: traffic volumes must be finite and non-negative");
        }
        su += u[t];
        sv += v[t];
    }
    if (su == 0.0 || sv == 0.0) {
        return (su == 0.0 && sv == 0.0) ? 0.0 : 1.0;
    }
    if (u.size() == 1) {
        return 0.0;
    }
    double cu = 0.0, cv = 0.0, cost = 0.0;
    for (std::size_t t = 0; t + 1 < u.size(); ++t) {
        cu += u[t] / su;
        cv += v[t] / sv;
        cost += std::abs(cu - cv);
    }
    return std::clamp(cost / static_cast<double>(u.size() - 1), 0.0, 1.0);
}

/// A_STAD = 1 - d_STAD together with the distances themselves.
struct StadMatrix {
    Tensor adjacency;
    Tensor distance;

    std::size_t nodes() const { return adjacency.dim(0); }
};

namespace detail {

// Accepts (N, T) or (N, 1, T) and returns the node count and series length.
inline std::pair<std::size_t, std::size_t> node_time_extents(const Tensor &x) {
    if (x.rank() == 2) {
        return {x.dim(0), x.dim(1)};
    }
    if (x.rank() == 3 && x.dim(1) == 1) {
        return {x.dim(0), x.dim(2)};
    }
    throw DimensionError("expected a node×time matrix, got shape " + shape_str(x.shape()));
}

} // namespace detail

/// Pairwise STAD over the rows of a node×time matrix (training window only).
inline StadMatrix build_stad(const Tensor &x, std::size_t threads = 1) {
    const auto [n, len] = detail::node_time_extents(x);
    if (n < 2) {
        throw DimensionError("build_stad needs at least 2 nodes, got " + std::to_string(n));
    }
    StadMatrix out{Tensor({n, n}), Tensor({n, n})};
    // upper triangle in row-major pair order; each task owns one row
    parallel_for(n, threads, [&](std::size_t i) {
        const std::span<const double> ui(x.data() + i * len, len);
        for (std::size_t j = i + 1; j < n; ++j) {
            out.distance(i, j) = stad_distance(ui, std::span<const double>(x.data() + j * len, len));
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            out.distance(i, j) = out.distance(j, i);
        }
    }
    for (std::size_t i = 0; i < n * n; ++i) {
        out.adjacency[i] = 1.0 - out.distance[i];
    }
    return out;
}

/// Binary relevance mask keeping each row's strongest entries.
struct StrgMask {
    Tensor mask;
    std::size_t neighbors = 0; // N_r, self included
    double sparsity = 0.0;     // P_sp
};

/// N_r = max(1, ceil(N · P_sp)).
inline std::size_t neighbor_count(std::size_t n, double p_sp) {
    if (!(p_sp > 0.0 && p_sp <= 1.0)) {
        throw ParameterError("sparsity P_sp must lie in (0, 1], got " + std::to_string(p_sp));
    }
    // guard against products such as 0.3 * 10 = 3.0000000000000004
    const double raw = static_cast<double>(n) * p_sp;
    const double rounded = std::round(raw);
    const double cells = std::abs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw);
    return std::clamp<std::size_t>(static_cast<std::size_t>(cells), 1, n);
}

/// Per row: the self entry plus the N_r - 1 largest remaining entries, ties
/// going to the lower column index.
inline StrgMask sparsify(const StadMatrix &stad, double p_sp) {
    const std::size_t n = stad.nodes();
    StrgMask out{Tensor({n, n}), neighbor_count(n, p_sp), p_sp};
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < n; ++i) {
        out.mask(i, i) = 1.0;
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        order.erase(order.begin() + static_cast<std::ptrdiff_t>(i));
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return stad.adjacency(i, a) > stad.adjacency(i, b);
        });
        for (std::size_t k = 0; k + 1 < out.neighbors; ++k) {
            out.mask(i, order[k]) = 1.0;
        }
    }
    return out;
}

/// Masked STAD weights, symmetrised by max(a, aᵀ).
inline Tensor build_stag(const StadMatrix &stad, const StrgMask &strg) {
    const std::size_t n = stad.nodes();
    stad.adjacency.require_same_shape(strg.mask, "build_stag");
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double a = strg.mask(i, j) * stad.adjacency(i, j);
            const double b = strg.mask(j, i) * stad.adjacency(j, i);
            out(i, j) = std::max(a, b);
        }
    }
    return out;
}

/// L̃ = (2/λ_max)(D − A) − I.
struct ScaledLaplacian {
    Tensor matrix;
    double lambda_max = 0.0;
    std::vector<double> degree;
};

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration, stopping once the eigen-residual ‖Lv − λv‖ drops below
/// tol·λ.
inline double largest_eigenvalue(const Tensor &sym, double tol = 1e-8, std::size_t max_iter = 10000) {
    const std::size_t n = sym.dim(0);
    std::vector<double> v(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = 1.0 + 0.618033988749895 * static_cast<double>(i % 7) + 0.1 * static_cast<double>(i);
        v[i] *= (i % 2 == 0) ? 1.0 : -1.0;
    }
    auto normalise = [](std::vector<double> &x) {
        double s = 0.0;
        for (double e : x) {
            s += e * e;
        }
        s = std::sqrt(s);
        if (s > 0.0) {
            for (double &e : x) {
                e /= s;
            }
        }
        return s;
    };
    normalise(v);
    double lambda = 0.0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += sym(i, j) * v[j];
            }
            w[i] = acc;
        }
        lambda = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            lambda += v[i] * w[i];
        }
        double resid = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            resid += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
        }
        resid = std::sqrt(resid);
        if (normalise(w) == 0.0) {
            return 0.0;
        }
        if (resid <= tol * std::abs(lambda)) {
            break;
        }
        std::swap(v, w);
    }
    return lambda;
}

inline ScaledLaplacian scaled_laplacian(const Tensor &a_stag) {
    if (a_stag.rank() != 2 || a_stag.dim(0) != a_stag.dim(1)) {
        throw DimensionError("scaled_laplacian: expected a square matrix, got " + shape_str(a_stag.shape()));
    }
    const std::size_t n = a_stag.dim(0);
    Tensor a = a_stag;
    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (a(i, j) < 0.0 || !std::isfinite(a(i, j))) {
                throw DataError("scaled_laplacian: adjacency entries must be finite and non-negative");
            }
            asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
        }
    }
    if (asym > 0.0) {
        if (asym >= 1e-9) {
            throw DataError("scaled_laplacian: adjacency is not symmetric (max asymmetry " + std::to_string(asym) + ")");
        }
        warn("scaled_laplacian: symmetrising adjacency with asymmetry " + std::to_string(asym));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                const double m = 0.5 * (a(i, j) + a(j, i));
                a(i, j) = m;
                a(j, i) = m;
            }
        }
    }
    ScaledLaplacian out;
    out.degree.assign(n, 0.0);
    Tensor lap({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.degree[i] += a(i, j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            lap(i, j) = (i == j ? out.degree[i] : 0.0) - a(i, j);
        }
    }
    double lambda = largest_eigenvalue(lap);
    if (!(lambda > 1e-12)) {
        lambda = 2.0; // edgeless graph: classical normalised-Laplacian bound
    }
    out.lambda_max = lambda;
    out.matrix = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.matrix(i, j) = (2.0 / lambda) * lap(i, j) - (i == j ? 1.0 : 0.0);
        }
    }
    return out;
}

/// T_0(L̃) .. T_{K-1}(L̃).
struct ChebyshevBasis {
    std::vector<Tensor> terms;

    std::size_t order() const { return terms.size(); }
};

inline Tensor matmul_square(const Tensor &a, const Tensor &b) {
    const std::size_t n = a.dim(0);
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
            const double av = a(i, k);
            for (std::size_t j = 0; j < n; ++j) {
                out(i, j) += av * b(k, j);
            }
        }
    }
    return out;
}

inline ChebyshevBasis chebyshev_basis(const ScaledLaplacian &l, std::size_t k) {
    if (k < 1) {
        throw ParameterError("Chebyshev order must be >= 1");
    }
    const std::size_t n = l.matrix.dim(0);
    ChebyshevBasis out;
    out.terms.push_back(Tensor::identity(n));
    if (k > 1) {
        out.terms.push_back(l.matrix);
    }
    for (std::size_t i = 2; i < k; ++i) {
        Tensor next = matmul_square(l.matrix, out.terms[i - 1]);
        const Tensor &prev = out.terms[i - 2];
        for (std::size_t e = 0; e < next.size(); ++e) {
            next[e] = 2.0 * next[e] - prev[e];
        }
        out.terms.push_back(std::move(next));
    }
    return out;
}

/// Everything the network needs from the sensor graph.
struct GraphBundle {
    StadMatrix stad;
    StrgMask strg;
    Tensor stag;
    ScaledLaplacian laplacian;
    ChebyshevBasis basis;

    std::size_t nodes() const { return stag.dim(0); }
};

/// Builds every graph artefact from raw (unnormalised) training-window volumes.
inline GraphBundle build_graph_bundle(const Tensor &train_volumes, double p_sp, std::size_t cheb_order,
                                      std::size_t threads = 1) {
    GraphBundle g;
    g.stad = build_stad(train_volumes, threads);
    g.strg = sparsify(g.stad, p_sp);
    g.stag = build_stag(g.stad, g.strg);
    g.laplacian = scaled_laplacian(g.stag);
    g.basis = chebyshev_basis(g.laplacian, cheb_order);
    return g;
}

/// Rebuilds the derived pieces from a stored mask and STAG adjacency.
inline GraphBundle graph_from_parts(Tensor strg_mask, Tensor stag, std::size_t cheb_order) {
    GraphBundle g;
    const std::size_t n = stag.dim(0);
    g.strg.mask = std::move(strg_mask);
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        row += g.strg.mask(0, j);
    }
    g.strg.neighbors = static_cast<std::size_t>(row);
    g.strg.sparsity = static_cast<double>(g.strg.neighbors) / static_cast<double>(n);
    g.stag = std::move(stag);
    g.laplacian = scaled_laplacian(g.stag);
    g.basis = chebyshev_basis(g.laplacian, cheb_order);
    return g;
}

} // namespace wdstagnn::graph
