#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wdstagnn/error.hpp"
#include "wdstagnn/graph.hpp"
#include "wdstagnn/numerics/autodiff.hpp"
#include "wdstagnn/numerics/optim.hpp"
#include "wdstagnn/wavelet.hpp"

namespace wdstagnn::model {

/// Architecture settings of the stacked spatiotemporal network.
struct ModelConfig {
    std::size_t nodes = 0;
    std::size_t blocks = 4;
    std::size_t d_model = 96; // temporal/spatial attention width; head width = d_model / heads
    std::size_t heads = 3;
    int level = 2; // MODWT level; 0 runs attention on the raw input (no wavelet split)
    std::string filter = "haar";
    std::size_t cheb_order = 3; // K, also the spatial head count
    std::vector<std::size_t> kernels{3, 5, 7};
    std::size_t pool = 2;
    std::size_t channels = 32;
    std::size_t input_len = 12;
    std::size_t horizon = 12;
    std::size_t in_channels = 1;
    double ln_eps = 1e-5;

    std::size_t spatial_heads() const { return cheb_order; }
    std::size_t components() const { return level == 0 ? 1 : static_cast<std::size_t>(level) + 1; }
    std::size_t block_in_channels(std::size_t block) const { return block == 0 ? in_channels : channels; }

    void validate() const;
};

/// Branch lengths of the gated convolutions before and after pooling.
struct GtuLengths {
    std::vector<std::size_t> branch;
    std::vector<std::size_t> pooled;
    std::size_t total = 0;
};

inline GtuLengths gtu_lengths(const ModelConfig &cfg) {
    GtuLengths out;
    for (std::size_t s : cfg.kernels) {
        if (s == 0 || s > cfg.input_len) {
            throw ParameterError("GTU kernel size " + std::to_string(s) + " does not fit input length " +
                                 std::to_string(cfg.input_len));
        }
        const std::size_t len = cfg.input_len - s + 1;
        out.branch.push_back(len);
        out.pooled.push_back(len / cfg.pool);
        out.total += len / cfg.pool;
    }
    return out;
}

inline void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char *name) {
        if (v == 0) {
            throw ParameterError(std::string("model config: ") + name + " must be positive");
        }
    };
    positive(nodes, "nodes");
    positive(blocks, "blocks");
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(cheb_order, "cheb_order");
    positive(pool, "pool");
    positive(channels, "channels");
    positive(input_len, "input_len");
    positive(horizon, "horizon");
    positive(in_channels, "in_channels");
    if (level < 0) {
        throw ParameterError("model config: level must be >= 0");
    }
    if (!(ln_eps > 0.0)) {
        throw ParameterError("model config: ln_eps must be positive");
    }
    if (d_model % heads != 0) {
        throw ParameterError("model config: d_model " + std::to_string(d_model) + " is not divisible by heads " +
                             std::to_string(heads));
    }
    if (d_model % cheb_order != 0) {
        throw ParameterError("model config: d_model " + std::to_string(d_model) +
                             " is not divisible by the spatial head count " + std::to_string(cheb_order));
    }
    if (kernels.empty()) {
        throw ParameterError("model config: at least one GTU kernel is required");
    }
    (void)wavelet::WaveletFilter::by_name(filter);
    // (k·M − (Σs − k)) / W = M, with every branch length divisible by W.
    const GtuLengths lens = gtu_lengths(*this);
    const std::size_t k = kernels.size();
    const std::size_t sum_s = std::accumulate(kernels.begin(), kernels.end(), std::size_t{0});
    const std::size_t concat = k * input_len - (sum_s - k);
    bool exact = concat % pool == 0 && concat / pool == input_len && lens.total == input_len;
    for (std::size_t b : lens.branch) {
        exact = exact && b % pool == 0;
    }
    if (!exact) {
        throw ParameterError("model config violates the gated-convolution length identity: (" + std::to_string(k) +
                             "·" + std::to_string(input_len) + " − (" + std::to_string(sum_s) + " − " +
                             std::to_string(k) + ")) / " + std::to_string(pool) + " must equal " +
                             std::to_string(input_len));
    }
}

namespace names {
inline std::string block(std::size_t b) { return "b" + std::to_string(b) + "."; }
inline std::string wta(std::size_t b, std::size_t j) { return block(b) + "wta" + std::to_string(j) + "."; }
} // namespace names

/// Name -> (shape, fan_in) for every learnable tensor. fan_in 0 marks a
/// bias (zeros) and -1 (as max size_t) a layer-norm gain (ones).
struct ParamSpec {
    Shape shape;
    std::size_t fan_in;
};
inline constexpr std::size_t kZeroInit = 0;
inline constexpr std::size_t kOneInit = static_cast<std::size_t>(-1);

inline std::map<std::string, ParamSpec> parameter_specs(const ModelConfig &cfg) {
    cfg.validate();
    std::map<std::string, ParamSpec> p;
    const std::size_t n = cfg.nodes, d = cfg.d_model, c = cfg.channels, m = cfg.input_len;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const std::size_t cin = cfg.block_in_channels(b);
        const std::string pre = names::block(b);
        for (std::size_t j = 0; j < cfg.components(); ++j) {
            const std::string w = names::wta(b, j);
            p[w + "wq"] = {{n, d}, n};
            p[w + "wk"] = {{n, d}, n};
            p[w + "wv"] = {{n, d}, n};
            p[w + "fc.w"] = {{d, n}, d};
            p[w + "fc.b"] = {{n}, kZeroInit};
            p[w + "ln.gain"] = {{n}, kOneInit};
            p[w + "ln.bias"] = {{n}, kZeroInit};
        }
        p[pre + "sa.conv.w"] = {{cin, 1}, cin};
        p[pre + "sa.conv.b"] = {{1}, kZeroInit};
        p[pre + "sa.emb.w"] = {{m, d}, m};
        p[pre + "sa.emb.b"] = {{d}, kZeroInit};
        p[pre + "sa.wk"] = {{d, d}, d};
        p[pre + "sa.wq"] = {{d, d}, d};
        p[pre + "sa.wm"] = {{cfg.spatial_heads(), n, n}, n};
        for (std::size_t k = 0; k < cfg.cheb_order; ++k) {
            p[pre + "cheb.theta" + std::to_string(k)] = {{cin, c}, cin};
        }
        for (std::size_t i = 0; i < cfg.kernels.size(); ++i) {
            const std::string g = pre + "gtu" + std::to_string(i) + ".";
            p[g + "w"] = {{2 * c, c, cfg.kernels[i]}, c * cfg.kernels[i]};
            p[g + "b"] = {{2 * c}, kZeroInit};
        }
        if (cin != c) {
            p[pre + "res.w"] = {{cin, c}, cin};
            p[pre + "res.b"] = {{c}, kZeroInit};
        }
        p[pre + "ln.gain"] = {{c}, kOneInit};
        p[pre + "ln.bias"] = {{c}, kZeroInit};
    }
    p["pred.conv.w"] = {{c, 1}, c};
    p["pred.conv.b"] = {{1}, kZeroInit};
    p["pred.fc.w"] = {{m, cfg.horizon}, m};
    p["pred.fc.b"] = {{cfg.horizon}, kZeroInit};
    return p;
}

/// Seeded initialisation in name order.
inline ParameterStore init_parameters(const ModelConfig &cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParameterStore out;
    for (const auto &[name, spec] : parameter_specs(cfg)) {
        if (spec.fan_in == kZeroInit) {
            out.emplace(name, Tensor(spec.shape, 0.0));
        } else if (spec.fan_in == kOneInit) {
            out.emplace(name, Tensor(spec.shape, 1.0));
        } else {
            out.emplace(name, uniform_init(spec.shape, spec.fan_in, rng));
        }
    }
    return out;
}

/// Throws unless params holds exactly the tensors the config implies.
inline void check_parameters(const ModelConfig &cfg, const ParameterStore &params) {
    const auto specs = parameter_specs(cfg);
    for (const auto &[name, spec] : specs) {
        auto it = params.find(name);
        if (it == params.end()) {
            throw DimensionError("missing parameter '" + name + "'");
        }
        if (it->second.shape() != spec.shape) {
            throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                                 ", config expects " + shape_str(spec.shape));
        }
    }
    for (const auto &[name, value] : params) {
        if (!specs.count(name)) {
            throw DimensionError("unexpected parameter '" + name + "' for this config");
        }
    }
}

/// Attention logits of one block: one (B, c, H, M, M) tensor per wavelet component.
struct ResidualAttention {
    std::vector<Var> components;

    bool empty() const { return components.empty(); }
};

/// Optional record of intermediate attention maps for inspection in tests.
struct ForwardTrace {
    std::vector<Tensor> temporal_attention; // softmax weights, (B, c, H, M, M)
    std::vector<Tensor> spatial_attention;  // (B, K, N, N)
    std::vector<std::size_t> block_time_lengths;
};

struct WtaOutput {
    Var y;
    ResidualAttention logits;
    std::vector<Var> weights;
};

struct ComponentOutput {
    Var y;
    Var logits;
    Var weights;
};

/// Multi-head self-attention over time for one wavelet component.
///
/// d_x is (B, N, c, M); the attention runs on its (B, c, M, N) view so each
/// time step is a token whose features are the N node values. Per head:
/// logits = QKᵀ/√d_H + residual, output = softmax(logits)·V. The heads are
/// concatenated, projected back to N, added to the input and layer-normed.
inline ComponentOutput temporal_attention_component(const ModelConfig &cfg, Var d_x, Var d_a,
                                                    const std::string &prefix) {
    Graph &g = d_x.graph();
    if (cfg.d_model % cfg.heads != 0) {
        throw ParameterError("d_model must be divisible by the head count");
    }
    const Shape xs = d_x.shape();
    if (xs.size() != 4) {
        throw DimensionError("temporal attention expects (B, N, c, M), got " + shape_str(xs));
    }
    const std::size_t bs = xs[0], c = xs[2], m = xs[3], h = cfg.heads, dh = cfg.d_model / cfg.heads;
    Var xp = permute(d_x, {0, 2, 3, 1}); // (B, c, M, N)
    auto heads_view = [&](Var proj) { return permute(reshape(proj, {bs, c, m, h, dh}), {0, 1, 3, 2, 4}); };
    Var q = heads_view(matmul(xp, g.parameter(prefix + "wq")));
    Var k = heads_view(matmul(xp, g.parameter(prefix + "wk")));
    Var v = heads_view(matmul(xp, g.parameter(prefix + "wv")));
    Var logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))); // (B, c, H, M, M)
    if (d_a.valid()) {
        Var a = d_a;
        const Shape as = a.shape();
        if (as.size() == 5 && as[1] == 1 && c > 1) {
            a = repeat_axis(a, 1, c);
        }
        if (a.shape() != logits.shape()) {
            throw DimensionError("residual attention shape " + shape_str(as) + " does not match logits " +
                                 shape_str(logits.shape()));
        }
        logits = add(logits, a);
    }
    Var att = softmax_last(logits);
    Var o = reshape(permute(matmul(att, v), {0, 1, 3, 2, 4}), {bs, c, m, cfg.d_model});
    Var fc = add_bias(matmul(o, g.parameter(prefix + "fc.w")), g.parameter(prefix + "fc.b"));
    Var normed =
        layer_norm(add(fc, xp), g.parameter(prefix + "ln.gain"), g.parameter(prefix + "ln.bias"), cfg.ln_eps);
    return {permute(normed, {0, 3, 1, 2}), logits, att};
}

/// Test hook: replaces the per-component attention by the identity map.
struct WtaHooks {
    bool identity_component = false;
};

/// Wavelet temporal attention: split x and the previous block's logits into
/// MRA components along time, attend per component, recombine by summation
/// (the inverse of an additive MRA).
inline WtaOutput wavelet_temporal_attention(const ModelConfig &cfg, std::size_t block, Var x,
                                            const ResidualAttention &a_prev, WtaHooks hooks = {}) {
    Graph &g = x.graph();
    const std::size_t m = x.shape().back();
    const std::size_t comps = cfg.components();
    if (!a_prev.empty() && a_prev.components.size() != comps) {
        throw DimensionError("residual attention has " + std::to_string(a_prev.components.size()) +
                             " components, wavelet split produces " + std::to_string(comps));
    }
    Var a_full;
    if (!a_prev.empty()) {
        a_full = a_prev.components.size() == 1 ? a_prev.components.front() : add_n(a_prev.components);
    }
    const auto filter = wavelet::WaveletFilter::by_name(cfg.filter);
    WtaOutput out;
    std::vector<Var> parts;
    for (std::size_t j = 0; j < comps; ++j) {
        Var xj = x;
        Var aj = a_full;
        if (cfg.level > 0) {
            Var op = g.constant(wavelet::mra_operator(m, filter, cfg.level, j));
            xj = matmul_nt(x, op);
            if (a_full.valid()) {
                aj = matmul_nt(a_full, op);
            }
        }
        if (hooks.identity_component) {
            parts.push_back(xj);
            continue;
        }
        ComponentOutput co = temporal_attention_component(cfg, xj, aj, names::wta(block, j));
        parts.push_back(co.y);
        out.logits.components.push_back(co.logits);
        out.weights.push_back(co.weights);
    }
    out.y = parts.size() == 1 ? parts.front() : add_n(parts);
    return out;
}

/// Dynamic spatial attention: (B, K, N, N) row-stochastic matrices.
inline Var spatial_attention(const ModelConfig &cfg, std::size_t block, Var y, const graph::StrgMask &mask) {
    Graph &g = y.graph();
    const Shape ys = y.shape();
    const std::size_t bs = ys[0], n = ys[1], m = ys[3];
    if (mask.mask.shape() != Shape{n, n}) {
        throw DimensionError("spatial attention: mask shape " + shape_str(mask.mask.shape()) + " does not match " +
                             std::to_string(n) + " nodes");
    }
    const std::string pre = names::block(block);
    const std::size_t hs = cfg.spatial_heads(), dh = cfg.d_model / hs;
    // 1-tap convolution across channels, then a learned map of the time axis
    Var yc = matmul(permute(y, {0, 1, 3, 2}), g.parameter(pre + "sa.conv.w")); // (B, N, M, 1)
    yc = reshape(add_bias(yc, g.parameter(pre + "sa.conv.b")), {bs, n, m});
    Var ye = add_bias(matmul(yc, g.parameter(pre + "sa.emb.w")), g.parameter(pre + "sa.emb.b")); // (B, N, d)
    auto heads_view = [&](Var proj) { return permute(reshape(proj, {bs, n, hs, dh}), {0, 2, 1, 3}); };
    Var kp = heads_view(matmul(ye, g.parameter(pre + "sa.wk")));
    Var qp = heads_view(matmul(ye, g.parameter(pre + "sa.wq")));
    Var logits = scale(matmul_nt(kp, qp), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var prior = mul_bias(g.parameter(pre + "sa.wm"), g.constant(mask.mask));
    return softmax_last(add_bias(logits, prior));
}

/// Σ_k θ_k((T_k ⊙ P^(k)) x) over the node axis; x is (B, N, c_in, M),
/// attention (B, K, N, N), result (B, N, c_out, M).
inline Var cheb_graph_conv(Var x, const graph::ChebyshevBasis &basis, Var attention, const std::vector<Var> &theta) {
    Graph &g = x.graph();
    const Shape xs = x.shape();
    if (xs.size() != 4) {
        throw DimensionError("Chebyshev convolution expects (B, N, c, M), got " + shape_str(xs));
    }
    const std::size_t bs = xs[0], n = xs[1], cin = xs[2], m = xs[3];
    const std::size_t k_terms = basis.order();
    const Shape ps = attention.shape();
    if (ps.size() != 4 || ps[0] != bs || ps[1] != k_terms || ps[2] != n || ps[3] != n) {
        throw DimensionError("Chebyshev order " + std::to_string(k_terms) + " does not match attention " +
                             shape_str(ps));
    }
    if (theta.size() != k_terms) {
        throw DimensionError("expected " + std::to_string(k_terms) + " Chebyshev coefficient maps, got " +
                             std::to_string(theta.size()));
    }
    Var xt = reshape(permute(x, {0, 1, 3, 2}), {bs, n, m * cin});
    std::vector<Var> terms;
    for (std::size_t k = 0; k < k_terms; ++k) {
        Var pk = reshape(slice(attention, 1, k, k + 1), {bs, n, n});
        Var gk = mul_bias(pk, g.constant(basis.terms[k]));
        Var mixed = reshape(matmul(gk, xt), {bs, n, m, cin});
        terms.push_back(matmul(mixed, theta[k]));
    }
    Var z = terms.size() == 1 ? terms.front() : add_n(terms);
    return permute(z, {0, 1, 3, 2});
}

/// Z_out = ReLU(concat_i(pool(tanh(E_i) ⊙ σ(F_i))) + z) for every kernel
/// size s_i, where E_i/F_i are the channel halves of the s_i convolution.
inline Var gated_temporal_conv(const ModelConfig &cfg, std::size_t block, Var z) {
    Graph &g = z.graph();
    const Shape zs = z.shape();
    const std::size_t bs = zs[0], n = zs[1], c = zs[2], m = zs[3];
    if (m != cfg.input_len) {
        throw DimensionError("gated convolution expects time length " + std::to_string(cfg.input_len) + ", got " +
                             std::to_string(m));
    }
    const std::string pre = names::block(block);
    Var flat = reshape(z, {bs * n, c, m});
    std::vector<Var> branches;
    for (std::size_t i = 0; i < cfg.kernels.size(); ++i) {
        const std::string p = pre + "gtu" + std::to_string(i) + ".";
        Var conv = conv1d(flat, g.parameter(p + "w"), g.parameter(p + "b"));
        Var e = slice(conv, 1, 0, c);
        Var f = slice(conv, 1, c, 2 * c);
        branches.push_back(avg_pool_last(mul(tanh(e), sigmoid(f)), cfg.pool));
    }
    Var cat = concat(branches, 2);
    if (cat.shape()[2] != m) {
        throw DimensionError("gated convolution produced length " + std::to_string(cat.shape()[2]) + ", expected " +
                             std::to_string(m));
    }
    return relu(add(reshape(cat, zs), z));
}

/// Block output LayerNorm(ReLU(residual(x) + Z_out)), normalised over channels.
inline Var block_output(const ModelConfig &cfg, std::size_t block, Var x, Var z_out) {
    Graph &g = x.graph();
    const std::string pre = names::block(block);
    Var xt = permute(x, {0, 1, 3, 2}); // (B, N, M, c_in)
    if (x.shape()[2] != cfg.channels) {
        xt = add_bias(matmul(xt, g.parameter(pre + "res.w")), g.parameter(pre + "res.b"));
    }
    Var s = relu(add(xt, permute(z_out, {0, 1, 3, 2})));
    Var normed = layer_norm(s, g.parameter(pre + "ln.gain"), g.parameter(pre + "ln.bias"), cfg.ln_eps);
    return permute(normed, {0, 1, 3, 2});
}

struct BlockOutput {
    Var x;
    ResidualAttention logits;
};

inline BlockOutput spatiotemporal_block(const ModelConfig &cfg, const graph::GraphBundle &graph, std::size_t block,
                                        Var x, const ResidualAttention &a_prev, ForwardTrace *trace = nullptr) {
    Graph &g = x.graph();
    WtaOutput wta = wavelet_temporal_attention(cfg, block, x, a_prev);
    Var p = spatial_attention(cfg, block, wta.y, graph.strg);
    std::vector<Var> theta;
    for (std::size_t k = 0; k < cfg.cheb_order; ++k) {
        theta.push_back(g.parameter(names::block(block) + "cheb.theta" + std::to_string(k)));
    }
    Var z = cheb_graph_conv(x, graph.basis, p, theta);
    Var z_out = gated_temporal_conv(cfg, block, z);
    Var next = block_output(cfg, block, x, z_out);
    if (trace) {
        for (const Var &w : wta.weights) {
            trace->temporal_attention.push_back(w.value());
        }
        trace->spatial_attention.push_back(p.value());
        trace->block_time_lengths.push_back(next.shape()[3]);
    }
    if (next.shape()[3] != x.shape()[3]) {
        throw DimensionError("block changed the time length");
    }
    return {next, wta.logits};
}

/// Full network: stacked blocks threading residual attention, then the
/// prediction layer mapping (B, N, c, M) to (B, N, horizon).
inline Var forward(const ModelConfig &cfg, const graph::GraphBundle &graph, Var x, ForwardTrace *trace = nullptr) {
    Graph &g = x.graph();
    const Shape xs = x.shape();
    if (xs.size() != 4 || xs[1] != cfg.nodes || xs[2] != cfg.in_channels || xs[3] != cfg.input_len) {
        throw DimensionError("forward: input shape " + shape_str(xs) + " does not match config (B, " +
                             std::to_string(cfg.nodes) + ", " + std::to_string(cfg.in_channels) + ", " +
                             std::to_string(cfg.input_len) + ")");
    }
    if (graph.nodes() != cfg.nodes || graph.basis.order() != cfg.cheb_order) {
        throw DimensionError("forward: graph bundle does not match the model config");
    }
    ResidualAttention att;
    Var h = x;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        BlockOutput out = spatiotemporal_block(cfg, graph, b, h, att, trace);
        h = out.x;
        att = std::move(out.logits);
    }
    const std::size_t bs = xs[0], n = cfg.nodes, m = cfg.input_len;
    Var collapsed = matmul(permute(h, {0, 1, 3, 2}), g.parameter("pred.conv.w")); // (B, N, M, 1)
    collapsed = reshape(add_bias(collapsed, g.parameter("pred.conv.b")), {bs, n, m});
    return add_bias(matmul(collapsed, g.parameter("pred.fc.w")), g.parameter("pred.fc.b"));
}

/// A trained or freshly initialised network with its sensor graph.
struct Network {
    ModelConfig config;
    graph::GraphBundle graph;
    ParameterStore params;
};

/// Inference on a (B, N, 1, M) batch or a single (N, 1, M) window.
inline Tensor predict(const Network &net, const Tensor &x) {
    Graph g(&net.params);
    if (x.rank() == 3) {
        const Shape &s = x.shape();
        Tensor y = forward(net.config, net.graph, g.constant(x.reshaped({1, s[0], s[1], s[2]}))).value();
        return y.reshaped({y.dim(1), y.dim(2)});
    }
    return forward(net.config, net.graph, g.constant(x)).value();
}

} // namespace wdstagnn::model
