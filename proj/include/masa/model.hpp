#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "masa/adapters.hpp"
#include "masa/graph.hpp"
#include "masa/rng.hpp"
#include "masa/shape.hpp"
#include "masa/sharing.hpp"

namespace masa {

struct LayerWeights {
    std::array<Matrix, 7> proj; // indexed by module_index(ModuleKind); W is [d_out x d_in]
    Matrix attn_norm;           // [1 x d_model] gain
    Matrix ffn_norm;            // [1 x d_model] gain

    Matrix& weight(ModuleKind m) { return proj[module_index(m)]; }
    const Matrix& weight(ModuleKind m) const { return proj[module_index(m)]; }
};

// Pre-norm transformer whose weights are never trained:
//   tokens -> embed -> L x [x + o(attn(q,k,v)(norm x)); x + down(gelu(gate) * up)(norm x)]
//          -> final norm -> mean over the sequence -> read-out.
struct FrozenTransformer {
    ModelShape shape;
    Matrix embed;   // [d_model x input_dim]
    std::vector<LayerWeights> layers;
    Matrix final_norm; // [1 x d_model]
    Matrix readout; // [output_dim x d_model]

    friend bool operator==(const FrozenTransformer& a, const FrozenTransformer& b) {
        if (!(a.embed == b.embed && a.final_norm == b.final_norm && a.readout == b.readout &&
              a.layers.size() == b.layers.size()))
            return false;
        for (std::size_t l = 0; l < a.layers.size(); ++l) {
            const auto& x = a.layers[l];
            const auto& y = b.layers[l];
            if (!(x.proj == y.proj && x.attn_norm == y.attn_norm && x.ffn_norm == y.ffn_norm)) return false;
        }
        return true;
    }
};

inline FrozenTransformer build_model(const ModelShape& shape, const Rng& rng) {
    shape.validate();
    FrozenTransformer m;
    m.shape = shape;
    Rng er = rng.fork("embed");
    m.embed = kaiming_uniform(shape.d_model, shape.input_dim, er);
    for (std::size_t l = 0; l < shape.n_layers; ++l) {
        LayerWeights lw;
        for (ModuleKind k : kAllModules) {
            if (!shape.has_module(k)) continue;
            const auto [d_in, d_out] = shape.module_dims(k);
            Rng wr = rng.fork("layer." + std::to_string(l) + "." + std::string(to_string(k)));
            lw.weight(k) = kaiming_uniform(d_out, d_in, wr);
        }
        lw.attn_norm = Matrix(1, shape.d_model, 1.0);
        lw.ffn_norm = Matrix(1, shape.d_model, 1.0);
        m.layers.push_back(std::move(lw));
    }
    m.final_norm = Matrix(1, shape.d_model, 1.0);
    Rng rr = rng.fork("readout");
    m.readout = kaiming_uniform(shape.output_dim, shape.d_model, rr);
    return m;
}

// Frozen base plus registry-backed adapters on the plan's target modules.
struct AdaptedModel {
    std::shared_ptr<const FrozenTransformer> base;
    SharingPlan plan;

    const ModelShape& shape() const { return base->shape; }
    const AdapterConfig& config() const { return plan.config; }
};

inline AdaptedModel inject_adapters(std::shared_ptr<const FrozenTransformer> base, SharingPlan plan) {
    if (!base) throw ContractError("inject_adapters: null base model");
    const ModelShape& shape = base->shape;
    if (plan.layout.n_layers != shape.n_layers) {
        throw ConfigError("inject_adapters: plan covers " + std::to_string(plan.layout.n_layers) +
                          " layers but the model has " + std::to_string(shape.n_layers));
    }
    for (ModuleKind m : plan.config.target_modules) {
        if (!shape.has_module(m)) {
            throw ConfigError("inject_adapters: target module '" + std::string(to_string(m)) +
                              "' is absent from the model shape");
        }
    }
    if (auto v = validate_plan(plan, shape.n_layers, &shape); !v.empty()) {
        throw ConfigError("inject_adapters: invalid sharing plan: " + v.front());
    }
    return AdaptedModel{std::move(base), std::move(plan)};
}

enum class Signal { a_output, increment, input };

inline std::string_view to_string(Signal s) {
    switch (s) {
    case Signal::a_output: return "a_output";
    case Signal::increment: return "increment";
    case Signal::input: return "input";
    }
    return "?";
}

inline Signal parse_signal(std::string_view s) {
    for (Signal x : {Signal::a_output, Signal::increment, Signal::input})
        if (to_string(x) == s) return x;
    throw ConfigError("unknown signal '" + std::string(s) + "'");
}

// Recorded activations of one adapter site. a_output is the aggregated pre-B
// activation (sum_i A_i) x; multi_pair sites store their per-pair outputs side by
// side. increment is the scaled adapter contribution added to x W^T.
struct SiteCapture {
    Matrix a_output;  // [n x r] (n x N*r for multi_pair)
    Matrix increment; // [n x d_out]
    Matrix input;     // [n x d_in]

    const Matrix& get(Signal s) const {
        switch (s) {
        case Signal::a_output: return a_output;
        case Signal::increment: return increment;
        case Signal::input: return input;
        }
        return a_output;
    }
};

struct CaptureBuffer {
    std::size_t n_layers = 0;
    std::size_t seq_len = 1; // token rows per sample
    std::map<std::pair<std::size_t, ModuleKind>, SiteCapture> sites;

    bool empty() const { return sites.empty(); }

    const SiteCapture* find(std::size_t layer, ModuleKind m) const {
        const auto it = sites.find({layer, m});
        return it == sites.end() ? nullptr : &it->second;
    }
};

struct ForwardOptions {
    bool bypass_norms = false; // unit mode: skip all normalizations
};

struct ForwardResult {
    Matrix outputs; // [batch x output_dim]
    CaptureBuffer capture;
};

namespace detail {

struct ForwardContext {
    Graph& g;
    const FrozenTransformer& base;
    const SharingPlan* plan; // null for the bare base model
    const std::set<Signal>* capture;
    CaptureBuffer* buffer;
    ForwardOptions opts;

    Var project(Var x, std::size_t layer, ModuleKind m) {
        const Var w = g.constant(base.layers[layer].weight(m));
        Var h = g.matmul_nt(x, w);
        if (!plan || !plan->has_module(m)) return h;
        const AdapterView view = plan->view(layer, m);
        IncrementNodes inc = adapter_increment(g, x, view, plan->config.scale());
        if (capture && buffer && !capture->empty()) {
            SiteCapture& sc = buffer->sites[{layer, m}];
            if (capture->count(Signal::a_output)) sc.a_output = concat_cols(inc.a_out);
            if (capture->count(Signal::increment)) sc.increment = g.value(inc.increment);
            if (capture->count(Signal::input)) sc.input = g.value(x);
        }
        return g.add(h, inc.increment);
    }

    Matrix concat_cols(const std::vector<Var>& parts) const {
        if (parts.size() == 1) return g.value(parts[0]);
        const std::size_t rows = g.value(parts[0]).rows();
        std::size_t cols = 0;
        for (Var p : parts) cols += g.value(p).cols();
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (Var p : parts) {
            const Matrix& m = g.value(p);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < m.cols(); ++c) out(r, off + c) = m(r, c);
            off += m.cols();
        }
        return out;
    }

    Var norm(Var x, const Matrix& gain) { return opts.bypass_norms ? x : g.layer_norm(x, gain); }
};

inline Matrix tokens_of(const Matrix& inputs, const ModelShape& shape, std::size_t seq_len) {
    if (seq_len == 0) throw ContractError("forward: seq_len must be >= 1");
    if (inputs.cols() != seq_len * shape.input_dim) {
        throw DimensionError("forward: batch feature width " + std::to_string(inputs.cols()) + " != seq_len (" +
                             std::to_string(seq_len) + ") x input_dim (" + std::to_string(shape.input_dim) + ")");
    }
    return reshape(inputs, inputs.rows() * seq_len, shape.input_dim);
}

} // namespace detail

// Builds the forward pass into `g`; returns the [batch x output_dim] output node.
inline Var forward_graph(Graph& g, const FrozenTransformer& base, const SharingPlan* plan, const Matrix& inputs,
                         std::size_t seq_len, const std::set<Signal>* capture = nullptr,
                         CaptureBuffer* buffer = nullptr, ForwardOptions opts = {}) {
    const ModelShape& s = base.shape;
    detail::ForwardContext ctx{g, base, plan, capture, buffer, opts};
    if (buffer) {
        buffer->n_layers = s.n_layers;
        buffer->seq_len = seq_len;
    }
    Var h = g.matmul_nt(g.constant(detail::tokens_of(inputs, s, seq_len)), g.constant(base.embed));
    const AttentionShape attn{seq_len, s.n_heads, s.n_kv_heads()};
    for (std::size_t l = 0; l < s.n_layers; ++l) {
        const LayerWeights& lw = base.layers[l];
        const Var x1 = ctx.norm(h, lw.attn_norm);
        const Var q = ctx.project(x1, l, ModuleKind::q);
        const Var k = ctx.project(x1, l, ModuleKind::k);
        const Var v = ctx.project(x1, l, ModuleKind::v);
        h = g.add(h, ctx.project(g.attention(q, k, v, attn), l, ModuleKind::o));
        if (s.has_ffn()) {
            const Var x2 = ctx.norm(h, lw.ffn_norm);
            const Var gate = g.gelu(ctx.project(x2, l, ModuleKind::ffn_gate));
            const Var up = ctx.project(x2, l, ModuleKind::ffn_up);
            h = g.add(h, ctx.project(g.mul(gate, up), l, ModuleKind::ffn_down));
        }
    }
    const Var pooled = g.mean_pool_rows(ctx.norm(h, base.final_norm), seq_len);
    return g.matmul_nt(pooled, g.constant(base.readout));
}

inline Matrix base_forward(const FrozenTransformer& base, const Matrix& inputs, std::size_t seq_len,
                           ForwardOptions opts = {}) {
    Graph g;
    return g.value(forward_graph(g, base, nullptr, inputs, seq_len, nullptr, nullptr, opts));
}

// Inference pass. Capture is passive: requested signals are recorded without
// changing the computation.
inline ForwardResult forward(const AdaptedModel& model, const Matrix& inputs, std::size_t seq_len,
                             const std::set<Signal>& capture = {}, ForwardOptions opts = {}) {
    Graph g;
    ForwardResult res;
    const Var out = forward_graph(g, *model.base, &model.plan, inputs, seq_len, &capture, &res.capture, opts);
    res.outputs = g.value(out);
    if (capture.empty()) res.capture.sites.clear();
    return res;
}

// One adapted projection evaluated in isolation on rows x [n x d_in].
inline ForwardResult module_forward(const AdaptedModel& model, std::size_t layer, ModuleKind m, const Matrix& x,
                                    const std::set<Signal>& capture = {}) {
    if (layer >= model.shape().n_layers) throw ContractError("module_forward: layer out of range");
    Graph g;
    ForwardResult res;
    res.capture.n_layers = model.shape().n_layers;
    detail::ForwardContext ctx{g, *model.base, &model.plan, &capture, &res.capture, {}};
    const auto [d_in, d_out] = model.shape().module_dims(m);
    if (x.cols() != d_in) {
        throw DimensionError("module_forward: input " + x.shape() + " does not match d_in " + std::to_string(d_in));
    }
    res.outputs = g.value(ctx.project(g.constant(x), layer, m));
    return res;
}

} // namespace masa
