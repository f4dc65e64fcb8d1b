#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "masa/graph.hpp"
#include "masa/matrix.hpp"
#include "masa/rng.hpp"
#include "masa/shape.hpp"

namespace masa {

// Adapter topologies:
//   lora              one (A, B) pair
//   multi_pair        N independent (A_j, B_j) pairs, increments summed
//   single_a_multi_b  one A, N B-heads averaged uniformly (no router)
//   multi_a_single_b  N A-experts summed into one shared B
enum class Variant { lora, multi_pair, single_a_multi_b, multi_a_single_b };

inline std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::lora: return "lora";
    case Variant::multi_pair: return "multi_pair";
    case Variant::single_a_multi_b: return "single_a_multi_b";
    case Variant::multi_a_single_b: return "multi_a_single_b";
    }
    return "?";
}

inline Variant parse_variant(std::string_view s) {
    for (Variant v : {Variant::lora, Variant::multi_pair, Variant::single_a_multi_b, Variant::multi_a_single_b})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown adapter variant '" + std::string(s) + "'");
}

struct AdapterConfig {
    Variant variant = Variant::multi_a_single_b;
    std::size_t rank = 8;
    double alpha = 16.0;
    std::size_t num_experts = 5;
    std::vector<ModuleKind> target_modules{kAllModules.begin(), kAllModules.end()};

    double scale() const { return alpha / static_cast<double>(rank); }

    // A-matrices per adapter site.
    std::size_t a_count() const {
        return variant == Variant::multi_pair || variant == Variant::multi_a_single_b ? num_experts : 1;
    }
    // B-matrices per adapter site.
    std::size_t b_count() const {
        return variant == Variant::multi_pair || variant == Variant::single_a_multi_b ? num_experts : 1;
    }

    bool targets(ModuleKind m) const {
        return std::find(target_modules.begin(), target_modules.end(), m) != target_modules.end();
    }

    void validate() const {
        if (rank == 0) throw ConfigError("adapter.rank must be >= 1");
        if (!(alpha > 0.0)) throw ConfigError("adapter.alpha must be > 0");
        if (num_experts == 0) throw ConfigError("adapter.num_experts must be >= 1");
        if (variant == Variant::lora && num_experts != 1) throw ConfigError("adapter.num_experts must be 1 for lora");
        for (std::size_t i = 0; i < target_modules.size(); ++i)
            for (std::size_t j = i + 1; j < target_modules.size(); ++j)
                if (target_modules[i] == target_modules[j]) {
                    throw ConfigError("adapter.target_modules lists '" + std::string(to_string(target_modules[i])) +
                                      "' twice");
                }
    }
};

struct LoraPair {
    Matrix a; // [r x d_in]
    Matrix b; // [d_out x r]
};

struct MultiPair {
    std::vector<LoraPair> pairs;
};

struct HydraBlock {
    Matrix a;                 // [r x d_in]
    std::vector<Matrix> heads; // each [d_out x r]
};

struct MaeBlock {
    std::vector<Matrix> experts; // each [r x d_in]
    Matrix b;                    // [d_out x r]
    std::size_t group_id = 0;
};

using Adapter = std::variant<LoraPair, MultiPair, HydraBlock, MaeBlock>;

namespace detail {

inline void check_input(const Matrix& x, const Matrix& w, const char* op) {
    if (x.cols() != w.cols()) {
        throw DimensionError(std::string(op) + ": input " + x.shape() + " does not match weight " + w.shape());
    }
}

inline void check_pair(const Matrix& a, const Matrix& b, const Matrix& w, const char* op) {
    if (a.cols() != w.cols() || b.rows() != w.rows() || b.cols() != a.rows()) {
        throw DimensionError(std::string(op) + ": A " + a.shape() + ", B " + b.shape() + " inconsistent with W " +
                             w.shape());
    }
}

} // namespace detail

inline double adapter_scale(double alpha, std::size_t rank) {
    if (rank == 0) throw ConfigError("adapter rank must be >= 1");
    return alpha / static_cast<double>(rank);
}

// h = x W^T + (alpha/r) x A^T B^T
inline Matrix lora_forward(const Matrix& x, const Matrix& w, const LoraPair& p, double alpha, std::size_t rank) {
    detail::check_input(x, w, "lora_forward");
    detail::check_pair(p.a, p.b, w, "lora_forward");
    Matrix h = matmul_nt(x, w);
    h += matmul_nt(matmul_nt(x, p.a), p.b) * adapter_scale(alpha, rank);
    return h;
}

// Elementwise sum of the experts, added left to right.
inline Matrix aggregate_experts(std::span<const Matrix> experts) {
    if (experts.empty()) throw ContractError("aggregate_experts: empty expert list");
    Matrix acc = experts[0];
    for (std::size_t i = 1; i < experts.size(); ++i) {
        experts[0].require_same(experts[i], "aggregate_experts");
        acc += experts[i];
    }
    return acc;
}

// h = x W^T + (alpha/r) x (B sum_i A_i)^T
inline Matrix mae_forward(const Matrix& x, const Matrix& w, const MaeBlock& block, double alpha, std::size_t rank) {
    detail::check_input(x, w, "mae_forward");
    const Matrix a_sum = aggregate_experts(block.experts);
    detail::check_pair(a_sum, block.b, w, "mae_forward");
    Matrix h = matmul_nt(x, w);
    h += matmul_nt(matmul_nt(x, a_sum), block.b) * adapter_scale(alpha, rank);
    return h;
}

inline Matrix mean_of(std::span<const Matrix> ms, const char* op) {
    if (ms.empty()) throw ContractError(std::string(op) + ": empty list");
    Matrix acc = ms[0];
    for (std::size_t i = 1; i < ms.size(); ++i) {
        ms[0].require_same(ms[i], op);
        acc += ms[i];
    }
    return acc * (1.0 / static_cast<double>(ms.size()));
}

// h = x W^T + (alpha/r) x (mean_j(B_j) A)^T
inline Matrix hydra_forward(const Matrix& x, const Matrix& w, const Matrix& a, std::span<const Matrix> heads,
                            double alpha, std::size_t rank) {
    detail::check_input(x, w, "hydra_forward");
    if (heads.empty()) throw ContractError("hydra_forward: empty B-head list");
    const Matrix b_mean = mean_of(heads, "hydra_forward");
    detail::check_pair(a, b_mean, w, "hydra_forward");
    Matrix h = matmul_nt(x, w);
    h += matmul_nt(matmul_nt(x, a), b_mean) * adapter_scale(alpha, rank);
    return h;
}

// h = x W^T + (alpha/r) sum_j x (B_j A_j)^T
inline Matrix multipair_forward(const Matrix& x, const Matrix& w, std::span<const LoraPair> pairs, double alpha,
                                std::size_t rank) {
    detail::check_input(x, w, "multipair_forward");
    if (pairs.empty()) throw ContractError("multipair_forward: empty pair list");
    Matrix h = matmul_nt(x, w);
    const double s = adapter_scale(alpha, rank);
    for (const LoraPair& p : pairs) {
        detail::check_pair(p.a, p.b, w, "multipair_forward");
        h += matmul_nt(matmul_nt(x, p.a), p.b) * s;
    }
    return h;
}

inline Matrix adapter_forward(const Matrix& x, const Matrix& w, const Adapter& adapter, double alpha,
                              std::size_t rank) {
    return std::visit(
        [&](const auto& ad) -> Matrix {
            using T = std::decay_t<decltype(ad)>;
            if constexpr (std::is_same_v<T, LoraPair>) return lora_forward(x, w, ad, alpha, rank);
            else if constexpr (std::is_same_v<T, MultiPair>) return multipair_forward(x, w, ad.pairs, alpha, rank);
            else if constexpr (std::is_same_v<T, HydraBlock>) return hydra_forward(x, w, ad.a, ad.heads, alpha, rank);
            else return mae_forward(x, w, ad, alpha, rank);
        },
        adapter);
}

// Explicit delta W [d_out x d_in] with forward(x) == x (W + delta)^T.
inline Matrix merge_delta(const Adapter& adapter, double alpha, std::size_t rank) {
    const double s = adapter_scale(alpha, rank);
    return std::visit(
        [&](const auto& ad) -> Matrix {
            using T = std::decay_t<decltype(ad)>;
            if constexpr (std::is_same_v<T, LoraPair>) {
                return matmul(ad.b, ad.a) * s;
            } else if constexpr (std::is_same_v<T, MultiPair>) {
                if (ad.pairs.empty()) throw ContractError("merge_delta: empty pair list");
                Matrix d = matmul(ad.pairs[0].b, ad.pairs[0].a);
                for (std::size_t j = 1; j < ad.pairs.size(); ++j) d += matmul(ad.pairs[j].b, ad.pairs[j].a);
                return d * s;
            } else if constexpr (std::is_same_v<T, HydraBlock>) {
                return matmul(mean_of(ad.heads, "merge_delta"), ad.a) * s;
            } else {
                return matmul(ad.b, aggregate_experts(ad.experts)) * s;
            }
        },
        adapter);
}

// A-matrices Kaiming-uniform (fan_in = d_in), B-matrices zero, so delta W = 0.
inline Adapter init_adapter(const AdapterConfig& cfg, std::size_t d_in, std::size_t d_out, Rng& rng) {
    cfg.validate();
    if (cfg.rank > std::min(d_in, d_out)) {
        throw ConfigError("adapter rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                          std::to_string(std::min(d_in, d_out)));
    }
    const std::size_t r = cfg.rank, n = cfg.num_experts;
    switch (cfg.variant) {
    case Variant::lora: return LoraPair{kaiming_uniform(r, d_in, rng), Matrix(d_out, r)};
    case Variant::multi_pair: {
        MultiPair mp;
        for (std::size_t j = 0; j < n; ++j) mp.pairs.push_back({kaiming_uniform(r, d_in, rng), Matrix(d_out, r)});
        return mp;
    }
    case Variant::single_a_multi_b: {
        HydraBlock hb{kaiming_uniform(r, d_in, rng), {}};
        for (std::size_t j = 0; j < n; ++j) hb.heads.emplace_back(d_out, r);
        return hb;
    }
    case Variant::multi_a_single_b: {
        MaeBlock mb;
        for (std::size_t i = 0; i < n; ++i) mb.experts.push_back(kaiming_uniform(r, d_in, rng));
        mb.b = Matrix(d_out, r);
        return mb;
    }
    }
    throw ConfigError("init_adapter: unknown variant");
}

// Borrowed view of one adapter site's trainable storage, as held by the sharing registry.
struct AdapterView {
    Variant variant;
    std::span<const ParamPtr> a;
    std::span<const ParamPtr> b;
};

// Value snapshot of a registry-backed site.
inline Adapter snapshot(const AdapterView& v) {
    switch (v.variant) {
    case Variant::lora: return LoraPair{*v.a[0], *v.b[0]};
    case Variant::multi_pair: {
        MultiPair mp;
        for (std::size_t j = 0; j < v.a.size(); ++j) mp.pairs.push_back({*v.a[j], *v.b[j]});
        return mp;
    }
    case Variant::single_a_multi_b: {
        HydraBlock hb{*v.a[0], {}};
        for (const auto& b : v.b) hb.heads.push_back(*b);
        return hb;
    }
    case Variant::multi_a_single_b: {
        MaeBlock mb;
        for (const auto& a : v.a) mb.experts.push_back(*a);
        mb.b = *v.b[0];
        return mb;
    }
    }
    throw ContractError("snapshot: unknown variant");
}

struct IncrementNodes {
    Var increment;          // scaled increment [n x d_out]
    std::vector<Var> a_out; // pre-B activations, one per A path
};

// Differentiable adapter increment for input rows x.
inline IncrementNodes adapter_increment(Graph& g, Var x, const AdapterView& v, double scale) {
    if (v.a.empty() || v.b.empty()) throw ContractError("adapter_increment: site has no parameters");
    IncrementNodes out;
    auto params = [&](std::span<const ParamPtr> ps) {
        std::vector<Var> vs;
        for (const auto& p : ps) vs.push_back(g.parameter(p));
        return vs;
    };
    const std::vector<Var> as = params(v.a), bs = params(v.b);
    switch (v.variant) {
    case Variant::lora:
    case Variant::multi_a_single_b: {
        const Var a_sum = as.size() == 1 ? as[0] : g.add_n(as);
        const Var u = g.matmul_nt(x, a_sum);
        out.a_out.push_back(u);
        out.increment = g.scale(g.matmul_nt(u, bs[0]), scale);
        break;
    }
    case Variant::single_a_multi_b: {
        const Var b_mean = bs.size() == 1 ? bs[0] : g.scale(g.add_n(bs), 1.0 / static_cast<double>(bs.size()));
        const Var u = g.matmul_nt(x, as[0]);
        out.a_out.push_back(u);
        out.increment = g.scale(g.matmul_nt(u, b_mean), scale);
        break;
    }
    case Variant::multi_pair: {
        if (as.size() != bs.size()) throw ContractError("adapter_increment: multi_pair needs matching A and B counts");
        std::vector<Var> terms;
        for (std::size_t j = 0; j < as.size(); ++j) {
            const Var u = g.matmul_nt(x, as[j]);
            out.a_out.push_back(u);
            terms.push_back(g.matmul_nt(u, bs[j]));
        }
        out.increment = g.scale(terms.size() == 1 ? terms[0] : g.add_n(terms), scale);
        break;
    }
    }
    return out;
}

} // namespace masa
