#pragma once

#include <compare>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "masa/adapters.hpp"
#include "masa/rng.hpp"
#include "masa/shape.hpp"

namespace masa {

enum class SharingKind { none, share_a, share_b, share_both };

inline std::string_view to_string(SharingKind k) {
    switch (k) {
    case SharingKind::none: return "none";
    case SharingKind::share_a: return "share_a";
    case SharingKind::share_b: return "share_b";
    case SharingKind::share_both: return "share_both";
    }
    return "?";
}

inline SharingKind parse_sharing_kind(std::string_view s) {
    for (SharingKind k : {SharingKind::none, SharingKind::share_a, SharingKind::share_b, SharingKind::share_both})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown sharing kind '" + std::string(s) + "'");
}

struct SharingStrategy {
    SharingKind kind = SharingKind::share_a;
    std::size_t group_size = 2; // ignored for kind == none

    bool shares_a() const { return kind == SharingKind::share_a || kind == SharingKind::share_both; }
    bool shares_b() const { return kind == SharingKind::share_b || kind == SharingKind::share_both; }

    void validate() const {
        if (kind != SharingKind::none && group_size == 0) throw ConfigError("sharing.group_size must be >= 1");
    }
};

inline std::size_t group_index(std::size_t layer, std::size_t group_size) {
    if (group_size == 0) throw ContractError("group_index: group size must be >= 1");
    return layer / group_size;
}

// Which parameter set a layer reads: a shared group k, or its own (index = layer).
struct Owner {
    enum class Kind { group, own };
    Kind kind = Kind::own;
    std::size_t index = 0;

    static Owner group(std::size_t k) { return {Kind::group, k}; }
    static Owner own(std::size_t l) { return {Kind::own, l}; }

    auto operator<=>(const Owner&) const = default;

    std::string label() const { return (kind == Kind::group ? "group." : "layer.") + std::to_string(index); }
};

struct LayerAssignment {
    std::size_t layer = 0;
    Owner a;
    Owner b;
};

// Parameter-free topology: layer -> owner of its A-set and B-set.
struct SharingLayout {
    std::size_t n_layers = 0;
    SharingStrategy strategy;
    std::vector<LayerAssignment> layers;

    std::set<Owner> distinct_a() const {
        std::set<Owner> s;
        for (const auto& la : layers) s.insert(la.a);
        return s;
    }
    std::set<Owner> distinct_b() const {
        std::set<Owner> s;
        for (const auto& la : layers) s.insert(la.b);
        return s;
    }
};

inline SharingLayout plan_layout(std::size_t n_layers, const SharingStrategy& strategy) {
    if (n_layers == 0) throw ConfigError("sharing plan needs at least one layer");
    strategy.validate();
    SharingLayout lay{n_layers, strategy, {}};
    for (std::size_t l = 0; l < n_layers; ++l) {
        LayerAssignment la{l, Owner::own(l), Owner::own(l)};
        if (strategy.shares_a()) la.a = Owner::group(group_index(l, strategy.group_size));
        if (strategy.shares_b()) la.b = Owner::group(group_index(l, strategy.group_size));
        lay.layers.push_back(la);
    }
    return lay;
}

// Registry names: "<module>.a_group.<k>.expert.<i>", "<module>.a_layer.<l>.expert.<i>",
// "<module>.b_group.<k>.head.<j>", "<module>.b_layer.<l>.head.<j>".
inline std::string param_name(ModuleKind m, char side, const Owner& o, std::size_t slot) {
    std::string s(to_string(m));
    s += '.';
    s += side;
    s += o.kind == Owner::Kind::group ? "_group." : "_layer.";
    s += std::to_string(o.index);
    s += side == 'a' ? ".expert." : ".head.";
    s += std::to_string(slot);
    return s;
}

// Distinct trainable storage of one target module. Layers that share an owner
// hold the same ParamPtr objects, so tying is structural.
struct ModuleRegistry {
    std::map<Owner, std::vector<ParamPtr>> a_sets;
    std::map<Owner, std::vector<ParamPtr>> b_sets;
};

struct SharingPlan {
    SharingLayout layout;
    AdapterConfig config;
    std::map<ModuleKind, ModuleRegistry> registry;

    AdapterView view(std::size_t layer, ModuleKind m) const {
        const auto mit = registry.find(m);
        if (mit == registry.end()) {
            throw ContractError("sharing plan has no adapters for module '" + std::string(to_string(m)) + "'");
        }
        const LayerAssignment& la = layout.layers.at(layer);
        const auto ait = mit->second.a_sets.find(la.a);
        const auto bit = mit->second.b_sets.find(la.b);
        if (ait == mit->second.a_sets.end() || bit == mit->second.b_sets.end()) {
            throw ContractError("sharing plan registry incomplete at layer " + std::to_string(layer) + " module " +
                                std::string(to_string(m)));
        }
        return AdapterView{config.variant, ait->second, bit->second};
    }

    bool has_module(ModuleKind m) const { return registry.count(m) != 0; }

    // Every distinct trainable matrix with its registry name, in a stable order.
    std::vector<std::pair<std::string, ParamPtr>> named_parameters() const {
        std::vector<std::pair<std::string, ParamPtr>> out;
        for (const auto& [m, reg] : registry) {
            for (const auto& [owner, ps] : reg.a_sets)
                for (std::size_t i = 0; i < ps.size(); ++i) out.emplace_back(param_name(m, 'a', owner, i), ps[i]);
            for (const auto& [owner, ps] : reg.b_sets)
                for (std::size_t j = 0; j < ps.size(); ++j) out.emplace_back(param_name(m, 'b', owner, j), ps[j]);
        }
        return out;
    }

    // Deep copy: same values, fresh storage with the same sharing structure.
    SharingPlan clone() const {
        SharingPlan c{layout, config, {}};
        for (const auto& [m, reg] : registry) {
            ModuleRegistry r;
            for (const auto& [o, ps] : reg.a_sets)
                for (const auto& p : ps) r.a_sets[o].push_back(std::make_shared<Matrix>(*p));
            for (const auto& [o, ps] : reg.b_sets)
                for (const auto& p : ps) r.b_sets[o].push_back(std::make_shared<Matrix>(*p));
            c.registry.emplace(m, std::move(r));
        }
        return c;
    }
};

// Materializes one registry entry per distinct owner and target module. Each A is
// Kaiming-uniform from a stream keyed by its registry name; each B starts at zero.
inline SharingPlan build_sharing_plan(std::size_t n_layers, const SharingStrategy& strategy, const AdapterConfig& cfg,
                                      const ModelShape& shape, const Rng& rng) {
    cfg.validate();
    SharingPlan plan{plan_layout(n_layers, strategy), cfg, {}};
    for (ModuleKind m : cfg.target_modules) {
        if (!shape.has_module(m)) {
            throw ConfigError("target module '" + std::string(to_string(m)) + "' does not exist in the model shape");
        }
        const auto [d_in, d_out] = shape.module_dims(m);
        if (cfg.rank > std::min(d_in, d_out)) {
            throw ConfigError("adapter rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                              std::to_string(std::min(d_in, d_out)) + " for module " + std::string(to_string(m)));
        }
        ModuleRegistry reg;
        for (const Owner& o : plan.layout.distinct_a()) {
            auto& set = reg.a_sets[o];
            for (std::size_t i = 0; i < cfg.a_count(); ++i) {
                Rng stream = rng.fork(param_name(m, 'a', o, i));
                set.push_back(std::make_shared<Matrix>(kaiming_uniform(cfg.rank, d_in, stream)));
            }
        }
        for (const Owner& o : plan.layout.distinct_b()) {
            auto& set = reg.b_sets[o];
            for (std::size_t j = 0; j < cfg.b_count(); ++j) set.push_back(std::make_shared<Matrix>(d_out, cfg.rank));
        }
        plan.registry.emplace(m, std::move(reg));
    }
    return plan;
}

// Structural checks; returns human-readable violations (empty when well-formed).
inline std::vector<std::string> validate_plan(const SharingPlan& plan, std::size_t n_layers,
                                              const ModelShape* shape = nullptr) {
    std::vector<std::string> v;
    const SharingLayout& lay = plan.layout;
    const SharingStrategy& st = lay.strategy;
    if (lay.n_layers != n_layers) {
        v.push_back("plan covers " + std::to_string(lay.n_layers) + " layers, model has " + std::to_string(n_layers));
    }
    std::vector<int> seen(n_layers, 0);
    for (const auto& la : lay.layers) {
        if (la.layer >= n_layers) {
            v.push_back("layer " + std::to_string(la.layer) + " is outside [0," + std::to_string(n_layers) + ")");
            continue;
        }
        ++seen[la.layer];
        auto expect = [&](bool shared, const Owner& got, const char* side) {
            const Owner want = shared ? Owner::group(st.group_size ? la.layer / st.group_size : 0) : Owner::own(la.layer);
            if (!(got == want)) {
                v.push_back("layer " + std::to_string(la.layer) + ": " + side + " owner is " + got.label() +
                            ", expected " + want.label());
            }
        };
        expect(st.shares_a(), la.a, "A");
        expect(st.shares_b(), la.b, "B");
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (seen[l] != 1) v.push_back("layer " + std::to_string(l) + " covered " + std::to_string(seen[l]) + " times");
    }
    const AdapterConfig& cfg = plan.config;
    for (ModuleKind m : cfg.target_modules) {
        const auto mit = plan.registry.find(m);
        const std::string mname(to_string(m));
        if (mit == plan.registry.end()) {
            v.push_back("registry has no entry for module " + mname);
            continue;
        }
        auto check_sets = [&](const std::map<Owner, std::vector<ParamPtr>>& sets, const std::set<Owner>& owners,
                              char side, std::size_t count) {
            for (const Owner& o : owners) {
                const auto it = sets.find(o);
                if (it == sets.end()) {
                    v.push_back("registry missing " + mname + " " + side + " set for " + o.label());
                    continue;
                }
                if (it->second.size() != count) {
                    v.push_back("registry " + mname + " " + side + " set for " + o.label() + " holds " +
                                std::to_string(it->second.size()) + " matrices, expected " + std::to_string(count));
                }
                for (std::size_t i = 0; i < it->second.size(); ++i) {
                    const ParamPtr& p = it->second[i];
                    if (!p) {
                        v.push_back("registry " + param_name(m, side, o, i) + " is null");
                        continue;
                    }
                    if (shape) {
                        const auto [d_in, d_out] = shape->module_dims(m);
                        const std::size_t er = side == 'a' ? cfg.rank : d_out, ec = side == 'a' ? d_in : cfg.rank;
                        if (p->rows() != er || p->cols() != ec) {
                            v.push_back("registry " + param_name(m, side, o, i) + " has shape " + p->shape() +
                                        ", expected " + Matrix::shape_str(er, ec));
                        }
                    }
                }
            }
        };
        check_sets(mit->second.a_sets, lay.distinct_a(), 'a', cfg.a_count());
        check_sets(mit->second.b_sets, lay.distinct_b(), 'b', cfg.b_count());
    }
    return v;
}

struct AdapterParamReport {
    std::size_t a_params = 0;
    std::size_t b_params = 0;
    std::size_t total_params = 0;
    double percent_of_base = 0.0;
};

// Exact trainable-parameter count: sums the shapes of all distinct (deduplicated
// by sharing) A and B matrices over the target modules, without allocating them.
inline AdapterParamReport param_count(const ModelShape& shape, const AdapterConfig& cfg, const SharingLayout& layout) {
    cfg.validate();
    AdapterParamReport rep;
    const std::size_t na = layout.distinct_a().size(), nb = layout.distinct_b().size();
    for (ModuleKind m : cfg.target_modules) {
        if (!shape.has_module(m)) {
            throw ConfigError("target module '" + std::string(to_string(m)) + "' does not exist in the model shape");
        }
        const auto [d_in, d_out] = shape.module_dims(m);
        rep.a_params += na * cfg.a_count() * cfg.rank * d_in;
        rep.b_params += nb * cfg.b_count() * d_out * cfg.rank;
    }
    rep.total_params = rep.a_params + rep.b_params;
    rep.percent_of_base = 100.0 * static_cast<double>(rep.total_params) / shape.reporting_base();
    return rep;
}

// Same count by walking a materialized registry.
inline std::size_t registry_param_count(const SharingPlan& plan) {
    std::size_t n = 0;
    for (const auto& [name, p] : plan.named_parameters()) n += p->size();
    return n;
}

} // namespace masa
