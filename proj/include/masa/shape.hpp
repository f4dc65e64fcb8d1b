#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>

#include "masa/errors.hpp"

namespace masa {

// Projections of a transformer block that can carry an adapter.
enum class ModuleKind { q, k, v, o, ffn_gate, ffn_up, ffn_down };

inline constexpr std::array<ModuleKind, 7> kAllModules = {ModuleKind::q,        ModuleKind::k,      ModuleKind::v,
                                                          ModuleKind::o,        ModuleKind::ffn_gate,
                                                          ModuleKind::ffn_up,   ModuleKind::ffn_down};

inline std::string_view to_string(ModuleKind m) {
    switch (m) {
    case ModuleKind::q: return "q";
    case ModuleKind::k: return "k";
    case ModuleKind::v: return "v";
    case ModuleKind::o: return "o";
    case ModuleKind::ffn_gate: return "ffn_gate";
    case ModuleKind::ffn_up: return "ffn_up";
    case ModuleKind::ffn_down: return "ffn_down";
    }
    return "?";
}

inline ModuleKind parse_module(std::string_view s) {
    for (ModuleKind m : kAllModules)
        if (to_string(m) == s) return m;
    throw ConfigError("unknown target module '" + std::string(s) + "'");
}

inline std::size_t module_index(ModuleKind m) { return static_cast<std::size_t>(m); }

// Dimensions of a (possibly reference-scale) transformer. base_param_count is only
// used for percentage reporting; 0 means "count the instantiated toy model".
struct ModelShape {
    std::size_t n_layers = 4;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t kv_width = 32;
    std::size_t d_ff = 64;
    std::size_t input_dim = 8;
    std::size_t output_dim = 4;
    double base_param_count = 0.0;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t n_kv_heads() const { return kv_width / head_dim(); }
    bool has_ffn() const { return d_ff > 0; }

    void validate() const {
        if (n_layers == 0) throw ConfigError("model.n_layers must be >= 1");
        if (d_model == 0 || n_heads == 0) throw ConfigError("model.d_model and model.n_heads must be >= 1");
        if (d_model % n_heads != 0) {
            throw ConfigError("model.d_model (" + std::to_string(d_model) + ") is not divisible by model.n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (kv_width == 0 || kv_width > d_model || kv_width % head_dim() != 0) {
            throw ConfigError("model.kv_width (" + std::to_string(kv_width) +
                              ") must be a positive multiple of the head dim and <= d_model");
        }
        if (n_heads % n_kv_heads() != 0) throw ConfigError("model.n_heads must be a multiple of the KV head count");
        if (base_param_count < 0.0) throw ConfigError("model.base_param_count must be >= 0");
    }

    bool has_module(ModuleKind m) const {
        switch (m) {
        case ModuleKind::ffn_gate:
        case ModuleKind::ffn_up:
        case ModuleKind::ffn_down: return has_ffn();
        default: return true;
        }
    }

    // (d_in, d_out) of the frozen weight W[d_out x d_in] wrapped by module m.
    std::pair<std::size_t, std::size_t> module_dims(ModuleKind m) const {
        switch (m) {
        case ModuleKind::q: return {d_model, d_model};
        case ModuleKind::k:
        case ModuleKind::v: return {d_model, kv_width};
        case ModuleKind::o: return {d_model, d_model};
        case ModuleKind::ffn_gate:
        case ModuleKind::ffn_up: return {d_model, d_ff};
        case ModuleKind::ffn_down: return {d_ff, d_model};
        }
        return {0, 0};
    }

    // Weights of the instantiated toy: input embedding, seven projections and two
    // norm gains per layer, final norm gain, read-out.
    double instantiated_param_count() const {
        double per_layer = 2.0 * static_cast<double>(d_model);
        for (ModuleKind m : kAllModules) {
            if (!has_module(m)) continue;
            auto [din, dout] = module_dims(m);
            per_layer += static_cast<double>(din * dout);
        }
        return static_cast<double>(d_model * input_dim) + static_cast<double>(n_layers) * per_layer +
               static_cast<double>(d_model) + static_cast<double>(output_dim * d_model);
    }

    double reporting_base() const { return base_param_count > 0.0 ? base_param_count : instantiated_param_count(); }

    // LLaMA3-8B projection shapes, for parameter accounting only.
    static ModelShape llama3_8b() {
        ModelShape s;
        s.n_layers = 32;
        s.d_model = 4096;
        s.n_heads = 32;
        s.kv_width = 1024;
        s.d_ff = 14336;
        s.input_dim = 4096;
        s.output_dim = 4096;
        s.base_param_count = 8.03e9;
        return s;
    }
};

} // namespace masa
