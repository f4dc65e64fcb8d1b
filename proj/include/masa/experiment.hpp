#pragma once

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "masa/analysis.hpp"
#include "masa/csv.hpp"
#include "masa/training.hpp"

namespace masa {

namespace fs = std::filesystem;

inline const std::set<std::string> kAnalyses{"params", "cka", "ceiling", "rank", "features"};

// One experiment. The master seed drives the frozen model, adapter init and
// batch shuffling; dataset.seed drives the synthetic tasks.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    ModelShape model;
    AdapterConfig adapter;
    SharingStrategy sharing{SharingKind::share_a, 2};
    DatasetSpec dataset;
    TrainConfig train;
    std::set<std::string> analyses{kAnalyses};
    std::vector<std::uint64_t> sweep_seeds{0};

    DatasetSpec dataset_spec() const {
        DatasetSpec d = dataset;
        d.input_dim = model.input_dim;
        return d;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = seed;
        return t;
    }

    void validate() const {
        model.validate();
        adapter.validate();
        sharing.validate();
        dataset_spec().validate();
        train.validate();
        for (const auto& a : analyses)
            if (!kAnalyses.count(a)) throw ConfigError("analyses: unknown analysis '" + a + "'");
        if (sweep_seeds.empty()) throw ConfigError("sweep_seeds must not be empty");
        for (ModuleKind m : adapter.target_modules)
            if (!model.has_module(m)) {
                throw ConfigError("adapter.target_modules: '" + std::string(to_string(m)) + "' absent when model.d_ff is 0");
            }
        for (ModuleKind m : adapter.target_modules) {
            const auto [d_in, d_out] = model.module_dims(m);
            if (adapter.rank > std::min(d_in, d_out)) {
                throw ConfigError("adapter.rank " + std::to_string(adapter.rank) + " exceeds min(d_in, d_out) of module '" +
                                  std::string(to_string(m)) + "'");
            }
        }
    }
};

// ---- strict JSON mapping ------------------------------------------------------------

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

namespace detail {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + "expected an object");
    }

    const Json* find(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void get(const char* key, std::size_t& out) {
        if (const Json* v = find(key)) {
            if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
                throw ConfigError(at(key) + ": expected a non-negative integer");
            }
            out = v->get<std::size_t>();
        }
    }
    void get(const char* key, double& out) {
        if (const Json* v = find(key)) {
            if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
            out = v->get<double>();
        }
    }
    void get(const char* key, bool& out) {
        if (const Json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const Json* v = find(key)) {
            if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
            out = v->get<std::string>();
        }
    }
    template <class Parse, class T>
    void get_enum(const char* key, T& out, Parse parse) {
        std::string s;
        get(key, s);
        if (!find(key)) return;
        try {
            out = parse(s);
        } catch (const ConfigError& e) {
            throw ConfigError(at(key) + ": " + e.what());
        }
    }
    const Json* array(const char* key) {
        const Json* v = find(key);
        if (v && !v->is_array()) throw ConfigError(at(key) + ": expected an array");
        return v;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key '" + at(it.key().c_str()) + "'");
    }

private:
    std::string where() const { return path_.empty() ? "" : path_ + ": "; }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& root) {
    using detail::ObjectReader;
    ExperimentConfig c;
    ObjectReader top(root, "");
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    if (const auto* j = top.find("model")) {
        ObjectReader r(*j, "model");
        r.get("n_layers", c.model.n_layers);
        r.get("d_model", c.model.d_model);
        r.get("n_heads", c.model.n_heads);
        r.get("kv_width", c.model.kv_width);
        r.get("d_ff", c.model.d_ff);
        r.get("input_dim", c.model.input_dim);
        r.get("output_dim", c.model.output_dim);
        r.get("base_param_count", c.model.base_param_count);
        r.finish();
    }
    if (const auto* j = top.find("adapter")) {
        ObjectReader r(*j, "adapter");
        r.get_enum("variant", c.adapter.variant, parse_variant);
        r.get("rank", c.adapter.rank);
        r.get("alpha", c.adapter.alpha);
        r.get("num_experts", c.adapter.num_experts);
        if (const auto* mods = r.array("target_modules")) {
            c.adapter.target_modules.clear();
            for (const auto& m : *mods) {
                if (!m.is_string()) throw ConfigError("adapter.target_modules: expected strings");
                try {
                    c.adapter.target_modules.push_back(parse_module(m.get<std::string>()));
                } catch (const ConfigError& e) {
                    throw ConfigError(std::string("adapter.target_modules: ") + e.what());
                }
            }
        }
        r.finish();
    }
    if (const auto* j = top.find("sharing")) {
        ObjectReader r(*j, "sharing");
        r.get_enum("strategy", c.sharing.kind, parse_sharing_kind);
        r.get("group_size", c.sharing.group_size);
        r.finish();
    }
    if (const auto* j = top.find("dataset")) {
        ObjectReader r(*j, "dataset");
        r.get("n_tasks", c.dataset.n_tasks);
        r.get("samples_per_task", c.dataset.samples_per_task);
        r.get("seq_len", c.dataset.seq_len);
        r.get("teacher_delta_rank", c.dataset.teacher_delta_rank);
        r.get("teacher_delta_scale", c.dataset.teacher_delta_scale);
        r.get("noise_std", c.dataset.noise_std);
        r.get("task_input_shift", c.dataset.task_input_shift);
        r.get("seed", c.dataset.seed);
        r.finish();
    }
    if (const auto* j = top.find("train")) {
        ObjectReader r(*j, "train");
        r.get("lr", c.train.lr);
        r.get("batch_size", c.train.batch_size);
        r.get("epochs", c.train.epochs);
        r.get("grad_accumulation", c.train.grad_accumulation);
        r.get("weight_decay", c.train.weight_decay);
        r.get("deterministic", c.train.deterministic);
        r.get("shuffle", c.train.shuffle);
        r.finish();
    }
    if (const auto* arr = top.array("analyses")) {
        c.analyses.clear();
        for (const auto& a : *arr) {
            if (!a.is_string()) throw ConfigError("analyses: expected strings");
            c.analyses.insert(a.get<std::string>());
        }
    }
    if (const auto* arr = top.array("sweep_seeds")) {
        c.sweep_seeds.clear();
        for (const auto& s : *arr) {
            if (!s.is_number_integer() || s.get<std::int64_t>() < 0) {
                throw ConfigError("sweep_seeds: expected non-negative integers");
            }
            c.sweep_seeds.push_back(s.get<std::uint64_t>());
        }
    }
    top.finish();
    c.validate();
    return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    return config_from_json(j);
}

inline std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline ExperimentConfig load_config(const fs::path& path) {
    const std::string text = read_text(path);
    try {
        return parse_config(text);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// Canonical serialization: fixed key order, two-space indent, trailing newline.
inline std::string config_to_json(const ExperimentConfig& c) {
    detail::OrderedJson j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["model"] = {{"n_layers", c.model.n_layers},   {"d_model", c.model.d_model},
                  {"n_heads", c.model.n_heads},     {"kv_width", c.model.kv_width},
                  {"d_ff", c.model.d_ff},           {"input_dim", c.model.input_dim},
                  {"output_dim", c.model.output_dim}, {"base_param_count", c.model.base_param_count}};
    std::vector<std::string> mods;
    for (ModuleKind m : c.adapter.target_modules) mods.emplace_back(to_string(m));
    j["adapter"] = {{"variant", std::string(to_string(c.adapter.variant))},
                    {"rank", c.adapter.rank},
                    {"alpha", c.adapter.alpha},
                    {"num_experts", c.adapter.num_experts},
                    {"target_modules", mods}};
    j["sharing"] = {{"strategy", std::string(to_string(c.sharing.kind))}, {"group_size", c.sharing.group_size}};
    j["dataset"] = {{"n_tasks", c.dataset.n_tasks},
                    {"samples_per_task", c.dataset.samples_per_task},
                    {"seq_len", c.dataset.seq_len},
                    {"teacher_delta_rank", c.dataset.teacher_delta_rank},
                    {"teacher_delta_scale", c.dataset.teacher_delta_scale},
                    {"noise_std", c.dataset.noise_std},
                    {"task_input_shift", c.dataset.task_input_shift},
                    {"seed", c.dataset.seed}};
    j["train"] = {{"lr", c.train.lr},
                  {"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs},
                  {"grad_accumulation", c.train.grad_accumulation},
                  {"weight_decay", c.train.weight_decay},
                  {"deterministic", c.train.deterministic},
                  {"shuffle", c.train.shuffle}};
    j["analyses"] = std::vector<std::string>(c.analyses.begin(), c.analyses.end());
    j["sweep_seeds"] = c.sweep_seeds;
    return j.dump(2) + "\n";
}

inline std::string digest_hex(std::string_view bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

// ---- building blocks ------------------------------------------------------------------

struct Experiment {
    ExperimentConfig config;
    AdaptedModel model;
    Dataset dataset;
};

inline std::shared_ptr<const FrozenTransformer> build_base(const ExperimentConfig& c) {
    return std::make_shared<const FrozenTransformer>(build_model(c.model, Rng(c.seed, "model")));
}

inline Experiment prepare(const ExperimentConfig& c) {
    c.validate();
    auto base = build_base(c);
    Dataset ds = gen_multitask_dataset(c.dataset_spec(), *base);
    SharingPlan plan = build_sharing_plan(c.model.n_layers, c.sharing, c.adapter, c.model, Rng(c.seed, "adapters"));
    return {c, inject_adapters(std::move(base), std::move(plan)), std::move(ds)};
}

inline AdapterParamReport params_of(const ExperimentConfig& c) {
    return param_count(c.model, c.adapter, plan_layout(c.model.n_layers, c.sharing));
}

// ---- checkpoints ----------------------------------------------------------------------

inline constexpr int kCheckpointFormat = 1;

namespace detail {

inline std::vector<char> to_f32_le(const Matrix& m) {
    std::vector<char> out(m.size() * 4);
    for (std::size_t i = 0; i < m.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(m[i]));
        for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
    return out;
}

inline void from_f32_le(const std::vector<char>& bytes, Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        m[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
}

inline void write_bytes(const fs::path& path, const char* data, std::size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(data, static_cast<std::streamsize>(n));
    if (!f) throw IoError("write failed for " + path.string());
}

} // namespace detail

// Adapters only: the frozen model is rebuilt from the config's seed on load.
inline void save_checkpoint(const SharingPlan& plan, const ExperimentConfig& config, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "tensors", ec);
    if (ec) throw IoError("cannot create " + (dir / "tensors").string() + ": " + ec.message());
    const std::string cfg_text = config_to_json(config);
    CsvWriter::write_file(dir / "config.json", cfg_text);
    detail::OrderedJson tensors = detail::OrderedJson::array();
    for (const auto& [name, p] : plan.named_parameters()) {
        const std::string file = "tensors/" + name + ".f32";
        const auto bytes = detail::to_f32_le(*p);
        detail::write_bytes(dir / file, bytes.data(), bytes.size());
        tensors.push_back({{"name", name},
                           {"shape", {p->rows(), p->cols()}},
                           {"dtype", "float32"},
                           {"byte_order", "little"},
                           {"file", file}});
    }
    detail::OrderedJson layout = detail::OrderedJson::array();
    for (const auto& la : plan.layout.layers) layout.push_back({{"layer", la.layer}, {"a", la.a.label()}, {"b", la.b.label()}});
    detail::OrderedJson manifest;
    manifest["format_version"] = kCheckpointFormat;
    manifest["config_digest"] = digest_hex(cfg_text);
    manifest["tensors"] = tensors;
    manifest["layout"] = layout;
    CsvWriter::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct Checkpoint {
    ExperimentConfig config;
    SharingPlan plan;
};

inline Checkpoint load_checkpoint(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text(mpath));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(mpath.string() + ": malformed manifest: " + e.what());
    }
    auto field = [&](const nlohmann::json& obj, const char* key, const std::string& entry) -> const nlohmann::json& {
        if (!obj.is_object() || !obj.contains(key)) throw IoError(mpath.string() + ": " + entry + " lacks '" + key + "'");
        return obj.at(key);
    };
    if (field(manifest, "format_version", "manifest") != kCheckpointFormat) {
        throw IoError(mpath.string() + ": unsupported format_version");
    }
    const std::string cfg_text = read_text(dir / "config.json");
    if (field(manifest, "config_digest", "manifest") != digest_hex(cfg_text)) {
        throw IoError((dir / "config.json").string() + ": entry 'config.json' does not match the manifest digest");
    }
    Checkpoint ck;
    ck.config = parse_config(cfg_text);
    const ExperimentConfig& c = ck.config;
    ck.plan = build_sharing_plan(c.model.n_layers, c.sharing, c.adapter, c.model, Rng(c.seed, "adapters"));

    std::map<std::string, ParamPtr> expected;
    for (auto& [name, p] : ck.plan.named_parameters()) expected.emplace(name, p);
    std::set<std::string> loaded;
    for (const auto& t : field(manifest, "tensors", "manifest")) {
        const std::string name = field(t, "name", "tensor entry").get<std::string>();
        auto it = expected.find(name);
        if (it == expected.end()) throw IoError(mpath.string() + ": tensor '" + name + "' is not part of the adapter plan");
        const auto& shp = field(t, "shape", "tensor '" + name + "'");
        Matrix& m = *it->second;
        if (shp.size() != 2 || shp[0] != m.rows() || shp[1] != m.cols()) {
            throw IoError(mpath.string() + ": tensor '" + name + "' shape does not match the plan " + m.shape());
        }
        const fs::path file = dir / field(t, "file", "tensor '" + name + "'").get<std::string>();
        std::ifstream f(file, std::ios::binary);
        if (!f) throw IoError("tensor '" + name + "': cannot open " + file.string());
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        if (bytes.size() != m.size() * 4) {
            throw IoError("tensor '" + name + "': " + file.string() + " holds " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(m.size() * 4));
        }
        detail::from_f32_le(bytes, m);
        loaded.insert(name);
    }
    for (const auto& [name, p] : expected)
        if (!loaded.count(name)) throw IoError(mpath.string() + ": tensor '" + name + "' missing from manifest");
    const auto& layout = field(manifest, "layout", "manifest");
    if (layout.size() != ck.plan.layout.layers.size()) throw IoError(mpath.string() + ": layout table size mismatch");
    for (std::size_t l = 0; l < layout.size(); ++l) {
        const auto& la = ck.plan.layout.layers[l];
        if (layout[l].value("a", "") != la.a.label() || layout[l].value("b", "") != la.b.label()) {
            throw IoError(mpath.string() + ": layout entry for layer " + std::to_string(l) + " disagrees with config");
        }
    }
    return ck;
}

// ---- reports --------------------------------------------------------------------------

inline void write_params_csv(const ExperimentConfig& c, const fs::path& path) {
    const AdapterParamReport rep = params_of(c);
    CsvWriter csv({"variant", "strategy", "group_size", "num_experts", "rank", "a_params", "b_params", "total_params",
                   "percent_of_base"});
    csv.row({std::string(to_string(c.adapter.variant)), std::string(to_string(c.sharing.kind)),
             std::to_string(c.sharing.group_size), std::to_string(c.adapter.num_experts),
             std::to_string(c.adapter.rank), std::to_string(rep.a_params), std::to_string(rep.b_params),
             std::to_string(rep.total_params), format_number(rep.percent_of_base)});
    csv.save(path);
}

inline void write_train_csv(const TrainLog& log, const fs::path& path) {
    CsvWriter csv({"step", "lr", "loss"});
    for (const auto& s : log.steps) csv.row({std::to_string(s.step), format_number(s.lr), format_number(s.loss)});
    csv.save(path);
}

inline void write_eval_csv(const EvalReport& rep, const fs::path& path) {
    CsvWriter csv({"task_id", "mse"});
    for (std::size_t t = 0; t < rep.per_task.size(); ++t) csv.row({std::to_string(t), format_number(rep.per_task[t])});
    csv.save(path);
}

inline void write_plan_csv(const SharingPlan& plan, const fs::path& path) {
    CsvWriter csv({"layer", "module", "a_owner", "b_owner"});
    for (const auto& [m, reg] : plan.registry)
        for (const auto& la : plan.layout.layers)
            csv.row({std::to_string(la.layer), std::string(to_string(m)), la.a.label(), la.b.label()});
    csv.save(path);
}

// Runs the requested analyses on a capture of the full dataset.
inline std::vector<std::string> write_analyses(const AdaptedModel& model, const Dataset& ds,
                                               const std::set<std::string>& which, const fs::path& dir) {
    std::vector<std::string> written;
    const bool need_capture = which.count("cka") || which.count("ceiling") || which.count("rank") || which.count("features");
    ForwardResult res;
    if (need_capture) res = forward(model, ds.inputs, ds.seq_len(), {Signal::a_output, Signal::increment, Signal::input});
    if (which.count("cka")) {
        CsvWriter scores({"signal", "module", "layer", "next_layer", "score"});
        CsvWriter summary({"signal", "module", "average"});
        for (Signal s : {Signal::a_output, Signal::increment}) {
            const CkaReport rep = adjacent_layer_cka(res.capture, s);
            for (const auto& [m, v] : rep.scores)
                for (std::size_t l = 0; l < v.size(); ++l) {
                    scores.row({std::string(to_string(s)), std::string(to_string(m)), std::to_string(l),
                                std::to_string(l + 1), format_number(v[l])});
                }
            for (const auto& [m, avg] : rep.averages)
                summary.row({std::string(to_string(s)), std::string(to_string(m)), format_number(avg)});
            summary.row({std::string(to_string(s)), "all", format_number(rep.overall_average)});
        }
        scores.save(dir / "cka.csv");
        summary.save(dir / "cka_summary.csv");
        written.insert(written.end(), {"cka.csv", "cka_summary.csv"});
    }
    if (which.count("ceiling")) {
        CsvWriter csv({"layer", "module", "aggregated_bound_nats", "ensemble_bound_nats", "increment_rank", "rank_limit"});
        for (const CeilingRow& r : ceiling_report(model, res.capture).rows) {
            csv.row({std::to_string(r.layer), std::string(to_string(r.module)), format_number(r.aggregated_bound),
                     format_number(r.ensemble_bound), std::to_string(r.increment_rank), std::to_string(r.rank_limit)});
        }
        csv.save(dir / "ceiling.csv");
        written.push_back("ceiling.csv");
    }
    if (which.count("rank")) {
        CsvWriter csv({"layer", "module", "a_output_rank", "increment_rank", "rank_limit"});
        for (const auto& [key, site] : res.capture.sites) {
            const std::size_t limit = site.a_output.cols();
            csv.row({std::to_string(key.first), std::string(to_string(key.second)),
                     std::to_string(numeric_rank(site.a_output, 1e-9)), std::to_string(numeric_rank(site.increment, 1e-9)),
                     std::to_string(limit)});
        }
        csv.save(dir / "rank.csv");
        written.push_back("rank.csv");
    }
    if (which.count("features")) {
        export_features(res.capture, ds.task_ids, dir / "features.csv");
        written.push_back("features.csv");
    }
    return written;
}

// ---- run -----------------------------------------------------------------------------

struct RunResult {
    Experiment experiment;
    TrainLog log;
    EvalReport final_eval;
    fs::path dir;
};

inline void prepare_output_dir(const fs::path& dir, bool force) {
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
        if (!force) throw IoError("output directory " + dir.string() + " already exists (use --force to overwrite)");
        fs::remove_all(dir, ec);
        if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline RunResult run_experiment(const ExperimentConfig& config, bool force = false) {
    config.validate();
    const fs::path dir = config.output_dir;
    prepare_output_dir(dir, force);
    RunResult r{prepare(config), {}, {}, dir};
    r.log = train(r.experiment.model, r.experiment.dataset, config.train_config());
    r.final_eval = r.log.evals.empty() ? evaluate(r.experiment.model, r.experiment.dataset) : r.log.evals.back().report;

    write_train_csv(r.log, dir / "train.csv");
    write_eval_csv(r.final_eval, dir / "eval.csv");
    write_plan_csv(r.experiment.model.plan, dir / "plan.csv");
    if (config.analyses.count("params")) write_params_csv(config, dir / "params.csv");
    write_analyses(r.experiment.model, r.experiment.dataset, config.analyses, dir);
    save_checkpoint(r.experiment.model.plan, config, dir / "checkpoint");

    detail::OrderedJson summary;
    summary["config_digest"] = digest_hex(config_to_json(config));
    summary["precision"] = "float64";
    summary["device"] = "cpu";
    summary["steps"] = r.log.steps.size();
    summary["final_mean_mse"] = format_number(r.final_eval.mean);
    CsvWriter::write_file(dir / "summary.json", summary.dump(2) + "\n");
    return r;
}

// Reloads a checkpoint, rebuilds model and data from its config and writes the
// requested analyses into out_dir.
inline std::vector<std::string> analyze_checkpoint(const fs::path& checkpoint_dir, const std::set<std::string>& which,
                                                   const fs::path& out_dir) {
    Checkpoint ck = load_checkpoint(checkpoint_dir);
    auto base = build_base(ck.config);
    const Dataset ds = gen_multitask_dataset(ck.config.dataset_spec(), *base);
    const AdaptedModel model = inject_adapters(std::move(base), std::move(ck.plan));
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    return write_analyses(model, ds, which, out_dir);
}

// ---- sweeps ---------------------------------------------------------------------------

inline const std::vector<std::string> kSweepAxes{"num_experts", "num_b_heads", "group_size", "strategy"};

struct SweepRow {
    std::string label;
    std::string value;
    double params_percent = 0.0;
    double mean_mse = 0.0;
};

inline ExperimentConfig apply_axis(ExperimentConfig c, const std::string& axis, const std::string& value) {
    auto as_count = [&]() -> std::size_t {
        std::size_t v = 0;
        const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
        if (ec != std::errc() || p != value.data() + value.size() || v == 0) {
            throw ConfigError("sweep value '" + value + "' for axis " + axis + " is not a positive integer");
        }
        return v;
    };
    const Variant v = c.adapter.variant;
    if (axis == "num_experts") {
        if (v != Variant::multi_a_single_b && v != Variant::multi_pair) {
            throw ConfigError("axis num_experts does not apply to variant " + std::string(to_string(v)));
        }
        c.adapter.num_experts = as_count();
    } else if (axis == "num_b_heads") {
        if (v != Variant::single_a_multi_b) {
            throw ConfigError("axis num_b_heads does not apply to variant " + std::string(to_string(v)));
        }
        c.adapter.num_experts = as_count();
    } else if (axis == "group_size") {
        if (c.sharing.kind == SharingKind::none) throw ConfigError("axis group_size does not apply to strategy none");
        c.sharing.group_size = as_count();
    } else if (axis == "strategy") {
        c.sharing.kind = parse_sharing_kind(value);
    } else {
        throw ConfigError("unknown sweep axis '" + axis + "'");
    }
    c.validate();
    return c;
}

inline double train_and_score(ExperimentConfig c, std::uint64_t seed) {
    c.seed = seed;
    Experiment e = prepare(c);
    const TrainLog log = train(e.model, e.dataset, c.train_config());
    return log.evals.empty() ? evaluate(e.model, e.dataset).mean : log.evals.back().report.mean;
}

// One row per value; mean final MSE over config.sweep_seeds. Runs are independent
// and execute on worker threads.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& axis,
                                   const std::vector<std::string>& values) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::vector<ExperimentConfig> configs;
    for (const auto& v : values) configs.push_back(apply_axis(base, axis, v));
    std::vector<std::vector<std::future<double>>> jobs(configs.size());
    for (std::size_t i = 0; i < configs.size(); ++i)
        for (std::uint64_t s : base.sweep_seeds)
            jobs[i].push_back(std::async(std::launch::async, train_and_score, configs[i], s));
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        double total = 0.0;
        for (auto& f : jobs[i]) total += f.get();
        rows.push_back({axis + "=" + values[i], values[i], params_of(configs[i]).percent_of_base,
                        total / static_cast<double>(jobs[i].size())});
    }
    return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
    CsvWriter csv({"label", "value", "params_percent", "mean_mse"});
    for (const auto& r : rows) csv.row({r.label, r.value, format_number(r.params_percent), format_number(r.mean_mse)});
    return csv.str();
}

} // namespace masa
