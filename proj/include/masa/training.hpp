#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "masa/graph.hpp"
#include "masa/model.hpp"
#include "masa/rng.hpp"

namespace masa {

// ---- synthetic multi-task data -------------------------------------------------

struct DatasetSpec {
    std::size_t n_tasks = 3;
    std::size_t samples_per_task = 64;
    std::size_t seq_len = 8;
    std::size_t input_dim = 8;
    std::size_t teacher_delta_rank = 2;
    double teacher_delta_scale = 1.0;
    double noise_std = 0.0;
    double task_input_shift = 1.0; // stddev of the per-task mean offset of the inputs
    std::uint64_t seed = 1;

    void validate() const {
        if (n_tasks == 0) throw ConfigError("dataset.n_tasks must be >= 1");
        if (samples_per_task == 0) throw ConfigError("dataset.samples_per_task must be >= 1");
        if (seq_len == 0) throw ConfigError("dataset.seq_len must be >= 1");
        if (input_dim == 0) throw ConfigError("dataset.input_dim must be >= 1");
        if (teacher_delta_rank == 0) throw ConfigError("dataset.teacher_delta_rank must be >= 1");
        if (!(noise_std >= 0.0)) throw ConfigError("dataset.noise_std must be >= 0");
        if (!(teacher_delta_scale >= 0.0)) throw ConfigError("dataset.teacher_delta_scale must be >= 0");
        if (!(task_input_shift >= 0.0)) throw ConfigError("dataset.task_input_shift must be >= 0");
    }
};

// Samples are stored round-robin by task: sample i belongs to task i % n_tasks.
struct Dataset {
    DatasetSpec spec;
    Matrix inputs;  // [n x seq_len*input_dim]
    Matrix targets; // [n x output_dim]
    std::vector<int> task_ids;

    std::size_t size() const { return task_ids.size(); }
    std::size_t seq_len() const { return spec.seq_len; }
};

// Per task t, the teacher is the frozen model with every q/k/v weight perturbed
// by teacher_delta_scale * B_t A_t (rank teacher_delta_rank). Inputs are standard
// normal tokens shifted by a per-task mean; targets are teacher outputs plus
// N(0, noise_std^2) noise.
inline Dataset gen_multitask_dataset(const DatasetSpec& spec, const FrozenTransformer& base) {
    spec.validate();
    const ModelShape& shape = base.shape;
    if (spec.input_dim != shape.input_dim) {
        throw ConfigError("dataset.input_dim (" + std::to_string(spec.input_dim) + ") != model.input_dim (" +
                          std::to_string(shape.input_dim) + ")");
    }
    const Rng root(spec.seed, "dataset");
    const std::size_t T = spec.n_tasks, per = spec.samples_per_task, n = T * per;
    const std::size_t width = spec.seq_len * spec.input_dim;
    Dataset ds;
    ds.spec = spec;
    ds.inputs = Matrix(n, width);
    ds.targets = Matrix(n, shape.output_dim);
    ds.task_ids.resize(n);
    for (std::size_t t = 0; t < T; ++t) {
        const std::string tl = "task." + std::to_string(t);
        FrozenTransformer teacher = base;
        for (std::size_t l = 0; l < shape.n_layers; ++l) {
            for (ModuleKind m : {ModuleKind::q, ModuleKind::k, ModuleKind::v}) {
                const auto [d_in, d_out] = shape.module_dims(m);
                Rng dr = root.fork(tl + ".delta." + std::to_string(l) + "." + std::string(to_string(m)));
                const std::size_t rt = spec.teacher_delta_rank;
                const Matrix a = random_normal(rt, d_in, dr);
                const Matrix b = random_normal(d_out, rt, dr, 1.0 / std::sqrt(static_cast<double>(rt * d_in)));
                teacher.layers[l].weight(m) += matmul(b, a) * spec.teacher_delta_scale;
            }
        }
        Rng ir = root.fork(tl + ".inputs");
        std::vector<double> shift(spec.input_dim);
        for (double& s : shift) s = spec.task_input_shift * ir.normal();
        Matrix x(per, width);
        for (std::size_t i = 0; i < per; ++i)
            for (std::size_t c = 0; c < width; ++c) x(i, c) = ir.normal() + shift[c % spec.input_dim];
        const Matrix y = base_forward(teacher, x, spec.seq_len);
        Rng nr = root.fork(tl + ".noise");
        for (std::size_t i = 0; i < per; ++i) {
            const std::size_t row = i * T + t;
            ds.task_ids[row] = static_cast<int>(t);
            std::copy(x.row(i).begin(), x.row(i).end(), ds.inputs.row(row).begin());
            for (std::size_t c = 0; c < shape.output_dim; ++c) {
                ds.targets(row, c) = y(i, c) + (spec.noise_std > 0.0 ? spec.noise_std * nr.normal() : 0.0);
            }
        }
    }
    return ds;
}

// ---- optimizer -------------------------------------------------------------------

struct AdamWConfig {
    double lr = 5e-5;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::size_t step = 0;
};

// Decoupled weight decay, then the bias-corrected Adam update.
inline void adamw_step(std::span<const ParamPtr> params, std::span<const Matrix> grads, OptimState& state,
                       const AdamWConfig& cfg) {
    if (params.size() != grads.size()) {
        throw ContractError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                            std::to_string(grads.size()) + " gradients");
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p->rows(), p->cols());
            state.v.emplace_back(p->rows(), p->cols());
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& w = *params[i];
        const Matrix& g = grads[i];
        if (!w.same_shape(g) || !w.same_shape(state.m[i])) {
            throw ContractError("adamw_step: parameter " + std::to_string(i) + " " + w.shape() + " vs gradient " +
                                g.shape());
        }
        Matrix& m = state.m[i];
        Matrix& v = state.v[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            w[k] -= cfg.lr * cfg.weight_decay * w[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            w[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be >= 1");
    if (step > total_steps) throw ContractError("cosine_lr: step beyond total_steps");
    return base_lr * 0.5 *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ---- training loop -----------------------------------------------------------------

struct TrainConfig {
    double lr = 5e-5;
    std::size_t batch_size = 8;
    std::size_t epochs = 5;
    std::size_t grad_accumulation = 8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    bool deterministic = true;
    bool shuffle = true;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
        if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
        if (grad_accumulation == 0) throw ConfigError("train.grad_accumulation must be >= 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    }
};

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct EvalReport {
    std::vector<double> per_task; // MSE per task id
    double mean = 0.0;            // unweighted mean over tasks
};

struct EvalRecord {
    std::size_t step = 0;
    EvalReport report;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
};

// Per-task mean over samples and output columns of squared error.
inline EvalReport evaluate_predictions(const Matrix& predictions, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
    predictions.require_same(ds.targets, "evaluate");
    std::vector<double> sums(ds.spec.n_tasks, 0.0);
    std::vector<std::size_t> counts(ds.spec.n_tasks, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto t = static_cast<std::size_t>(ds.task_ids[i]);
        for (std::size_t c = 0; c < predictions.cols(); ++c) {
            const double d = predictions(i, c) - ds.targets(i, c);
            sums[t] += d * d;
        }
        counts[t] += predictions.cols();
    }
    EvalReport rep;
    for (std::size_t t = 0; t < sums.size(); ++t) {
        rep.per_task.push_back(counts[t] ? sums[t] / static_cast<double>(counts[t]) : 0.0);
        rep.mean += rep.per_task.back();
    }
    rep.mean /= static_cast<double>(rep.per_task.size());
    return rep;
}

namespace detail {

template <class Fn>
Matrix predict_in_chunks(const Dataset& ds, std::size_t chunk, Fn&& fn) {
    Matrix out(ds.size(), ds.targets.cols());
    for (std::size_t b = 0; b < ds.size(); b += chunk) {
        const std::size_t e = std::min(ds.size(), b + chunk);
        const Matrix y = fn(row_slice(ds.inputs, b, e));
        std::copy(y.data().begin(), y.data().end(), out.row(b).begin());
    }
    return out;
}

} // namespace detail

inline EvalReport evaluate(const AdaptedModel& model, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
    return evaluate_predictions(
        detail::predict_in_chunks(ds, 64, [&](const Matrix& x) { return forward(model, x, ds.seq_len()).outputs; }),
        ds);
}

inline EvalReport evaluate(const FrozenTransformer& base, const Dataset& ds) {
    if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
    return evaluate_predictions(
        detail::predict_in_chunks(ds, 64, [&](const Matrix& x) { return base_forward(base, x, ds.seq_len()); }), ds);
}

namespace detail {

// Epoch order: each task's samples in (optionally shuffled) order, interleaved
// round-robin across tasks.
inline std::vector<std::size_t> epoch_order(const Dataset& ds, const TrainConfig& cfg, std::size_t epoch,
                                            std::uint64_t nondeterministic_seed) {
    const std::size_t T = ds.spec.n_tasks;
    std::vector<std::vector<std::size_t>> by_task(T);
    for (std::size_t i = 0; i < ds.size(); ++i) by_task[static_cast<std::size_t>(ds.task_ids[i])].push_back(i);
    if (cfg.shuffle) {
        const std::uint64_t seed = cfg.deterministic ? cfg.seed : nondeterministic_seed;
        for (std::size_t t = 0; t < T; ++t) {
            Rng r(seed, "shuffle.epoch." + std::to_string(epoch) + ".task." + std::to_string(t));
            auto& v = by_task[t];
            for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[r.below(i)]);
        }
    }
    std::vector<std::size_t> order;
    order.reserve(ds.size());
    for (std::size_t k = 0; order.size() < ds.size(); ++k)
        for (std::size_t t = 0; t < T; ++t)
            if (k < by_task[t].size()) order.push_back(by_task[t][k]);
    return order;
}

} // namespace detail

// Optimizes the adapter registry of `model` in place; the frozen base is never
// written. Each optimizer step consumes batch_size * grad_accumulation samples;
// micro-batch losses are weighted by their share of the step so the update equals
// the gradient of the mean loss over the whole step.
inline TrainLog train(AdaptedModel& model, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.size() == 0) throw ContractError("train: empty dataset");
    TrainLog log;
    if (cfg.epochs == 0) return log;

    const auto named = model.plan.named_parameters();
    std::vector<ParamPtr> params;
    std::unordered_map<const Matrix*, std::size_t> index;
    for (const auto& [name, p] : named) {
        index.emplace(p.get(), params.size());
        params.push_back(p);
    }
    const std::size_t step_samples = cfg.batch_size * cfg.grad_accumulation;
    const std::size_t steps_per_epoch = (ds.size() + step_samples - 1) / step_samples;
    const std::size_t total = cfg.epochs * steps_per_epoch;
    const std::uint64_t nd_seed = cfg.deterministic ? 0 : std::random_device{}();
    OptimState state;
    AdamWConfig opt{cfg.lr, cfg.weight_decay};
    std::size_t step = 0;

    auto offending_parameter = [&]() -> std::string {
        for (const auto& [name, p] : named)
            if (!p->all_finite()) return name;
        std::string worst = named.empty() ? "<none>" : named.front().first;
        double mx = -1.0;
        for (const auto& [name, p] : named)
            if (max_abs(*p) > mx) {
                mx = max_abs(*p);
                worst = name;
            }
        return worst;
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = detail::epoch_order(ds, cfg, epoch, nd_seed);
        for (std::size_t s0 = 0; s0 < order.size(); s0 += step_samples, ++step) {
            const std::size_t s1 = std::min(order.size(), s0 + step_samples);
            const double step_rows = static_cast<double>(s1 - s0);
            std::vector<Matrix> grads;
            for (const auto& p : params) grads.emplace_back(p->rows(), p->cols());
            double loss = 0.0;
            try {
                for (std::size_t b0 = s0; b0 < s1; b0 += cfg.batch_size) {
                    const std::size_t b1 = std::min(s1, b0 + cfg.batch_size);
                    const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
                    const Matrix x = gather_rows(ds.inputs, idx);
                    const Matrix y = gather_rows(ds.targets, idx);
                    Graph g;
                    const Var out = forward_graph(g, *model.base, &model.plan, x, ds.seq_len());
                    const Var l = g.scale(g.mse(out, y), static_cast<double>(b1 - b0) / step_rows);
                    g.backward(l);
                    loss += g.value(l)[0];
                    for (auto& [p, gr] : g.parameter_grads()) grads[index.at(p.get())] += gr;
                }
                if (!std::isfinite(loss)) throw NumericError("non-finite loss");
                opt.lr = cosine_lr(step, total, cfg.lr);
                log.steps.push_back({step, opt.lr, loss});
                adamw_step(params, grads, state, opt);
                for (const auto& [name, p] : named)
                    if (!p->all_finite()) throw NumericError("parameter became non-finite");
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what() +
                                   " (parameter " + offending_parameter() + ")");
            }
        }
        log.evals.push_back({step, evaluate(model, ds)});
    }
    return log;
}

} // namespace masa
