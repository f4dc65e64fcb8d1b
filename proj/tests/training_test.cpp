#include <gtest/gtest.h>

#include "masa/training.hpp"

namespace masa {
namespace {

ModelShape tiny_shape() {
    ModelShape s;
    s.n_layers = 2;
    s.d_model = 16;
    s.n_heads = 2;
    s.kv_width = 16;
    s.d_ff = 24;
    s.input_dim = 4;
    s.output_dim = 3;
    return s;
}

DatasetSpec tiny_spec(std::size_t per_task = 16) {
    DatasetSpec d;
    d.samples_per_task = per_task;
    d.seq_len = 4;
    d.input_dim = 4;
    return d;
}

std::shared_ptr<const FrozenTransformer> make_base(const ModelShape& s, std::uint64_t seed = 1) {
    return std::make_shared<const FrozenTransformer>(build_model(s, Rng(seed, "model")));
}

AdaptedModel adapt(std::shared_ptr<const FrozenTransformer> base, Variant v, std::size_t r = 2,
                   SharingStrategy st = {SharingKind::share_a, 2}, std::uint64_t seed = 1) {
    AdapterConfig c;
    c.variant = v;
    c.rank = r;
    c.num_experts = v == Variant::lora ? 1 : 3;
    return inject_adapters(base, build_sharing_plan(base->shape.n_layers, st, c, base->shape, Rng(seed, "adapters")));
}

std::vector<Matrix> snapshot_params(const SharingPlan& plan) {
    std::vector<Matrix> out;
    for (const auto& [name, p] : plan.named_parameters()) out.push_back(*p);
    return out;
}

TEST(Dataset, DegenerateTeacherMatchesBase) {
    const auto base = make_base(tiny_shape());
    DatasetSpec spec = tiny_spec();
    spec.teacher_delta_scale = 0.0;
    const Dataset ds = gen_multitask_dataset(spec, *base);
    EXPECT_EQ(ds.targets, base_forward(*base, ds.inputs, spec.seq_len));
    EXPECT_EQ(evaluate(adapt(base, Variant::multi_a_single_b), ds).mean, 0.0);
    for (double m : evaluate(*base, ds).per_task) EXPECT_EQ(m, 0.0);
}

TEST(Dataset, Counts) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(100), *base);
    EXPECT_EQ(ds.size(), 300u);
    EXPECT_EQ(ds.inputs.rows(), 300u);
    EXPECT_EQ(ds.inputs.cols(), 16u);
    std::vector<int> counts(3, 0);
    for (int t : ds.task_ids) ++counts[static_cast<std::size_t>(t)];
    EXPECT_EQ(counts, (std::vector<int>{100, 100, 100}));
    EXPECT_EQ(ds.task_ids[4], 1);
}

TEST(Dataset, ReplayAndSeedSensitivity) {
    const auto base = make_base(tiny_shape());
    const Dataset a = gen_multitask_dataset(tiny_spec(), *base), b = gen_multitask_dataset(tiny_spec(), *base);
    EXPECT_EQ(a.inputs, b.inputs);
    EXPECT_EQ(a.targets, b.targets);
    DatasetSpec other = tiny_spec();
    other.seed = 2;
    EXPECT_FALSE(gen_multitask_dataset(other, *base).targets == a.targets);
}

TEST(Dataset, Validation) {
    const auto base = make_base(tiny_shape());
    DatasetSpec s = tiny_spec();
    s.n_tasks = 0;
    EXPECT_THROW(gen_multitask_dataset(s, *base), ConfigError);
    s = tiny_spec();
    s.noise_std = -1.0;
    EXPECT_THROW(gen_multitask_dataset(s, *base), ConfigError);
    s = tiny_spec();
    s.input_dim = 5;
    EXPECT_THROW(gen_multitask_dataset(s, *base), ConfigError);
}

TEST(AdamW, DecayOnlyFirstStep) {
    auto p = std::make_shared<Matrix>(Matrix{{1.0, -2.0}, {0.5, 4.0}});
    const Matrix before = *p;
    OptimState st;
    const std::vector<ParamPtr> params{p};
    const std::vector<Matrix> grads{Matrix(2, 2)};
    adamw_step(params, grads, st, {0.1, 0.01});
    EXPECT_EQ(*p, before * (1.0 - 0.1 * 0.01));
}

TEST(AdamW, FirstStepMovesByLr) {
    auto p = std::make_shared<Matrix>(Matrix{{0.3}});
    OptimState st;
    const std::vector<ParamPtr> params{p};
    adamw_step(params, std::vector<Matrix>{Matrix{{-7.0}}}, st, {0.01});
    EXPECT_NEAR((*p)[0], 0.31, 1e-9);
}

// Straight-line transcription of the recurrences on scalars.
TEST(AdamW, MatchesTranscriptionOracle) {
    Rng rng(3, "adamw");
    const std::size_t n = 6;
    auto p = std::make_shared<Matrix>(random_normal(2, 3, rng));
    std::vector<double> w(p->data().begin(), p->data().end()), m(n, 0.0), v(n, 0.0);
    OptimState st;
    const AdamWConfig cfg{0.02, 0.1};
    const std::vector<ParamPtr> params{p};
    for (int t = 1; t <= 100; ++t) {
        const Matrix g = random_normal(2, 3, rng);
        adamw_step(params, std::vector<Matrix>{g}, st, cfg);
        for (std::size_t k = 0; k < n; ++k) {
            w[k] = w[k] * (1.0 - 0.02 * 0.1);
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            const double mh = m[k] / (1.0 - std::pow(0.9, t));
            const double vh = v[k] / (1.0 - std::pow(0.999, t));
            w[k] = w[k] - 0.02 * mh / (std::sqrt(vh) + 1e-8);
        }
    }
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR((*p)[k], w[k], 1e-12);
    for (const Matrix& vm : st.v)
        for (double x : vm.data()) EXPECT_GE(x, 0.0);
    EXPECT_EQ(st.step, 100u);
}

TEST(AdamW, ShapeMismatch) {
    auto p = std::make_shared<Matrix>(2, 2);
    OptimState st;
    const std::vector<ParamPtr> params{p};
    EXPECT_THROW(adamw_step(params, std::vector<Matrix>{Matrix(2, 3)}, st, {}), ContractError);
    EXPECT_THROW(adamw_step(params, std::vector<Matrix>{}, st, {}), ContractError);
}

TEST(CosineLr, Endpoints) {
    EXPECT_EQ(cosine_lr(0, 10, 0.5), 0.5);
    EXPECT_NEAR(cosine_lr(10, 10, 0.5), 0.0, 1e-17);
    EXPECT_NEAR(cosine_lr(5, 10, 0.5), 0.25, 1e-15);
    EXPECT_THROW(cosine_lr(0, 0, 0.5), ContractError);
    EXPECT_THROW(cosine_lr(11, 10, 0.5), ContractError);
}

TEST(Train, ZeroEpochs) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(), *base);
    AdaptedModel am = adapt(base, Variant::multi_a_single_b);
    const auto before = snapshot_params(am.plan);
    TrainConfig cfg;
    cfg.epochs = 0;
    const TrainLog log = train(am, ds, cfg);
    EXPECT_TRUE(log.steps.empty());
    EXPECT_EQ(snapshot_params(am.plan), before);
}

TEST(Train, DeterministicReplay) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(), *base);
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.grad_accumulation = 2;
    cfg.seed = 7;
    AdaptedModel a = adapt(base, Variant::multi_a_single_b), b = adapt(base, Variant::multi_a_single_b);
    const TrainLog la = train(a, ds, cfg), lb = train(b, ds, cfg);
    EXPECT_EQ(snapshot_params(a.plan), snapshot_params(b.plan));
    ASSERT_EQ(la.steps.size(), lb.steps.size());
    for (std::size_t i = 0; i < la.steps.size(); ++i) {
        EXPECT_EQ(la.steps[i].loss, lb.steps[i].loss);
        EXPECT_EQ(la.steps[i].lr, lb.steps[i].lr);
        EXPECT_EQ(la.steps[i].step, i);
    }
    EXPECT_EQ(la.evals.size(), 2u);
}

TEST(Train, FirstLossEqualsBaseEvaluation) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(8), *base);
    AdaptedModel am = adapt(base, Variant::single_a_multi_b);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.grad_accumulation = 3; // one step covers the whole dataset
    cfg.epochs = 1;
    const TrainLog log = train(am, ds, cfg);
    ASSERT_EQ(log.steps.size(), 1u);
    EXPECT_NEAR(log.steps[0].loss, evaluate(*base, ds).mean, 1e-12);
}

TEST(Train, FrozenBaseUntouched) {
    const auto base = make_base(tiny_shape());
    const FrozenTransformer copy = *base;
    const Dataset ds = gen_multitask_dataset(tiny_spec(), *base);
    AdaptedModel am = adapt(base, Variant::multi_pair);
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.epochs = 2;
    cfg.grad_accumulation = 1;
    const auto before = snapshot_params(am.plan);
    train(am, ds, cfg);
    EXPECT_EQ(*base, copy);
    EXPECT_NE(snapshot_params(am.plan), before);
}

TEST(Train, GradientAccumulationEquivalence) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(20), *base);
    TrainConfig acc;
    acc.lr = 5e-3;
    acc.epochs = 2;
    acc.batch_size = 4;
    acc.grad_accumulation = 4;
    TrainConfig full = acc;
    full.batch_size = 16;
    full.grad_accumulation = 1;
    AdaptedModel a = adapt(base, Variant::multi_a_single_b), b = adapt(base, Variant::multi_a_single_b);
    const TrainLog la = train(a, ds, acc), lb = train(b, ds, full);
    ASSERT_EQ(la.steps.size(), lb.steps.size());
    for (std::size_t i = 0; i < la.steps.size(); ++i) {
        EXPECT_LE(std::abs(la.steps[i].loss - lb.steps[i].loss), 1e-9 * std::abs(lb.steps[i].loss));
    }
    const auto pa = snapshot_params(a.plan), pb = snapshot_params(b.plan);
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_LE(relative_error(pa[i], pb[i]), 1e-9);
}

// Property: full-data loss at least halves for every variant at r=4 over 5 seeds.
TEST(Train, LossDecreasesForEveryVariant) {
    const ModelShape s; // desk default
    for (Variant v : {Variant::lora, Variant::multi_pair, Variant::single_a_multi_b, Variant::multi_a_single_b}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto base = make_base(s, seed);
            DatasetSpec spec;
            spec.seed = seed;
            const Dataset ds = gen_multitask_dataset(spec, *base);
            AdaptedModel am = adapt(base, v, 4, {SharingKind::share_a, 2}, seed);
            TrainConfig cfg;
            cfg.lr = 3e-3;
            cfg.epochs = 4;
            cfg.grad_accumulation = 1;
            cfg.seed = seed;
            const double initial = evaluate(*base, ds).mean;
            const TrainLog log = train(am, ds, cfg);
            EXPECT_LT(log.evals.back().report.mean, 0.5 * initial) << to_string(v) << " seed " << seed;
        }
    }
}

TEST(Evaluate, ZeroPredictions) {
    DatasetSpec spec = tiny_spec(2);
    spec.n_tasks = 2;
    Dataset ds;
    ds.spec = spec;
    ds.targets = Matrix{{1.0, 2.0}, {3.0, 0.0}, {-1.0, 1.0}, {0.0, 1.0}};
    ds.task_ids = {0, 1, 0, 1};
    const EvalReport r = evaluate_predictions(Matrix(4, 2), ds);
    EXPECT_DOUBLE_EQ(r.per_task[0], (1.0 + 4.0 + 1.0 + 1.0) / 4.0);
    EXPECT_DOUBLE_EQ(r.per_task[1], (9.0 + 0.0 + 0.0 + 1.0) / 4.0);
    EXPECT_DOUBLE_EQ(r.mean, 0.5 * (1.75 + 2.5));
    EXPECT_THROW(evaluate_predictions(Matrix(4, 3), ds), DimensionError);
}

// Two-pass streaming-mean oracle over per-sample forwards.
TEST(Evaluate, MatchesStreamingOracle) {
    const auto base = make_base(tiny_shape());
    DatasetSpec spec = tiny_spec(30);
    spec.noise_std = 0.1;
    const Dataset ds = gen_multitask_dataset(spec, *base);
    AdaptedModel am = adapt(base, Variant::multi_a_single_b);
    Rng rng(4, "eval");
    for (auto& [name, p] : am.plan.named_parameters()) *p = random_normal(p->rows(), p->cols(), rng, 0.2);
    const auto snap = snapshot_params(am.plan);
    const EvalReport rep = evaluate(am, ds);
    EXPECT_EQ(snapshot_params(am.plan), snap);

    std::vector<std::size_t> total(3, 0), seen(3, 0);
    for (int t : ds.task_ids) total[static_cast<std::size_t>(t)] += ds.targets.cols();
    std::vector<double> mean(3, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto t = static_cast<std::size_t>(ds.task_ids[i]);
        const Matrix y = forward(am, row_slice(ds.inputs, i, i + 1), spec.seq_len).outputs;
        for (std::size_t c = 0; c < y.cols(); ++c) {
            const double e = y(0, c) - ds.targets(i, c);
            mean[t] += (e * e - mean[t]) / static_cast<double>(++seen[t]);
        }
    }
    for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_EQ(seen[t], total[t]);
        EXPECT_NEAR(rep.per_task[t], mean[t], 1e-12);
    }
    EXPECT_NEAR(rep.mean, (mean[0] + mean[1] + mean[2]) / 3.0, 1e-12);
}

TEST(Train, NonFiniteAbortNamesStepAndParameter) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(), *base);
    AdaptedModel am = adapt(base, Variant::lora, 2, {SharingKind::none, 1});
    auto named = am.plan.named_parameters();
    const std::string victim = named[3].first;
    (*named[3].second)[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(am, ds, TrainConfig{});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find(victim), std::string::npos) << msg;
    }
}

TEST(Train, ConfigValidation) {
    const auto base = make_base(tiny_shape());
    const Dataset ds = gen_multitask_dataset(tiny_spec(), *base);
    AdaptedModel am = adapt(base, Variant::lora, 2, {SharingKind::none, 1});
    TrainConfig cfg;
    cfg.lr = 0.0;
    EXPECT_THROW(train(am, ds, cfg), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    EXPECT_THROW(train(am, ds, cfg), ConfigError);
}

} // namespace
} // namespace masa
