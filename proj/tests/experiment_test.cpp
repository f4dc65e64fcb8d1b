#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "masa/experiment.hpp"

namespace masa {
namespace {

ExperimentConfig small_config(const fs::path& out) {
    ExperimentConfig c;
    c.output_dir = out.string();
    c.model.n_layers = 4;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.kv_width = 16;
    c.model.d_ff = 24;
    c.model.input_dim = 4;
    c.model.output_dim = 2;
    c.adapter.rank = 2;
    c.adapter.num_experts = 2;
    c.adapter.target_modules = {ModuleKind::q, ModuleKind::v};
    c.dataset.samples_per_task = 8;
    c.dataset.seq_len = 3;
    c.train.lr = 5e-3;
    c.train.epochs = 2;
    c.train.grad_accumulation = 1;
    c.sweep_seeds = {0};
    return c;
}

class TempDir : public ::testing::Test {
protected:
    fs::path root;
    void SetUp() override {
        root = fs::temp_directory_path() /
               (std::string("masa_exp_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(root);
        fs::create_directories(root);
    }
    void TearDown() override { fs::remove_all(root); }
};

std::string slurp(const fs::path& p) { return read_text(p); }

void expect_config_error(const std::string& text, const std::string& needle) {
    try {
        parse_config(text);
        ADD_FAILURE() << "expected ConfigError for " << text;
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
}

TEST(Config, EmptyObjectGivesDefaults) {
    const ExperimentConfig c = parse_config("{}");
    EXPECT_EQ(c.adapter.rank, 8u);
    EXPECT_EQ(c.adapter.alpha, 16.0);
    EXPECT_EQ(c.adapter.num_experts, 5u);
    EXPECT_EQ(c.sharing.kind, SharingKind::share_a);
    EXPECT_EQ(c.sharing.group_size, 2u);
    EXPECT_EQ(c.train.lr, 5e-5);
    EXPECT_EQ(c.train.batch_size, 8u);
    EXPECT_EQ(c.analyses.size(), 5u);
}

TEST(Config, UnknownKeysAndTypeErrorsNameTheField) {
    expect_config_error(R"({"adapter": {"rnak": 4}})", "adapter.rnak");
    expect_config_error(R"({"trian": {}})", "'trian'");
    expect_config_error(R"({"adapter": {"rank": "eight"}})", "adapter.rank");
    expect_config_error(R"({"adapter": {"rank": -1}})", "adapter.rank");
    expect_config_error(R"({"adapter": {"variant": "mole"}})", "adapter.variant");
    expect_config_error(R"({"sharing": {"strategy": "share_c"}})", "sharing.strategy");
    expect_config_error(R"({"adapter": {"target_modules": ["q", "x"]}})", "target_modules");
    expect_config_error(R"({"analyses": ["tsne"]})", "tsne");
    expect_config_error(R"({"train": {"deterministic": 1}})", "train.deterministic");
    expect_config_error("{\n \"seed\": 1,\n}", "line 3");
}

TEST(Config, SemanticValidation) {
    expect_config_error(R"({"adapter": {"rank": 0}})", "adapter.rank");
    expect_config_error(R"({"adapter": {"variant": "lora", "num_experts": 3}})", "lora");
    expect_config_error(R"({"model": {"d_ff": 0}})", "ffn_gate");
    expect_config_error(R"({"model": {"n_heads": 5}})", "n_heads");
    expect_config_error(R"({"train": {"lr": 0}})", "train.lr");
}

TEST(Config, CanonicalRoundTrip) {
    ExperimentConfig c = small_config("somewhere");
    c.adapter.variant = Variant::multi_pair;
    c.sharing = {SharingKind::share_both, 3};
    c.analyses = {"cka"};
    const std::string text = config_to_json(c);
    EXPECT_EQ(config_to_json(parse_config(text)), text);
}

TEST(Config, DigestTracksBytes) {
    const ExperimentConfig c = small_config("x");
    ExperimentConfig d = c;
    EXPECT_EQ(digest_hex(config_to_json(c)), digest_hex(config_to_json(d)));
    d.train.lr *= 2.0;
    EXPECT_NE(digest_hex(config_to_json(c)), digest_hex(config_to_json(d)));
    EXPECT_EQ(digest_hex(config_to_json(c)).size(), 16u);
}

TEST_F(TempDir, RunEmitsReports) {
    const RunResult r = run_experiment(small_config(root / "run"));
    for (const char* f : {"params.csv", "train.csv", "eval.csv", "plan.csv", "cka.csv", "cka_summary.csv",
                          "ceiling.csv", "rank.csv", "features.csv", "summary.json", "checkpoint/manifest.json",
                          "checkpoint/config.json"}) {
        EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
    }
    for (const auto& e : fs::directory_iterator(root / "run")) {
        if (e.path().extension() != ".csv") continue;
        const auto rows = read_csv(e.path());
        for (std::size_t i = 1; i < rows.size(); ++i)
            for (const auto& cell : rows[i]) EXPECT_EQ(cell.find(';'), std::string::npos);
    }
    const auto train_rows = read_csv(root / "run" / "train.csv");
    EXPECT_EQ(train_rows[0], (std::vector<std::string>{"step", "lr", "loss"}));
    EXPECT_EQ(train_rows.size(), r.log.steps.size() + 1);
    for (std::size_t i = 1; i < train_rows.size(); ++i) EXPECT_TRUE(std::isfinite(parse_number(train_rows[i][2])));
    const auto eval_rows = read_csv(root / "run" / "eval.csv");
    EXPECT_EQ(eval_rows.size(), 4u);
    const auto summary = read_csv(root / "run" / "cka_summary.csv");
    bool a_all = false, inc_all = false;
    for (const auto& row : summary) {
        a_all |= row[0] == "a_output" && row[1] == "all";
        inc_all |= row[0] == "increment" && row[1] == "all";
    }
    EXPECT_TRUE(a_all && inc_all);
}

TEST_F(TempDir, NoAnalysesNoAnalysisFiles) {
    ExperimentConfig c = small_config(root / "run");
    c.analyses.clear();
    run_experiment(c);
    for (const char* f : {"params.csv", "cka.csv", "ceiling.csv", "rank.csv", "features.csv"})
        EXPECT_FALSE(fs::exists(root / "run" / f)) << f;
    EXPECT_TRUE(fs::exists(root / "run" / "train.csv"));
}

TEST_F(TempDir, ReplayIsByteIdentical) {
    run_experiment(small_config(root / "a"));
    run_experiment(small_config(root / "b"));
    for (const char* f : {"params.csv", "train.csv", "eval.csv", "plan.csv", "cka.csv", "ceiling.csv", "rank.csv",
                          "features.csv"}) {
        EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
    }
    for (const auto& e : fs::directory_iterator(root / "a" / "checkpoint" / "tensors")) {
        EXPECT_EQ(slurp(e.path()), slurp(root / "b" / "checkpoint" / "tensors" / e.path().filename()));
    }
}

TEST_F(TempDir, RefusesToOverwriteWithoutForce) {
    const ExperimentConfig c = small_config(root / "run");
    run_experiment(c);
    EXPECT_THROW(run_experiment(c), IoError);
    EXPECT_NO_THROW(run_experiment(c, true));
}

TEST_F(TempDir, CheckpointDedupCounts) {
    ExperimentConfig c = small_config(root / "x");
    c.adapter.target_modules = {ModuleKind::q};
    const Experiment e = prepare(c);
    save_checkpoint(e.model.plan, c, root / "ck");
    std::size_t a = 0, b = 0;
    const auto manifest = nlohmann::json::parse(slurp(root / "ck" / "manifest.json"));
    for (const auto& t : manifest["tensors"]) {
        const std::string name = t["name"];
        (name.find(".a_") != std::string::npos ? a : b)++;
    }
    EXPECT_EQ(a, 2u * 2u);
    EXPECT_EQ(b, 4u);
}

// Property: stored A tensors per module equal ceil(L/S) * N under share_a.
TEST_F(TempDir, CheckpointDedupProperty) {
    Rng rng(1, "dedup");
    for (int t = 0; t < 6; ++t) {
        ExperimentConfig c = small_config(root / "x");
        c.model.n_layers = 1 + rng.below(6);
        c.sharing.group_size = 1 + rng.below(4);
        c.adapter.num_experts = 1 + rng.below(3);
        const Experiment e = prepare(c);
        const fs::path dir = root / ("ck" + std::to_string(t));
        save_checkpoint(e.model.plan, c, dir);
        const std::size_t groups = (c.model.n_layers + c.sharing.group_size - 1) / c.sharing.group_size;
        std::size_t a = 0;
        const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
        for (const auto& entry : manifest["tensors"])
            if (std::string(entry["name"]).rfind("q.a_", 0) == 0) ++a;
        EXPECT_EQ(a, groups * c.adapter.num_experts);
    }
}

TEST_F(TempDir, CheckpointRoundTrip) {
    ExperimentConfig c = small_config(root / "x");
    Experiment e = prepare(c);
    Rng rng(2, "ck");
    for (auto& [name, p] : e.model.plan.named_parameters()) *p = random_normal(p->rows(), p->cols(), rng, 0.3);
    save_checkpoint(e.model.plan, c, root / "ck");
    Checkpoint ck = load_checkpoint(root / "ck");
    EXPECT_EQ(config_to_json(ck.config), config_to_json(c));
    ASSERT_EQ(ck.plan.layout.layers.size(), e.model.plan.layout.layers.size());
    for (std::size_t l = 0; l < ck.plan.layout.layers.size(); ++l) {
        EXPECT_EQ(ck.plan.layout.layers[l].a, e.model.plan.layout.layers[l].a);
        EXPECT_EQ(ck.plan.layout.layers[l].b, e.model.plan.layout.layers[l].b);
    }
    const auto orig = e.model.plan.named_parameters(), back = ck.plan.named_parameters();
    ASSERT_EQ(orig.size(), back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
        EXPECT_EQ(orig[i].first, back[i].first);
        EXPECT_TRUE(orig[i].second->same_shape(*back[i].second));
    }
    const AdaptedModel loaded = inject_adapters(e.model.base, std::move(ck.plan));
    const Matrix x = random_normal(5, 3 * c.model.input_dim, rng);
    EXPECT_LE(relative_error(forward(loaded, x, 3).outputs, forward(e.model, x, 3).outputs), 1e-6);
}

TEST_F(TempDir, LoadedSharedGroupMutationReachesMembers) {
    const ExperimentConfig c = small_config(root / "x");
    const Experiment e = prepare(c);
    save_checkpoint(e.model.plan, c, root / "ck");
    Checkpoint ck = load_checkpoint(root / "ck");
    for (auto& [name, p] : ck.plan.named_parameters())
        if (name.find(".b_") != std::string::npos) *p = Matrix(p->rows(), p->cols(), 0.1);
    AdaptedModel m = inject_adapters(e.model.base, std::move(ck.plan));
    Rng rng(3, "probe");
    const Matrix x = random_normal(3, c.model.d_model, rng);
    std::vector<Matrix> before;
    for (std::size_t l = 0; l < 4; ++l) before.push_back(module_forward(m, l, ModuleKind::q, x).outputs);
    *m.plan.registry.at(ModuleKind::q).a_sets.at(Owner::group(0))[1] *= 2.0;
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(module_forward(m, l, ModuleKind::q, x).outputs == before[l], l >= 2);
}

TEST_F(TempDir, LoadErrorsNameTheEntry) {
    const ExperimentConfig c = small_config(root / "x");
    const Experiment e = prepare(c);
    save_checkpoint(e.model.plan, c, root / "ck");
    const fs::path victim = root / "ck" / "tensors" / "v.b_layer.1.head.0.f32";
    ASSERT_TRUE(fs::exists(victim));
    fs::resize_file(victim, 6);
    try {
        load_checkpoint(root / "ck");
        FAIL() << "expected IoError";
    } catch (const IoError& err) {
        EXPECT_NE(std::string(err.what()).find("v.b_layer.1.head.0"), std::string::npos) << err.what();
    }
    fs::remove(victim);
    EXPECT_THROW(load_checkpoint(root / "ck"), IoError);

    save_checkpoint(e.model.plan, c, root / "ck2");
    {
        std::ofstream f(root / "ck2" / "config.json", std::ios::app);
        f << " ";
    }
    try {
        load_checkpoint(root / "ck2");
        FAIL() << "expected IoError";
    } catch (const IoError& err) {
        EXPECT_NE(std::string(err.what()).find("config.json"), std::string::npos) << err.what();
    }
    EXPECT_THROW(load_checkpoint(root / "nothing"), IoError);
}

TEST_F(TempDir, AnalyzeCheckpointMatchesRunAnalyses) {
    run_experiment(small_config(root / "run"));
    const auto files = analyze_checkpoint(root / "run" / "checkpoint", {"cka", "features"}, root / "re");
    EXPECT_EQ(files.size(), 3u);
    // 32-bit storage perturbs values slightly; the table shapes and labels agree.
    const auto a = read_csv(root / "run" / "features.csv"), b = read_csv(root / "re" / "features.csv");
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i][3], b[i][3]);
        if (i > 0) EXPECT_NEAR(parse_number(a[i][4]), parse_number(b[i][4]), 1e-5 * (1.0 + std::abs(parse_number(a[i][4]))));
    }
}

TEST(Sweep, GroupSizeParamsNonIncreasing) {
    ExperimentConfig c = small_config("unused");
    c.model.n_layers = 8;
    c.train.epochs = 1;
    const auto rows = sweep(c, "group_size", {"1", "2", "4", "8"});
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i].params_percent, rows[i - 1].params_percent);
    EXPECT_EQ(rows[1].label, "group_size=2");
    EXPECT_NE(sweep_csv(rows).find("label,value,params_percent,mean_mse"), std::string::npos);
}

TEST(Sweep, SingleExpertEqualsLora) {
    ExperimentConfig c = small_config("unused");
    c.train.epochs = 1;
    const auto rows = sweep(c, "num_experts", {"1"});
    ExperimentConfig lora = c;
    lora.adapter.variant = Variant::lora;
    lora.adapter.num_experts = 1;
    EXPECT_EQ(rows[0].mean_mse, train_and_score(lora, 0));
    EXPECT_EQ(rows[0].params_percent, params_of(lora).percent_of_base);
}

TEST(Sweep, StrategyParamOrdering) {
    ExperimentConfig c = small_config("unused");
    c.train.epochs = 1;
    const auto rows = sweep(c, "strategy", {"share_a", "share_b", "share_both"});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_LT(rows[2].params_percent, rows[0].params_percent);
    EXPECT_LT(rows[0].params_percent, rows[1].params_percent);
}

TEST(Sweep, IncompatibleAxis) {
    const ExperimentConfig c = small_config("unused");
    EXPECT_THROW(sweep(c, "num_b_heads", {"2"}), ConfigError);
    EXPECT_THROW(sweep(c, "learning_rate", {"2"}), ConfigError);
    EXPECT_THROW(sweep(c, "num_experts", {"0"}), ConfigError);
    EXPECT_THROW(sweep(c, "num_experts", {"two"}), ConfigError);
    ExperimentConfig none = c;
    none.sharing.kind = SharingKind::none;
    EXPECT_THROW(sweep(none, "group_size", {"2"}), ConfigError);
}

class Cli : public TempDir {
protected:
    std::string exe() const {
        const char* p = std::getenv("MASA_CLI");
        return p ? p : "";
    }
    int call(const std::string& args) const {
        const int st = std::system((exe() + " " + args + " >" + (root / "stdout.txt").string() + " 2>&1").c_str());
        return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    }
    fs::path write_config(const ExperimentConfig& c, const std::string& name = "cfg.json") const {
        CsvWriter::write_file(root / name, config_to_json(c));
        return root / name;
    }
};

TEST_F(Cli, ExitCodes) {
    if (exe().empty()) GTEST_SKIP() << "MASA_CLI not set";
    const fs::path cfg = write_config(small_config(root / "run"));
    EXPECT_EQ(call("run " + cfg.string()), 0);
    EXPECT_EQ(call("run " + cfg.string()), 4);
    EXPECT_EQ(call("run " + cfg.string() + " --force --seed 3"), 0);
    EXPECT_EQ(call("analyze " + (root / "run").string() + " --ceiling"), 0);
    EXPECT_TRUE(fs::exists(root / "run" / "analysis" / "ceiling.csv"));
    EXPECT_EQ(call("analyze " + (root / "run").string()), 2);
    CsvWriter::write_file(root / "bad.json", R"({"adapter": {"rnak": 2}})");
    EXPECT_EQ(call("run " + (root / "bad.json").string()), 2);
    EXPECT_NE(slurp(root / "stdout.txt").find("adapter.rnak"), std::string::npos);
    EXPECT_EQ(call("run " + (root / "missing.json").string()), 4);
    EXPECT_EQ(call("frobnicate"), 2);
    EXPECT_EQ(call("sweep " + cfg.string() + " --axis num_b_heads --values 2"), 2);
}

TEST_F(Cli, SweepWritesTable) {
    if (exe().empty()) GTEST_SKIP() << "MASA_CLI not set";
    ExperimentConfig c = small_config(root / "sw");
    c.train.epochs = 1;
    const fs::path cfg = write_config(c);
    EXPECT_EQ(call("sweep " + cfg.string() + " --axis num_experts --values 1,2"), 0);
    const auto rows = read_csv(root / "sw" / "sweep_num_experts.csv");
    EXPECT_EQ(rows.size(), 3u);
    EXPECT_EQ(call("sweep " + cfg.string() + " --axis num_experts --values 1,2"), 4);
}

TEST_F(Cli, NumericAbortExitCode) {
    if (exe().empty()) GTEST_SKIP() << "MASA_CLI not set";
    ExperimentConfig c = small_config(root / "run");
    c.train.lr = 1e300;
    c.train.epochs = 3;
    c.adapter.alpha = 1e200;
    const fs::path cfg = write_config(c);
    EXPECT_EQ(call("run " + cfg.string()), 3);
    EXPECT_NE(slurp(root / "stdout.txt").find("step"), std::string::npos);
}

} // namespace
} // namespace masa
