#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "mopeft/data.hpp"

using namespace mopeft;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr interleaved
};

RunResult run_cli(const std::string& args) {
    std::string cmd = std::string(MOPEFT_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    EXPECT_NE(pipe, nullptr);
    RunResult r;
    std::array<char, 4096> buf{};
    size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mopeft_cli_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// dim 16, 2 layers: small enough that train finishes in milliseconds
std::string tiny_flags(const std::string& mode) {
    return "--set peft.mode=" + mode +
           " --set model.dim=16 --set model.layers=2 --set model.heads=2"
           " --set model.image=16 --set model.classes=3 --set model.prompt_tokens=2"
           " --set peft.rank=2 --set peft.prefix_len=3 --set peft.d_mid=4"
           " --set gate.hidden=4 --set train.steps=4 --set train.eval_every=2"
           " --set train.batch=2 --set data.train_n=4 --set data.val_n=2";
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run_cli("--help").exit_code, 0);
    EXPECT_NE(run_cli("--help").output.find("usage: mopeft"), std::string::npos);
    EXPECT_EQ(run_cli("conjure").exit_code, 2);
    EXPECT_EQ(run_cli("train --frobnicate").exit_code, 2);
    EXPECT_EQ(run_cli("").exit_code, 2);
    EXPECT_EQ(run_cli("train --set peft.rank=0 --out /tmp/never_created").exit_code, 1);
}

TEST(Cli, TrainWritesArtifactsAndHonorsLock) {
    TempDir dir;
    std::string out = (dir.path / "run").string();
    RunResult first = run_cli("train " + tiny_flags("mopeft") + " --out " + out);
    ASSERT_EQ(first.exit_code, 0) << first.output;
    for (const char* artifact : {"config.canonical", "model.mpft", "metrics.csv", "gates.csv"})
        EXPECT_TRUE(fs::exists(fs::path(out) / artifact)) << artifact;

    RunResult rerun = run_cli("train " + tiny_flags("mopeft") + " --out " + out);
    EXPECT_EQ(rerun.exit_code, 1);
    EXPECT_NE(rerun.output.find("--force"), std::string::npos);

    RunResult forced = run_cli("train " + tiny_flags("mopeft") + " --out " + out + " --force");
    EXPECT_EQ(forced.exit_code, 0) << forced.output;
}

TEST(Cli, BaselineRunIsEvalOnlyWithoutGates) {
    TempDir dir;
    std::string out = (dir.path / "base").string();
    RunResult r = run_cli("train " + tiny_flags("baseline") + " --out " + out);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    std::vector<MetricsRow> rows = read_metrics_csv(fs::path(out) / "metrics.csv");
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].split, "val");
    EXPECT_FALSE(rows[0].gated);
    EXPECT_FALSE(fs::exists(fs::path(out) / "gates.csv"));
}

TEST(Cli, ConfigFileThenOverridePrecedence) {
    TempDir dir;
    fs::path cfg_file = dir.path / "exp.cfg";
    atomic_write_file(cfg_file, "[peft]\nmode = lora\nrank = 4\nd_mid = 4\nprefix_len = 3\n"
                                "[model]\ndim = 16\nlayers = 2\nheads = 2\nimage = 16\n"
                                "classes = 3\n[train]\nsteps = 2\neval_every = 2\n"
                                "[data]\ntrain_n = 2\nval_n = 1\n");
    std::string out = (dir.path / "run").string();
    RunResult r = run_cli("train --config " + cfg_file.string() + " --set peft.rank=2 --out " +
                          out);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    std::string canonical = read_file(fs::path(out) / "config.canonical");
    EXPECT_NE(canonical.find("rank = 2"), std::string::npos);  // override beat the file
    EXPECT_NE(canonical.find("mode = lora"), std::string::npos);
    EXPECT_NE(canonical.find("out_dir = " + out), std::string::npos);
}

TEST(Cli, EvalReproducesTrainingAndChecksMode) {
    TempDir dir;
    std::string out = (dir.path / "run").string();
    RunResult trained = run_cli("train " + tiny_flags("mopeft") + " --out " + out);
    ASSERT_EQ(trained.exit_code, 0) << trained.output;
    std::vector<MetricsRow> rows = read_metrics_csv(fs::path(out) / "metrics.csv");
    const MetricsRow& final_val = rows.back();

    RunResult ev = run_cli("eval --out " + out);
    ASSERT_EQ(ev.exit_code, 0) << ev.output;
    EXPECT_NE(ev.output.find("miou " + format_double(final_val.miou, 6)), std::string::npos)
        << ev.output;
    EXPECT_NE(ev.output.find("gate means"), std::string::npos);

    RunResult wrong_mode = run_cli("eval --out " + out + " --set peft.mode=lora");
    EXPECT_EQ(wrong_mode.exit_code, 1);
    EXPECT_NE(wrong_mode.output.find("trained as mopeft"), std::string::npos);

    RunResult wrong_arch = run_cli("eval --out " + out + " --set model.dim=32");
    EXPECT_EQ(wrong_arch.exit_code, 1);

    // data overrides are allowed: evaluate the checkpoint on another domain
    RunResult other_domain = run_cli("eval --out " + out + " --set data.domain=rings");
    EXPECT_EQ(other_domain.exit_code, 0) << other_domain.output;
    EXPECT_NE(other_domain.output.find("rings val samples"), std::string::npos);
}

TEST(Cli, GradcheckPassesSmallFailsGuard) {
    RunResult small = run_cli(
        "gradcheck --set peft.mode=adapter --set model.dim=16 --set model.layers=2"
        " --set model.heads=2 --set model.image=8 --set model.classes=2"
        " --set peft.rank=2 --set peft.d_mid=4 --set train.batch=1 --set data.train_n=1");
    EXPECT_EQ(small.exit_code, 0) << small.output;
    EXPECT_NE(small.output.find("PASS"), std::string::npos);

    RunResult guard = run_cli("gradcheck");  // default config exceeds the parameter guard
    EXPECT_EQ(guard.exit_code, 1);
    EXPECT_NE(guard.output.find("guard"), std::string::npos);
}

TEST(Cli, SweepWritesPerValueRunsAndSummary) {
    TempDir dir;
    std::string out = (dir.path / "sweep").string();
    RunResult r = run_cli("sweep " + tiny_flags("mopeft") + " --out " + out +
                          " --axis peft.rank --values 1,2,4 --parallel 3");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    std::string summary = read_file(fs::path(out) / "summary.csv");
    EXPECT_EQ(summary.substr(0, 32), "value,final_miou,trainable_param");
    size_t prev = 0;
    int rows = 0;
    for (const char* raw : {"1", "2", "4"}) {
        std::string value = raw;
        fs::path sub = fs::path(out) / ("peft.rank=" + value);
        EXPECT_TRUE(fs::exists(sub / "metrics.csv")) << sub;
        size_t at = summary.find("\n" + value + ",");
        ASSERT_NE(at, std::string::npos);
        size_t tp_at = summary.rfind(',', summary.find('\n', at + 1));
        size_t trainable = std::stoul(summary.substr(tp_at + 1));
        EXPECT_GT(trainable, prev);  // cost grows with the swept value
        prev = trainable;
        ++rows;
    }
    EXPECT_EQ(rows, 3);

    RunResult bad_axis = run_cli("sweep " + tiny_flags("mopeft") + " --out " + out +
                                 " --axis train.lr --values 1 --force");
    EXPECT_EQ(bad_axis.exit_code, 1);
    RunResult wrong_mode = run_cli("sweep " + tiny_flags("lora") + " --out " + out +
                                   " --axis peft.d_mid --values 4,8 --force");
    EXPECT_EQ(wrong_mode.exit_code, 1);
    EXPECT_NE(wrong_mode.output.find("does not apply"), std::string::npos);
}

TEST(Cli, ReportEchoesGateCountsFromCsv) {
    TempDir dir;
    std::string out = (dir.path / "run").string();
    ASSERT_EQ(run_cli("train " + tiny_flags("mopeft") + " --out " + out).exit_code, 0);
    SelectionCounts counts = read_gate_csv(fs::path(out) / "gates.csv");
    RunResult r = run_cli("report --out " + out);
    ASSERT_EQ(r.exit_code, 0) << r.output;
    char want[96];
    std::snprintf(want, sizeof(want), "%-6s %6zu %7zu %8zu", "ALL", counts.overall[0],
                  counts.overall[1], counts.overall[2]);
    EXPECT_NE(r.output.find(want), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("parameter budget (mopeft)"), std::string::npos);

    RunResult missing = run_cli("report --out " + (dir.path / "nothing_here").string());
    EXPECT_EQ(missing.exit_code, 1);
    EXPECT_NE(missing.output.find("gates.csv"), std::string::npos);
}

TEST(Cli, DeterministicRerunsProduceIdenticalArtifacts) {
    TempDir dir;
    std::string out = (dir.path / "run").string();
    ASSERT_EQ(run_cli("train " + tiny_flags("mopeft") + " --out " + out).exit_code, 0);
    std::string metrics_a = read_file(fs::path(out) / "metrics.csv");
    std::string gates_a = read_file(fs::path(out) / "gates.csv");
    ASSERT_EQ(run_cli("train " + tiny_flags("mopeft") + " --out " + out + " --force").exit_code,
              0);
    EXPECT_EQ(read_file(fs::path(out) / "metrics.csv"), metrics_a);
    EXPECT_EQ(read_file(fs::path(out) / "gates.csv"), gates_a);
}
