#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dicap/cli.hpp"

using namespace dicap;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dicap_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

nlohmann::json smoke_config(const fs::path& out) {
    return {{"data", {{"samples", 400}, {"test_samples", 200}, {"input_dim", 8}, {"num_classes", 3},
                      {"latent_dim", 3}, {"seed", 5}}},
            {"split", {{"rho", 0.2}, {"est_fraction", 0.25}, {"seed", 1}}},
            {"model", {{"hidden_dim", 8}, {"embedding_dim", 4}, {"hidden_layers", 1}}},
            {"train", {{"seed", 1}, {"warmup_epochs", 2}, {"main_epochs", 2}, {"finetune_epochs", 2},
                       {"batch_size", 32}, {"finetune_batch_size", 8}, {"contrastive_cap", 16}}},
            {"eval", {{"seeds", {1, 2}}, {"eval_each_epoch", true}}},
            {"output_dir", out.string()}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    const auto p = dir / name;
    std::ofstream(p) << j.dump(2);
    return p;
}

struct outcome {
    int code;
    std::string out;
    std::string err;
};

outcome run(std::vector<std::string> args) {
    args.insert(args.begin(), "dicap");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_command(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("the executable rejects an unknown subcommand with usage") {
    const auto dir = scratch_dir("usage");
    const std::string cmd = std::string(DICAP_CLI_PATH) + " frobnicate > " + (dir / "out.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CHECK(status != 0);
    const auto text = slurp(dir / "out.txt");
    CHECK(text.find("gen-data") != std::string::npos);
    CHECK(text.find("compare-policies") != std::string::npos);

    CHECK(run({}).code != 0);
    CHECK(run({"--help"}).code == 0);
    fs::remove_all(dir);
}

TEST_CASE("config errors name the field") {
    const auto dir = scratch_dir("errors");
    auto j = smoke_config(dir / "out");

    j["split"]["rho"] = 1.5;
    auto r = run({"train", "--config", write_config(dir, j).string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("split.rho") != std::string::npos);

    j = smoke_config(dir / "out");
    j["train"]["learning_rate"] = 0.1;
    r = run({"train", "--config", write_config(dir, j).string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("train.learning_rate") != std::string::npos);

    j = smoke_config(dir / "out");
    j["data"].erase("seed");
    r = run({"gen-data", "--config", write_config(dir, j).string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("data.seed") != std::string::npos);

    j = smoke_config(dir / "out");
    j["split"].erase("seed");
    r = run({"gen-data", "--config", write_config(dir, j).string()});
    CHECK(r.err.find("split.seed") != std::string::npos);

    j = smoke_config(dir / "out");
    r = run({"train", "--config", write_config(dir, j).string(), "--policy", "greedy"});
    CHECK(r.code == 1);
    CHECK(r.err.find("--policy") != std::string::npos);

    r = run({"train", "--config", (dir / "absent.json").string()});
    CHECK(r.code != 0);
    CHECK_FALSE(fs::exists(dir / "out" / "metrics.jsonl"));
    fs::remove_all(dir);
}

TEST_CASE("config round-trips through its resolved snapshot") {
    const auto c = parse_run_config(smoke_config("x"));
    CHECK(to_json(parse_run_config(to_json(c))) == to_json(c));
    const auto ref = load_run_config(DICAP_SOURCE_DIR "/tools/configs/reference.json");
    auto expected = reference_run_config();
    expected.eval_each_epoch = true;
    expected.output_dir = "out/reference";
    CHECK(to_json(ref) == to_json(expected));
    CHECK_NOTHROW(load_run_config(DICAP_SOURCE_DIR "/tools/configs/smoke.json"));
}

TEST_CASE("gen-data, train, eval and calib-report work end to end") {
    const auto dir = scratch_dir("pipeline");
    const auto data_dir = dir / "data";
    const auto cfg = write_config(dir, smoke_config(data_dir));

    auto r = run({"gen-data", "--config", cfg.string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(data_dir / "splits.json"));

    const auto run_a = dir / "a";
    r = run({"train", "--config", cfg.string(), "--data", data_dir.string(), "--out", run_a.string()});
    REQUIRE(r.code == 0);
    const auto metrics = slurp(run_a / "metrics.jsonl");
    CHECK(count_lines(metrics) == 6);
    std::istringstream lines(metrics);
    std::string line;
    std::vector<std::string> stages;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        stages.push_back(j["stage"]);
        CHECK(j["test_map"].is_number());
    }
    CHECK(stages == std::vector<std::string>{"warmup", "warmup", "main", "main", "finetune", "finetune"});
    for (const char* f : {"resolved_config.json", "model.ckpt", "summary.json", "reliability.csv", "weight_table.csv",
                          "checkpoint_warmup.bin", "checkpoint_main.bin", "checkpoint_finetune.bin"})
        CHECK(fs::exists(run_a / f));

    // Regenerating from the config instead of reading the files gives the same run.
    const auto run_b = dir / "b";
    r = run({"train", "--config", (run_a / "resolved_config.json").string(), "--out", run_b.string()});
    REQUIRE(r.code == 0);
    CHECK(slurp(run_b / "metrics.jsonl") == metrics);
    CHECK(slurp(run_b / "model.ckpt") == slurp(run_a / "model.ckpt"));

    const auto summary = nlohmann::json::parse(slurp(run_a / "summary.json"));
    r = run({"eval", "--config", cfg.string(), "--checkpoint", (run_a / "model.ckpt").string(), "--out",
             (dir / "e").string()});
    REQUIRE(r.code == 0);
    const auto ev = nlohmann::json::parse(slurp(dir / "e" / "eval.json"));
    CHECK(ev["test_map"].get<double>() == summary["test_map"].get<double>());
    CHECK(run({"eval", "--config", cfg.string()}).code == 1);

    r = run({"calib-report", "--config", cfg.string(), "--checkpoint", (run_a / "checkpoint_main.bin").string(),
             "--out", (dir / "c").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("L-inf gap") != std::string::npos);
    CHECK(count_lines(slurp(dir / "c" / "reliability.csv")) == 21);
    fs::remove_all(dir);
}

TEST_CASE("seed and policy flags override the config") {
    const auto dir = scratch_dir("override");
    const auto cfg = write_config(dir, smoke_config(dir / "out"));
    auto r = run({"train", "--config", cfg.string(), "--seed", "9", "--policy", "uniform", "--out",
                  (dir / "u").string()});
    REQUIRE(r.code == 0);
    const auto resolved = load_run_config((dir / "u" / "resolved_config.json").string());
    CHECK(resolved.train.seed == 9);
    CHECK(resolved.train.policy == weight_policy::uniform);
    fs::remove_all(dir);
}

TEST_CASE("compare-policies writes one row per policy and seed") {
    const auto dir = scratch_dir("compare");
    auto j = smoke_config(dir / "out");
    j["train"]["main_epochs"] = 1;
    j["train"]["finetune_epochs"] = 1;
    const auto r = run({"compare-policies", "--config", write_config(dir, j).string()});
    REQUIRE(r.code == 0);
    CHECK(count_lines(slurp(dir / "out" / "policies.csv")) == 11);
    CHECK(count_lines(r.out) == 5);
    fs::remove_all(dir);
}
