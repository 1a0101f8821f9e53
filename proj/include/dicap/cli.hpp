#pragma once

// Batch command-line front end. run_command() is the whole program; the
// executable in tools/ only forwards argv to it.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dicap/config.hpp"
#include "dicap/data.hpp"
#include "dicap/eval.hpp"
#include "dicap/model.hpp"
#include "dicap/trainer.hpp"

namespace dicap {

namespace cli_detail {

namespace fs = std::filesystem;

struct common_args {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> policy;
    std::string data_dir;
    std::string checkpoint;
};

inline std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
    return os;
}

inline run_config resolve(const common_args& a) {
    run_config c = load_run_config(a.config_path);
    if (a.seed) c.train.seed = *a.seed;
    if (a.policy) {
        try {
            c.train.policy = parse_weight_policy(*a.policy);
        } catch (const std::invalid_argument& e) {
            throw config_error("--policy", e.what());
        }
    }
    if (!a.out_dir.empty()) c.output_dir = a.out_dir;
    c.validate();
    return c;
}

// Creates the output directory and writes the resolved-config snapshot.
inline fs::path prepare_output(const run_config& c) {
    const fs::path dir(c.output_dir);
    fs::create_directories(dir);
    auto os = open_out(dir / "resolved_config.json");
    os << to_json(c).dump(2) << '\n';
    return dir;
}

struct loaded_data {
    dataset train;
    dataset test;
    ssmll_splits splits;
};

// Reads gen-data output from data_dir when given, otherwise regenerates from
// the config (same bytes either way).
inline loaded_data load_data(const run_config& c, const std::string& data_dir) {
    loaded_data d;
    if (!data_dir.empty()) {
        const fs::path dir(data_dir);
        d.train = read_dataset((dir / "train").string());
        d.test = read_dataset((dir / "test").string());
        d.splits = read_splits((dir / "splits.json").string());
        validate_splits(d.splits, d.train.size());
    } else {
        d.train = generate_synthetic(c.data);
        d.test = generate_test_set(c.data);
        d.splits = split_ssmll(d.train, c.rho, c.est_fraction, c.split_seed);
    }
    return d;
}

inline void write_json_line(std::ostream& os, const nlohmann::json& j) { os << j.dump() << '\n'; }

inline int cmd_gen_data(const common_args& a, std::ostream& out) {
    const run_config c = resolve(a);
    const fs::path dir = prepare_output(c);
    const dataset train = generate_synthetic(c.data);
    const dataset test = generate_test_set(c.data);
    const ssmll_splits s = split_ssmll(train, c.rho, c.est_fraction, c.split_seed);
    write_dataset((dir / "train").string(), train);
    write_dataset((dir / "test").string(), test);
    write_splits((dir / "splits.json").string(), s);
    out << "wrote " << train.size() << " training and " << test.size() << " test samples to " << dir.string() << '\n';
    return 0;
}

inline int cmd_train(const common_args& a, std::ostream& out) {
    const run_config c = resolve(a);
    const fs::path dir = prepare_output(c);
    const loaded_data d = load_data(c, a.data_dir);
    const ssmll_data data(d.train, d.splits);

    auto metrics = open_out(dir / "metrics.jsonl");
    pipeline_options opts;
    opts.eval_each_epoch = c.eval_each_epoch;
    opts.on_epoch = [&](const epoch_report& r, const model_state& m) {
        write_json_line(metrics, to_json(r));
        metrics.flush();
        // Rewritten every epoch, so each stage leaves its last state behind.
        save_checkpoint((dir / ("checkpoint_" + r.stage + ".bin")).string(), m);
    };
    const run_result r = run_pipeline(data, d.test, c.train, opts);
    save_checkpoint((dir / "model.ckpt").string(), r.model);
    if (r.calibration) {
        auto os = open_out(dir / "reliability.csv");
        write_reliability_csv(os, make_reliability_report(r.calibration->estimated, r.calibration->oracle));
        auto ws = open_out(dir / "weight_table.csv");
        write_weight_table_csv(ws, r.calibration->estimated);
    }
    nlohmann::json summary{{"test_map", r.test_map},
                           {"policy", to_string(c.train.policy)},
                           {"seed", c.train.seed},
                           {"epochs", r.reports.size()}};
    auto ss = open_out(dir / "summary.json");
    ss << summary.dump(2) << '\n';
    out << std::setprecision(6) << "test mAP " << r.test_map << " (" << r.reports.size() << " epochs, outputs in "
        << dir.string() << ")\n";
    return 0;
}

inline int cmd_eval(const common_args& a, std::ostream& out) {
    if (a.checkpoint.empty()) throw std::invalid_argument("eval: --checkpoint is required");
    const run_config c = resolve(a);
    const fs::path dir = prepare_output(c);
    const loaded_data d = load_data(c, a.data_dir);
    const model_state m = load_checkpoint(a.checkpoint);
    const map_result res = mean_average_precision_detail(predict_scores(m, d.test.features, true), d.test.labels);
    nlohmann::json j{{"checkpoint", a.checkpoint}, {"test_map", res.map}, {"skipped_classes", res.skipped_classes}};
    nlohmann::json per = nlohmann::json::array();
    for (const auto& ap : res.per_class) per.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
    j["per_class_ap"] = per;
    auto os = open_out(dir / "eval.json");
    os << j.dump(2) << '\n';
    out << std::setprecision(6) << "test mAP " << res.map << '\n';
    return 0;
}

inline int cmd_compare(const common_args& a, std::ostream& out) {
    const run_config c = resolve(a);
    const fs::path dir = prepare_output(c);
    const loaded_data d = load_data(c, a.data_dir);
    const ssmll_data data(d.train, d.splits);
    const policy_report rep = compare_policies(data, d.test, c.train, c.compare_seeds, c.eval_each_epoch);
    auto os = open_out(dir / "policies.csv");
    write_policy_csv(os, rep);
    const auto summary = policy_summary_json(rep);
    auto js = open_out(dir / "policies_summary.json");
    js << summary.dump(2) << '\n';
    out << std::setprecision(6);
    for (auto p : all_policies) {
        const auto s = rep.summary(p);
        out << std::left << std::setw(11) << to_string(p) << " mean mAP " << s.mean << "  std " << s.stddev << '\n';
    }
    return 0;
}

// Reliability of the D_est-estimated table against the oracle. Uses the
// checkpoint when given, otherwise trains through the main stage first.
inline int cmd_calib_report(const common_args& a, std::ostream& out) {
    run_config c = resolve(a);
    const fs::path dir = prepare_output(c);
    const loaded_data d = load_data(c, a.data_dir);
    const ssmll_data data(d.train, d.splits);
    model_state m;
    if (!a.checkpoint.empty()) {
        m = load_checkpoint(a.checkpoint);
    } else {
        train_config t = c.train;
        t.finetune_epochs = 0;
        m = run_pipeline(data, d.test, t).model;
    }
    const calibration_snapshot snap = snapshot_calibration(m, data, c.train);
    const reliability_report rep = make_reliability_report(snap.estimated, snap.oracle);
    auto os = open_out(dir / "reliability.csv");
    write_reliability_csv(os, rep);
    out << std::setprecision(6) << "L-inf gap " << rep.linf_gap << " over " << rep.co_occupied
        << " co-occupied bins (positive side " << rep.linf_pos << ", negative side " << rep.linf_neg << ")\n";
    return 0;
}

}  // namespace cli_detail

inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
    using namespace cli_detail;
    CLI::App app{"DiCaP semi-supervised multi-label training on synthetic data", "dicap"};
    app.require_subcommand(1);
    common_args a;
    std::uint64_t seed = 0;
    std::string policy;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", a.config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", a.out_dir, "output directory (overrides output_dir)");
        sub->add_option("--seed", seed, "training seed (overrides train.seed)");
        sub->add_option("--policy", policy, "weight policy: uniform|confidence|labeled|ours|optimal");
        sub->add_option("--data", a.data_dir, "directory written by gen-data");
    };
    auto* gen = app.add_subcommand("gen-data", "generate and write the dataset and splits");
    auto* train = app.add_subcommand("train", "run the full pipeline; writes metrics.jsonl and checkpoints");
    auto* eval = app.add_subcommand("eval", "test mAP of a checkpoint");
    auto* cmp = app.add_subcommand("compare-policies", "train once per weight policy and seed");
    auto* cal = app.add_subcommand("calib-report", "estimated vs oracle correctness table");
    for (auto* s : {gen, train, eval, cmp, cal}) add_common(s);
    for (auto* s : {eval, cal}) s->add_option("--checkpoint", a.checkpoint, "model checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << '\n' << app.help();
        return e.get_exit_code();
    }

    for (auto* s : {gen, train, eval, cmp, cal}) {
        if (!s->parsed()) continue;
        if (s->count("--seed")) a.seed = seed;
        if (s->count("--policy")) a.policy = policy;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(a, out);
        if (train->parsed()) return cmd_train(a, out);
        if (eval->parsed()) return cmd_eval(a, out);
        if (cmp->parsed()) return cmd_compare(a, out);
        if (cal->parsed()) return cmd_calib_report(a, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    err << "error: no subcommand\n" << app.help();
    return 2;
}

}  // namespace dicap
