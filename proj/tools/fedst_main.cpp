// fedst: experiment runner for the federated segmentation simulator.
// Subcommands: gen, run, eval, ablate. Exit codes: 0 ok, 2 config error,
// 3 protocol error, 4 data error, 1 anything else.

#include <iostream>

#include <CLI11.hpp>

#include "fedst/runner.hpp"

namespace {

int dispatch(int argc, char** argv) {
    CLI::App app{"FedST federated surgical-segmentation simulator"};
    app.require_subcommand(1);

    std::string config_path, method = "fedst", out_override;
    bool force = false;

    auto* gen = app.add_subcommand("gen", "generate site, synthetic and out-of-federation datasets");
    gen->add_option("--config", config_path, "run configuration file")->required();
    gen->add_flag("--force", force, "overwrite existing dataset files");

    auto* run = app.add_subcommand("run", "run a federated or baseline training experiment");
    run->add_option("--config", config_path, "run configuration file")->required();
    run->add_option("--method", method, "fedst|fedavg|local")->default_val("fedst");
    run->add_option("--out", out_override, "override the output directory");

    std::string ckpt_path, dataset_path, eval_out;
    int eval_site = -1;
    bool eval_global = false;
    double eval_test_fraction = 0.0;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", ckpt_path,
                     "checkpoint file, or run directory with --global")
        ->required();
    eval->add_option("--dataset", dataset_path, "dataset file to evaluate on")->required();
    eval->add_option("--site", eval_site, "expect the checkpoint to belong to this site");
    eval->add_flag("--global", eval_global,
                   "merge all site checkpoints in the run directory by weighted averaging");
    eval->add_option("--test-fraction", eval_test_fraction,
                     "evaluate only the trailing test split (0 = all clips)");
    eval->add_option("--out", eval_out, "also write the metric rows to this CSV file");

    std::vector<std::string> toggles;
    std::string ablate_out;
    auto* ablate = app.add_subcommand("ablate", "compare the full method against component ablations");
    ablate->add_option("--config", config_path, "run configuration file")->required();
    ablate->add_option("--toggle", toggles, "component to disable: ts|prompt|cs|serq")
        ->required()
        ->allow_extra_args(false);
    ablate->add_option("--out", ablate_out, "also write the comparison table to this file");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        const fedst::RunConfig rc = fedst::RunConfig::from_kv(fedst::KvConfig::load(config_path));
        const auto paths = fedst::cmd_gen(rc, force);
        for (const auto& p : paths) std::cout << "wrote " << p << "\n";
        return 0;
    }
    if (run->parsed()) {
        const fedst::RunConfig rc = fedst::RunConfig::from_kv(fedst::KvConfig::load(config_path));
        const fedst::Method m = fedst::method_from_name(method);
        const fedst::RunOutput out = fedst::cmd_run(rc, m, out_override);
        std::cout << "run directory: " << out.run_dir << "\n"
                  << "metrics: " << out.metrics_csv_path << "\n"
                  << "message bytes: " << out.result.message_bytes << "\n";
        if (!out.result.rounds.empty()) {
            const auto& last = out.result.rounds.back();
            double avg = 0.0;
            for (const auto& acc : last.per_site) avg += acc.row(acc.classes()).dice;
            avg /= static_cast<double>(last.per_site.size());
            std::cout << "final mean dice: " << fedst::format_metric(avg) << "\n";
        }
        return 0;
    }
    if (eval->parsed()) {
        fedst::EvalRequest req;
        req.checkpoint = ckpt_path;
        req.dataset_path = dataset_path;
        req.global_merge = eval_global;
        req.site = eval_site;
        req.test_fraction = eval_test_fraction;
        const fedst::MetricAccumulator acc = fedst::cmd_eval(req);
        const std::string site_label =
            eval_global ? "global" : (eval_site >= 0 ? "site" + std::to_string(eval_site) : "ckpt");
        std::string rows = fedst::metrics_csv_header() + std::string("\n") +
                           fedst::metrics_csv_rows("eval", 0, site_label, acc);
        std::cout << rows;
        if (!eval_out.empty()) {
            std::ofstream f(eval_out, std::ios::trunc);
            if (!f) throw fedst::DataError("cannot write " + eval_out);
            f << rows;
        }
        return 0;
    }
    if (ablate->parsed()) {
        const fedst::RunConfig rc = fedst::RunConfig::from_kv(fedst::KvConfig::load(config_path));
        const auto rows = fedst::cmd_ablate(rc, toggles);
        const std::string table = fedst::ablation_table(rows);
        std::cout << table;
        if (!ablate_out.empty()) {
            std::ofstream f(ablate_out, std::ios::trunc);
            if (!f) throw fedst::DataError("cannot write " + ablate_out);
            f << table;
        }
        return 0;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const fedst::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fedst::ProtocolError& e) {
        std::cerr << "protocol error: " << e.what() << "\n";
        return 3;
    } catch (const fedst::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
