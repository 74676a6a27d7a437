#include "rtcl/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rtcl/checkpoint.hpp"
#include "rtcl/experiment.hpp"

namespace rtcl {

namespace {

// Flag overrides are applied on top of the config file, so only options the
// user actually passed may touch the config.
struct FlagBinding {
    CLI::Option* opt = nullptr;
    std::function<void(ExperimentConfig&)> apply;
};

struct CommonFlags {
    std::string config_path;
    std::string mode;
    std::string dataset;
    std::string data_dir;
    std::string out;
    int tasks = 0;
    int capacity = 0;
    int replay = 0;
    double alpha = 0;
    std::uint64_t seed = 0;
    int rank = 0;
    int ae_latent = 0;
    int ae_hidden = 0;
    int epochs_adapter = 0;
    int epochs_ae = 0;
    int epochs_pretrain = 0;
    int epochs_distill = 0;
    double lr_adapter = 0;
    double lr_ae = 0;
    double lr_pretrain = 0;
    int batch_train = 0;
    int batch_ae = 0;
    int replay_batch = 0;
    int train_per_class = 0;
    int test_per_class = 0;
    int pretext_per_class = 0;
    bool first_perm_identity = false;
};

void add_common_flags(CLI::App* sub, CommonFlags& f, std::vector<FlagBinding>& bindings) {
    const auto bind = [&bindings](CLI::Option* opt, std::function<void(ExperimentConfig&)> apply) {
        bindings.push_back({opt, std::move(apply)});
    };
    sub->add_option("--config", f.config_path, "config file (key=value lines)");
    bind(sub->add_option("--mode", f.mode, "split or permutation"), [&f](ExperimentConfig& c) {
        if (f.mode == "split") c.mode = TaskMode::Split;
        else if (f.mode == "permutation") c.mode = TaskMode::Permutation;
        else throw ConfigError("mode must be split or permutation, got '" + f.mode + "'");
    });
    bind(sub->add_option("--dataset", f.dataset, "synthetic or mnist"),
         [&f](ExperimentConfig& c) { c.dataset = f.dataset; });
    bind(sub->add_option("--data", f.data_dir, "directory with IDX files"),
         [&f](ExperimentConfig& c) { c.data_dir = f.data_dir; });
    bind(sub->add_option("--out", f.out, "output directory"),
         [&f](ExperimentConfig& c) { c.out_dir = f.out; });
    bind(sub->add_option("--tasks", f.tasks, "number of tasks"),
         [&f](ExperimentConfig& c) { c.tasks = f.tasks; });
    bind(sub->add_option("--capacity", f.capacity, "adapter capacity (negative = unlimited)"),
         [&f](ExperimentConfig& c) { c.capacity = f.capacity; });
    bind(sub->add_option("--replay", f.replay, "replay memory size per task"),
         [&f](ExperimentConfig& c) { c.replay_m = f.replay; });
    bind(sub->add_option("--alpha", f.alpha, "distillation balance in [0,1]"),
         [&f](ExperimentConfig& c) { c.alpha = static_cast<real>(f.alpha); });
    bind(sub->add_option("--seed", f.seed, "experiment seed"),
         [&f](ExperimentConfig& c) { c.seed = f.seed; });
    bind(sub->add_option("--rank", f.rank, "adapter rank"),
         [&f](ExperimentConfig& c) { c.lora_rank = f.rank; });
    bind(sub->add_option("--ae-latent", f.ae_latent, "autoencoder latent size"),
         [&f](ExperimentConfig& c) { c.ae_latent = f.ae_latent; });
    bind(sub->add_option("--ae-hidden", f.ae_hidden, "deep autoencoder hidden size"),
         [&f](ExperimentConfig& c) { c.ae_hidden = f.ae_hidden; });
    bind(sub->add_option("--epochs-adapter", f.epochs_adapter, "adapter epochs per task"),
         [&f](ExperimentConfig& c) { c.epochs_adapter = f.epochs_adapter; });
    bind(sub->add_option("--epochs-ae", f.epochs_ae, "autoencoder epochs per task"),
         [&f](ExperimentConfig& c) { c.epochs_ae = f.epochs_ae; });
    bind(sub->add_option("--epochs-pretrain", f.epochs_pretrain, "pretraining epochs"),
         [&f](ExperimentConfig& c) { c.epochs_pretrain = f.epochs_pretrain; });
    bind(sub->add_option("--epochs-distill", f.epochs_distill, "distillation epochs (0 = adapter epochs)"),
         [&f](ExperimentConfig& c) { c.epochs_distill = f.epochs_distill; });
    bind(sub->add_option("--lr-adapter", f.lr_adapter, "adapter learning rate"),
         [&f](ExperimentConfig& c) { c.lr_adapter = static_cast<real>(f.lr_adapter); });
    bind(sub->add_option("--lr-ae", f.lr_ae, "autoencoder learning rate"),
         [&f](ExperimentConfig& c) { c.lr_ae = static_cast<real>(f.lr_ae); });
    bind(sub->add_option("--lr-pretrain", f.lr_pretrain, "pretraining learning rate"),
         [&f](ExperimentConfig& c) { c.lr_pretrain = static_cast<real>(f.lr_pretrain); });
    bind(sub->add_option("--batch-train", f.batch_train, "training batch size"),
         [&f](ExperimentConfig& c) { c.batch_train = f.batch_train; });
    bind(sub->add_option("--batch-ae", f.batch_ae, "autoencoder batch size"),
         [&f](ExperimentConfig& c) { c.batch_ae = f.batch_ae; });
    bind(sub->add_option("--replay-batch", f.replay_batch, "replay batch size for distillation"),
         [&f](ExperimentConfig& c) { c.replay_batch = f.replay_batch; });
    bind(sub->add_option("--train-per-class", f.train_per_class, "training samples per class"),
         [&f](ExperimentConfig& c) { c.train_per_class = f.train_per_class; });
    bind(sub->add_option("--test-per-class", f.test_per_class, "test samples per class"),
         [&f](ExperimentConfig& c) { c.test_per_class = f.test_per_class; });
    bind(sub->add_option("--pretext-per-class", f.pretext_per_class, "pretext samples per class"),
         [&f](ExperimentConfig& c) { c.pretext_per_class = f.pretext_per_class; });
    bind(sub->add_flag("--first-perm-identity", f.first_perm_identity,
                       "pin the first permutation task to the identity"),
         [&f](ExperimentConfig& c) { c.first_permutation_identity = f.first_perm_identity; });
}

ExperimentConfig build_config(const CommonFlags& f, const std::vector<FlagBinding>& bindings) {
    ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = ExperimentConfig::load_file(f.config_path);
    for (const auto& b : bindings) {
        if (b.opt->count() > 0) b.apply(cfg);
    }
    return cfg;
}

int cmd_report(const std::vector<std::string>& dirs) {
    std::vector<double> avgs;
    std::cout << "run,avg_acc,per_task\n";
    for (const auto& dir : dirs) {
        const auto path = std::filesystem::path(dir) / "metrics.json";
        std::ifstream f(path);
        if (!f) throw Error("cannot open " + path.string());
        nlohmann::json j;
        f >> j;
        const double avg = j.at("avg_acc").get<double>();
        avgs.push_back(avg);
        std::cout << dir << "," << avg << ",\"";
        const auto accs = j.at("acc_final").get<std::vector<double>>();
        for (std::size_t i = 0; i < accs.size(); ++i) {
            if (i) std::cout << " ";
            std::cout << accs[i];
        }
        std::cout << "\"\n";
    }
    double mean = 0;
    for (double a : avgs) mean += a;
    mean /= static_cast<double>(avgs.size());
    double var = 0;
    for (double a : avgs) var += (a - mean) * (a - mean);
    const double sd = avgs.size() > 1 ? std::sqrt(var / static_cast<double>(avgs.size() - 1)) : 0.0;
    std::cout << "mean_avg_acc," << mean << ",std," << sd << "\n";
    return 0;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
    CLI::App app{"continual image classification with a frozen patch transformer,\n"
                 "low-rank adapters routed by autoencoder novelty detection,\n"
                 "herding replay, and distillation-based adapter fusion"};
    app.name("rtcl");
    app.require_subcommand(1);

    CommonFlags run_flags, ablate_flags, pre_flags;
    std::vector<FlagBinding> run_bindings, ablate_bindings, pre_bindings;
    std::string run_backbone, ablate_backbone;

    CLI::App* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
    add_common_flags(pre, pre_flags, pre_bindings);

    CLI::App* run = app.add_subcommand("run", "run the continual learning stream");
    add_common_flags(run, run_flags, run_bindings);
    run->add_option("--backbone", run_backbone, "reuse a frozen backbone from a checkpoint");

    CLI::App* ablate = app.add_subcommand("ablate", "run with the novelty routing ablated");
    add_common_flags(ablate, ablate_flags, ablate_bindings);
    ablate->add_option("--backbone", ablate_backbone, "reuse a frozen backbone from a checkpoint");

    std::string heatmap_ckpt, heatmap_out = "out";
    CLI::App* heat = app.add_subcommand("heatmap", "reconstruction-loss heatmap from a checkpoint");
    heat->add_option("--checkpoint", heatmap_ckpt, "trained checkpoint")->required();
    heat->add_option("--out", heatmap_out, "output directory");

    std::vector<std::string> report_dirs;
    CLI::App* rep = app.add_subcommand("report", "aggregate metrics.json files across runs");
    rep->add_option("dirs", report_dirs, "run output directories")->required()->expected(-1);

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);

        if (pre->parsed()) {
            ExperimentConfig cfg = build_config(pre_flags, pre_bindings);
            cfg.validate();
            PretrainResult stats;
            ContinualState state;
            state.backbone = pretrain_backbone(cfg, &stats);
            state.bank = AdapterBank(cfg.capacity);
            const std::string out_dir = cfg.out_dir.empty() ? "out" : cfg.out_dir;
            std::filesystem::create_directories(out_dir);
            const auto path = std::filesystem::path(out_dir) / "backbone.rtcl";
            save_checkpoint(state, cfg, path.string());
            std::cout << "pretrained backbone: train_acc=" << stats.train_accuracy
                      << " final_loss=" << stats.final_loss << " digest=" << std::hex
                      << state.backbone.digest << std::dec << "\n"
                      << "saved " << path.string() << "\n";
            return 0;
        }

        const auto do_run = [&](bool ablated, CommonFlags& flags, std::vector<FlagBinding>& bindings,
                                const std::string& backbone_path) {
            ExperimentConfig cfg = build_config(flags, bindings);
            cfg.validate();
            LoadedCheckpoint pre_ckpt;
            const FrozenBackbone* pretrained = nullptr;
            if (!backbone_path.empty()) {
                pre_ckpt = load_checkpoint(backbone_path);
                pretrained = &pre_ckpt.state.backbone;
            }
            RunResult result = ablated ? ablate_routing(cfg, pretrained) : run_continual(cfg, pretrained);
            const std::string out_dir = cfg.out_dir.empty() ? "out" : cfg.out_dir;
            write_outputs(result, out_dir);
            std::cout << "avg_acc=" << result.metrics.avg_acc() << " tasks=" << cfg.tasks
                      << " params_trainable=" << result.metrics.params_trainable() << "\n"
                      << "wrote metrics.csv, metrics.json, heatmap.csv, checkpoint.rtcl under "
                      << out_dir << "\n";
            return 0;
        };

        if (run->parsed()) return do_run(false, run_flags, run_bindings, run_backbone);
        if (ablate->parsed()) return do_run(true, ablate_flags, ablate_bindings, ablate_backbone);

        if (heat->parsed()) {
            LoadedCheckpoint ckpt = load_checkpoint(heatmap_ckpt);
            const auto grid = heatmap_for_state(ckpt.state, ckpt.config);
            std::filesystem::create_directories(heatmap_out);
            const auto path = std::filesystem::path(heatmap_out) / "heatmap.csv";
            std::ofstream f(path, std::ios::binary);
            if (!f) throw Error("cannot write " + path.string());
            f << heatmap_csv(grid);
            std::cout << "wrote " << path.string() << "\n";
            return 0;
        }

        if (rep->parsed()) return cmd_report(report_dirs);

        std::cerr << app.help();
        return 2;
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace rtcl
