#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bionas/api.hpp"

namespace fs = std::filesystem;
using namespace bionas;

namespace {

std::atomic<bool> g_cancel{false};

void handle_sigint(int) { g_cancel = true; }

struct GlobalOpts {
    uint64_t seed = 0;
    std::string precision = "f64";
    int threads = 1;
    std::string config_path;
};

KvConfig resolve_config(const GlobalOpts& g) {
    KvConfig kv;
    if (!g.config_path.empty()) kv = parse_kv_file(g.config_path);
    if (g.precision == "f32")
        set_default_precision(Precision::f32);
    else if (g.precision == "f64")
        set_default_precision(Precision::f64);
    else
        throw ConfigError("--precision must be f32 or f64");
    kv["seed"] = std::to_string(g.seed);
    kv["precision"] = g.precision;
    kv["threads"] = std::to_string(g.threads);
    return kv;
}

void write_provenance(const std::string& dir, const KvConfig& kv) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    write_kv_file(dir + "/resolved_config.cfg", kv);
}

int run_cli(int argc, char** argv) {
    CLI::App app{"joint search over architectures and bio-inspired learning rules"};
    app.require_subcommand(1);
    app.fallthrough(true);  // global flags may follow the subcommand
    GlobalOpts g;
    app.add_option("--seed", g.seed, "global rng seed");
    app.add_option("--precision", g.precision, "f32 or f64 (default f64)");
    app.add_option("--threads", g.threads, "worker threads for candidate evaluation");

    // ---- search ----
    auto* search = app.add_subcommand("search", "run architecture/rule search");
    std::string engine = "darts", geno_out = "genotype.json", log_dir;
    search->add_option("--engine", engine, "darts or cmaes")->check(CLI::IsMember({"darts", "cmaes"}));
    search->add_option("--config", g.config_path, "key=value config file");
    search->add_option("--out", geno_out, "genotype output path");
    search->add_option("--log-dir", log_dir, "directory for search logs");

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a discrete genotype");
    std::string geno_in, ckpt_out = "model.ckpt", resume;
    train->add_option("--genotype", geno_in, "genotype JSON")->required();
    train->add_option("--config", g.config_path, "key=value config file");
    train->add_option("--out", ckpt_out, "checkpoint output path");
    train->add_option("--resume", resume, "resume from a checkpoint");
    train->add_option("--log-dir", log_dir, "directory for training logs");

    // ---- attack ----
    auto* attack = app.add_subcommand("attack", "adversarial evaluation");
    std::string kind = "fgsm", ckpt_in, attack_out = "attacks.csv";
    std::string surrogate_geno, surrogate_ckpt;
    AttackConfig acfg;
    int n_samples = 100;
    attack->add_option("--kind", kind,
                       "fgsm|pgd|tpgd|apgd|one_pixel|square|transfer|all");
    attack->add_option("--config", g.config_path, "key=value config file");
    attack->add_option("--genotype", geno_in, "genotype JSON")->required();
    attack->add_option("--checkpoint", ckpt_in, "trained checkpoint")->required();
    attack->add_option("--surrogate-genotype", surrogate_geno, "transfer surrogate genotype");
    attack->add_option("--surrogate-checkpoint", surrogate_ckpt, "transfer surrogate checkpoint");
    auto* eps_opt = attack->add_option("--epsilon", acfg.epsilon, "perturbation budget");
    auto* alpha_opt = attack->add_option("--alpha", acfg.alpha_step, "step size");
    auto* steps_opt = attack->add_option("--steps", acfg.steps, "iterations");
    attack->add_option("--restarts", acfg.restarts, "restarts (apgd)");
    attack->add_option("--pixels", acfg.pixels, "pixels for one_pixel (1..6)")
        ->check(CLI::Range(1, 6));
    attack->add_option("--queries", acfg.queries, "query budget (square)");
    attack->add_option("--n", n_samples, "samples to attack");
    attack->add_option("--out", attack_out, "CSV output path");

    // ---- analyze ----
    auto* analyze = app.add_subcommand("analyze", "instrumentation and reports");
    analyze->require_subcommand(1);
    std::string out_dir = ".";
    auto* gradvar = analyze->add_subcommand("gradvar", "gradient variance: mixed vs single rules");
    gradvar->add_option("--config", g.config_path, "key=value config file");
    gradvar->add_option("--genotype", geno_in, "genotype JSON")->required();
    gradvar->add_option("--out-dir", out_dir, "output directory");
    auto* weights = analyze->add_subcommand("weights", "weight distribution statistics");
    weights->add_option("--config", g.config_path, "key=value config file");
    weights->add_option("--genotype", geno_in, "genotype JSON")->required();
    weights->add_option("--checkpoint", ckpt_in, "trained checkpoint")->required();
    weights->add_option("--out-dir", out_dir, "output directory");
    auto* reassign = analyze->add_subcommand("reassign", "random rule reassignment study");
    std::string mode = "shuffle";
    int variants = 5;
    bool retrain = false;
    reassign->add_option("--config", g.config_path, "key=value config file");
    reassign->add_option("--genotype", geno_in, "genotype JSON")->required();
    reassign->add_option("--mode", mode, "shuffle or resample")
        ->check(CLI::IsMember({"shuffle", "resample"}));
    reassign->add_option("--count", variants, "number of variants");
    reassign->add_flag("--retrain", retrain, "retrain each variant and report accuracy");
    reassign->add_option("--out-dir", out_dir, "output directory");

    // ---- data ----
    auto* data = app.add_subcommand("data", "dataset utilities");
    data->require_subcommand(1);
    auto* fetch_check = data->add_subcommand("fetch-check", "validate CIFAR-10 binary files");
    std::string data_dir = ".";
    fetch_check->add_option("--dir", data_dir, "directory holding *.bin files");
    auto* synth = data->add_subcommand("synth", "write a synthetic dataset in CIFAR-10 binary form");
    int s_classes = 3, s_per_class = 100;
    index_t s_side = 32;
    double s_noise = 0.1;
    std::string synth_out = "synth.bin";
    synth->add_option("--classes", s_classes, "class count");
    synth->add_option("--per-class", s_per_class, "samples per class");
    synth->add_option("--side", s_side, "image side (must be 32 for the CIFAR container)");
    synth->add_option("--noise", s_noise, "gaussian noise level");
    synth->add_option("--out", synth_out, "output .bin path");

    CLI11_PARSE(app, argc, argv);
    KvConfig kv = resolve_config(g);

    if (*search) {
        write_provenance(log_dir, kv);
        SearchOutcome res = api_search(kv, engine, g.seed, g.threads, &g_cancel);
        save_genotype(geno_out, res.genotype);
        if (!log_dir.empty()) write_search_log(log_dir + "/search_log.csv", res.log);
        if (g_cancel) {
            std::cerr << "interrupted: partial log flushed, genotype derived from current state\n";
        }
        std::cout << "genotype written to " << geno_out << "\n";
        for (const SearchLogRow& row : res.log)
            std::cout << "epoch " << row.epoch << " val_acc " << row.val_acc << " alpha_entropy "
                      << row.alpha_entropy << "\n";
        return 0;
    }

    if (*train) {
        write_provenance(log_dir, kv);
        Genotype geno = load_genotype(geno_in);
        GradVarianceTracker tracker;
        TrainOutcome out = api_train(kv, geno, g.seed, ckpt_out, resume, &tracker, &g_cancel);
        for (size_t i = 0; i < out.log.size() && i < tracker.per_epoch().size(); ++i)
            out.log[i].grad_variance = tracker.per_epoch()[i].second;
        if (!log_dir.empty()) write_training_log(log_dir + "/train_log.csv", out.log);
        if (g_cancel) std::cerr << "interrupted: checkpoint and logs flushed\n";
        std::cout << "test_acc " << out.test_acc << " test_loss " << out.test_loss << "\n";
        return 0;
    }

    if (*attack) {
        Genotype geno = load_genotype(geno_in);
        auto net = restore_network(kv, geno, g.seed, ckpt_in);
        Dataset test = dataset_from_kv(kv, g.seed, true);
        std::vector<index_t> idx;
        for (index_t i = 0; i < std::min<index_t>(n_samples, test.size()); ++i) idx.push_back(i);
        Dataset batch = test.subset(idx);

        std::unique_ptr<Network> surrogate;
        if (!surrogate_ckpt.empty()) {
            Genotype sg = surrogate_geno.empty() ? geno : load_genotype(surrogate_geno);
            surrogate = restore_network(kv, sg, g.seed + 1, surrogate_ckpt);
        }
        std::vector<std::string> kinds;
        if (kind == "all") {
            kinds = {"fgsm", "pgd", "tpgd", "apgd", "one_pixel", "square"};
            if (surrogate) kinds.push_back("transfer");
        } else {
            kinds = {kind};
        }
        std::vector<AttackRow> rows;
        for (const std::string& k : kinds) {
            AttackConfig cfg = acfg;
            cfg.kind = k;
            cfg.seed = g.seed;
            // stock budgets per attack, unless given explicitly
            if (eps_opt->count() == 0)
                cfg.epsilon = (k == "fgsm" || k == "pgd") ? 0.35 : 8.0 / 255.0;
            if (alpha_opt->count() == 0) cfg.alpha_step = 2.0 / 255.0;
            if (steps_opt->count() == 0) cfg.steps = k == "tpgd" ? 7 : (k == "apgd" ? 50 : 10);
            if (k == "transfer" && !surrogate)
                throw ConfigError("transfer attack needs --surrogate-checkpoint");
            rows.push_back(api_attack(*net, batch, cfg, surrogate.get()));
            std::cout << k << " clean_acc " << rows.back().clean_acc << " robust_acc "
                      << rows.back().robust_acc << "\n";
        }
        write_attack_csv(attack_out, rows);
        std::cout << "attack table written to " << attack_out << "\n";
        return 0;
    }

    if (*gradvar) {
        write_provenance(out_dir, kv);
        Genotype geno = load_genotype(geno_in);
        nlohmann::json summary;
        std::vector<std::pair<std::string, Genotype>> configs{{"mixed", geno}};
        for (Rule r : {Rule::bp, Rule::usf, Rule::brsf, Rule::frsf})
            configs.push_back({rule_token(r), with_uniform_rule(geno, r)});
        for (const auto& [tag, variant] : configs) {
            GradVarianceTracker tracker;
            api_train(kv, variant, g.seed, "", "", &tracker, &g_cancel);
            std::vector<std::vector<std::string>> rows;
            std::vector<double> vars;
            for (const auto& [epoch, var] : tracker.per_epoch()) {
                rows.push_back({std::to_string(epoch), std::to_string(var)});
                vars.push_back(var);
            }
            write_csv(out_dir + "/gradvar_" + tag + ".csv", {"epoch", "variance"}, rows,
                      "variance: mean over parameters of per-parameter variance across the "
                      "epoch's batch pseudo-gradients");
            std::sort(vars.begin(), vars.end());
            summary[tag]["median_variance"] = vars.empty() ? 0.0 : vars[vars.size() / 2];
            if (g_cancel) break;
        }
        std::ofstream(out_dir + "/gradvar_summary.json") << summary.dump(2) << "\n";
        std::cout << summary.dump(2) << "\n";
        return 0;
    }

    if (*weights) {
        write_provenance(out_dir, kv);
        Genotype geno = load_genotype(geno_in);
        auto net = restore_network(kv, geno, g.seed, ckpt_in);
        WeightStats ws = weight_distribution(*net);
        std::vector<std::vector<std::string>> rows;
        for (size_t b = 0; b < ws.mass.size(); ++b)
            rows.push_back({std::to_string(ws.bin_left[b]), std::to_string(ws.bin_right[b]),
                            std::to_string(ws.mass[b])});
        write_csv(out_dir + "/weightstats.csv", {"bin_left", "bin_right", "mass"}, rows);
        nlohmann::json summary{{"variance", ws.variance},
                               {"excess_kurtosis", ws.excess_kurtosis},
                               {"clipped_tail_mass", ws.clipped_tail_mass},
                               {"dev_gaussian", ws.dev_gaussian},
                               {"dev_student_t", ws.dev_student_t},
                               {"count", ws.count}};
        std::ofstream(out_dir + "/weightstats_summary.json") << summary.dump(2) << "\n";
        std::cout << summary.dump(2) << "\n";
        return 0;
    }

    if (*reassign) {
        write_provenance(out_dir, kv);
        Genotype geno = load_genotype(geno_in);
        SearchSpaceConfig space = space_from_kv(kv);
        RngStream rng(g.seed, 0x524541);
        const ReassignMode rmode =
            mode == "shuffle" ? ReassignMode::shuffle : ReassignMode::resample;
        std::vector<std::vector<std::string>> rows;
        for (int v = 0; v < variants; ++v) {
            Genotype variant = reassign_rules(geno, rng, rmode, space);
            if (!same_topology(geno, variant))
                throw NumericError("reassign produced a different topology");
            const std::string path = out_dir + "/reassigned_" + std::to_string(v) + ".json";
            save_genotype(path, variant);
            std::string acc = "";
            if (retrain) {
                TrainOutcome out = api_train(kv, variant, g.seed + static_cast<uint64_t>(v));
                acc = std::to_string(out.test_acc);
                std::cout << "variant " << v << " test_acc " << acc << "\n";
            }
            rows.push_back({std::to_string(v), path, acc});
            if (g_cancel) break;
        }
        write_csv(out_dir + "/reassign.csv", {"variant", "genotype", "test_acc"}, rows);
        return 0;
    }

    if (*fetch_check) {
        int files = 0;
        for (const auto& entry : fs::directory_iterator(data_dir)) {
            if (entry.path().extension() != ".bin") continue;
            Dataset ds = load_cifar10_bin(entry.path().string());
            std::cout << entry.path().filename().string() << ": " << ds.size() << " records ok\n";
            ++files;
        }
        if (files == 0) throw DataError("no .bin files found under '" + data_dir + "'");
        return 0;
    }

    if (*synth) {
        if (s_side != 32)
            throw ConfigError("the CIFAR-10 binary container is fixed at 32x32; use --side 32");
        Dataset ds = gen_synthetic(s_classes, s_per_class, s_side, s_noise, g.seed);
        write_cifar10_bin(synth_out, ds);
        std::cout << "wrote " << ds.size() << " records to " << synth_out << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, handle_sigint);
    try {
        return run_cli(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
