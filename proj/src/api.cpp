#include "bionas/api.hpp"

#include <sstream>

namespace bionas {

Dataset dataset_from_kv(const KvConfig& kv, uint64_t seed, bool eval_split) {
    const std::string kind = kv_str(kv, "dataset", "synth");
    if (kind == "synth") {
        const int classes = static_cast<int>(kv_int(kv, "synth_classes", 3));
        const int per_class = static_cast<int>(kv_int(kv, "synth_per_class", 200));
        const index_t side = kv_int(kv, "synth_side", 8);
        const double noise = kv_double(kv, "synth_noise", 0.1);
        // the eval split uses a shifted stream: same class templates, fresh noise
        return gen_synthetic(classes, per_class, side, noise, seed + (eval_split ? 0x7e57 : 0));
    }
    if (kind == "cifar") {
        const std::string dir = kv_str(kv, "data_dir", ".");
        return load_cifar10_bin(dir + "/" + (eval_split ? "test_batch.bin" : "data_batch_1.bin"));
    }
    throw ConfigError("dataset '" + kind + "' unknown (synth|cifar)");
}

SearchSpaceConfig space_from_kv(const KvConfig& kv) {
    SearchSpaceConfig sp;
    const std::string mode = kv_str(kv, "space", "strict");
    if (mode == "strict")
        sp.mode = SpaceMode::strict;
    else if (mode == "paper32")
        sp.mode = SpaceMode::paper32;
    else if (mode != "custom")
        throw ConfigError("space '" + mode + "' unknown (strict|paper32|custom)");
    sp.extended_rules = kv_bool(kv, "extended_rules", false);
    sp.pc_steps = static_cast<int>(kv_int(kv, "pc_steps", 3));
    sp.pc_gating = kv_bool(kv, "pc_gating", false);
    sp.hebbian_scale = kv_double(kv, "hebbian_scale", 1e-4);
    sp.hebbian_normalize = kv_bool(kv, "hebbian_normalize", true);
    if (mode == "custom") {
        const std::string pairs = kv_str(kv, "custom_pairs", "");
        if (pairs.empty()) throw ConfigError("space = custom requires custom_pairs");
        std::istringstream ss(pairs);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const size_t colon = item.find(':');
            if (colon == std::string::npos)
                throw ConfigError("custom_pairs entries must be op:rule, got '" + item + "'");
            sp.custom_pairs.push_back(
                {op_from_token(item.substr(0, colon)), rule_from_token(item.substr(colon + 1))});
        }
    }
    return sp;
}

TrainConfig train_config_from_kv(const KvConfig& kv, uint64_t seed) {
    TrainConfig tc;
    tc.lr = kv_double(kv, "lr", 0.025);
    tc.momentum = kv_double(kv, "momentum", 0.9);
    tc.nesterov = kv_bool(kv, "nesterov", false);
    tc.weight_decay = kv_double(kv, "weight_decay", 3e-4);
    tc.epochs = static_cast<int>(kv_int(kv, "epochs", 30));
    tc.batch_size = kv_int(kv, "batch_size", 96);
    tc.clip_norm = kv_double(kv, "clip_norm", 5.0);
    tc.cutout_length = kv_int(kv, "cutout_length", 0);
    tc.drop_path_prob = kv_double(kv, "drop_path_prob", 0.0);
    const std::string sched = kv_str(kv, "schedule", "cosine");
    if (sched == "cosine")
        tc.schedule = LrSchedule::cosine;
    else if (sched == "linear")
        tc.schedule = LrSchedule::linear;
    else
        throw ConfigError("schedule '" + sched + "' unknown (cosine|linear)");
    tc.label_smoothing = kv_double(kv, "label_smoothing", 0.0);
    tc.random_flip = kv_bool(kv, "random_flip", false);
    tc.random_crop = kv_bool(kv, "random_crop", false);
    tc.crop_padding = kv_int(kv, "crop_padding", 4);
    tc.seed = seed;
    return tc;
}

SearchConfig search_config_from_kv(const KvConfig& kv, uint64_t seed, int threads) {
    SearchConfig sc;
    sc.engine = kv_str(kv, "engine", "darts");
    sc.bilevel.eta_w = kv_double(kv, "eta_w", 0.025);
    sc.bilevel.eta_alpha = kv_double(kv, "eta_alpha", 3e-4);
    sc.bilevel.epochs = static_cast<int>(kv_int(kv, "search_epochs", 10));
    sc.bilevel.warmup_epochs = static_cast<int>(kv_int(kv, "warmup_epochs", 0));
    sc.bilevel.batch_size = kv_int(kv, "search_batch_size", 32);
    sc.bilevel.momentum = kv_double(kv, "momentum", 0.9);
    sc.bilevel.nesterov = kv_bool(kv, "nesterov", false);
    sc.bilevel.weight_decay = kv_double(kv, "weight_decay", 3e-4);
    sc.bilevel.clip_norm = kv_double(kv, "clip_norm", 5.0);
    sc.bilevel.seed = seed;
    sc.fitness.zeta = kv_double(kv, "zeta", 1.0);
    sc.fitness.eta_div = kv_double(kv, "eta_div", 0.01);
    sc.fitness.warmup_steps = static_cast<int>(kv_int(kv, "warmup_steps", 0));
    sc.fitness.batch_size = sc.bilevel.batch_size;
    sc.generations = static_cast<int>(kv_int(kv, "generations", 15));
    sc.lambda = static_cast<int>(kv_int(kv, "lambda", 0));
    sc.sigma0 = kv_double(kv, "sigma0", 0.3);
    sc.xi = kv_double(kv, "xi", 0.5);
    sc.w_steps_per_gen = static_cast<int>(kv_int(kv, "w_steps_per_gen", 8));
    sc.restarts = static_cast<int>(kv_int(kv, "restarts", 1));
    sc.threads = threads;
    sc.seed = seed;
    return sc;
}

SupernetConfig supernet_config_from_kv(const KvConfig& kv, const Dataset& data, uint64_t seed) {
    SupernetConfig sc;
    sc.input_channels = data.images.dim(1);
    sc.init_channels = kv_int(kv, "init_channels", 16);
    sc.cells = static_cast<int>(kv_int(kv, "cells", 5));
    sc.nodes = static_cast<int>(kv_int(kv, "nodes", 4));
    sc.num_classes = static_cast<int>(data.num_classes);
    sc.stem_multiplier = static_cast<int>(kv_int(kv, "stem_multiplier", 3));
    sc.head_rule = rule_from_token(kv_str(kv, "head_rule", "usf"));
    sc.stem_rule = rule_from_token(kv_str(kv, "stem_rule", "bp"));
    sc.space = space_from_kv(kv);
    sc.norm_mean = data.norm_mean;
    sc.norm_std = data.norm_std;
    sc.seed = seed;
    return sc;
}

NetworkConfig network_config_from_kv(const KvConfig& kv, const Dataset& data, uint64_t seed) {
    NetworkConfig nc;
    nc.input_channels = data.images.dim(1);
    nc.num_classes = static_cast<int>(data.num_classes);
    nc.stem_multiplier = static_cast<int>(kv_int(kv, "stem_multiplier", 3));
    nc.head_rule = rule_from_token(kv_str(kv, "head_rule", "usf"));
    nc.stem_rule = rule_from_token(kv_str(kv, "stem_rule", "bp"));
    nc.space = space_from_kv(kv);
    nc.norm_mean = data.norm_mean;
    nc.norm_std = data.norm_std;
    nc.seed = seed;
    return nc;
}

SearchOutcome api_search(const KvConfig& kv, const std::string& engine, uint64_t seed, int threads,
                         const std::atomic<bool>* cancel) {
    Dataset data = dataset_from_kv(kv, seed);
    SupernetConfig scfg = supernet_config_from_kv(kv, data, seed);
    Supernet net(scfg);
    SearchConfig cfg = search_config_from_kv(kv, seed, threads);
    if (!engine.empty()) cfg.engine = engine;
    SearchResult res = run_search(net, data, cfg, cancel);
    // the genotype records the discrete-model scale from the config
    res.genotype.init_channels = kv_int(kv, "init_channels", scfg.init_channels);
    res.genotype.layers = static_cast<int>(kv_int(kv, "layers", scfg.cells));
    return {res.genotype, res.log};
}

TrainOutcome api_train(const KvConfig& kv, const Genotype& genotype, uint64_t seed,
                       const std::string& checkpoint_out, const std::string& resume,
                       GradObserver* observer, const std::atomic<bool>* cancel) {
    Dataset train = dataset_from_kv(kv, seed);
    Dataset test = dataset_from_kv(kv, seed, true);
    NetworkConfig ncfg = network_config_from_kv(kv, train, seed);
    Network net(genotype, ncfg);
    TrainConfig tc = train_config_from_kv(kv, seed);
    MomentumState mom;
    int start_epoch = 0;
    if (!resume.empty()) {
        Checkpoint ck = load_checkpoint(resume);
        net.load_state(ck.tensors, ck.counters);
        momentum_from_state(mom, ck.tensors);
        start_epoch = static_cast<int>(ck.epoch);
    }
    TrainOutcome out;
    out.log = train_model(net, train, test, tc, mom, start_epoch, observer, cancel);
    EvalResult ev = evaluate(net, test, tc.batch_size);
    out.test_acc = ev.top1_acc;
    out.test_loss = ev.loss;
    if (!checkpoint_out.empty()) {
        Checkpoint ck;
        ck.epoch = static_cast<uint64_t>(tc.epochs);
        net.save_state(ck.tensors, ck.counters);
        momentum_to_state(mom, ck.tensors);
        save_checkpoint(checkpoint_out, ck);
    }
    return out;
}

std::unique_ptr<Network> restore_network(const KvConfig& kv, const Genotype& genotype,
                                         uint64_t seed, const std::string& checkpoint_path) {
    Dataset probe = dataset_from_kv(kv, seed);
    NetworkConfig ncfg = network_config_from_kv(kv, probe, seed);
    auto net = std::make_unique<Network>(genotype, ncfg);
    if (!checkpoint_path.empty()) {
        Checkpoint ck = load_checkpoint(checkpoint_path);
        net->load_state(ck.tensors, ck.counters);
    }
    return net;
}

AttackRow api_attack(Model& model, const Dataset& ds, const AttackConfig& cfg, Model* surrogate) {
    AttackResult res = run_attack(model, ds, cfg, surrogate);
    AttackRow row;
    row.attack = cfg.kind;
    row.epsilon = cfg.epsilon;
    row.steps = cfg.steps;
    row.clean_acc = res.clean_acc;
    row.robust_acc = res.robust_acc;
    row.n_samples = ds.size();
    row.seed = cfg.seed;
    return row;
}

void write_attack_csv(const std::string& path, const std::vector<AttackRow>& rows) {
    std::vector<std::vector<std::string>> out;
    for (const AttackRow& r : rows) {
        std::ostringstream eps, ca, ra;
        eps.precision(10);
        ca.precision(10);
        ra.precision(10);
        eps << r.epsilon;
        ca << r.clean_acc;
        ra << r.robust_acc;
        out.push_back({r.attack, eps.str(), std::to_string(r.steps), ca.str(), ra.str(),
                       std::to_string(r.n_samples), std::to_string(r.seed)});
    }
    write_csv(path, {"attack", "epsilon", "steps", "clean_acc", "robust_acc", "n_samples", "seed"},
              out);
}

}  // namespace bionas
