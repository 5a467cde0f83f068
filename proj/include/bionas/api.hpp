#pragma once

#include <atomic>
#include <memory>
#include <string>

#include "bionas/analysis.hpp"
#include "bionas/attacks.hpp"
#include "bionas/search.hpp"

namespace bionas {

// Config-driven entry points shared by the CLI and the python module. All
// knobs arrive as flat key=value text (see configs/ for the presets).

Dataset dataset_from_kv(const KvConfig& kv, uint64_t seed, bool eval_split = false);
SearchSpaceConfig space_from_kv(const KvConfig& kv);
TrainConfig train_config_from_kv(const KvConfig& kv, uint64_t seed);
SearchConfig search_config_from_kv(const KvConfig& kv, uint64_t seed, int threads);
SupernetConfig supernet_config_from_kv(const KvConfig& kv, const Dataset& data, uint64_t seed);
NetworkConfig network_config_from_kv(const KvConfig& kv, const Dataset& data, uint64_t seed);

struct SearchOutcome {
    Genotype genotype;
    std::vector<SearchLogRow> log;
};

SearchOutcome api_search(const KvConfig& kv, const std::string& engine, uint64_t seed, int threads,
                         const std::atomic<bool>* cancel = nullptr);

struct TrainOutcome {
    std::vector<EpochLog> log;
    double test_acc = 0.0;
    double test_loss = 0.0;
};

/// Builds the network from the genotype, trains it on the configured
/// dataset and evaluates on a held-out split. Writes a checkpoint when
/// checkpoint_out is non-empty; resumes bit-exactly when `resume` names an
/// epoch-boundary checkpoint of the same run.
TrainOutcome api_train(const KvConfig& kv, const Genotype& genotype, uint64_t seed,
                       const std::string& checkpoint_out = "", const std::string& resume = "",
                       GradObserver* observer = nullptr,
                       const std::atomic<bool>* cancel = nullptr);

/// Restores a trained network from config + genotype + checkpoint.
std::unique_ptr<Network> restore_network(const KvConfig& kv, const Genotype& genotype,
                                         uint64_t seed, const std::string& checkpoint_path);

struct AttackRow {
    std::string attack;
    double epsilon = 0.0;
    int steps = 0;
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    index_t n_samples = 0;
    uint64_t seed = 0;
};

AttackRow api_attack(Model& model, const Dataset& ds, const AttackConfig& cfg,
                     Model* surrogate = nullptr);

void write_attack_csv(const std::string& path, const std::vector<AttackRow>& rows);

}  // namespace bionas
