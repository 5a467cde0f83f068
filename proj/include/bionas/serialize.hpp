#pragma once

#include <map>
#include <string>
#include <vector>

#include "bionas/supernet.hpp"
#include "bionas/trainer.hpp"

namespace bionas {

// ---------------------------------------------------------------------------
// Genotype files: UTF-8 JSON
// {version, normal: [[src, op, rule], ...], reduce: [...], init_channels, layers}
// Unknown fields and unknown op/rule tokens are rejected.
// ---------------------------------------------------------------------------

std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);
void save_genotype(const std::string& path, const Genotype& g);
Genotype load_genotype(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary, magic "BIONAS01". Holds named tensors
// (model weights, feedback matrices, momentum buffers), rng counters and
// the epoch. load(save(x)) == x bit-exactly.
// ---------------------------------------------------------------------------

struct Checkpoint {
    uint32_t version = 1;
    uint64_t epoch = 0;
    StateTensors tensors;
    StateCounters counters;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Momentum buffers ride in the same tensor table under "opt." keys.
void momentum_to_state(const MomentumState& mom, StateTensors& t);
void momentum_from_state(MomentumState& mom, const StateTensors& t);

// ---------------------------------------------------------------------------
// Flat key = value config text (# comments). Every run writes its resolved
// config next to its logs.
// ---------------------------------------------------------------------------

using KvConfig = std::map<std::string, std::string>;

KvConfig parse_kv_text(const std::string& text);
KvConfig parse_kv_file(const std::string& path);
std::string kv_to_text(const KvConfig& kv);
void write_kv_file(const std::string& path, const KvConfig& kv);

std::string kv_str(const KvConfig& kv, const std::string& key, const std::string& fallback);
double kv_double(const KvConfig& kv, const std::string& key, double fallback);
int64_t kv_int(const KvConfig& kv, const std::string& key, int64_t fallback);
bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback);

// ---------------------------------------------------------------------------
// CSV logs
// ---------------------------------------------------------------------------

struct SearchLogRow {
    int epoch = 0;
    std::string engine;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double alpha_entropy = 0.0;
    double wall_seconds = 0.0;
};

void write_search_log(const std::string& path, const std::vector<SearchLogRow>& rows);
void write_training_log(const std::string& path, const std::vector<EpochLog>& rows);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows,
               const std::string& comment = "");

}  // namespace bionas
