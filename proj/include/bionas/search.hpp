#pragma once

#include <functional>
#include <vector>

#include "bionas/dataset.hpp"
#include "bionas/serialize.hpp"
#include "bionas/supernet.hpp"
#include "bionas/trainer.hpp"

namespace bionas {

// ---------------------------------------------------------------------------
// BioNAS-DARTS: first-order bilevel alternation
// ---------------------------------------------------------------------------

struct BilevelConfig {
    double eta_w = 0.025;      // weight learning rate
    double eta_alpha = 3e-4;   // architecture learning rate
    int epochs = 50;
    int warmup_epochs = 0;  // train weights only before alpha moves
    index_t batch_size = 64;
    double momentum = 0.9;
    bool nesterov = false;
    double weight_decay = 3e-4;
    double clip_norm = 5.0;
    uint64_t seed = 0;
};

struct DartsStepResult {
    double loss_train = 0.0;
    double loss_val = 0.0;
};

/// One alternation: update w on the train batch through each branch's
/// declared rule (momentum SGD at lr eta_w), then update alpha by the exact
/// gradient of the validation loss through the softmax mixture (branch
/// weights held fixed, data transport pure BP).
DartsStepResult darts_step(Supernet& net, const Tensor& train_x, const std::vector<int>& train_y,
                           const Tensor& val_x, const std::vector<int>& val_y,
                           const BilevelConfig& cfg, MomentumState& mom);

// ---------------------------------------------------------------------------
// CMA-ES
// ---------------------------------------------------------------------------

/// Search-distribution state. The covariance update follows the rank-one /
/// rank-mu form with recombination of the sampled points themselves; the
/// evolution-path recursion and cumulative step-size adaptation follow the
/// standard Hansen formulation. sigma is kept in (0,1].
struct CmaEsState {
    std::vector<double> mean;
    std::vector<std::vector<double>> C;
    double sigma = 0.3;
    std::vector<double> p_c, p_sigma;
    int lambda = 0;
    int mu = 0;
    std::vector<double> weights;  // beta_i, positive, decreasing, sum 1
    double mu_eff = 0.0, c1 = 0.0, c_mu = 0.0, c_c = 0.0, c_sigma = 0.0, d_sigma = 0.0;
    double chi_n = 0.0;
    int iteration = 0;

    static CmaEsState init(index_t dim, int lambda /* 0 = 4 + floor(3 ln d) */, double sigma0);
};

/// lambda samples m + sigma * L z with L = chol(C). On a Cholesky failure
/// the covariance is repaired (1e-10 * trace/d added to the diagonal) and
/// the factorization retried once.
std::vector<std::vector<double>> cmaes_ask(CmaEsState& state, RngStream& rng);

/// Candidates must arrive sorted ascending by fitness (best first).
void cmaes_update(CmaEsState& state, const std::vector<std::vector<double>>& sorted_candidates);

/// Cholesky with the repair rule above; throws NumericError if C stays
/// indefinite after the retry.
std::vector<std::vector<double>> cholesky_or_repair(std::vector<std::vector<double>>& C);

// ---------------------------------------------------------------------------
// Compound fitness
// ---------------------------------------------------------------------------

struct FitnessConfig {
    double zeta = 1.0;
    double eta_div = 0.01;  // the diversity coefficient (paper's eta)
    int warmup_steps = 0;   // per-candidate weight warm-up on a clone
    index_t batch_size = 64;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

/// f = zeta*L1 - eta*L2 if Acc(incumbent) > Acc(candidate), else
/// f = zeta*L1 + eta*L2, with L1 the candidate's validation cross-entropy
/// and L2 the cosine similarity of the two alpha vectors. Lower is better.
double compound_fitness(const std::vector<double>& candidate_alpha,
                        const std::vector<double>& incumbent_alpha, Supernet& net,
                        const Dataset& val, const FitnessConfig& cfg);

// ---------------------------------------------------------------------------
// run_search
// ---------------------------------------------------------------------------

struct SearchConfig {
    std::string engine = "darts";  // "darts" | "cmaes"
    BilevelConfig bilevel;
    FitnessConfig fitness;
    // cmaes-specific
    int generations = 15;
    int lambda = 0;           // 0 = default population
    double sigma0 = 0.3;
    double xi = 0.5;          // incumbent step toward the recombined mean
    int w_steps_per_gen = 8;  // shared-weight SGD batches per generation
    int restarts = 1;         // multi-start when > 1
    int threads = 1;
    uint64_t seed = 0;
};

struct SearchResult {
    Genotype genotype;
    std::vector<SearchLogRow> log;
};

/// Runs the configured engine on a half/half train-val split of `data` and
/// returns the discretized genotype plus the per-epoch log.
SearchResult run_search(Supernet& net, const Dataset& data, const SearchConfig& cfg,
                        const std::atomic<bool>* cancel = nullptr);

}  // namespace bionas
