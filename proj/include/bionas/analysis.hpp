#pragma once

#include <utility>
#include <vector>

#include "bionas/supernet.hpp"
#include "bionas/trainer.hpp"

namespace bionas {

/// Tracks the variance of the pseudo-gradient across the batches of an
/// epoch. The statistic is the mean over parameters of each parameter's
/// sample variance across batch updates (the definition printed into the
/// CSV header). Gradients are observed post-clip, i.e. exactly what enters
/// the momentum update. Detached trackers cost nothing.
class GradVarianceTracker : public GradObserver {
public:
    void on_batch(const std::vector<Param*>& params) override;
    void on_epoch_end(int epoch) override;

    const std::vector<std::pair<int, double>>& per_epoch() const { return epochs_; }
    /// Variance of the batches observed since the last epoch end (the
    /// value on_epoch_end would record). n < 2 batches gives 0.
    double current_variance() const;
    void reset();

private:
    std::vector<double> mean_, m2_;
    int64_t batches_ = 0;
    std::vector<std::pair<int, double>> epochs_;
};

struct WeightStats {
    std::vector<double> bin_left, bin_right, mass;
    double clipped_tail_mass = 0.0;  // fraction outside [-2,2]
    double variance = 0.0;
    double excess_kurtosis = 0.0;
    double dev_gaussian = 0.0;   // L1 gap to N(0, variance) bin masses
    double dev_student_t = 0.0;  // L1 gap to variance-matched Student-t(10)
    int64_t count = 0;
};

/// Pools every conv/dense kernel (params named *.W), histograms them over
/// [-2,2] and compares the shape against a Gaussian and a Student-t(10)
/// reference of matching variance.
WeightStats weight_distribution(Model& model, int bins = 80);

enum class ReassignMode { shuffle, resample };

/// Returns a genotype with identical op topology and permuted (shuffle) or
/// freshly drawn (resample) rules; each op only ever receives a rule from
/// its admissible set. Deterministic per rng state.
Genotype reassign_rules(const Genotype& g, RngStream& rng, ReassignMode mode,
                        const SearchSpaceConfig& space);

/// True when the two genotypes share the exact (src, op) structure.
bool same_topology(const Genotype& a, const Genotype& b);

/// Same topology with every rule-bearing op forced to `rule` (the
/// single-rule baselines of the gradient-variance comparison).
Genotype with_uniform_rule(const Genotype& g, Rule rule);

}  // namespace bionas
