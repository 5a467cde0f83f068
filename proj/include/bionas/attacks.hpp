#pragma once

#include <string>
#include <vector>

#include "bionas/dataset.hpp"
#include "bionas/network.hpp"

namespace bionas {

/// Prediction-only access to a model. The black-box attacks (one-pixel,
/// square, the target side of transfer) take this type, so they cannot
/// reach gradients by construction.
class Predictor {
public:
    explicit Predictor(Model& m) : model_(m) {}
    Tensor predict(const Tensor& x) const;

private:
    Model& model_;
};

struct AttackConfig {
    std::string kind = "fgsm";  // fgsm | pgd | tpgd | apgd | one_pixel | square | transfer
    double epsilon = 0.35;
    double alpha_step = 2.0 / 255.0;
    int steps = 10;
    int restarts = 1;
    bool targeted = false;
    bool random_start = true;  // pgd
    int pixels = 1;            // one_pixel
    int de_population = 10;
    int de_steps = 10;
    int queries = 200;  // square
    uint64_t seed = 0;
};

struct AttackResult {
    Tensor adversarial;
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    std::vector<uint8_t> flipped;  // prediction changed clean -> adversarial
};

/// x_adv = clamp(x + eps * sign(grad_x L), 0, 1). Input gradients always
/// come from true backpropagation through the deployed model, whatever rule
/// trained it.
Tensor fgsm(Model& model, const Tensor& x, const std::vector<int>& y, double eps);

/// Iterated FGSM projected onto the L-inf ball, random start optional.
/// targeted=true descends toward the target class ((y+1) mod C).
Tensor pgd(Model& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
           RngStream& rng);

/// Momentum-accelerated PGD with the Auto-PGD checkpoint schedule: the step
/// halves whenever the fraction of loss-improving iterations since the last
/// checkpoint falls below 0.75 (or the best loss stalled with an unchanged
/// step). Returns the best-loss iterate per sample.
Tensor apgd(Model& model, const Tensor& x, const std::vector<int>& y, double eps, int steps,
            int restarts, RngStream& rng);

/// Differential evolution (DE/rand/1/bin, F=0.5, CR=0.9) over k pixel
/// tuples (row, col, r, g, b); the candidate with the lowest true-class
/// confidence is applied. Changes at most k pixels.
Tensor one_pixel(const Predictor& model, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg, RngStream& rng);

/// L-inf random search over square patches, margin-loss acceptance, no
/// gradient access. Patch side starts at ceil(0.8*sqrt(H*W*p0)) with
/// p0=0.05 and p halves at the standard query fractions.
Tensor square_attack(const Predictor& model, const Tensor& x, const std::vector<int>& y,
                     double eps, int queries, RngStream& rng);

/// FGSM adversarials built on the surrogate, evaluated on the target.
/// Returns the target's robust accuracy.
double transfer_attack(Model& surrogate, const Predictor& target, const Tensor& x,
                       const std::vector<int>& y, double eps);

/// Dispatcher: runs cfg.kind over the dataset and fills the accuracy
/// bookkeeping. `surrogate` is only consulted for kind == "transfer".
AttackResult run_attack(Model& model, const Dataset& ds, const AttackConfig& cfg,
                        Model* surrogate = nullptr);

/// Budget checks used inside every attack loop (throw NumericError).
void assert_linf_budget(const Tensor& x, const Tensor& adv, double eps, const char* attack);
void assert_l0_budget(const Tensor& x, const Tensor& adv, index_t max_pixels, const char* attack);
void assert_unit_range(const Tensor& adv, const char* attack);

}  // namespace bionas
