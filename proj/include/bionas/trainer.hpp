#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bionas/dataset.hpp"
#include "bionas/network.hpp"

namespace bionas {

enum class LrSchedule { cosine, linear };

struct TrainConfig {
    double lr = 0.025;
    double momentum = 0.9;
    bool nesterov = false;
    double weight_decay = 3e-4;
    int epochs = 1;
    index_t batch_size = 96;
    double clip_norm = 5.0;  // <= 0 disables clipping
    index_t cutout_length = 0;
    double drop_path_prob = 0.0;
    LrSchedule schedule = LrSchedule::cosine;
    double label_smoothing = 0.0;
    bool random_flip = false;
    bool random_crop = false;
    index_t crop_padding = 4;
    uint64_t seed = 0;
};

/// Momentum buffers keyed by parameter name, serialized with checkpoints.
struct MomentumState {
    std::map<std::string, Tensor> v;
};

double lr_at_epoch(const TrainConfig& cfg, int epoch);

/// Zeroes one length x length square, center uniform over the image and
/// clipped at the borders. length = 0 is the identity. image is [C,H,W].
Tensor cutout(const Tensor& image, index_t length, RngStream& rng);

/// Per-sample stochastic branch drop: with probability p the sample's
/// output is zeroed, otherwise scaled by 1/(1-p). Identity in eval mode.
Tensor drop_path(const Tensor& branch_output, double p, RngStream& rng, bool training);

/// Observer the trainer feeds with post-clip pseudo-gradients each batch.
class GradObserver {
public:
    virtual ~GradObserver() = default;
    virtual void on_batch(const std::vector<Param*>& params) = 0;
    virtual void on_epoch_end(int epoch) = 0;
};

struct StepResult {
    double loss = 0.0;
    index_t correct = 0;  // argmax hits on the training forward's logits
};

/// One SGD step: forward, per-rule backward, global-norm clip, momentum +
/// coupled weight decay, parameter update. Returns the batch loss.
/// lr_now <= 0 leaves the weights (and buffers) untouched.
StepResult train_step(Model& model, const Tensor& x, const std::vector<int>& labels,
                      const TrainConfig& cfg, MomentumState& mom, double lr_now,
                      GradObserver* observer = nullptr, RngStream* drop_rng = nullptr,
                      std::vector<RuleTraceEvent>* trace = nullptr);

struct EvalResult {
    double top1_acc = 0.0;
    double loss = 0.0;
};

EvalResult evaluate(Model& model, const Dataset& ds, index_t batch_size = 256);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double grad_variance = 0.0;
    double wall_seconds = 0.0;
};

/// Full training loop. Batch order, augmentation and drop-path draws are
/// all derived from (cfg.seed, epoch), so resuming from an epoch-boundary
/// checkpoint replays the exact remaining run. `cancel` is polled at batch
/// boundaries.
std::vector<EpochLog> train_model(Model& model, const Dataset& train, const Dataset& val,
                                  const TrainConfig& cfg, MomentumState& mom, int start_epoch = 0,
                                  GradObserver* observer = nullptr,
                                  const std::atomic<bool>* cancel = nullptr,
                                  std::function<void(const EpochLog&)> on_epoch = nullptr);

}  // namespace bionas
