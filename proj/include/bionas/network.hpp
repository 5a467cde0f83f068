#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bionas/rules.hpp"

namespace bionas {

/// Named trainable tensor. `grad` holds the pseudo-gradient the layer's
/// rule produced (true gradient for bp). Plastic parameters (hebbian
/// kernels) update during forward and are skipped by the optimizer.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool plastic = false;
};

using StateTensors = std::map<std::string, Tensor>;
using StateCounters = std::map<std::string, uint64_t>;

struct RuleTraceEvent {
    std::string param;
    Rule rule;
};

/// Per-pass options threaded through forward/backward.
struct Context {
    bool training = false;
    bool accumulate_grads = false;  // write pseudo-gradients into Param::grad
    bool bp_override = false;       // force true-BP error transport (attacks, alpha step)
    bool accumulate_alpha = false;  // supernet: collect d loss / d alpha
    double drop_path_prob = 0.0;
    RngStream* drop_rng = nullptr;
    std::vector<RuleTraceEvent>* rule_trace = nullptr;
};

class Module {
public:
    virtual ~Module() = default;
    virtual Tensor forward(const Tensor& x, Context& ctx) = 0;
    /// Consumes the gradient w.r.t. this module's output, accumulates
    /// parameter pseudo-gradients (per the module's rule), and returns the
    /// gradient w.r.t. its input. Must follow a forward call.
    virtual Tensor backward(const Tensor& grad_out, Context& ctx) = 0;
    virtual void collect_params(std::vector<Param*>& out) { (void)out; }
    virtual void save_state(StateTensors& t, StateCounters& c) { (void)t; (void)c; }
    virtual void load_state(const StateTensors& t, const StateCounters& c) { (void)t; (void)c; }
};

using ModulePtr = std::unique_ptr<Module>;

// ---------------------------------------------------------------------------
// Primitive modules
// ---------------------------------------------------------------------------

class DenseModule : public Module {
public:
    DenseModule(std::string name, index_t in, index_t out, Rule rule, bool bias, RngStream rng);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

    Param& weight() { return w_; }
    FeedbackState& feedback() { return fb_; }

private:
    std::string name_;
    Rule rule_;
    Param w_, b_;
    bool has_bias_;
    FeedbackState fb_;
    Tensor input_;
};

class Conv2dModule : public Module {
public:
    Conv2dModule(std::string name, index_t c_in, index_t c_out, index_t k, Conv2dSpec spec,
                 Rule rule, RngStream rng);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

    Param& weight() { return w_; }
    FeedbackState& feedback() { return fb_; }
    const Conv2dSpec& spec() const { return spec_; }

private:
    std::string name_;
    Conv2dSpec spec_;
    Rule rule_;
    Param w_;
    FeedbackState fb_;
    Tensor input_;
};

class ReluModule : public Module {
public:
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;

private:
    Tensor deriv_;
};

class PoolModule : public Module {
public:
    PoolModule(PoolKind kind, index_t stride) : kind_(kind), stride_(stride) {}
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;

private:
    PoolKind kind_;
    index_t stride_;
    Shape input_shape_;
    PoolResult fw_;
};

class GlobalAvgPoolModule : public Module {
public:
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;

private:
    Shape input_shape_;
};

class IdentityModule : public Module {
public:
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
};

/// The DARTS zero op: kills the signal (and its gradient), subsampling
/// spatially when stride > 1.
class ZeroModule : public Module {
public:
    explicit ZeroModule(index_t stride) : stride_(stride) {}
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;

private:
    index_t stride_;
    Shape input_shape_;
};

class SequentialModule : public Module {
public:
    explicit SequentialModule(std::vector<ModulePtr> stages) : stages_(std::move(stages)) {}
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

private:
    std::vector<ModulePtr> stages_;
};

/// Per-channel input standardization (x - mean) / std; constants fixed.
class NormalizeModule : public Module {
public:
    NormalizeModule(std::vector<double> mean, std::vector<double> std);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;

private:
    std::vector<double> mean_, std_;
};

class HebbianConvModule : public Module {
public:
    HebbianConvModule(std::string name, index_t c_in, index_t c_out, index_t k, Conv2dSpec spec,
                      double scale, bool normalize, RngStream rng);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

    HebbianConvState& plasticity() { return state_; }

private:
    void sync_param();
    std::string name_;
    Conv2dSpec spec_;
    HebbianConvState state_;
    Param w_;  // mirrors state_.conv_weights; plastic
    Tensor input_;
};

class PcConvModule : public Module {
public:
    PcConvModule(std::string name, index_t c_in, index_t c_out, index_t k, Conv2dSpec spec,
                 int steps, bool gating, RngStream rng);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    void collect_params(std::vector<Param*>& out) override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;

private:
    std::string name_;
    Conv2dSpec spec_;
    PredictiveCodingConvState state_;
    Param w_, ew_, gw_;
    Tensor input_;
    PcForwardRecord rec_;
};

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

class Model {
public:
    virtual ~Model() = default;
    virtual Tensor forward(const Tensor& x, Context& ctx) = 0;
    virtual Tensor backward(const Tensor& grad_out, Context& ctx) = 0;
    virtual std::vector<Param*> params() = 0;
    virtual void save_state(StateTensors& t, StateCounters& c) = 0;
    virtual void load_state(const StateTensors& t, const StateCounters& c) = 0;
    virtual index_t num_classes() const = 0;
    virtual std::unique_ptr<Model> clone() const = 0;

    void zero_grads();
};

/// Plain MLP classifier with a per-layer rule assignment; the fixture model
/// for rule-level experiments. Hidden layers use ReLU, the head is linear.
/// rules[i] == dfa routes the output error straight to hidden layer i
/// through a fixed random matrix.
class MlpClassifier : public Model {
public:
    MlpClassifier(std::vector<index_t> layer_sizes, std::vector<Rule> rules, uint64_t seed,
                  bool bias = true);
    Tensor forward(const Tensor& x, Context& ctx) override;
    Tensor backward(const Tensor& grad_out, Context& ctx) override;
    std::vector<Param*> params() override;
    void save_state(StateTensors& t, StateCounters& c) override;
    void load_state(const StateTensors& t, const StateCounters& c) override;
    index_t num_classes() const override { return sizes_.back(); }
    std::unique_ptr<Model> clone() const override;

    size_t num_layers() const { return layers_.size(); }
    const Tensor& layer_weight(size_t i) const { return layers_[i].w.value; }
    FeedbackState& layer_feedback(size_t i) { return layers_[i].fb; }

private:
    struct Layer {
        Param w, b;
        Rule rule;
        FeedbackState fb;
        FeedbackState dfa_fb;  // used when rule == dfa
        bool has_relu;
        ActivationRecord rec;
    };
    std::vector<index_t> sizes_;
    std::vector<Rule> rules_;
    uint64_t seed_;
    bool bias_;
    std::vector<Layer> layers_;
};

/// Forward + cross-entropy in one call.
struct LossResult {
    double loss = 0.0;
    Tensor output_error;
    Tensor logits;
    Tensor probs;
};
LossResult model_loss(Model& model, const Tensor& x, const std::vector<int>& labels, Context& ctx,
                      double label_smoothing = 0.0);

/// d loss / d input through true backpropagation, independent of the rules
/// the model was trained with. No parameter gradients are touched.
Tensor input_gradient(Model& model, const Tensor& x, const std::vector<int>& labels);

}  // namespace bionas
