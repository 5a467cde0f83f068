#include "bionas/network.hpp"

#include <cmath>

namespace bionas {

namespace {

Tensor column_sums(const Tensor& e) {
    const index_t n = e.dim(0), c = e.dim(1);
    Tensor out({c});
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < c; ++j) out[j] += e[i * c + j];
    return out;
}

void require_state(const StateTensors& t, const std::string& key) {
    if (!t.count(key)) throw DataError("checkpoint is missing tensor '" + key + "'");
}

void load_tensor(const StateTensors& t, const std::string& key, Tensor& dst) {
    require_state(t, key);
    const Tensor& src = t.at(key);
    if (!src.same_shape(dst))
        throw DataError("checkpoint tensor '" + key + "' has shape " + src.shape_str() +
                        ", expected " + dst.shape_str());
    dst = src;
}

void save_feedback(const std::string& name, const FeedbackState& fb, StateTensors& t,
                   StateCounters& c) {
    if (fb.rule == Rule::fa || fb.rule == Rule::dfa) t[name + ".B"] = fb.B;
    if (fb.rule == Rule::frsf) t[name + ".R"] = fb.R;
    c[name + ".rng"] = fb.rng.counter();
}

void load_feedback(const std::string& name, FeedbackState& fb, const StateTensors& t,
                   const StateCounters& c) {
    if (fb.rule == Rule::fa || fb.rule == Rule::dfa) load_tensor(t, name + ".B", fb.B);
    if (fb.rule == Rule::frsf) load_tensor(t, name + ".R", fb.R);
    if (auto it = c.find(name + ".rng"); it != c.end()) fb.rng.set_counter(it->second);
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseModule
// ---------------------------------------------------------------------------

DenseModule::DenseModule(std::string name, index_t in, index_t out, Rule rule, bool bias,
                         RngStream rng)
    : name_(std::move(name)), rule_(rule), has_bias_(bias) {
    w_.name = name_ + ".W";
    w_.value = xavier_uniform({out, in}, in, out, rng);
    w_.grad = Tensor::zeros({out, in});
    if (has_bias_) {
        b_.name = name_ + ".b";
        b_.value = Tensor::zeros({out});
        b_.grad = Tensor::zeros({out});
    }
    if (rule_ != Rule::bp) fb_ = init_feedback_state(rule_, w_.value.shape(), rng.derive(1));
}

Tensor DenseModule::forward(const Tensor& x, Context&) {
    input_ = x;
    Tensor y = matmul(x, transpose(w_.value));
    if (has_bias_) {
        const index_t n = y.dim(0), c = y.dim(1);
        for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < c; ++j) y[i * c + j] += b_.value[j];
    }
    return y.seal("dense");
}

Tensor DenseModule::backward(const Tensor& grad_out, Context& ctx) {
    const Rule transport = ctx.bp_override ? Rule::bp : rule_;
    ActivationRecord rec{input_, Tensor(), Tensor()};
    if (ctx.accumulate_grads) {
        if (ctx.rule_trace) ctx.rule_trace->push_back({w_.name, rule_});
        BackwardResult br = backward_dense(transport, grad_out, rec, fb_, w_.value, 1.0);
        add_inplace(w_.grad, br.delta_w, -1.0);  // delta was -eta*g with eta=1
        if (has_bias_) add_inplace(b_.grad, column_sums(grad_out));
        return br.error_prev;
    }
    FeedbackState scratch = fb_;  // do not advance brsf draws outside training
    BackwardResult br = backward_dense(transport, grad_out, rec, scratch, w_.value, 1.0);
    return br.error_prev;
}

void DenseModule::collect_params(std::vector<Param*>& out) {
    out.push_back(&w_);
    if (has_bias_) out.push_back(&b_);
}

void DenseModule::save_state(StateTensors& t, StateCounters& c) {
    t[w_.name] = w_.value;
    if (has_bias_) t[b_.name] = b_.value;
    if (rule_ != Rule::bp) save_feedback(name_, fb_, t, c);
}

void DenseModule::load_state(const StateTensors& t, const StateCounters& c) {
    load_tensor(t, w_.name, w_.value);
    if (has_bias_) load_tensor(t, b_.name, b_.value);
    if (rule_ != Rule::bp) load_feedback(name_, fb_, t, c);
}

// ---------------------------------------------------------------------------
// Conv2dModule
// ---------------------------------------------------------------------------

Conv2dModule::Conv2dModule(std::string name, index_t c_in, index_t c_out, index_t k,
                           Conv2dSpec spec, Rule rule, RngStream rng)
    : name_(std::move(name)), spec_(spec), rule_(rule) {
    const Shape ws{c_out, c_in / spec.groups, k, k};
    index_t fi, fo;
    weight_fans(ws, fi, fo);
    w_.name = name_ + ".W";
    w_.value = xavier_uniform(ws, fi, fo, rng);
    w_.grad = Tensor::zeros(ws);
    if (rule_ != Rule::bp && is_backward_rule(rule_))
        fb_ = init_feedback_state(rule_, ws, rng.derive(1));
    else if (!is_backward_rule(rule_) && rule_ != Rule::none)
        throw ConfigError("Conv2dModule: rule '" + rule_token(rule_) + "' is not a backward rule");
}

Tensor Conv2dModule::forward(const Tensor& x, Context&) {
    input_ = x;
    return conv2d(x, w_.value, spec_);
}

Tensor Conv2dModule::backward(const Tensor& grad_out, Context& ctx) {
    const Rule transport = ctx.bp_override ? Rule::bp : rule_;
    ActivationRecord rec{input_, Tensor(), Tensor()};
    if (ctx.accumulate_grads) {
        if (ctx.rule_trace) ctx.rule_trace->push_back({w_.name, rule_});
        BackwardResult br = backward_conv(transport, grad_out, rec, fb_, w_.value, spec_, 1.0);
        add_inplace(w_.grad, br.delta_w, -1.0);
        return br.error_prev;
    }
    FeedbackState scratch = fb_;
    BackwardResult br = backward_conv(transport, grad_out, rec, scratch, w_.value, spec_, 1.0);
    return br.error_prev;
}

void Conv2dModule::collect_params(std::vector<Param*>& out) { out.push_back(&w_); }

void Conv2dModule::save_state(StateTensors& t, StateCounters& c) {
    t[w_.name] = w_.value;
    if (rule_ != Rule::bp) save_feedback(name_, fb_, t, c);
}

void Conv2dModule::load_state(const StateTensors& t, const StateCounters& c) {
    load_tensor(t, w_.name, w_.value);
    if (rule_ != Rule::bp) load_feedback(name_, fb_, t, c);
}

// ---------------------------------------------------------------------------
// Stateless modules
// ---------------------------------------------------------------------------

Tensor ReluModule::forward(const Tensor& x, Context&) {
    ReluResult r = relu_forward(x);
    deriv_ = r.deriv;
    return r.y;
}

Tensor ReluModule::backward(const Tensor& grad_out, Context&) { return mul(grad_out, deriv_); }

Tensor PoolModule::forward(const Tensor& x, Context&) {
    input_shape_ = x.shape();
    fw_ = pool2d(x, kind_, 3, stride_);
    return fw_.y;
}

Tensor PoolModule::backward(const Tensor& grad_out, Context&) {
    return pool2d_input_grad(grad_out, kind_, input_shape_, fw_, 3, stride_);
}

Tensor GlobalAvgPoolModule::forward(const Tensor& x, Context&) {
    input_shape_ = x.shape();
    const index_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({n, c});
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < c; ++j) {
            const double* row = x.data() + (i * c + j) * hw;
            double acc = 0;
            for (index_t p = 0; p < hw; ++p) acc += row[p];
            out[i * c + j] = acc / static_cast<double>(hw);
        }
    return out.seal("global_avg_pool");
}

Tensor GlobalAvgPoolModule::backward(const Tensor& grad_out, Context&) {
    const index_t n = input_shape_[0], c = input_shape_[1],
                  hw = input_shape_[2] * input_shape_[3];
    Tensor gx(input_shape_);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < c; ++j) {
            const double g = grad_out[i * c + j] / static_cast<double>(hw);
            double* row = gx.data() + (i * c + j) * hw;
            for (index_t p = 0; p < hw; ++p) row[p] = g;
        }
    return gx;
}

Tensor IdentityModule::forward(const Tensor& x, Context&) { return x; }
Tensor IdentityModule::backward(const Tensor& grad_out, Context&) { return grad_out; }

Tensor ZeroModule::forward(const Tensor& x, Context&) {
    input_shape_ = x.shape();
    const index_t ho = (x.dim(2) - 1) / stride_ + 1;
    const index_t wo = (x.dim(3) - 1) / stride_ + 1;
    return Tensor::zeros({x.dim(0), x.dim(1), ho, wo});
}

Tensor ZeroModule::backward(const Tensor&, Context&) { return Tensor::zeros(input_shape_); }

Tensor SequentialModule::forward(const Tensor& x, Context& ctx) {
    Tensor cur = x;
    for (auto& st : stages_) cur = st->forward(cur, ctx);
    return cur;
}

Tensor SequentialModule::backward(const Tensor& grad_out, Context& ctx) {
    Tensor g = grad_out;
    for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) g = (*it)->backward(g, ctx);
    return g;
}

void SequentialModule::collect_params(std::vector<Param*>& out) {
    for (auto& st : stages_) st->collect_params(out);
}

void SequentialModule::save_state(StateTensors& t, StateCounters& c) {
    for (auto& st : stages_) st->save_state(t, c);
}

void SequentialModule::load_state(const StateTensors& t, const StateCounters& c) {
    for (auto& st : stages_) st->load_state(t, c);
}

NormalizeModule::NormalizeModule(std::vector<double> mean, std::vector<double> std)
    : mean_(std::move(mean)), std_(std::move(std)) {
    for (double s : std_)
        if (s <= 0) throw ConfigError("NormalizeModule: non-positive std");
}

Tensor NormalizeModule::forward(const Tensor& x, Context&) {
    if (x.rank() != 4 || x.dim(1) != static_cast<index_t>(mean_.size()))
        throw ShapeError("NormalizeModule: expected [N," + std::to_string(mean_.size()) +
                         ",H,W], got " + x.shape_str());
    Tensor out(x.shape());
    const index_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < c; ++j) {
            const double m = mean_[static_cast<size_t>(j)], s = std_[static_cast<size_t>(j)];
            const double* src = x.data() + (i * c + j) * hw;
            double* dst = out.data() + (i * c + j) * hw;
            for (index_t p = 0; p < hw; ++p) dst[p] = (src[p] - m) / s;
        }
    return out.seal("normalize");
}

Tensor NormalizeModule::backward(const Tensor& grad_out, Context&) {
    Tensor gx(grad_out.shape());
    const index_t n = grad_out.dim(0), c = grad_out.dim(1), hw = grad_out.dim(2) * grad_out.dim(3);
    for (index_t i = 0; i < n; ++i)
        for (index_t j = 0; j < c; ++j) {
            const double s = std_[static_cast<size_t>(j)];
            const double* src = grad_out.data() + (i * c + j) * hw;
            double* dst = gx.data() + (i * c + j) * hw;
            for (index_t p = 0; p < hw; ++p) dst[p] = src[p] / s;
        }
    return gx;
}

// ---------------------------------------------------------------------------
// Plasticity modules
// ---------------------------------------------------------------------------

HebbianConvModule::HebbianConvModule(std::string name, index_t c_in, index_t c_out, index_t k,
                                     Conv2dSpec spec, double scale, bool normalize, RngStream rng)
    : name_(std::move(name)), spec_(spec) {
    const Shape ws{c_out, c_in, k, k};
    index_t fi, fo;
    weight_fans(ws, fi, fo);
    state_.conv_weights = xavier_uniform(ws, fi, fo, rng);
    state_.hebbian_accumulator = Tensor::zeros(ws);
    state_.hebbian_scale = scale;
    state_.normalize = normalize;
    w_.name = name_ + ".W";
    w_.value = state_.conv_weights;
    w_.grad = Tensor::zeros(ws);
    w_.plastic = true;
}

void HebbianConvModule::sync_param() { w_.value = state_.conv_weights; }

Tensor HebbianConvModule::forward(const Tensor& x, Context& ctx) {
    input_ = x;
    Tensor y = hebbian_forward_update(state_, x, spec_, ctx.training);
    sync_param();
    return y;
}

Tensor HebbianConvModule::backward(const Tensor& grad_out, Context& ctx) {
    // Plasticity already updated the kernel during forward; the backward
    // only transports the data gradient through the (pre-update) weights.
    if (ctx.rule_trace && ctx.accumulate_grads) ctx.rule_trace->push_back({w_.name, Rule::hebb});
    return conv2d_input_grad(grad_out, state_.conv_weights, spec_, input_.shape());
}

void HebbianConvModule::collect_params(std::vector<Param*>& out) { out.push_back(&w_); }

void HebbianConvModule::save_state(StateTensors& t, StateCounters& c) {
    (void)c;
    t[w_.name] = state_.conv_weights;
    t[name_ + ".acc"] = state_.hebbian_accumulator;
}

void HebbianConvModule::load_state(const StateTensors& t, const StateCounters& c) {
    (void)c;
    load_tensor(t, w_.name, state_.conv_weights);
    load_tensor(t, name_ + ".acc", state_.hebbian_accumulator);
    sync_param();
}

PcConvModule::PcConvModule(std::string name, index_t c_in, index_t c_out, index_t k,
                           Conv2dSpec spec, int steps, bool gating, RngStream rng)
    : name_(std::move(name)), spec_(spec) {
    const Shape ws{c_out, c_in, k, k};
    index_t fi, fo;
    weight_fans(ws, fi, fo);
    state_.conv_weights = xavier_uniform(ws, fi, fo, rng);
    state_.error_weights = Tensor::full({c_out}, 1.0);
    state_.prediction_steps = steps;
    state_.gating = gating;
    if (gating) {
        RngStream gate_rng = rng.derive(1);
        state_.gate_weights = xavier_uniform({c_out, c_out, 1, 1}, c_out, c_out, gate_rng);
    }
    if (c_in != c_out || spec.stride != 1) state_.projection = make_channel_projection(c_in, c_out);
    w_ = {name_ + ".W", state_.conv_weights, Tensor::zeros(ws), false};
    ew_ = {name_ + ".ew", state_.error_weights, Tensor::zeros({c_out}), false};
    if (gating)
        gw_ = {name_ + ".gate", state_.gate_weights, Tensor::zeros(state_.gate_weights.shape()),
               false};
}

Tensor PcConvModule::forward(const Tensor& x, Context&) {
    input_ = x;
    state_.conv_weights = w_.value;
    state_.error_weights = ew_.value;
    if (state_.gating) state_.gate_weights = gw_.value;
    rec_ = predictive_coding_forward(state_, x, spec_);
    return rec_.pred;
}

Tensor PcConvModule::backward(const Tensor& grad_out, Context& ctx) {
    PcBackwardResult br = predictive_coding_backward(state_, rec_, input_, grad_out, spec_);
    if (ctx.accumulate_grads) {
        if (ctx.rule_trace) ctx.rule_trace->push_back({w_.name, Rule::pc});
        add_inplace(w_.grad, br.grad_conv_w);
        add_inplace(ew_.grad, br.grad_error_w);
        if (state_.gating) add_inplace(gw_.grad, br.grad_gate_w);
    }
    return br.grad_input;
}

void PcConvModule::collect_params(std::vector<Param*>& out) {
    out.push_back(&w_);
    out.push_back(&ew_);
    if (state_.gating) out.push_back(&gw_);
}

void PcConvModule::save_state(StateTensors& t, StateCounters& c) {
    (void)c;
    t[w_.name] = w_.value;
    t[ew_.name] = ew_.value;
    if (state_.gating) t[gw_.name] = gw_.value;
}

void PcConvModule::load_state(const StateTensors& t, const StateCounters& c) {
    (void)c;
    load_tensor(t, w_.name, w_.value);
    load_tensor(t, ew_.name, ew_.value);
    if (state_.gating) load_tensor(t, gw_.name, gw_.value);
    state_.conv_weights = w_.value;
    state_.error_weights = ew_.value;
    if (state_.gating) state_.gate_weights = gw_.value;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

void Model::zero_grads() {
    for (Param* p : params()) p->grad = Tensor::zeros(p->value.shape());
}

MlpClassifier::MlpClassifier(std::vector<index_t> layer_sizes, std::vector<Rule> rules,
                             uint64_t seed, bool bias)
    : sizes_(std::move(layer_sizes)), rules_(std::move(rules)), seed_(seed), bias_(bias) {
    if (sizes_.size() < 2) throw ConfigError("MlpClassifier: need at least input and output sizes");
    if (rules_.size() != sizes_.size() - 1)
        throw ConfigError("MlpClassifier: one rule per weight layer required");
    RngStream root(seed_, 0x6d6c70);  // model-level stream; layers derive from it
    for (size_t i = 0; i + 1 < sizes_.size(); ++i) {
        Layer l;
        const index_t in = sizes_[i], out = sizes_[i + 1];
        RngStream lr = root.derive(i);
        l.rule = rules_[i];
        l.w.name = "mlp.l" + std::to_string(i) + ".W";
        l.w.value = xavier_uniform({out, in}, in, out, lr);
        l.w.grad = Tensor::zeros({out, in});
        if (bias_) {
            l.b.name = "mlp.l" + std::to_string(i) + ".b";
            l.b.value = Tensor::zeros({out});
            l.b.grad = Tensor::zeros({out});
        }
        l.has_relu = (i + 2 < sizes_.size());
        if (l.rule == Rule::dfa) {
            if (!l.has_relu)
                throw ConfigError("MlpClassifier: dfa only applies to hidden layers");
            l.dfa_fb = init_feedback_state(Rule::dfa, {sizes_.back(), out}, lr.derive(2));
        } else if (l.rule != Rule::bp) {
            if (!is_backward_rule(l.rule))
                throw ConfigError("MlpClassifier: rule '" + rule_token(l.rule) +
                                  "' not usable in dense layers");
            l.fb = init_feedback_state(l.rule, {out, in}, lr.derive(1));
        }
        layers_.push_back(std::move(l));
    }
}

Tensor MlpClassifier::forward(const Tensor& x, Context&) {
    Tensor cur = x;
    for (auto& l : layers_) {
        Tensor z = matmul(cur, transpose(l.w.value));
        if (bias_) {
            const index_t n = z.dim(0), c = z.dim(1);
            for (index_t i = 0; i < n; ++i)
                for (index_t j = 0; j < c; ++j) z[i * c + j] += l.b.value[j];
        }
        z.seal("mlp_dense");
        l.rec.layer_input = cur;
        l.rec.pre_activation = z;
        if (l.has_relu) {
            ReluResult r = relu_forward(z);
            l.rec.activation_derivative = r.deriv;
            cur = r.y;
        } else {
            l.rec.activation_derivative = Tensor();
            cur = z;
        }
    }
    return cur;
}

Tensor MlpClassifier::backward(const Tensor& grad_out, Context& ctx) {
    // grad_out is the error at the logits (e.g. softmax - target)/N.
    Tensor chain = grad_out;
    const Tensor output_error = grad_out;
    for (size_t idx = layers_.size(); idx-- > 0;) {
        Layer& l = layers_[idx];
        const Rule transport = ctx.bp_override ? Rule::bp : l.rule;
        Tensor incoming = chain;
        if (transport == Rule::dfa)
            // direct feedback: this layer's error comes straight from the top
            incoming = dfa_backward(output_error, l.rec, l.dfa_fb);
        ActivationRecord rec = l.rec;
        if (transport == Rule::dfa) rec.activation_derivative = Tensor();  // already applied
        FeedbackState* fb = &l.fb;
        FeedbackState scratch;
        if (!ctx.accumulate_grads) {
            scratch = l.fb;
            fb = &scratch;
        }
        // dfa layers pass the chain downward through their forward weights
        const Rule chain_rule =
            (transport == Rule::dfa || transport == Rule::bp) ? Rule::bp : transport;
        BackwardResult br = backward_dense(chain_rule, incoming, rec, *fb, l.w.value, 1.0);
        if (ctx.accumulate_grads) {
            if (ctx.rule_trace) ctx.rule_trace->push_back({l.w.name, l.rule});
            add_inplace(l.w.grad, br.delta_w, -1.0);
            if (bias_) {
                Tensor e_pre = rec.activation_derivative.empty()
                                   ? incoming
                                   : mul(incoming, rec.activation_derivative);
                add_inplace(l.b.grad, column_sums(e_pre));
            }
        }
        chain = br.error_prev;
    }
    return chain;
}

std::vector<Param*> MlpClassifier::params() {
    std::vector<Param*> out;
    for (auto& l : layers_) {
        out.push_back(&l.w);
        if (bias_) out.push_back(&l.b);
    }
    return out;
}

void MlpClassifier::save_state(StateTensors& t, StateCounters& c) {
    for (size_t i = 0; i < layers_.size(); ++i) {
        Layer& l = layers_[i];
        t[l.w.name] = l.w.value;
        if (bias_) t[l.b.name] = l.b.value;
        const std::string base = "mlp.l" + std::to_string(i);
        if (l.rule == Rule::dfa)
            save_feedback(base + ".dfa", l.dfa_fb, t, c);
        else if (l.rule != Rule::bp)
            save_feedback(base, l.fb, t, c);
    }
}

void MlpClassifier::load_state(const StateTensors& t, const StateCounters& c) {
    for (size_t i = 0; i < layers_.size(); ++i) {
        Layer& l = layers_[i];
        load_tensor(t, l.w.name, l.w.value);
        if (bias_) load_tensor(t, l.b.name, l.b.value);
        const std::string base = "mlp.l" + std::to_string(i);
        if (l.rule == Rule::dfa)
            load_feedback(base + ".dfa", l.dfa_fb, t, c);
        else if (l.rule != Rule::bp)
            load_feedback(base, l.fb, t, c);
    }
}

std::unique_ptr<Model> MlpClassifier::clone() const {
    auto copy = std::make_unique<MlpClassifier>(sizes_, rules_, seed_, bias_);
    StateTensors t;
    StateCounters c;
    const_cast<MlpClassifier*>(this)->save_state(t, c);
    copy->load_state(t, c);
    return copy;
}

LossResult model_loss(Model& model, const Tensor& x, const std::vector<int>& labels, Context& ctx,
                      double label_smoothing) {
    LossResult r;
    r.logits = model.forward(x, ctx);
    SoftmaxXentResult s = softmax_cross_entropy(r.logits, labels, label_smoothing);
    r.loss = s.loss;
    r.output_error = s.output_error;
    r.probs = s.probs;
    return r;
}

Tensor input_gradient(Model& model, const Tensor& x, const std::vector<int>& labels) {
    Context ctx;  // eval mode, no grads, pure BP transport
    ctx.bp_override = true;
    LossResult r = model_loss(model, x, labels, ctx);
    if (!r.output_error.all_finite()) throw NumericError("input_gradient: non-finite loss error");
    return model.backward(r.output_error, ctx);
}

}  // namespace bionas
