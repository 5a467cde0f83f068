#include "bionas/rules.hpp"

#include <cmath>

namespace bionas {

std::string rule_token(Rule r) {
    switch (r) {
        case Rule::bp: return "bp";
        case Rule::fa: return "fa";
        case Rule::dfa: return "dfa";
        case Rule::usf: return "usf";
        case Rule::brsf: return "brsf";
        case Rule::frsf: return "frsf";
        case Rule::hebb: return "hebb";
        case Rule::pc: return "pc";
        case Rule::none: return "none";
    }
    return "none";
}

Rule rule_from_token(const std::string& tok) {
    if (tok == "bp") return Rule::bp;
    if (tok == "fa") return Rule::fa;
    if (tok == "dfa") return Rule::dfa;
    if (tok == "usf") return Rule::usf;
    if (tok == "brsf") return Rule::brsf;
    if (tok == "frsf") return Rule::frsf;
    if (tok == "hebb") return Rule::hebb;
    if (tok == "pc") return Rule::pc;
    if (tok == "none") return Rule::none;
    throw ConfigError("unknown rule token '" + tok + "'");
}

bool is_backward_rule(Rule r) {
    return r == Rule::bp || r == Rule::fa || r == Rule::dfa || r == Rule::usf || r == Rule::brsf ||
           r == Rule::frsf;
}

bool is_forward_time_rule(Rule r) { return r == Rule::hebb || r == Rule::pc; }

namespace {

Tensor abs_xavier(const Shape& shape, index_t fan_in, index_t fan_out, RngStream& rng) {
    Tensor t = xavier_uniform(shape, fan_in, fan_out, rng);
    for (index_t i = 0; i < t.numel(); ++i) t[i] = std::fabs(t[i]);
    return t;
}

}  // namespace

FeedbackState init_feedback_state(Rule rule, const Shape& w_shape, RngStream rng) {
    FeedbackState st;
    st.rule = rule;
    st.rng = rng;
    weight_fans(w_shape, st.fan_in, st.fan_out);
    switch (rule) {
        case Rule::fa:
        case Rule::dfa:
            st.B = xavier_uniform(w_shape, st.fan_in, st.fan_out, st.rng);
            break;
        case Rule::frsf:
            st.R = abs_xavier(w_shape, st.fan_in, st.fan_out, st.rng);
            break;
        default:
            break;
    }
    return st;
}

Tensor compute_feedback_matrix(Rule rule, const Tensor& w, FeedbackState& state) {
    if (is_forward_time_rule(rule))
        throw ConfigError("compute_feedback_matrix: '" + rule_token(rule) + "' is a forward-time rule");
    switch (rule) {
        case Rule::bp:
            throw ConfigError("compute_feedback_matrix: bp uses the forward weights directly");
        case Rule::fa:
        case Rule::dfa:
            if (!state.B.same_shape(w) && rule == Rule::fa)
                throw ShapeError("compute_feedback_matrix: stored B shape " + state.B.shape_str() +
                                 " != W shape " + w.shape_str());
            return state.B;
        case Rule::usf:
            return sign(w);
        case Rule::brsf: {
            Tensor r = abs_xavier(w.shape(), state.fan_in, state.fan_out, state.rng);
            return mul(r, sign(w));
        }
        case Rule::frsf:
            if (!state.R.same_shape(w))
                throw ShapeError("compute_feedback_matrix: frsf magnitudes shape mismatch");
            return mul(state.R, sign(w));
        default:
            throw ConfigError("compute_feedback_matrix: unsupported rule");
    }
}

namespace {

Tensor apply_activation_derivative(const Tensor& error_next, const ActivationRecord& rec,
                                   const char* op) {
    if (!error_next.all_finite()) throw NumericError(std::string(op) + ": non-finite incoming error");
    // An empty derivative means a linear layer (phi = identity).
    if (rec.activation_derivative.empty()) return error_next;
    if (!error_next.same_shape(rec.activation_derivative))
        throw ShapeError(std::string(op) + ": error shape " + error_next.shape_str() +
                         " != activation derivative shape " + rec.activation_derivative.shape_str());
    return mul(error_next, rec.activation_derivative);
}

}  // namespace

BackwardResult backward_dense(Rule rule, const Tensor& error_next, const ActivationRecord& record,
                              FeedbackState& state, const Tensor& w, double eta) {
    Tensor e_pre = apply_activation_derivative(error_next, record, "backward_dense");
    // delta_w = -eta . e_pre^T . y_prev, the true local correlation
    BackwardResult out;
    out.delta_w = scale(matmul(transpose(e_pre), record.layer_input), -eta);
    const Tensor& b = (rule == Rule::bp) ? w : (state.B = compute_feedback_matrix(rule, w, state));
    out.error_prev = matmul(e_pre, b);
    return out;
}

BackwardResult backward_conv(Rule rule, const Tensor& error_next, const ActivationRecord& record,
                             FeedbackState& state, const Tensor& w, const Conv2dSpec& spec,
                             double eta) {
    Tensor e_pre = apply_activation_derivative(error_next, record, "backward_conv");
    BackwardResult out;
    out.delta_w = scale(conv2d_weight_grad(record.layer_input, e_pre, spec, w.shape()), -eta);
    const Tensor& b = (rule == Rule::bp) ? w : (state.B = compute_feedback_matrix(rule, w, state));
    out.error_prev = conv2d_input_grad(e_pre, b, spec, record.layer_input.shape());
    return out;
}

Tensor dfa_backward(const Tensor& output_error, const ActivationRecord& record,
                    const FeedbackState& state) {
    if (state.rule != Rule::dfa) throw ConfigError("dfa_backward: state is not a dfa state");
    if (output_error.rank() != 2 || state.B.rank() != 2 || output_error.dim(1) != state.B.dim(0))
        throw ShapeError("dfa_backward: output error " + output_error.shape_str() +
                         " incompatible with B " + state.B.shape_str());
    Tensor transported = matmul(output_error, state.B);
    if (!transported.same_shape(record.activation_derivative))
        throw ShapeError("dfa_backward: transported error " + transported.shape_str() +
                         " != layer derivative " + record.activation_derivative.shape_str());
    return mul(transported, record.activation_derivative).seal("dfa_backward");
}

// ---------------------------------------------------------------------------
// Hebbian convolution
// ---------------------------------------------------------------------------

Tensor hebbian_forward_update(HebbianConvState& state, const Tensor& x, const Conv2dSpec& spec,
                              bool training) {
    if (state.hebbian_scale < 0) throw ConfigError("hebbian_forward_update: negative scale");
    Tensor y = conv2d(x, state.conv_weights, spec);
    if (!training || state.hebbian_scale == 0.0) return y;

    const Shape& ws = state.conv_weights.shape();
    const index_t cout = ws[0], cpg = ws[1], k = ws[2];
    if (spec.groups != 1)
        throw ShapeError("hebbian_forward_update: grouped kernels not supported");
    const index_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const index_t ho = y.dim(2), wo = y.dim(3);
    const index_t patch = cpg * k * k;

    Tensor update({cout, cpg, k, k});
    std::vector<double> in_patch(static_cast<size_t>(patch));
    std::vector<double> out_patch(static_cast<size_t>(cout));
    index_t count = 0;
    for (index_t ni = 0; ni < n; ++ni) {
        for (index_t oh = 0; oh < ho; ++oh) {
            for (index_t ow = 0; ow < wo; ++ow) {
                // gather the input window (zeros where padding reaches out)
                index_t p = 0;
                for (index_t ci = 0; ci < cin; ++ci) {
                    for (index_t kh = 0; kh < k; ++kh) {
                        const index_t ih = oh * spec.stride - spec.padding + kh * spec.dilation;
                        for (index_t kw = 0; kw < k; ++kw) {
                            const index_t iw = ow * spec.stride - spec.padding + kw * spec.dilation;
                            in_patch[static_cast<size_t>(p++)] =
                                (ih < 0 || ih >= h || iw < 0 || iw >= w)
                                    ? 0.0
                                    : x[((ni * cin + ci) * h + ih) * w + iw];
                        }
                    }
                }
                for (index_t co = 0; co < cout; ++co)
                    out_patch[static_cast<size_t>(co)] = y[((ni * cout + co) * ho + oh) * wo + ow];
                double in_n = 0.0, out_n = 0.0;
                for (double v : in_patch) in_n += v * v;
                for (double v : out_patch) out_n += v * v;
                in_n = std::sqrt(in_n);
                out_n = std::sqrt(out_n);
                if (in_n == 0.0 || out_n == 0.0) {
                    ++count;
                    continue;
                }
                const double inv = 1.0 / (in_n * out_n);
                for (index_t co = 0; co < cout; ++co) {
                    const double yo = out_patch[static_cast<size_t>(co)] * inv;
                    double* urow = update.data() + co * patch;
                    for (index_t pi = 0; pi < patch; ++pi)
                        urow[pi] += yo * in_patch[static_cast<size_t>(pi)];
                }
                ++count;
            }
        }
    }
    if (count > 0) scale_inplace(update, state.hebbian_scale / static_cast<double>(count));
    update.seal("hebbian_update");
    add_inplace(state.conv_weights, update);
    add_inplace(state.hebbian_accumulator, update);
    if (state.normalize) {
        for (index_t co = 0; co < cout; ++co) {
            double* row = state.conv_weights.data() + co * patch;
            double nrm = 0.0;
            for (index_t pi = 0; pi < patch; ++pi) nrm += row[pi] * row[pi];
            nrm = std::sqrt(nrm);
            if (nrm > state.norm_cap) {
                const double f = state.norm_cap / nrm;
                for (index_t pi = 0; pi < patch; ++pi) row[pi] *= f;
            }
        }
    }
    state.conv_weights.seal("hebbian_weights");
    return y;
}

// ---------------------------------------------------------------------------
// Predictive-coding convolution
// ---------------------------------------------------------------------------

Tensor make_channel_projection(index_t c_in, index_t c_out) {
    Tensor p({c_out, c_in, 1, 1});
    const double v = 1.0 / static_cast<double>(c_in);
    for (index_t i = 0; i < p.numel(); ++i) p[i] = v;
    return p;
}

namespace {

Tensor broadcast_channel(const Tensor& per_channel, const Shape& like) {
    Tensor out(like);
    const index_t n = like[0], c = like[1], hw = like[2] * like[3];
    for (index_t ni = 0; ni < n; ++ni)
        for (index_t ci = 0; ci < c; ++ci) {
            const double v = per_channel[ci];
            double* row = out.data() + (ni * c + ci) * hw;
            for (index_t i = 0; i < hw; ++i) row[i] = v;
        }
    return out;
}

Tensor sigmoid(const Tensor& t) {
    Tensor out(t.shape());
    for (index_t i = 0; i < t.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-t[i]));
    return out;
}

}  // namespace

PcForwardRecord predictive_coding_forward(const PredictiveCodingConvState& state, const Tensor& x,
                                          const Conv2dSpec& spec) {
    if (state.prediction_steps < 1)
        throw ConfigError("predictive_coding_forward: prediction_steps must be >= 1");
    PcForwardRecord rec;
    rec.pred0 = conv2d(x, state.conv_weights, spec);
    if (state.projection.empty()) {
        if (x.dim(1) != rec.pred0.dim(1) || !x.same_shape(rec.pred0))
            throw ShapeError("predictive_coding_forward: x - pred undefined for " + x.shape_str() +
                             " vs " + rec.pred0.shape_str() + " (projection required)");
        rec.x_proj = x;
    } else {
        Conv2dSpec pspec;
        pspec.stride = spec.stride;
        rec.x_proj = conv2d(x, state.projection, pspec);
        if (!rec.x_proj.same_shape(rec.pred0))
            throw ShapeError("predictive_coding_forward: projected input " + rec.x_proj.shape_str() +
                             " does not match prediction " + rec.pred0.shape_str());
    }
    Tensor ew = broadcast_channel(state.error_weights, rec.pred0.shape());
    Tensor pred = rec.pred0;
    for (int s = 0; s < state.prediction_steps; ++s) {
        rec.step_pred.push_back(pred);
        Tensor err = sub(rec.x_proj, pred);
        rec.step_error.push_back(err);
        if (state.gating) {
            Conv2dSpec g1;
            Tensor gate = sigmoid(conv2d(pred, state.gate_weights, g1));
            rec.step_gate.push_back(gate);
            err = mul(err, gate);
        }
        pred = add(pred, mul(ew, err));
    }
    rec.pred = pred.seal("predictive_coding_forward");
    return rec;
}

PcBackwardResult predictive_coding_backward(const PredictiveCodingConvState& state,
                                            const PcForwardRecord& rec, const Tensor& x,
                                            const Tensor& grad_pred, const Conv2dSpec& spec) {
    PcBackwardResult out;
    const Shape& ps = rec.pred0.shape();
    const index_t n = ps[0], c = ps[1], hw = ps[2] * ps[3];
    Tensor ew = broadcast_channel(state.error_weights, ps);
    Tensor g = grad_pred;                 // d L / d pred_{s+1}
    Tensor g_xproj(ps);                   // accumulated d L / d x_proj
    out.grad_error_w = Tensor({c});
    if (state.gating) out.grad_gate_w = Tensor(state.gate_weights.shape());

    // Unroll pred_{s+1} = pred_s + ew * gate_s * (x_proj - pred_s) backwards.
    for (int s = static_cast<int>(rec.step_pred.size()) - 1; s >= 0; --s) {
        const Tensor& err = rec.step_error[static_cast<size_t>(s)];
        Tensor gate =
            state.gating ? rec.step_gate[static_cast<size_t>(s)] : Tensor::full(ps, 1.0);
        Tensor g_times_ew = mul(g, ew);
        // d/d error_weights[c]: sum over batch/space of g . gate . err
        {
            Tensor contrib = mul(mul(g, gate), err);
            for (index_t ni = 0; ni < n; ++ni)
                for (index_t ci = 0; ci < c; ++ci) {
                    const double* row = contrib.data() + (ni * c + ci) * hw;
                    double acc = 0.0;
                    for (index_t i = 0; i < hw; ++i) acc += row[i];
                    out.grad_error_w[ci] += acc;
                }
        }
        Tensor g_err = mul(g_times_ew, gate);  // d L / d (raw error)
        add_inplace(g_xproj, g_err);
        Tensor g_pred = sub(g, g_err);  // identity path minus err = x_proj - pred path
        if (state.gating) {
            // gate_s = sigmoid(conv(pred_s, gate_w)); d gate = g . ew . err
            Tensor g_gate = mul(g_times_ew, err);
            Tensor dsig = mul(gate, sub(Tensor::full(ps, 1.0), gate));
            Tensor g_pre = mul(g_gate, dsig);
            Conv2dSpec g1;
            add_inplace(out.grad_gate_w,
                        conv2d_weight_grad(rec.step_pred[static_cast<size_t>(s)], g_pre, g1,
                                           state.gate_weights.shape()));
            add_inplace(g_pred, conv2d_input_grad(g_pre, state.gate_weights, g1, ps));
        }
        g = g_pred;
    }
    // g is now d L / d pred0; route through the initial conv and projection.
    out.grad_conv_w = conv2d_weight_grad(x, g, spec, state.conv_weights.shape());
    if (state.projection.empty()) {
        out.grad_input = add(conv2d_input_grad(g, state.conv_weights, spec, x.shape()), g_xproj);
    } else {
        Conv2dSpec pspec;
        pspec.stride = spec.stride;
        out.grad_input = add(conv2d_input_grad(g, state.conv_weights, spec, x.shape()),
                             conv2d_input_grad(g_xproj, state.projection, pspec, x.shape()));
    }
    out.grad_input.seal("predictive_coding_backward");
    return out;
}

}  // namespace bionas
