#pragma once

#include <string>
#include <vector>

#include "bionas/ops.hpp"
#include "bionas/rng.hpp"
#include "bionas/tensor.hpp"

namespace bionas {

/// Credit-assignment rules. bp/fa/dfa/usf/brsf/frsf act on the backward
/// path; hebb and pc are forward-time plasticity mechanisms and never
/// appear as feedback strategies.
enum class Rule { bp, fa, dfa, usf, brsf, frsf, hebb, pc, none };

std::string rule_token(Rule r);
Rule rule_from_token(const std::string& tok);
bool is_backward_rule(Rule r);
bool is_forward_time_rule(Rule r);

/// Per-layer feedback bookkeeping. B replaces the forward weights on the
/// error-transport path:
///   fa    - B fixed random for the whole run (drawn at init)
///   usf   - B = sign(W)
///   brsf  - B = |R_i| . sign(W), magnitudes redrawn at every update
///   frsf  - B = |R| . sign(W), magnitudes fixed at init
///   dfa   - B fixed random, [output_dim x layer_width], bypasses layers
/// Random magnitudes come from |Xavier| draws so the feedback scale tracks
/// the forward-weight scale.
struct FeedbackState {
    Rule rule = Rule::bp;
    Tensor B;             // fa/dfa fixed matrix; scratch for the sign rules
    Tensor R;             // frsf fixed magnitudes
    RngStream rng;        // brsf redraws
    index_t fan_in = 0;   // fans of the forward weight, for magnitude draws
    index_t fan_out = 0;
};

/// Prepare state for `rule` over a forward weight of shape `w_shape`.
/// For dfa, pass the direct-feedback shape [output_dim, layer_width] and the
/// layer's own fans.
FeedbackState init_feedback_state(Rule rule, const Shape& w_shape, RngStream rng);

/// The feedback matrix the next backward application will use. brsf
/// advances the state's rng (fresh magnitudes per call).
Tensor compute_feedback_matrix(Rule rule, const Tensor& w, FeedbackState& state);

/// What the backward of one layer hands back: the (already -eta scaled)
/// weight delta and the error transported to the previous layer.
struct BackwardResult {
    Tensor delta_w;
    Tensor error_prev;
};

/// Cached forward quantities a rule backward consumes.
struct ActivationRecord {
    Tensor layer_input;           // y_{i-1}
    Tensor pre_activation;        // z_i
    Tensor activation_derivative; // phi'(z_i), ones for a linear layer
};

/// Dense layer backward: z = y_prev . W^T, y = phi(z), W [out,in].
/// e_pre = error_next (x) phi'(z); delta_w = -eta . e_pre^T . y_prev;
/// error_prev = e_pre . B (B = W exactly for bp, so bp reproduces the true
/// gradient step). The weight-delta path always uses the true local
/// correlation; only the transport matrix changes per rule.
BackwardResult backward_dense(Rule rule, const Tensor& error_next, const ActivationRecord& record,
                              FeedbackState& state, const Tensor& w, double eta);

/// Convolution layer backward, same contract as backward_dense with the
/// feedback matrix replacing the kernel on the data-gradient path.
BackwardResult backward_conv(Rule rule, const Tensor& error_next, const ActivationRecord& record,
                             FeedbackState& state, const Tensor& w, const Conv2dSpec& spec,
                             double eta);

/// Direct feedback alignment: output error [N,C] sent straight to a hidden
/// layer through the fixed B [C,width]; returns (output_error . B) (x) phi'(z).
Tensor dfa_backward(const Tensor& output_error, const ActivationRecord& record,
                    const FeedbackState& state);

// ---------------------------------------------------------------------------
// Forward-time plasticity convolutions
// ---------------------------------------------------------------------------

/// Hebbian convolution: the kernel is updated during the forward pass from
/// the outer product of normalized output and input patches, averaged over
/// every window position in the batch. The accumulator mirrors the total
/// plasticity contribution and is never touched by SGD.
struct HebbianConvState {
    Tensor conv_weights;
    Tensor hebbian_accumulator;
    double hebbian_scale = 1e-4;
    bool normalize = true;
    double norm_cap = 1.0;  // per-filter L2 cap when normalize is on
};

/// Runs the convolution, then (training mode only) applies the plasticity
/// update to conv_weights in place. Output is computed from the pre-update
/// weights.
Tensor hebbian_forward_update(HebbianConvState& state, const Tensor& x, const Conv2dSpec& spec,
                              bool training);

/// Predictive-coding convolution: pred starts at conv(x, W) and is refined
/// `prediction_steps` times toward the (channel-projected) input.
struct PredictiveCodingConvState {
    Tensor conv_weights;
    Tensor error_weights;   // [C_out], init 1.0, gradient-trained
    int prediction_steps = 1;
    bool gating = false;
    Tensor gate_weights;    // 1x1 conv [C_out,C_out,1,1], gating only
    Tensor projection;      // fixed 1x1 averaging map [C_out,C_in,1,1]; empty = identity
};

/// Per-step tensors kept for the exact unrolled backward.
struct PcForwardRecord {
    Tensor x_proj;
    Tensor pred0;
    std::vector<Tensor> step_pred;   // pred_s before step s
    std::vector<Tensor> step_error;  // raw x_proj - pred_s
    std::vector<Tensor> step_gate;   // sigmoid(gate(pred_s)), gating only
    Tensor pred;
};

PcForwardRecord predictive_coding_forward(const PredictiveCodingConvState& state, const Tensor& x,
                                          const Conv2dSpec& spec);

/// Gradients of the unrolled iteration w.r.t. x, conv weights, error
/// weights and gate weights. The data path through the initial convolution
/// uses `data_kernel` (the forward kernel for bp).
struct PcBackwardResult {
    Tensor grad_input;
    Tensor grad_conv_w;
    Tensor grad_error_w;
    Tensor grad_gate_w;  // empty when gating is off
};

PcBackwardResult predictive_coding_backward(const PredictiveCodingConvState& state,
                                            const PcForwardRecord& rec, const Tensor& x,
                                            const Tensor& grad_pred, const Conv2dSpec& spec);

/// Fixed 1x1 averaging projection used when C_in != C_out (each output
/// channel is the mean of all input channels).
Tensor make_channel_projection(index_t c_in, index_t c_out);

}  // namespace bionas
