#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mshr/batch.hpp"
#include "mshr/config.hpp"
#include "mshr/tensor.hpp"

namespace mshr {

// Activation capture sites. Full-tensor capture is intended for tests and
// small inputs; importance estimation uses WidthAccumulator instead, which
// keeps only running per-unit aggregates.
struct TapSpec {
    bool mlp_inner = false;        // gated-MLP inner activation, pre down-projection
    bool head_output = false;      // per-head attention output, pre o-projection
    bool norm_output = false;      // RMS-norm outputs (post gain by default)
    bool residual_bounds = false;  // residual stream at every layer boundary
};

struct ForwardTrace {
    std::vector<Tensor> mlp_inner;    // per layer: (B, T, mlp_hidden)
    std::vector<Tensor> head_output;  // per layer: (B, T, query_heads * head_dim)
    std::vector<Tensor> norm_output;  // 2*depth+1 sites: [attn_0, mlp_0, ..., final]
    std::vector<Tensor> residual;     // depth+1 boundaries: (B, T, hidden)
};

// Test-only: zero the listed units' contributions during forward, leaving the
// architecture intact. Mirrors what trimming removes.
struct MaskSpec {
    std::vector<std::vector<int>> zero_neurons;  // per layer
    std::vector<std::vector<int>> zero_heads;    // per layer
};

// Running aggregates feeding width importance: for every unit,
// sum over samples of (mean over positions of |activation|)^2.
// Channel aggregates are kept per norm site so scores can be summed across
// sites at finalization.
struct WidthAccumulator {
    std::vector<std::vector<double>> neuron_sq;   // [depth][mlp_hidden]
    std::vector<std::vector<double>> head_sq;     // [depth][query_heads]
    std::vector<std::vector<double>> channel_sq;  // [2*depth+1][hidden]
    int64_t samples = 0;

    void init(const ModelConfig& cfg);
};

struct ForwardOptions {
    TapSpec taps;
    std::vector<int> skip_layers;    // pass the residual stream through these layers
    bool norm_identity = false;      // test mode: every norm site becomes y = x
    bool pre_gain_norm_tap = false;  // tap norm outputs before the gain instead of after
    const MaskSpec* mask = nullptr;
    WidthAccumulator* width_acc = nullptr;
};

struct ForwardResult {
    Tensor logits;  // (B, T, vocab)
    ForwardTrace trace;
};

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// tokens: row-major (B, T). Throws std::invalid_argument on out-of-range ids
// or T > context. Pure function of its inputs; taps never change the logits.
ForwardResult forward(const ParamSet& params, const std::vector<int32_t>& tokens, int batch,
                      int seq, const ForwardOptions& opt = {});

// Mean cross-entropy in nats per predicted position. logits (B,T,V) or (N,V),
// targets length N.
double lm_loss(const Tensor& logits, const std::vector<int32_t>& targets);

struct LossSpec {
    enum class Kind { ce, kl };
    Kind kind = Kind::ce;
    Tensor teacher_logits;  // kl only: same shape as the student logits
};

struct BackwardResult {
    double loss = 0.0;
    GradSet grads;
};

// Analytic gradients for every parameter. CE uses batch.targets; KL uses
// spec.teacher_logits. Throws NonFiniteLoss when the loss is not finite.
BackwardResult backward(const ParamSet& params, const TokenBatch& batch, const LossSpec& spec);

// Total log-likelihood of `continuation` given `prefix` under the model.
double score_continuation(const ParamSet& params, const std::vector<int32_t>& prefix,
                          const std::vector<int32_t>& continuation);

}  // namespace mshr
