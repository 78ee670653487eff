#include "mshr/model.hpp"

#include <cmath>

#include "mshr/model_core.hpp"

namespace mshr {

void WidthAccumulator::init(const ModelConfig& cfg) {
    neuron_sq.assign(static_cast<size_t>(cfg.depth),
                     std::vector<double>(static_cast<size_t>(cfg.mlp_hidden), 0.0));
    head_sq.assign(static_cast<size_t>(cfg.depth),
                   std::vector<double>(static_cast<size_t>(cfg.query_heads), 0.0));
    channel_sq.assign(static_cast<size_t>(2 * cfg.depth + 1),
                      std::vector<double>(static_cast<size_t>(cfg.hidden), 0.0));
    samples = 0;
}

ForwardResult forward(const ParamSet& params, const std::vector<int32_t>& tokens, int batch,
                      int seq, const ForwardOptions& opt) {
    if (batch < 1 || seq < 1 || tokens.size() != static_cast<size_t>(batch) * seq) {
        throw std::invalid_argument("forward: tokens size does not match (batch, seq)");
    }
    Engine<float> eng(params);
    ForwardResult out;
    const auto& logits = eng.forward(tokens.data(), batch, seq, opt, &out.trace);
    out.logits.shape = {batch, seq, params.config.vocab};
    out.logits.data.assign(logits.begin(), logits.end());
    return out;
}

double lm_loss(const Tensor& logits, const std::vector<int32_t>& targets) {
    if (logits.shape.empty()) throw std::invalid_argument("lm_loss: empty logits");
    const int64_t V = logits.shape.back();
    const int64_t N = logits.numel() / V;
    if (static_cast<int64_t>(targets.size()) != N) {
        throw std::invalid_argument("lm_loss: targets length does not match logits");
    }
    for (int32_t t : targets) {
        if (t < 0 || t >= V) throw std::invalid_argument("lm_loss: target out of range");
    }
    return ce_loss_grad<float>(logits.data, targets.data(), N, V, nullptr);
}

BackwardResult backward(const ParamSet& params, const TokenBatch& batch, const LossSpec& spec) {
    const int64_t N = static_cast<int64_t>(batch.batch) * batch.seq;
    if (batch.inputs.size() != static_cast<size_t>(N)) {
        throw std::invalid_argument("backward: batch inputs size mismatch");
    }
    Engine<float> eng(params);
    eng.forward(batch.inputs.data(), batch.batch, batch.seq);

    std::vector<float> dlogits;
    double loss = 0.0;
    if (spec.kind == LossSpec::Kind::ce) {
        if (batch.targets.size() != static_cast<size_t>(N)) {
            throw std::invalid_argument("backward: CE requires targets");
        }
        loss = eng.loss_ce(batch.targets.data(), &dlogits);
    } else {
        if (spec.teacher_logits.numel() != N * params.config.vocab) {
            throw std::invalid_argument("backward: teacher logits shape mismatch");
        }
        loss = eng.loss_kl(spec.teacher_logits.ptr(), &dlogits);
    }
    if (!std::isfinite(loss)) throw NonFiniteLoss("backward: non-finite loss");

    DenseModel<float> grads = DenseModel<float>::zeros_like(params.config);
    eng.backward(dlogits, grads);
    BackwardResult out;
    out.loss = loss;
    out.grads = grads.to_gradset();
    return out;
}

double score_continuation(const ParamSet& params, const std::vector<int32_t>& prefix,
                          const std::vector<int32_t>& continuation) {
    if (continuation.empty()) return 0.0;
    if (prefix.empty()) throw std::invalid_argument("score_continuation: empty prefix");
    const size_t total = prefix.size() + continuation.size();
    if (total > static_cast<size_t>(params.config.context)) {
        throw std::invalid_argument("score_continuation: sequence longer than context");
    }
    std::vector<int32_t> seq;
    seq.reserve(total);
    seq.insert(seq.end(), prefix.begin(), prefix.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());

    Engine<float> eng(params);
    const auto& logits = eng.forward(seq.data(), 1, static_cast<int>(seq.size()));
    const int64_t V = params.config.vocab;
    double score = 0.0;
    for (size_t j = 0; j < continuation.size(); ++j) {
        const int64_t pos = static_cast<int64_t>(prefix.size()) + j - 1;
        const float* z = logits.data() + pos * V;
        double zmax = -HUGE_VAL;
        for (int64_t v = 0; v < V; ++v) zmax = std::max(zmax, static_cast<double>(z[v]));
        double sum = 0.0;
        for (int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(z[v]) - zmax);
        const double lse = zmax + std::log(sum);
        score += static_cast<double>(z[continuation[j]]) - lse;
    }
    return score;
}

}  // namespace mshr
