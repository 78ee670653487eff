#include "mshr/tensor.hpp"

#include <cmath>
#include <stdexcept>

#include "mshr/rng.hpp"

namespace mshr {

Tensor& ParamSet::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing tensor: " + name);
    return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing tensor: " + name);
    return it->second;
}

ParamSet init_params(const ModelConfig& cfg, uint64_t seed) {
    ParamSet p;
    p.config = cfg;
    const double base_std = 0.02;
    const double out_scale = 1.0 / std::sqrt(2.0 * cfg.depth);
    for (const auto& spec : tensor_schema(cfg)) {
        Tensor t(spec.shape);
        const bool is_norm = spec.name.find("norm") != std::string::npos;
        if (is_norm) {
            for (auto& x : t.data) x = 1.0f;
        } else {
            double std_dev = base_std;
            if (spec.name.ends_with("attn.o") || spec.name.ends_with("mlp.down")) {
                std_dev = base_std * out_scale;
            }
            Rng rng(Rng::derive(seed, spec.name));
            for (auto& x : t.data) x = static_cast<float>(rng.next_normal() * std_dev);
        }
        p.tensors.emplace(spec.name, std::move(t));
    }
    return p;
}

ParamSet zeros_like_params(const ModelConfig& cfg) {
    ParamSet p;
    p.config = cfg;
    for (const auto& spec : tensor_schema(cfg)) p.tensors.emplace(spec.name, Tensor(spec.shape));
    return p;
}

GradSet zeros_like_grads(const ParamSet& params) {
    GradSet g;
    for (const auto& [name, t] : params.tensors) g.emplace(name, Tensor(t.shape));
    return g;
}

}  // namespace mshr
