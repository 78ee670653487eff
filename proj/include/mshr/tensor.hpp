#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mshr/config.hpp"

namespace mshr {

// Dense row-major f32 tensor.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }

    int64_t numel() const { return numel_of(shape); }
    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool operator==(const Tensor&) const = default;

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }
};

// Named weights for one model instance. Keys follow the tensor_schema naming
// scheme; the std::map keeps iteration in a stable order.
struct ParamSet {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) != 0; }

    bool operator==(const ParamSet&) const = default;
};

// Same key set and shapes as the ParamSet it differentiates.
using GradSet = std::map<std::string, Tensor>;

// Deterministic initialization: normal(0, 0.02) everywhere, output
// projections (attn.o, mlp.down) scaled by 1/sqrt(2*depth), norm gains 1.
// Each tensor gets an independent stream derived from (seed, name).
ParamSet init_params(const ModelConfig& cfg, uint64_t seed);

ParamSet zeros_like_params(const ModelConfig& cfg);
GradSet zeros_like_grads(const ParamSet& params);

}  // namespace mshr
