#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mshr/importance.hpp"
#include "mshr/tensor.hpp"

namespace mshr {

// Record of exactly which units a pruning run kept, emitted alongside every
// pruned checkpoint. kept indices are ascending (units keep relative order).
struct TrimReport {
    ModelConfig source;
    ModelConfig target;
    std::vector<std::vector<int>> kept_neurons;  // per layer
    std::vector<std::vector<int>> kept_heads;    // per layer
    std::vector<int> kept_channels;              // global
    std::string importance_digest;               // hash of the scores used ("random:<seed>" for random pruning)
};

std::string trim_report_to_json(const TrimReport& report);

// Single-shot width trim to target_cfg, keeping the top-ranked units per
// axis. target may shrink hidden, mlp_hidden and query_heads only; head
// removal keeps per-group counts equal so GQA stays well-formed.
ParamSet trim_width(const ParamSet& params, const ModelConfig& target_cfg,
                    const WidthImportance& imp, TrimReport* report = nullptr);

// Remove the listed layers; survivors are renumbered contiguously.
ParamSet trim_depth(const ParamSet& params, const std::vector<int>& drop_set);

// trim_width mechanics with uniformly random keep-sets (deterministic in seed).
ParamSet random_prune(const ParamSet& params, const ModelConfig& target_cfg, uint64_t seed,
                      TrimReport* report = nullptr);

// Full shape/name/finiteness audit against the naming scheme.
std::vector<std::string> check_arch(const ParamSet& params, const ModelConfig& cfg);

}  // namespace mshr
