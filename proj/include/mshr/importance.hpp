#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mshr/data.hpp"
#include "mshr/tensor.hpp"

namespace mshr {

// Activation-based importance for the width axes. Aggregation: per unit,
// mean of |activation| over sequence positions, then l2-norm over calibration
// samples. Channel scores are summed across all norm sites.
struct WidthImportance {
    std::vector<std::vector<float>> neuron;  // [layer][mlp_hidden]
    std::vector<std::vector<float>> head;    // [layer][query_heads]
    std::vector<float> channel;              // [hidden]
    int64_t calibration_samples = 0;
    std::string aggregation = "seq:mean_abs,batch:l2";
    uint64_t seed = 0;

    bool operator==(const WidthImportance&) const = default;
};

// Calibration windows as produced by sample_calibration (seq_len+1 tokens;
// the trailing target token is ignored here). Forward passes only; params are
// never modified. `pre_gain_tap` switches the channel tap to the pre-gain
// norm output.
WidthImportance estimate_width_importance(const ParamSet& params,
                                          const std::vector<std::vector<int32_t>>& calibration,
                                          uint64_t seed = 0, bool pre_gain_tap = false);

// Descending stable sort: ties broken by the lower original index.
std::vector<int> rank(const std::vector<float>& scores);

struct DepthScan {
    enum class Metric { lm_loss, block_importance, task_accuracy };
    Metric metric = Metric::lm_loss;
    int block = 1;
    std::vector<double> values;  // entry i = metric with layers [i, i+block) removed
    int64_t bi_excluded = 0;     // zero-norm pairs excluded from a BI mean

    bool operator==(const DepthScan&) const = default;
};

// Entry i = mean LM loss on the calibration windows with layers i..i+n-1
// skipped (residual passed through).
DepthScan depth_scan_loss(const ParamSet& params,
                          const std::vector<std::vector<int32_t>>& calibration, int block_size);

// Entry i = mean over (sample, position) of 1 - cos(residual entering layer i,
// residual leaving layer i+n-1), evaluated on the unmodified model.
DepthScan block_importance(const ParamSet& params,
                           const std::vector<std::vector<int32_t>>& calibration, int block_size);

// Entry i = cloze accuracy with layers i..i+n-1 skipped.
DepthScan depth_scan_task(const ParamSet& params, const std::vector<ClozeItem>& items,
                          int block_size);

// Best contiguous block for the scan's metric (argmin for loss/BI, argmax for
// accuracy; ties -> lowest start). Returns the full layer set.
std::vector<int> select_contiguous(const DepthScan& scan);

// From a block-size-1 scan: the n_drop layers whose individual removal least
// degrades the metric.
std::vector<int> select_noncontiguous(const DepthScan& single_layer_scan, int n_drop);

std::string width_importance_to_json(const WidthImportance& imp);
WidthImportance width_importance_from_json(const std::string& text);
std::string depth_scan_to_json(const DepthScan& scan);
DepthScan depth_scan_from_json(const std::string& text);
void depth_scan_to_csv(const DepthScan& scan, const std::filesystem::path& path);

// Spearman rank correlation (fractional ranks for ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace mshr
