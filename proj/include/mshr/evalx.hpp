#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mshr/data.hpp"
#include "mshr/tensor.hpp"

namespace mshr {

inline constexpr int kEvalBatchSize = 16;
inline constexpr int kEvalSeqLen = 128;

// Deterministic mean CE over the first n_batches fixed windows of a held-out
// corpus (clamped to what the corpus provides; at least one window required).
double eval_val_loss(const ParamSet& params, const Corpus& corpus, int n_batches,
                     int seq_len = kEvalSeqLen, int batch_size = kEvalBatchSize);

// Fraction of items whose labeled candidate scores strictly higher; ties
// count as incorrect. skip_layers applies to every forward (depth scans).
double eval_cloze(const ParamSet& params, const std::vector<ClozeItem>& items,
                  const std::vector<int>& skip_layers = {});

// Scripted experiment presets (see run_preset). Results land under
// workspace/<preset>/..., summary at workspace/<preset>/summary.json.
std::vector<std::string> preset_names();

// Runs every arm of the named preset with the given seeds; returns the
// summary JSON text (also written into the workspace). Throws on missing
// upstream checkpoints.
std::string run_preset(const std::string& name, const std::filesystem::path& workspace,
                       const std::vector<uint64_t>& seeds);

}  // namespace mshr
