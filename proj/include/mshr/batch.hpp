#pragma once

#include <cstdint>
#include <vector>

namespace mshr {

// One training/eval batch. inputs and targets are row-major (batch, seq);
// targets are the next-token shift of the underlying window. offsets record
// where each row came from in its corpus (provenance only; the model always
// uses in-window positions 0..seq-1).
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int32_t> inputs;
    std::vector<int32_t> targets;
    std::vector<int64_t> offsets;
};

}  // namespace mshr
