#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mshr {

// Architecture descriptor for the decoder-only transformer family handled by
// this toolkit: pre-norm RMS normalization, rotary positions, grouped-query
// attention, gated MLP. The attention inner width (query_heads * head_dim)
// does not have to equal `hidden`.
struct ModelConfig {
    int depth = 0;             // transformer layer count
    int hidden = 0;            // residual stream width (embedding channels)
    int mlp_hidden = 0;        // gated-MLP inner width
    int query_heads = 0;
    int attention_groups = 0;  // KV head count
    int head_dim = 0;
    int vocab = 0;
    int context = 0;           // max sequence length
    float norm_eps = 1e-5f;
    bool tie_embeddings = false;

    int attn_width() const { return query_heads * head_dim; }
    int kv_width() const { return attention_groups * head_dim; }
    int heads_per_group() const { return query_heads / attention_groups; }

    bool operator==(const ModelConfig&) const = default;
};

// Returns every violated invariant (empty means the config is valid).
std::vector<std::string> validate_config(const ModelConfig& cfg);

struct TensorSpec {
    std::string name;
    std::vector<int64_t> shape;
};

// The tensor set implied by a config, in canonical order. Naming scheme:
//   embed.tok, layer.{i}.attn.{q,k,v,o}, layer.{i}.mlp.{gate,up,down},
//   layer.{i}.norm.{attn,mlp}, final.norm, head.out
// head.out is absent when embeddings are tied. Checkpoints, trimming and the
// optimizer all key off these names.
std::vector<TensorSpec> tensor_schema(const ModelConfig& cfg);

struct ParamCounts {
    int64_t total = 0;
    int64_t non_embedding = 0;  // excludes embed.tok and head.out
};

ParamCounts count_params(const ModelConfig& cfg);

std::string config_to_json(const ModelConfig& cfg);
// Strict parse: unknown keys, missing keys and wrong types are errors.
ModelConfig config_from_json(const std::string& text);

}  // namespace mshr
