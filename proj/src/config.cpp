#include "mshr/config.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>

using json = nlohmann::json;

namespace mshr {

std::vector<std::string> validate_config(const ModelConfig& cfg) {
    std::vector<std::string> v;
    if (cfg.depth < 1) v.push_back("depth must be >= 1");
    if (cfg.hidden < 1) v.push_back("hidden must be >= 1");
    if (cfg.mlp_hidden < 1) v.push_back("mlp_hidden must be >= 1");
    if (cfg.vocab < 2) v.push_back("vocab must be >= 2");
    if (cfg.query_heads < 1) v.push_back("query_heads must be >= 1");
    if (cfg.attention_groups < 1) v.push_back("attention_groups must be >= 1");
    if (cfg.head_dim < 1) v.push_back("head_dim must be >= 1");
    if (cfg.context < 1) v.push_back("context must be >= 1");
    if (!(cfg.norm_eps > 0.0f)) v.push_back("norm_eps must be > 0");
    if (cfg.query_heads >= 1 && cfg.attention_groups >= 1 &&
        cfg.query_heads % cfg.attention_groups != 0) {
        v.push_back("query_heads mod groups != 0");
    }
    return v;
}

std::vector<TensorSpec> tensor_schema(const ModelConfig& cfg) {
    std::vector<TensorSpec> out;
    const int64_t h = cfg.hidden;
    const int64_t aw = cfg.attn_width();
    const int64_t kw = cfg.kv_width();
    const int64_t m = cfg.mlp_hidden;
    const int64_t v = cfg.vocab;
    out.push_back({"embed.tok", {v, h}});
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        out.push_back({p + "attn.q", {aw, h}});
        out.push_back({p + "attn.k", {kw, h}});
        out.push_back({p + "attn.v", {kw, h}});
        out.push_back({p + "attn.o", {h, aw}});
        out.push_back({p + "mlp.gate", {m, h}});
        out.push_back({p + "mlp.up", {m, h}});
        out.push_back({p + "mlp.down", {h, m}});
        out.push_back({p + "norm.attn", {h}});
        out.push_back({p + "norm.mlp", {h}});
    }
    out.push_back({"final.norm", {h}});
    if (!cfg.tie_embeddings) out.push_back({"head.out", {v, h}});
    return out;
}

ParamCounts count_params(const ModelConfig& cfg) {
    ParamCounts c;
    for (const auto& spec : tensor_schema(cfg)) {
        int64_t n = 1;
        for (int64_t d : spec.shape) n *= d;
        c.total += n;
        if (spec.name != "embed.tok" && spec.name != "head.out") c.non_embedding += n;
    }
    return c;
}

std::string config_to_json(const ModelConfig& cfg) {
    json j;
    j["depth"] = cfg.depth;
    j["hidden"] = cfg.hidden;
    j["mlp_hidden"] = cfg.mlp_hidden;
    j["query_heads"] = cfg.query_heads;
    j["attention_groups"] = cfg.attention_groups;
    j["head_dim"] = cfg.head_dim;
    j["vocab"] = cfg.vocab;
    j["context"] = cfg.context;
    j["norm_eps"] = cfg.norm_eps;
    j["tie_embeddings"] = cfg.tie_embeddings;
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("model config: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("model config: not a JSON object");
    static const char* known[] = {"depth",       "hidden", "mlp_hidden", "query_heads",
                                  "attention_groups", "head_dim", "vocab", "context",
                                  "norm_eps",    "tie_embeddings"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw std::invalid_argument("model config: unknown key '" + it.key() + "'");
    }
    ModelConfig cfg;
    try {
        cfg.depth = j.at("depth").get<int>();
        cfg.hidden = j.at("hidden").get<int>();
        cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
        cfg.query_heads = j.at("query_heads").get<int>();
        cfg.attention_groups = j.at("attention_groups").get<int>();
        cfg.head_dim = j.at("head_dim").get<int>();
        cfg.vocab = j.at("vocab").get<int>();
        cfg.context = j.at("context").get<int>();
        cfg.norm_eps = j.at("norm_eps").get<float>();
        cfg.tie_embeddings = j.at("tie_embeddings").get<bool>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("model config: ") + e.what());
    }
    return cfg;
}

}  // namespace mshr
