#include "mshr/trim.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "mshr/rng.hpp"

using json = nlohmann::json;

namespace mshr {

namespace {

Tensor take_rows(const Tensor& t, const std::vector<int>& rows) {
    const int64_t cols = t.shape[1];
    Tensor out({static_cast<int64_t>(rows.size()), cols});
    for (size_t r = 0; r < rows.size(); ++r) {
        const float* src = t.ptr() + static_cast<int64_t>(rows[r]) * cols;
        std::copy(src, src + cols, out.ptr() + static_cast<int64_t>(r) * cols);
    }
    return out;
}

Tensor take_cols(const Tensor& t, const std::vector<int>& cols) {
    const int64_t n_rows = t.shape[0];
    const int64_t src_cols = t.shape[1];
    Tensor out({n_rows, static_cast<int64_t>(cols.size())});
    for (int64_t r = 0; r < n_rows; ++r) {
        const float* src = t.ptr() + r * src_cols;
        float* dst = out.ptr() + r * static_cast<int64_t>(cols.size());
        for (size_t c = 0; c < cols.size(); ++c) dst[c] = src[cols[c]];
    }
    return out;
}

Tensor take_vec(const Tensor& t, const std::vector<int>& idx) {
    Tensor out({static_cast<int64_t>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) out.data[i] = t.data[static_cast<size_t>(idx[i])];
    return out;
}

std::vector<int> iota_keep(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

std::vector<int> head_rows(const std::vector<int>& heads, int head_dim) {
    std::vector<int> rows;
    rows.reserve(heads.size() * static_cast<size_t>(head_dim));
    for (int h : heads) {
        for (int i = 0; i < head_dim; ++i) rows.push_back(h * head_dim + i);
    }
    return rows;
}

void check_keep(const std::vector<int>& keep, int limit, const char* what) {
    if (keep.empty()) throw std::invalid_argument(std::string("trim: empty keep set for ") + what);
    int prev = -1;
    for (int i : keep) {
        if (i <= prev || i >= limit) {
            throw std::invalid_argument(std::string("trim: keep set for ") + what +
                                        " not strictly ascending in range");
        }
        prev = i;
    }
}

// Top-k of a score vector, reported in ascending index order.
std::vector<int> top_k_sorted(const std::vector<float>& scores, int k) {
    auto order = rank(scores);
    std::vector<int> keep(order.begin(), order.begin() + k);
    std::sort(keep.begin(), keep.end());
    return keep;
}

std::vector<int> random_subset(int n, int k, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

uint64_t digest_scores(const WidthImportance& imp) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](float f) {
        uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        for (int i = 0; i < 4; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& l : imp.neuron) {
        for (float f : l) mix(f);
    }
    for (const auto& l : imp.head) {
        for (float f : l) mix(f);
    }
    for (float f : imp.channel) mix(f);
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

struct KeepSets {
    std::vector<std::vector<int>> neurons;  // per layer; empty vec list = keep all
    std::vector<std::vector<int>> heads;
    std::vector<int> channels;  // empty = keep all
};

// Pure slicing along the chosen axes; axes commute because every axis maps to
// independent row/column selections of each tensor.
ParamSet apply_keep_sets(const ParamSet& params, const KeepSets& keeps) {
    const ModelConfig& src = params.config;
    const int hd = src.head_dim;

    std::vector<int> channels = keeps.channels.empty() ? iota_keep(src.hidden) : keeps.channels;
    check_keep(channels, src.hidden, "channels");

    ModelConfig target = src;
    target.hidden = static_cast<int>(channels.size());

    std::vector<std::vector<int>> neurons(static_cast<size_t>(src.depth));
    std::vector<std::vector<int>> heads(static_cast<size_t>(src.depth));
    for (int l = 0; l < src.depth; ++l) {
        neurons[static_cast<size_t>(l)] = keeps.neurons.empty()
                                              ? iota_keep(src.mlp_hidden)
                                              : keeps.neurons[static_cast<size_t>(l)];
        heads[static_cast<size_t>(l)] = keeps.heads.empty() ? iota_keep(src.query_heads)
                                                            : keeps.heads[static_cast<size_t>(l)];
        check_keep(neurons[static_cast<size_t>(l)], src.mlp_hidden, "neurons");
        check_keep(heads[static_cast<size_t>(l)], src.query_heads, "heads");
        if (neurons[static_cast<size_t>(l)].size() != neurons[0].size() ||
            heads[static_cast<size_t>(l)].size() != heads[0].size()) {
            throw std::invalid_argument("trim: keep counts must match across layers");
        }
    }
    target.mlp_hidden = static_cast<int>(neurons[0].size());
    target.query_heads = static_cast<int>(heads[0].size());

    ParamSet out;
    out.config = target;
    out.tensors.emplace("embed.tok", take_cols(params.at("embed.tok"), channels));
    if (!src.tie_embeddings) {
        out.tensors.emplace("head.out", take_cols(params.at("head.out"), channels));
    }
    out.tensors.emplace("final.norm", take_vec(params.at("final.norm"), channels));
    for (int l = 0; l < src.depth; ++l) {
        const std::string pre = "layer." + std::to_string(l) + ".";
        const auto& K = neurons[static_cast<size_t>(l)];
        const auto hrows = head_rows(heads[static_cast<size_t>(l)], hd);
        out.tensors.emplace(pre + "attn.q",
                            take_cols(take_rows(params.at(pre + "attn.q"), hrows), channels));
        out.tensors.emplace(pre + "attn.k", take_cols(params.at(pre + "attn.k"), channels));
        out.tensors.emplace(pre + "attn.v", take_cols(params.at(pre + "attn.v"), channels));
        out.tensors.emplace(pre + "attn.o",
                            take_cols(take_rows(params.at(pre + "attn.o"), channels), hrows));
        out.tensors.emplace(pre + "mlp.gate",
                            take_cols(take_rows(params.at(pre + "mlp.gate"), K), channels));
        out.tensors.emplace(pre + "mlp.up",
                            take_cols(take_rows(params.at(pre + "mlp.up"), K), channels));
        out.tensors.emplace(pre + "mlp.down",
                            take_cols(take_rows(params.at(pre + "mlp.down"), channels), K));
        out.tensors.emplace(pre + "norm.attn", take_vec(params.at(pre + "norm.attn"), channels));
        out.tensors.emplace(pre + "norm.mlp", take_vec(params.at(pre + "norm.mlp"), channels));
    }
    return out;
}

void check_width_target(const ModelConfig& src, const ModelConfig& target) {
    auto src_v = validate_config(src);
    auto tgt_v = validate_config(target);
    if (!src_v.empty() || !tgt_v.empty()) {
        throw std::invalid_argument("trim_width: invalid source or target config");
    }
    if (target.hidden > src.hidden || target.mlp_hidden > src.mlp_hidden ||
        target.query_heads > src.query_heads) {
        throw std::invalid_argument("trim_width: target larger than source");
    }
    if (target.depth != src.depth || target.vocab != src.vocab ||
        target.head_dim != src.head_dim || target.attention_groups != src.attention_groups ||
        target.context != src.context || target.tie_embeddings != src.tie_embeddings) {
        throw std::invalid_argument(
            "trim_width: target may differ only on hidden, mlp_hidden and query_heads");
    }
}

void fill_report(TrimReport* report, const ModelConfig& src, const ModelConfig& target,
                 const KeepSets& keeps, const std::string& digest) {
    if (report == nullptr) return;
    report->source = src;
    report->target = target;
    report->kept_neurons = keeps.neurons;
    report->kept_heads = keeps.heads;
    report->kept_channels = keeps.channels;
    report->importance_digest = digest;
}

}  // namespace

ParamSet trim_width(const ParamSet& params, const ModelConfig& target_cfg,
                    const WidthImportance& imp, TrimReport* report) {
    const ModelConfig& src = params.config;
    check_width_target(src, target_cfg);
    if (static_cast<int>(imp.neuron.size()) != src.depth ||
        static_cast<int>(imp.head.size()) != src.depth ||
        static_cast<int>(imp.channel.size()) != src.hidden) {
        throw std::invalid_argument("trim_width: importance does not match the source config");
    }
    for (int l = 0; l < src.depth; ++l) {
        if (static_cast<int>(imp.neuron[static_cast<size_t>(l)].size()) != src.mlp_hidden ||
            static_cast<int>(imp.head[static_cast<size_t>(l)].size()) != src.query_heads) {
            throw std::invalid_argument("trim_width: importance does not match the source config");
        }
    }

    KeepSets keeps;
    keeps.channels = top_k_sorted(imp.channel, target_cfg.hidden);
    keeps.neurons.resize(static_cast<size_t>(src.depth));
    keeps.heads.resize(static_cast<size_t>(src.depth));
    const int groups = src.attention_groups;
    const int src_per_group = src.query_heads / groups;
    const int tgt_per_group = target_cfg.query_heads / groups;
    for (int l = 0; l < src.depth; ++l) {
        keeps.neurons[static_cast<size_t>(l)] =
            top_k_sorted(imp.neuron[static_cast<size_t>(l)], target_cfg.mlp_hidden);
        // Equal head counts per group keep GQA well-formed.
        std::vector<int> kept;
        for (int g = 0; g < groups; ++g) {
            std::vector<float> group_scores(
                imp.head[static_cast<size_t>(l)].begin() + g * src_per_group,
                imp.head[static_cast<size_t>(l)].begin() + (g + 1) * src_per_group);
            for (int local : top_k_sorted(group_scores, tgt_per_group)) {
                kept.push_back(g * src_per_group + local);
            }
        }
        std::sort(kept.begin(), kept.end());
        keeps.heads[static_cast<size_t>(l)] = std::move(kept);
    }

    ParamSet out = apply_keep_sets(params, keeps);
    auto violations = check_arch(out, target_cfg);
    if (!violations.empty()) {
        throw std::logic_error("trim_width: result failed arch audit: " + violations.front());
    }
    fill_report(report, src, target_cfg, keeps, hex64(digest_scores(imp)));
    return out;
}

ParamSet random_prune(const ParamSet& params, const ModelConfig& target_cfg, uint64_t seed,
                      TrimReport* report) {
    const ModelConfig& src = params.config;
    check_width_target(src, target_cfg);

    KeepSets keeps;
    {
        Rng rng(Rng::derive(seed, "random_prune:channels"));
        keeps.channels = random_subset(src.hidden, target_cfg.hidden, rng);
    }
    keeps.neurons.resize(static_cast<size_t>(src.depth));
    keeps.heads.resize(static_cast<size_t>(src.depth));
    const int groups = src.attention_groups;
    const int src_per_group = src.query_heads / groups;
    const int tgt_per_group = target_cfg.query_heads / groups;
    for (int l = 0; l < src.depth; ++l) {
        Rng rng_n(Rng::derive(Rng::derive(seed, "random_prune:neurons"), static_cast<uint64_t>(l)));
        keeps.neurons[static_cast<size_t>(l)] =
            random_subset(src.mlp_hidden, target_cfg.mlp_hidden, rng_n);
        Rng rng_h(Rng::derive(Rng::derive(seed, "random_prune:heads"), static_cast<uint64_t>(l)));
        std::vector<int> kept;
        for (int g = 0; g < groups; ++g) {
            for (int local : random_subset(src_per_group, tgt_per_group, rng_h)) {
                kept.push_back(g * src_per_group + local);
            }
        }
        std::sort(kept.begin(), kept.end());
        keeps.heads[static_cast<size_t>(l)] = std::move(kept);
    }

    ParamSet out = apply_keep_sets(params, keeps);
    auto violations = check_arch(out, target_cfg);
    if (!violations.empty()) {
        throw std::logic_error("random_prune: result failed arch audit: " + violations.front());
    }
    fill_report(report, src, target_cfg, keeps, "random:" + std::to_string(seed));
    return out;
}

ParamSet trim_depth(const ParamSet& params, const std::vector<int>& drop_set) {
    const ModelConfig& src = params.config;
    if (drop_set.empty()) throw std::invalid_argument("trim_depth: empty drop set");
    std::vector<uint8_t> drop(static_cast<size_t>(src.depth), 0);
    for (int l : drop_set) {
        if (l < 0 || l >= src.depth) throw std::invalid_argument("trim_depth: layer out of range");
        if (drop[static_cast<size_t>(l)]) throw std::invalid_argument("trim_depth: duplicate layer");
        drop[static_cast<size_t>(l)] = 1;
    }
    if (static_cast<int>(drop_set.size()) >= src.depth) {
        throw std::invalid_argument("trim_depth: cannot drop every layer");
    }

    ModelConfig target = src;
    target.depth = src.depth - static_cast<int>(drop_set.size());
    ParamSet out;
    out.config = target;
    out.tensors.emplace("embed.tok", params.at("embed.tok"));
    out.tensors.emplace("final.norm", params.at("final.norm"));
    if (!src.tie_embeddings) out.tensors.emplace("head.out", params.at("head.out"));
    int dst = 0;
    for (int l = 0; l < src.depth; ++l) {
        if (drop[static_cast<size_t>(l)]) continue;
        const std::string from = "layer." + std::to_string(l) + ".";
        const std::string to = "layer." + std::to_string(dst) + ".";
        for (const char* part : {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.gate", "mlp.up",
                                 "mlp.down", "norm.attn", "norm.mlp"}) {
            out.tensors.emplace(to + part, params.at(from + part));
        }
        dst += 1;
    }
    return out;
}

std::vector<std::string> check_arch(const ParamSet& params, const ModelConfig& cfg) {
    std::vector<std::string> violations = validate_config(cfg);
    if (!violations.empty()) return violations;
    size_t matched = 0;
    for (const auto& spec : tensor_schema(cfg)) {
        auto it = params.tensors.find(spec.name);
        if (it == params.tensors.end()) {
            violations.push_back("missing tensor: " + spec.name);
            continue;
        }
        matched += 1;
        if (it->second.shape != spec.shape) {
            violations.push_back("wrong shape for " + spec.name);
            continue;
        }
        for (float v : it->second.data) {
            if (!std::isfinite(v)) {
                violations.push_back("non-finite values in " + spec.name);
                break;
            }
        }
    }
    if (matched != params.tensors.size()) {
        for (const auto& [name, t] : params.tensors) {
            bool known = false;
            for (const auto& spec : tensor_schema(cfg)) known = known || spec.name == name;
            if (!known) violations.push_back("unexpected tensor: " + name);
        }
    }
    if (params.config != cfg) violations.push_back("embedded config differs");
    return violations;
}

std::string trim_report_to_json(const TrimReport& report) {
    json j;
    j["source_cfg"] = json::parse(config_to_json(report.source));
    j["target_cfg"] = json::parse(config_to_json(report.target));
    json axes;
    json neurons, heads;
    for (size_t l = 0; l < report.kept_neurons.size(); ++l) {
        neurons[std::to_string(l)] = report.kept_neurons[l];
    }
    for (size_t l = 0; l < report.kept_heads.size(); ++l) {
        heads[std::to_string(l)] = report.kept_heads[l];
    }
    axes["neuron"] = neurons;
    axes["head"] = heads;
    axes["channel"]["global"] = report.kept_channels;
    j["axes"] = axes;
    j["importance_digest"] = report.importance_digest;
    return j.dump(2);
}

}  // namespace mshr
