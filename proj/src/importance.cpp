#include "mshr/importance.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mshr/evalx.hpp"
#include "mshr/model_core.hpp"

using json = nlohmann::json;

namespace mshr {

namespace {

constexpr int kScanBatch = 16;

void check_calibration(const std::vector<std::vector<int32_t>>& calibration) {
    if (calibration.empty()) throw std::invalid_argument("calibration set is empty");
    for (const auto& w : calibration) {
        if (w.size() < 2 || w.size() != calibration.front().size()) {
            throw std::invalid_argument("calibration windows must share one length >= 2");
        }
    }
}

// Packs calibration windows (seq_len+1 tokens) into (inputs, targets) batches
// of at most kScanBatch rows.
struct CalibBatches {
    int seq = 0;
    std::vector<TokenBatch> batches;

    explicit CalibBatches(const std::vector<std::vector<int32_t>>& calibration) {
        seq = static_cast<int>(calibration.front().size()) - 1;
        for (size_t i = 0; i < calibration.size(); i += kScanBatch) {
            const int b = static_cast<int>(std::min<size_t>(kScanBatch, calibration.size() - i));
            TokenBatch tb;
            tb.batch = b;
            tb.seq = seq;
            tb.inputs.resize(static_cast<size_t>(b) * seq);
            tb.targets.resize(static_cast<size_t>(b) * seq);
            for (int r = 0; r < b; ++r) {
                const auto& w = calibration[i + static_cast<size_t>(r)];
                std::copy(w.begin(), w.begin() + seq, tb.inputs.begin() + static_cast<size_t>(r) * seq);
                std::copy(w.begin() + 1, w.end(), tb.targets.begin() + static_cast<size_t>(r) * seq);
            }
            batches.push_back(std::move(tb));
        }
    }
};

}  // namespace

WidthImportance estimate_width_importance(const ParamSet& params,
                                          const std::vector<std::vector<int32_t>>& calibration,
                                          uint64_t seed, bool pre_gain_tap) {
    check_calibration(calibration);
    const ModelConfig& cfg = params.config;

    WidthAccumulator acc;
    acc.init(cfg);
    Engine<float> eng(params);
    ForwardOptions opt;
    opt.width_acc = &acc;
    opt.pre_gain_norm_tap = pre_gain_tap;

    CalibBatches cb(calibration);
    for (const auto& tb : cb.batches) {
        eng.forward(tb.inputs.data(), tb.batch, tb.seq, opt);
    }

    WidthImportance imp;
    imp.calibration_samples = acc.samples;
    imp.seed = seed;
    imp.aggregation = pre_gain_tap ? "seq:mean_abs,batch:l2,channel_tap:pre_gain"
                                   : "seq:mean_abs,batch:l2";
    imp.neuron.resize(static_cast<size_t>(cfg.depth));
    imp.head.resize(static_cast<size_t>(cfg.depth));
    for (int l = 0; l < cfg.depth; ++l) {
        auto& nl = imp.neuron[static_cast<size_t>(l)];
        nl.resize(static_cast<size_t>(cfg.mlp_hidden));
        for (int u = 0; u < cfg.mlp_hidden; ++u) {
            nl[static_cast<size_t>(u)] =
                static_cast<float>(std::sqrt(acc.neuron_sq[static_cast<size_t>(l)][static_cast<size_t>(u)]));
        }
        auto& hl = imp.head[static_cast<size_t>(l)];
        hl.resize(static_cast<size_t>(cfg.query_heads));
        for (int h = 0; h < cfg.query_heads; ++h) {
            hl[static_cast<size_t>(h)] =
                static_cast<float>(std::sqrt(acc.head_sq[static_cast<size_t>(l)][static_cast<size_t>(h)]));
        }
    }
    imp.channel.assign(static_cast<size_t>(cfg.hidden), 0.0f);
    for (const auto& site : acc.channel_sq) {
        for (int c = 0; c < cfg.hidden; ++c) {
            imp.channel[static_cast<size_t>(c)] += static_cast<float>(std::sqrt(site[static_cast<size_t>(c)]));
        }
    }
    return imp;
}

std::vector<int> rank(const std::vector<float>& scores) {
    for (float s : scores) {
        if (!std::isfinite(s)) throw std::invalid_argument("rank: non-finite score");
    }
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    });
    return idx;
}

DepthScan depth_scan_loss(const ParamSet& params,
                          const std::vector<std::vector<int32_t>>& calibration, int block_size) {
    check_calibration(calibration);
    const int depth = params.config.depth;
    if (block_size < 1 || block_size >= depth) {
        throw std::invalid_argument("depth scan: block size must be in [1, depth)");
    }
    CalibBatches cb(calibration);
    Engine<float> eng(params);

    DepthScan scan;
    scan.metric = DepthScan::Metric::lm_loss;
    scan.block = block_size;
    for (int start = 0; start + block_size <= depth; ++start) {
        ForwardOptions opt;
        for (int l = start; l < start + block_size; ++l) opt.skip_layers.push_back(l);
        double loss_sum = 0.0;
        int64_t positions = 0;
        for (const auto& tb : cb.batches) {
            eng.forward(tb.inputs.data(), tb.batch, tb.seq, opt);
            const int64_t n = static_cast<int64_t>(tb.batch) * tb.seq;
            loss_sum += eng.loss_ce(tb.targets.data()) * static_cast<double>(n);
            positions += n;
        }
        scan.values.push_back(loss_sum / static_cast<double>(positions));
    }
    return scan;
}

DepthScan block_importance(const ParamSet& params,
                           const std::vector<std::vector<int32_t>>& calibration, int block_size) {
    check_calibration(calibration);
    const ModelConfig& cfg = params.config;
    const int depth = cfg.depth;
    if (block_size < 1 || block_size >= depth) {
        throw std::invalid_argument("block importance: block size must be in [1, depth)");
    }
    CalibBatches cb(calibration);
    Engine<float> eng(params);
    ForwardOptions opt;
    opt.taps.residual_bounds = true;

    const int n_starts = depth - block_size + 1;
    std::vector<double> sums(static_cast<size_t>(n_starts), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(n_starts), 0);
    int64_t excluded = 0;

    ForwardTrace trace;
    const int64_t h = cfg.hidden;
    for (const auto& tb : cb.batches) {
        eng.forward(tb.inputs.data(), tb.batch, tb.seq, opt, &trace);
        const int64_t n_rows = static_cast<int64_t>(tb.batch) * tb.seq;
        for (int start = 0; start < n_starts; ++start) {
            const Tensor& xin = trace.residual[static_cast<size_t>(start)];
            const Tensor& xout = trace.residual[static_cast<size_t>(start + block_size)];
            for (int64_t n = 0; n < n_rows; ++n) {
                const float* a = xin.ptr() + n * h;
                const float* b = xout.ptr() + n * h;
                double na = 0.0, nb = 0.0, dot = 0.0;
                for (int64_t j = 0; j < h; ++j) {
                    na += static_cast<double>(a[j]) * a[j];
                    nb += static_cast<double>(b[j]) * b[j];
                    dot += static_cast<double>(a[j]) * b[j];
                }
                if (na == 0.0 || nb == 0.0) {
                    excluded += 1;
                    continue;
                }
                // Bitwise-identical vectors must score exactly 0; clamping
                // keeps rounding from pushing |cos| past 1.
                double cosv;
                if (dot == na && dot == nb) {
                    cosv = 1.0;
                } else {
                    cosv = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
                }
                sums[static_cast<size_t>(start)] += 1.0 - cosv;
                counts[static_cast<size_t>(start)] += 1;
            }
        }
    }

    DepthScan scan;
    scan.metric = DepthScan::Metric::block_importance;
    scan.block = block_size;
    scan.bi_excluded = excluded;
    for (int start = 0; start < n_starts; ++start) {
        if (counts[static_cast<size_t>(start)] == 0) {
            throw std::runtime_error("block importance: every pair degenerate at start " +
                                     std::to_string(start));
        }
        scan.values.push_back(sums[static_cast<size_t>(start)] /
                              static_cast<double>(counts[static_cast<size_t>(start)]));
    }
    return scan;
}

DepthScan depth_scan_task(const ParamSet& params, const std::vector<ClozeItem>& items,
                          int block_size) {
    const int depth = params.config.depth;
    if (block_size < 1 || block_size >= depth) {
        throw std::invalid_argument("depth scan: block size must be in [1, depth)");
    }
    if (items.empty()) throw std::invalid_argument("depth scan: no cloze items");
    DepthScan scan;
    scan.metric = DepthScan::Metric::task_accuracy;
    scan.block = block_size;
    for (int start = 0; start + block_size <= depth; ++start) {
        std::vector<int> skip;
        for (int l = start; l < start + block_size; ++l) skip.push_back(l);
        scan.values.push_back(eval_cloze(params, items, skip));
    }
    return scan;
}

std::vector<int> select_contiguous(const DepthScan& scan) {
    if (scan.values.empty()) throw std::invalid_argument("select_contiguous: empty scan");
    const bool maximize = scan.metric == DepthScan::Metric::task_accuracy;
    size_t best = 0;
    for (size_t i = 1; i < scan.values.size(); ++i) {
        const bool better = maximize ? scan.values[i] > scan.values[best]
                                     : scan.values[i] < scan.values[best];
        if (better) best = i;
    }
    std::vector<int> layers;
    for (int l = 0; l < scan.block; ++l) layers.push_back(static_cast<int>(best) + l);
    return layers;
}

std::vector<int> select_noncontiguous(const DepthScan& single_layer_scan, int n_drop) {
    if (single_layer_scan.block != 1) {
        throw std::invalid_argument("select_noncontiguous: needs a block-size-1 scan");
    }
    const int depth = static_cast<int>(single_layer_scan.values.size());
    if (n_drop < 1 || n_drop >= depth) {
        throw std::invalid_argument("select_noncontiguous: n_drop must be in [1, depth)");
    }
    const bool maximize = single_layer_scan.metric == DepthScan::Metric::task_accuracy;
    std::vector<int> idx(static_cast<size_t>(depth));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double va = single_layer_scan.values[static_cast<size_t>(a)];
        const double vb = single_layer_scan.values[static_cast<size_t>(b)];
        return maximize ? va > vb : va < vb;
    });
    std::vector<int> out(idx.begin(), idx.begin() + n_drop);
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

const char* metric_name(DepthScan::Metric m) {
    switch (m) {
        case DepthScan::Metric::lm_loss: return "lm_loss";
        case DepthScan::Metric::block_importance: return "block_importance";
        case DepthScan::Metric::task_accuracy: return "task_accuracy";
    }
    return "?";
}

DepthScan::Metric metric_from_name(const std::string& s) {
    if (s == "lm_loss") return DepthScan::Metric::lm_loss;
    if (s == "block_importance") return DepthScan::Metric::block_importance;
    if (s == "task_accuracy") return DepthScan::Metric::task_accuracy;
    throw std::invalid_argument("unknown depth scan metric: " + s);
}

}  // namespace

std::string width_importance_to_json(const WidthImportance& imp) {
    json j;
    j["neuron"] = imp.neuron;
    j["head"] = imp.head;
    j["channel"] = imp.channel;
    j["calibration_samples"] = imp.calibration_samples;
    j["aggregation"] = imp.aggregation;
    j["seed"] = imp.seed;
    return j.dump();
}

WidthImportance width_importance_from_json(const std::string& text) {
    json j = json::parse(text);
    WidthImportance imp;
    imp.neuron = j.at("neuron").get<std::vector<std::vector<float>>>();
    imp.head = j.at("head").get<std::vector<std::vector<float>>>();
    imp.channel = j.at("channel").get<std::vector<float>>();
    imp.calibration_samples = j.at("calibration_samples").get<int64_t>();
    imp.aggregation = j.at("aggregation").get<std::string>();
    imp.seed = j.at("seed").get<uint64_t>();
    return imp;
}

std::string depth_scan_to_json(const DepthScan& scan) {
    json j;
    j["metric"] = metric_name(scan.metric);
    j["block"] = scan.block;
    j["values"] = scan.values;
    j["bi_excluded"] = scan.bi_excluded;
    return j.dump();
}

DepthScan depth_scan_from_json(const std::string& text) {
    json j = json::parse(text);
    DepthScan scan;
    scan.metric = metric_from_name(j.at("metric").get<std::string>());
    scan.block = j.at("block").get<int>();
    scan.values = j.at("values").get<std::vector<double>>();
    scan.bi_excluded = j.at("bi_excluded").get<int64_t>();
    return scan;
}

void depth_scan_to_csv(const DepthScan& scan, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write scan csv: " + path.string());
    f << "start_index,value\n";
    for (size_t i = 0; i < scan.values.size(); ++i) {
        f << i << "," << json(scan.values[i]).dump() << "\n";
    }
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw std::invalid_argument("spearman: need two equal-length series");
    }
    auto franks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = franks(a);
    const auto rb = franks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

}  // namespace mshr
