#pragma once

// Straight-line double-precision reference forward pass, kept deliberately
// independent of the library's engine: plain loops, no Eigen, no shared
// helpers. Used as the oracle the production forward is checked against.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mshr/tensor.hpp"

namespace ref {

inline std::vector<double> tensor_d(const mshr::ParamSet& p, const std::string& name) {
    const mshr::Tensor& t = p.at(name);
    return std::vector<double>(t.data.begin(), t.data.end());
}

// Returns logits (B*T*vocab) for row-major (B,T) tokens.
inline std::vector<double> reference_forward(const mshr::ParamSet& params,
                                             const std::vector<int32_t>& tokens, int B, int T) {
    const auto& c = params.config;
    const int h = c.hidden;
    const int hd = c.head_dim;
    const int qh = c.query_heads;
    const int groups = c.attention_groups;
    const int aw = qh * hd;
    const int kw = groups * hd;
    const int m = c.mlp_hidden;
    const int V = c.vocab;
    const double eps = c.norm_eps;

    auto embed = tensor_d(params, "embed.tok");
    auto final_norm = tensor_d(params, "final.norm");
    auto head = c.tie_embeddings ? embed : tensor_d(params, "head.out");

    auto rmsnorm = [&](const std::vector<double>& x, const std::vector<double>& g) {
        std::vector<double> y(x.size());
        const int rows = static_cast<int>(x.size()) / h;
        for (int n = 0; n < rows; ++n) {
            double ss = 0.0;
            for (int j = 0; j < h; ++j) ss += x[n * h + j] * x[n * h + j];
            const double r = 1.0 / std::sqrt(ss / h + eps);
            for (int j = 0; j < h; ++j) y[n * h + j] = x[n * h + j] * r * g[j];
        }
        return y;
    };

    // y[n, o] = sum_i x[n, i] * W[o, i]
    auto matvec = [](const std::vector<double>& x, const std::vector<double>& W, int rows,
                     int in, int out) {
        std::vector<double> y(static_cast<size_t>(rows) * out, 0.0);
        for (int n = 0; n < rows; ++n) {
            for (int o = 0; o < out; ++o) {
                double s = 0.0;
                for (int i = 0; i < in; ++i) s += x[n * in + i] * W[static_cast<size_t>(o) * in + i];
                y[static_cast<size_t>(n) * out + o] = s;
            }
        }
        return y;
    };

    auto rope = [&](std::vector<double>& x, int width) {
        const int rows = static_cast<int>(x.size()) / width;
        const int heads = width / hd;
        for (int n = 0; n < rows; ++n) {
            const int t = n % T;
            for (int hh = 0; hh < heads; ++hh) {
                for (int i = 0; i < hd / 2; ++i) {
                    const double theta = std::pow(10000.0, -2.0 * i / hd);
                    const double cs = std::cos(t * theta);
                    const double sn = std::sin(t * theta);
                    double& a = x[static_cast<size_t>(n) * width + hh * hd + 2 * i];
                    double& b = x[static_cast<size_t>(n) * width + hh * hd + 2 * i + 1];
                    const double a0 = a, b0 = b;
                    a = a0 * cs - b0 * sn;
                    b = a0 * sn + b0 * cs;
                }
            }
        }
    };

    const int N = B * T;
    std::vector<double> x(static_cast<size_t>(N) * h);
    for (int n = 0; n < N; ++n) {
        for (int j = 0; j < h; ++j) x[static_cast<size_t>(n) * h + j] = embed[static_cast<size_t>(tokens[n]) * h + j];
    }

    for (int l = 0; l < c.depth; ++l) {
        const std::string pre = "layer." + std::to_string(l) + ".";
        auto wq = tensor_d(params, pre + "attn.q");
        auto wk = tensor_d(params, pre + "attn.k");
        auto wv = tensor_d(params, pre + "attn.v");
        auto wo = tensor_d(params, pre + "attn.o");
        auto wgate = tensor_d(params, pre + "mlp.gate");
        auto wup = tensor_d(params, pre + "mlp.up");
        auto wdown = tensor_d(params, pre + "mlp.down");
        auto g1 = tensor_d(params, pre + "norm.attn");
        auto g2 = tensor_d(params, pre + "norm.mlp");

        auto normed = rmsnorm(x, g1);
        auto q = matvec(normed, wq, N, h, aw);
        auto k = matvec(normed, wk, N, h, kw);
        auto v = matvec(normed, wv, N, h, kw);
        rope(q, aw);
        rope(k, kw);

        std::vector<double> heads_out(static_cast<size_t>(N) * aw, 0.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int b = 0; b < B; ++b) {
            for (int hh = 0; hh < qh; ++hh) {
                const int g = hh / (qh / groups);
                for (int t = 0; t < T; ++t) {
                    std::vector<double> scores(static_cast<size_t>(t) + 1);
                    double mx = -HUGE_VAL;
                    for (int s = 0; s <= t; ++s) {
                        double dot = 0.0;
                        for (int i = 0; i < hd; ++i) {
                            dot += q[(static_cast<size_t>(b) * T + t) * aw + hh * hd + i] *
                                   k[(static_cast<size_t>(b) * T + s) * kw + g * hd + i];
                        }
                        scores[s] = dot * scale;
                        mx = std::max(mx, scores[s]);
                    }
                    double sum = 0.0;
                    for (int s = 0; s <= t; ++s) {
                        scores[s] = std::exp(scores[s] - mx);
                        sum += scores[s];
                    }
                    for (int i = 0; i < hd; ++i) {
                        double acc = 0.0;
                        for (int s = 0; s <= t; ++s) {
                            acc += scores[s] / sum *
                                   v[(static_cast<size_t>(b) * T + s) * kw + g * hd + i];
                        }
                        heads_out[(static_cast<size_t>(b) * T + t) * aw + hh * hd + i] = acc;
                    }
                }
            }
        }
        auto attn_proj = matvec(heads_out, wo, N, aw, h);
        std::vector<double> x_mid(x.size());
        for (size_t i = 0; i < x.size(); ++i) x_mid[i] = x[i] + attn_proj[i];

        auto normed2 = rmsnorm(x_mid, g2);
        auto gate = matvec(normed2, wgate, N, h, m);
        auto up = matvec(normed2, wup, N, h, m);
        std::vector<double> inner(gate.size());
        for (size_t i = 0; i < gate.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-gate[i]));
            inner[i] = gate[i] * sig * up[i];
        }
        auto mlp_out = matvec(inner, wdown, N, m, h);
        for (size_t i = 0; i < x.size(); ++i) x[i] = x_mid[i] + mlp_out[i];
    }

    auto final_normed = rmsnorm(x, final_norm);
    return matvec(final_normed, head, N, h, V);
}

}  // namespace ref
