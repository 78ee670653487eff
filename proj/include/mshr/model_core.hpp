#pragma once

// Scalar-generic transformer engine. float is the production path; double is
// the wide-precision mode used by gradient-check tests. Every parallel region
// uses fixed-size chunks with disjoint writes (see threading.hpp), so results
// are bitwise independent of the worker count.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mshr/config.hpp"
#include "mshr/model.hpp"
#include "mshr/tensor.hpp"
#include "mshr/threading.hpp"

namespace mshr {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<RowMat<S>>;
template <class S>
using CMapM = Eigen::Map<const RowMat<S>>;
using OStride = Eigen::OuterStride<Eigen::Dynamic>;
template <class S>
using StridedMap = Eigen::Map<RowMat<S>, 0, OStride>;
template <class S>
using CStridedMap = Eigen::Map<const RowMat<S>, 0, OStride>;

inline constexpr int64_t kRowChunk = 128;  // rows per GEMM task
inline constexpr int64_t kOutChunk = 64;   // weight-grad rows per task
inline constexpr double kRopeBase = 10000.0;

// ---------------------------------------------------------------------------
// Dense parameter slots (flat vectors in schema order).

template <class S>
struct DenseLayer {
    std::vector<S> q, k, v, o, gate, up, down, norm_attn, norm_mlp;
};

template <class S>
struct DenseModel {
    ModelConfig cfg;
    std::vector<S> embed;       // (vocab, hidden)
    std::vector<S> final_norm;  // (hidden)
    std::vector<S> head;        // (vocab, hidden); empty when tied
    std::vector<DenseLayer<S>> layers;

    static DenseModel from_params(const ParamSet& p) {
        DenseModel m;
        m.cfg = p.config;
        auto grab = [&p](const std::string& name, std::vector<S>& dst) {
            const Tensor& t = p.at(name);
            dst.assign(t.data.begin(), t.data.end());
        };
        grab("embed.tok", m.embed);
        grab("final.norm", m.final_norm);
        if (!m.cfg.tie_embeddings) grab("head.out", m.head);
        m.layers.resize(m.cfg.depth);
        for (int l = 0; l < m.cfg.depth; ++l) {
            const std::string pre = "layer." + std::to_string(l) + ".";
            auto& L = m.layers[l];
            grab(pre + "attn.q", L.q);
            grab(pre + "attn.k", L.k);
            grab(pre + "attn.v", L.v);
            grab(pre + "attn.o", L.o);
            grab(pre + "mlp.gate", L.gate);
            grab(pre + "mlp.up", L.up);
            grab(pre + "mlp.down", L.down);
            grab(pre + "norm.attn", L.norm_attn);
            grab(pre + "norm.mlp", L.norm_mlp);
        }
        return m;
    }

    static DenseModel zeros_like(const ModelConfig& cfg) {
        DenseModel m;
        m.cfg = cfg;
        m.embed.assign(static_cast<size_t>(cfg.vocab) * cfg.hidden, S(0));
        m.final_norm.assign(cfg.hidden, S(0));
        if (!cfg.tie_embeddings) m.head.assign(static_cast<size_t>(cfg.vocab) * cfg.hidden, S(0));
        m.layers.resize(cfg.depth);
        const size_t aw = static_cast<size_t>(cfg.attn_width()) * cfg.hidden;
        const size_t kw = static_cast<size_t>(cfg.kv_width()) * cfg.hidden;
        const size_t mw = static_cast<size_t>(cfg.mlp_hidden) * cfg.hidden;
        for (auto& L : m.layers) {
            L.q.assign(aw, S(0));
            L.k.assign(kw, S(0));
            L.v.assign(kw, S(0));
            L.o.assign(aw, S(0));
            L.gate.assign(mw, S(0));
            L.up.assign(mw, S(0));
            L.down.assign(mw, S(0));
            L.norm_attn.assign(cfg.hidden, S(0));
            L.norm_mlp.assign(cfg.hidden, S(0));
        }
        return m;
    }

    void set_zero() {
        auto z = [](std::vector<S>& v) { std::fill(v.begin(), v.end(), S(0)); };
        z(embed);
        z(final_norm);
        z(head);
        for (auto& L : layers) {
            z(L.q);
            z(L.k);
            z(L.v);
            z(L.o);
            z(L.gate);
            z(L.up);
            z(L.down);
            z(L.norm_attn);
            z(L.norm_mlp);
        }
    }

    template <class Fn>  // fn(name, vector<S>&), schema order
    void visit(Fn&& fn) {
        fn("embed.tok", embed);
        for (int l = 0; l < cfg.depth; ++l) {
            const std::string pre = "layer." + std::to_string(l) + ".";
            auto& L = layers[l];
            fn(pre + "attn.q", L.q);
            fn(pre + "attn.k", L.k);
            fn(pre + "attn.v", L.v);
            fn(pre + "attn.o", L.o);
            fn(pre + "mlp.gate", L.gate);
            fn(pre + "mlp.up", L.up);
            fn(pre + "mlp.down", L.down);
            fn(pre + "norm.attn", L.norm_attn);
            fn(pre + "norm.mlp", L.norm_mlp);
        }
        fn("final.norm", final_norm);
        if (!cfg.tie_embeddings) fn("head.out", head);
    }

    ParamSet to_params() const {
        ParamSet p;
        p.config = cfg;
        for (const auto& spec : tensor_schema(cfg)) {
            Tensor t(spec.shape);
            p.tensors.emplace(spec.name, std::move(t));
        }
        const_cast<DenseModel*>(this)->visit([&](const std::string& name, std::vector<S>& v) {
            Tensor& t = p.at(name);
            for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
        });
        return p;
    }

    GradSet to_gradset() const {
        GradSet g;
        for (const auto& spec : tensor_schema(cfg)) g.emplace(spec.name, Tensor(spec.shape));
        const_cast<DenseModel*>(this)->visit([&](const std::string& name, std::vector<S>& v) {
            Tensor& t = g.at(name);
            for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
        });
        return g;
    }
};

// ---------------------------------------------------------------------------
// Chunked linear algebra primitives.

// Y = X * W^T : (N,in) x (out,in) -> (N,out). `block` fixes the GEMM row
// blocking; forward passes use one block per batch sample so a row's result
// never depends on where its sample sits in the batch.
template <class S>
void linear_nt(const S* X, const S* W, S* Y, int64_t N, int64_t in, int64_t out,
               int64_t block = kRowChunk) {
    CMapM<S> w(W, out, in);
    parallel_for(N, block, [&](int64_t r0, int64_t r1) {
        CMapM<S> x(X + r0 * in, r1 - r0, in);
        MapM<S> y(Y + r0 * out, r1 - r0, out);
        y.noalias() = x * w.transpose();
    });
}

// Y = R + X * W^T (fused residual add)
template <class S>
void linear_nt_residual(const S* X, const S* W, const S* R, S* Y, int64_t N, int64_t in,
                        int64_t out, int64_t block = kRowChunk) {
    CMapM<S> w(W, out, in);
    parallel_for(N, block, [&](int64_t r0, int64_t r1) {
        CMapM<S> x(X + r0 * in, r1 - r0, in);
        CMapM<S> r(R + r0 * out, r1 - r0, out);
        MapM<S> y(Y + r0 * out, r1 - r0, out);
        y = r;
        y.noalias() += x * w.transpose();
    });
}

// dX = dY * W : (N,out) x (out,in) -> (N,in); accumulate variant adds.
template <class S>
void linear_nn(const S* dY, const S* W, S* dX, int64_t N, int64_t out, int64_t in) {
    CMapM<S> w(W, out, in);
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        CMapM<S> dy(dY + r0 * out, r1 - r0, out);
        MapM<S> dx(dX + r0 * in, r1 - r0, in);
        dx.noalias() = dy * w;
    });
}

template <class S>
void linear_nn_acc(const S* dY, const S* W, S* dX, int64_t N, int64_t out, int64_t in) {
    CMapM<S> w(W, out, in);
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        CMapM<S> dy(dY + r0 * out, r1 - r0, out);
        MapM<S> dx(dX + r0 * in, r1 - r0, in);
        dx.noalias() += dy * w;
    });
}

// dW += dY^T * X : (out,in), chunked over output rows so each weight element
// is accumulated by exactly one task.
template <class S>
void grad_weight_acc(const S* dY, const S* X, S* dW, int64_t N, int64_t out, int64_t in) {
    CMapM<S> dy(dY, N, out);
    CMapM<S> x(X, N, in);
    parallel_for(out, kOutChunk, [&](int64_t o0, int64_t o1) {
        MapM<S> dw(dW + o0 * in, o1 - o0, in);
        dw.noalias() += dy.middleCols(o0, o1 - o0).transpose() * x;
    });
}

// ---------------------------------------------------------------------------
// RMS normalization.

template <class S>
void rmsnorm_fwd(const S* x, const S* gain, S* y, S* inv_rms, int64_t N, int64_t h, S eps,
                 bool identity) {
    if (identity) {
        parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
            std::copy(x + r0 * h, x + r1 * h, y + r0 * h);
            std::fill(inv_rms + r0, inv_rms + r1, S(1));
        });
        return;
    }
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        for (int64_t n = r0; n < r1; ++n) {
            const S* xr = x + n * h;
            S* yr = y + n * h;
            S ss = S(0);
            for (int64_t j = 0; j < h; ++j) ss += xr[j] * xr[j];
            const S r = S(1) / std::sqrt(ss / S(h) + eps);
            inv_rms[n] = r;
            for (int64_t j = 0; j < h; ++j) yr[j] = xr[j] * r * gain[j];
        }
    });
}

// dx += d(norm); dgain += reduction over rows (serial, fixed order).
template <class S>
void rmsnorm_bwd(const S* x, const S* gain, const S* inv_rms, const S* dy, S* dx, S* dgain,
                 int64_t N, int64_t h, bool identity) {
    if (identity) {
        parallel_for(N * h, kRowChunk * h, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) dx[i] += dy[i];
        });
        return;
    }
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        for (int64_t n = r0; n < r1; ++n) {
            const S* xr = x + n * h;
            const S* dyr = dy + n * h;
            S* dxr = dx + n * h;
            const S r = inv_rms[n];
            S dot = S(0);
            for (int64_t j = 0; j < h; ++j) dot += dyr[j] * gain[j] * xr[j];
            const S k = dot * r * r * r / S(h);
            for (int64_t j = 0; j < h; ++j) dxr[j] += dyr[j] * gain[j] * r - xr[j] * k;
        }
    });
    if (dgain != nullptr) {
        for (int64_t n = 0; n < N; ++n) {
            const S* xr = x + n * h;
            const S* dyr = dy + n * h;
            const S r = inv_rms[n];
            for (int64_t j = 0; j < h; ++j) dgain[j] += dyr[j] * xr[j] * r;
        }
    }
}

// ---------------------------------------------------------------------------
// Rotary position embedding (adjacent pairs per head, shared table).

template <class S>
void rope_tables(int T, int head_dim, std::vector<S>& cos_t, std::vector<S>& sin_t) {
    const int hd2 = head_dim / 2;
    cos_t.resize(static_cast<size_t>(T) * hd2);
    sin_t.resize(static_cast<size_t>(T) * hd2);
    for (int t = 0; t < T; ++t) {
        for (int i = 0; i < hd2; ++i) {
            const double theta = std::pow(kRopeBase, -2.0 * i / head_dim);
            cos_t[static_cast<size_t>(t) * hd2 + i] = static_cast<S>(std::cos(t * theta));
            sin_t[static_cast<size_t>(t) * hd2 + i] = static_cast<S>(std::sin(t * theta));
        }
    }
}

template <class S, bool Inverse>
void rope_apply(S* x, int64_t N, int T, int width, int head_dim, const S* cos_t, const S* sin_t) {
    const int hd2 = head_dim / 2;
    const int heads = width / head_dim;
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        for (int64_t n = r0; n < r1; ++n) {
            const int t = static_cast<int>(n % T);
            const S* ct = cos_t + static_cast<size_t>(t) * hd2;
            const S* st = sin_t + static_cast<size_t>(t) * hd2;
            S* row = x + n * width;
            for (int hh = 0; hh < heads; ++hh) {
                S* hrow = row + hh * head_dim;
                for (int i = 0; i < hd2; ++i) {
                    const S a = hrow[2 * i];
                    const S b = hrow[2 * i + 1];
                    if constexpr (Inverse) {
                        hrow[2 * i] = a * ct[i] + b * st[i];
                        hrow[2 * i + 1] = -a * st[i] + b * ct[i];
                    } else {
                        hrow[2 * i] = a * ct[i] - b * st[i];
                        hrow[2 * i + 1] = a * st[i] + b * ct[i];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Forward cache.

template <class S>
struct LayerCache {
    std::vector<S> x_in;         // (N,h) residual entering this layer
    std::vector<S> normed_attn;  // (N,h)
    std::vector<S> inv_rms_attn; // (N)
    std::vector<S> q, k, v;      // (N,aw) (N,kw) (N,kw); q,k post-rope
    std::vector<S> probs;        // (B*QH, T, T) causal attention weights
    std::vector<S> attn_heads;   // (N,aw) concatenated head outputs, pre o-proj
    std::vector<S> x_mid;        // (N,h)
    std::vector<S> normed_mlp;   // (N,h)
    std::vector<S> inv_rms_mlp;  // (N)
    std::vector<S> gate_pre;     // (N,m)
    std::vector<S> up_out;       // (N,m)
    std::vector<S> inner;        // (N,m)
};

template <class S>
struct ForwardCache {
    int B = 0, T = 0;
    std::vector<int32_t> tokens;
    std::vector<uint8_t> skip;  // per layer
    bool norm_identity = false;
    std::vector<LayerCache<S>> layers;
    std::vector<S> x_final;       // (N,h)
    std::vector<S> final_normed;  // (N,h)
    std::vector<S> inv_rms_final; // (N)
    std::vector<S> logits;        // (N,V)
    std::vector<S> rope_cos, rope_sin;
    int rope_T = -1;
};

// ---------------------------------------------------------------------------
// Loss heads (row-parallel, chunk-ordered reduction; sums in double).

template <class S>
double ce_loss_grad(const std::vector<S>& logits, const int32_t* targets, int64_t N, int64_t V,
                    std::vector<S>* dlogits) {
    if (dlogits) dlogits->resize(static_cast<size_t>(N) * V);
    const int64_t n_chunks = (N + kRowChunk - 1) / kRowChunk;
    std::vector<double> partial(static_cast<size_t>(n_chunks), 0.0);
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        using Arr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
        using CArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
        std::vector<S> scratch(dlogits ? 0 : static_cast<size_t>(V));
        double local = 0.0;
        const S inv_n = S(1) / static_cast<S>(N);
        for (int64_t n = r0; n < r1; ++n) {
            CArr z(logits.data() + n * V, V);
            Arr p(dlogits ? dlogits->data() + n * V : scratch.data(), V);
            const S zmax = z.maxCoeff();
            p = (z - zmax).exp();
            const S sum = p.sum();
            const double lse = static_cast<double>(zmax) + std::log(static_cast<double>(sum));
            const int32_t tgt = targets[n];
            local += lse - static_cast<double>(z[tgt]);
            if (dlogits) {
                p *= inv_n / sum;
                p[tgt] -= inv_n;
            }
        }
        partial[r0 / kRowChunk] = local;
    });
    double total = 0.0;
    for (double p : partial) total += p;
    return total / static_cast<double>(N);
}

// Forward KL(teacher || student), mean nats per position; gradient w.r.t.
// student logits. The per-row loss is accumulated in double so equal logits
// give exactly zero.
template <class S>
double kl_loss_grad(const S* teacher_logits, const std::vector<S>& student_logits, int64_t N,
                    int64_t V, std::vector<S>* dlogits) {
    if (dlogits) dlogits->resize(static_cast<size_t>(N) * V);
    const int64_t n_chunks = (N + kRowChunk - 1) / kRowChunk;
    std::vector<double> partial(static_cast<size_t>(n_chunks), 0.0);
    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
        using CArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
        using ArrD = Eigen::Array<double, Eigen::Dynamic, 1>;
        ArrD pt(V), ps(V);
        double local = 0.0;
        const double inv_n = 1.0 / static_cast<double>(N);
        for (int64_t n = r0; n < r1; ++n) {
            CArr zt(teacher_logits + n * V, V);
            CArr zs(student_logits.data() + n * V, V);
            const ArrD zt_d = zt.template cast<double>();
            const ArrD zs_d = zs.template cast<double>();
            const double tmax = zt_d.maxCoeff();
            const double smax = zs_d.maxCoeff();
            pt = (zt_d - tmax).exp();
            ps = (zs_d - smax).exp();
            const double tsum = pt.sum();
            const double ssum = ps.sum();
            const double lse_t = tmax + std::log(tsum);
            const double lse_s = smax + std::log(ssum);
            pt *= 1.0 / tsum;
            local += (pt * ((zt_d - lse_t) - (zs_d - lse_s))).sum();
            if (dlogits) {
                // Normalize through memory so identical logits cancel exactly
                // (an fma of the unstored product would leave rounding dust).
                ps *= 1.0 / ssum;
                Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> d(dlogits->data() + n * V, V);
                d = ((ps - pt) * inv_n).template cast<S>();
            }
        }
        partial[r0 / kRowChunk] = local;
    });
    double total = 0.0;
    for (double p : partial) total += p;
    return total / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// Engine.

template <class S>
class Engine {
public:
    explicit Engine(const ParamSet& params) : model_(DenseModel<S>::from_params(params)) {}
    explicit Engine(DenseModel<S> model) : model_(std::move(model)) {}

    const ModelConfig& cfg() const { return model_.cfg; }
    DenseModel<S>& model() { return model_; }
    const ForwardCache<S>& cache() const { return cache_; }

    const std::vector<S>& forward(const int32_t* tokens, int B, int T,
                                  const ForwardOptions& opt = {}, ForwardTrace* trace = nullptr) {
        const ModelConfig& c = model_.cfg;
        if (B < 1 || T < 1) throw std::invalid_argument("forward: empty batch");
        if (T > c.context) throw std::invalid_argument("forward: sequence longer than context");
        const int64_t N = static_cast<int64_t>(B) * T;
        for (int64_t n = 0; n < N; ++n) {
            if (tokens[n] < 0 || tokens[n] >= c.vocab) {
                throw std::invalid_argument("forward: token id out of range");
            }
        }
        const int64_t h = c.hidden, aw = c.attn_width(), kw = c.kv_width(), m = c.mlp_hidden;
        const int64_t V = c.vocab;
        const int QH = c.query_heads, hd = c.head_dim;

        cache_.B = B;
        cache_.T = T;
        cache_.tokens.assign(tokens, tokens + N);
        cache_.skip.assign(static_cast<size_t>(c.depth), 0);
        for (int s : opt.skip_layers) {
            if (s < 0 || s >= c.depth) throw std::invalid_argument("forward: skip layer out of range");
            cache_.skip[static_cast<size_t>(s)] = 1;
        }
        cache_.norm_identity = opt.norm_identity;
        if (cache_.rope_T != T) {
            rope_tables<S>(T, hd, cache_.rope_cos, cache_.rope_sin);
            cache_.rope_T = T;
        }
        cache_.layers.resize(static_cast<size_t>(c.depth));
        cache_.x_final.resize(N * h);
        cache_.final_normed.resize(N * h);
        cache_.inv_rms_final.resize(N);
        cache_.logits.resize(N * V);

        if (trace != nullptr) {
            trace->mlp_inner.clear();
            trace->head_output.clear();
            trace->norm_output.clear();
            trace->residual.clear();
            if (opt.taps.mlp_inner) trace->mlp_inner.resize(c.depth);
            if (opt.taps.head_output) trace->head_output.resize(c.depth);
            if (opt.taps.norm_output) trace->norm_output.resize(2 * c.depth + 1);
            if (opt.taps.residual_bounds) trace->residual.resize(c.depth + 1);
        }

        // Embedding gather.
        auto& L0 = cache_.layers[0];
        L0.x_in.resize(N * h);
        parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
            for (int64_t n = r0; n < r1; ++n) {
                const S* src = model_.embed.data() + static_cast<int64_t>(tokens[n]) * h;
                std::copy(src, src + h, L0.x_in.data() + n * h);
            }
        });

        for (int l = 0; l < c.depth; ++l) {
            auto& lc = cache_.layers[static_cast<size_t>(l)];
            S* next = (l + 1 < c.depth) ? nullptr : cache_.x_final.data();
            if (l + 1 < c.depth) {
                cache_.layers[static_cast<size_t>(l + 1)].x_in.resize(N * h);
                next = cache_.layers[static_cast<size_t>(l + 1)].x_in.data();
            }
            if (trace && opt.taps.residual_bounds) {
                trace->residual[static_cast<size_t>(l)] = to_tensor(lc.x_in, {B, T, (int)h});
            }
            if (cache_.skip[static_cast<size_t>(l)]) {
                std::copy(lc.x_in.begin(), lc.x_in.end(), next);
                continue;
            }
            const auto& W = model_.layers[static_cast<size_t>(l)];

            lc.normed_attn.resize(N * h);
            lc.inv_rms_attn.resize(N);
            rmsnorm_fwd(lc.x_in.data(), W.norm_attn.data(), lc.normed_attn.data(),
                        lc.inv_rms_attn.data(), N, h, static_cast<S>(c.norm_eps),
                        opt.norm_identity);
            record_norm_site(opt, trace, 2 * l, lc.x_in, lc.normed_attn, lc.inv_rms_attn,
                             W.norm_attn, N, h, B, T);

            lc.q.resize(N * aw);
            lc.k.resize(N * kw);
            lc.v.resize(N * kw);
            linear_nt(lc.normed_attn.data(), W.q.data(), lc.q.data(), N, h, aw, T);
            linear_nt(lc.normed_attn.data(), W.k.data(), lc.k.data(), N, h, kw, T);
            linear_nt(lc.normed_attn.data(), W.v.data(), lc.v.data(), N, h, kw, T);
            rope_apply<S, false>(lc.q.data(), N, T, (int)aw, hd, cache_.rope_cos.data(),
                                 cache_.rope_sin.data());
            rope_apply<S, false>(lc.k.data(), N, T, (int)kw, hd, cache_.rope_cos.data(),
                                 cache_.rope_sin.data());

            lc.probs.resize(static_cast<int64_t>(B) * QH * T * T);
            lc.attn_heads.resize(N * aw);
            attention_fwd(lc, B, T);

            if (opt.mask != nullptr && static_cast<size_t>(l) < opt.mask->zero_heads.size()) {
                for (int hh : opt.mask->zero_heads[static_cast<size_t>(l)]) {
                    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
                        for (int64_t n = r0; n < r1; ++n) {
                            S* row = lc.attn_heads.data() + n * aw + hh * hd;
                            std::fill(row, row + hd, S(0));
                        }
                    });
                }
            }
            if (trace && opt.taps.head_output) {
                trace->head_output[static_cast<size_t>(l)] = to_tensor(lc.attn_heads, {B, T, (int)aw});
            }
            if (opt.width_acc != nullptr) accumulate_heads(*opt.width_acc, l, lc.attn_heads, B, T);

            lc.x_mid.resize(N * h);
            linear_nt_residual(lc.attn_heads.data(), W.o.data(), lc.x_in.data(), lc.x_mid.data(),
                               N, aw, h, T);

            lc.normed_mlp.resize(N * h);
            lc.inv_rms_mlp.resize(N);
            rmsnorm_fwd(lc.x_mid.data(), W.norm_mlp.data(), lc.normed_mlp.data(),
                        lc.inv_rms_mlp.data(), N, h, static_cast<S>(c.norm_eps),
                        opt.norm_identity);
            record_norm_site(opt, trace, 2 * l + 1, lc.x_mid, lc.normed_mlp, lc.inv_rms_mlp,
                             W.norm_mlp, N, h, B, T);

            lc.gate_pre.resize(N * m);
            lc.up_out.resize(N * m);
            lc.inner.resize(N * m);
            linear_nt(lc.normed_mlp.data(), W.gate.data(), lc.gate_pre.data(), N, h, m, T);
            linear_nt(lc.normed_mlp.data(), W.up.data(), lc.up_out.data(), N, h, m, T);
            parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
                using Arr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
                using CArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
                const int64_t len = (r1 - r0) * m;
                CArr z(lc.gate_pre.data() + r0 * m, len);
                CArr up(lc.up_out.data() + r0 * m, len);
                Arr inner(lc.inner.data() + r0 * m, len);
                inner = z * up / (S(1) + (-z).exp());
            });
            if (opt.mask != nullptr && static_cast<size_t>(l) < opt.mask->zero_neurons.size()) {
                for (int u : opt.mask->zero_neurons[static_cast<size_t>(l)]) {
                    parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
                        for (int64_t n = r0; n < r1; ++n) lc.inner[n * m + u] = S(0);
                    });
                }
            }
            if (trace && opt.taps.mlp_inner) {
                trace->mlp_inner[static_cast<size_t>(l)] = to_tensor(lc.inner, {B, T, (int)m});
            }
            if (opt.width_acc != nullptr) accumulate_neurons(*opt.width_acc, l, lc.inner, B, T);

            linear_nt_residual(lc.inner.data(), W.down.data(), lc.x_mid.data(), next, N, m, h, T);
        }

        if (trace && opt.taps.residual_bounds) {
            trace->residual[static_cast<size_t>(c.depth)] = to_tensor(cache_.x_final, {B, T, (int)h});
        }
        rmsnorm_fwd(cache_.x_final.data(), model_.final_norm.data(), cache_.final_normed.data(),
                    cache_.inv_rms_final.data(), N, h, static_cast<S>(c.norm_eps),
                    opt.norm_identity);
        record_norm_site(opt, trace, 2 * c.depth, cache_.x_final, cache_.final_normed,
                         cache_.inv_rms_final, model_.final_norm, N, h, B, T);
        if (opt.width_acc != nullptr) opt.width_acc->samples += B;

        const S* Wh = c.tie_embeddings ? model_.embed.data() : model_.head.data();
        linear_nt(cache_.final_normed.data(), Wh, cache_.logits.data(), N, h, V, T);
        return cache_.logits;
    }

    double loss_ce(const int32_t* targets, std::vector<S>* dlogits = nullptr) const {
        const int64_t N = static_cast<int64_t>(cache_.B) * cache_.T;
        return ce_loss_grad(cache_.logits, targets, N, model_.cfg.vocab, dlogits);
    }

    double loss_kl(const S* teacher_logits, std::vector<S>* dlogits = nullptr) const {
        const int64_t N = static_cast<int64_t>(cache_.B) * cache_.T;
        return kl_loss_grad(teacher_logits, cache_.logits, N, model_.cfg.vocab, dlogits);
    }

    // Accumulates into grads (caller zeroes). Requires a preceding forward();
    // the mask option is forward-only and unsupported here.
    void backward(const std::vector<S>& dlogits, DenseModel<S>& grads) {
        const ModelConfig& c = model_.cfg;
        const int B = cache_.B, T = cache_.T;
        const int64_t N = static_cast<int64_t>(B) * T;
        const int64_t h = c.hidden, aw = c.attn_width(), kw = c.kv_width(), m = c.mlp_hidden;
        const int64_t V = c.vocab;
        const bool ident = cache_.norm_identity;

        bufs_resize(N, h, aw, kw, m);
        std::vector<S>& dstream = bufs_.dstream;
        std::vector<S>& dh1 = bufs_.dh1;

        // Output head.
        const S* Wh = c.tie_embeddings ? model_.embed.data() : model_.head.data();
        S* gWh = c.tie_embeddings ? grads.embed.data() : grads.head.data();
        grad_weight_acc(dlogits.data(), cache_.final_normed.data(), gWh, N, V, h);
        linear_nn(dlogits.data(), Wh, dh1.data(), N, V, h);

        std::fill(dstream.begin(), dstream.end(), S(0));
        rmsnorm_bwd(cache_.x_final.data(), model_.final_norm.data(), cache_.inv_rms_final.data(),
                    dh1.data(), dstream.data(), grads.final_norm.data(), N, h, ident);

        for (int l = c.depth - 1; l >= 0; --l) {
            if (cache_.skip[static_cast<size_t>(l)]) continue;
            const auto& lc = cache_.layers[static_cast<size_t>(l)];
            const auto& W = model_.layers[static_cast<size_t>(l)];
            auto& G = grads.layers[static_cast<size_t>(l)];

            // MLP block: x_out = x_mid + inner * Wd^T
            linear_nn(dstream.data(), W.down.data(), bufs_.dm1.data(), N, h, m);  // dinner
            grad_weight_acc(dstream.data(), lc.inner.data(), G.down.data(), N, h, m);
            parallel_for(N, kRowChunk, [&](int64_t r0, int64_t r1) {
                using Arr = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
                using CArr = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
                const int64_t len = (r1 - r0) * m;
                CArr z(lc.gate_pre.data() + r0 * m, len);
                CArr up(lc.up_out.data() + r0 * m, len);
                CArr dinner(bufs_.dm1.data() + r0 * m, len);
                Arr dgate(bufs_.dm2.data() + r0 * m, len);
                Arr dup(bufs_.dm3.data() + r0 * m, len);
                auto sig = (S(1) / (S(1) + (-z).exp())).eval();
                dgate = dinner * up * sig * (S(1) + z * (S(1) - sig));
                dup = dinner * z * sig;
            });
            linear_nn(bufs_.dm2.data(), W.gate.data(), dh1.data(), N, m, h);
            linear_nn_acc(bufs_.dm3.data(), W.up.data(), dh1.data(), N, m, h);
            grad_weight_acc(bufs_.dm2.data(), lc.normed_mlp.data(), G.gate.data(), N, m, h);
            grad_weight_acc(bufs_.dm3.data(), lc.normed_mlp.data(), G.up.data(), N, m, h);
            rmsnorm_bwd(lc.x_mid.data(), W.norm_mlp.data(), lc.inv_rms_mlp.data(), dh1.data(),
                        dstream.data(), G.norm_mlp.data(), N, h, ident);

            // Attention block: x_mid = x_in + attn_heads * Wo^T
            linear_nn(dstream.data(), W.o.data(), bufs_.daw.data(), N, h, aw);
            grad_weight_acc(dstream.data(), lc.attn_heads.data(), G.o.data(), N, h, aw);
            attention_bwd(lc, B, T, bufs_.daw, bufs_.dq, bufs_.dk, bufs_.dv);
            rope_apply<S, true>(bufs_.dq.data(), N, T, (int)aw, c.head_dim, cache_.rope_cos.data(),
                                cache_.rope_sin.data());
            rope_apply<S, true>(bufs_.dk.data(), N, T, (int)kw, c.head_dim, cache_.rope_cos.data(),
                                cache_.rope_sin.data());
            linear_nn(bufs_.dq.data(), W.q.data(), dh1.data(), N, aw, h);
            linear_nn_acc(bufs_.dk.data(), W.k.data(), dh1.data(), N, kw, h);
            linear_nn_acc(bufs_.dv.data(), W.v.data(), dh1.data(), N, kw, h);
            grad_weight_acc(bufs_.dq.data(), lc.normed_attn.data(), G.q.data(), N, aw, h);
            grad_weight_acc(bufs_.dk.data(), lc.normed_attn.data(), G.k.data(), N, kw, h);
            grad_weight_acc(bufs_.dv.data(), lc.normed_attn.data(), G.v.data(), N, kw, h);
            rmsnorm_bwd(lc.x_in.data(), W.norm_attn.data(), lc.inv_rms_attn.data(), dh1.data(),
                        dstream.data(), G.norm_attn.data(), N, h, ident);
        }

        // Embedding scatter (serial: rows may repeat token ids).
        for (int64_t n = 0; n < N; ++n) {
            S* dst = grads.embed.data() + static_cast<int64_t>(cache_.tokens[n]) * h;
            const S* src = dstream.data() + n * h;
            for (int64_t j = 0; j < h; ++j) dst[j] += src[j];
        }
    }

    ParamSet export_params() const { return model_.to_params(); }

private:
    static Tensor to_tensor(const std::vector<S>& v, std::vector<int> dims) {
        Tensor t;
        t.shape.assign(dims.begin(), dims.end());
        t.data.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
        return t;
    }

    void record_norm_site(const ForwardOptions& opt, ForwardTrace* trace, int site,
                          const std::vector<S>& x, const std::vector<S>& normed,
                          const std::vector<S>& inv_rms, const std::vector<S>& gain, int64_t N,
                          int64_t h, int B, int T) {
        const bool pre = opt.pre_gain_norm_tap;
        if (trace && opt.taps.norm_output) {
            if (!pre) {
                trace->norm_output[static_cast<size_t>(site)] = to_tensor(normed, {B, T, (int)h});
            } else {
                Tensor t;
                t.shape = {B, T, h};
                t.data.resize(static_cast<size_t>(N) * h);
                for (int64_t n = 0; n < N; ++n) {
                    for (int64_t j = 0; j < h; ++j) {
                        t.data[static_cast<size_t>(n * h + j)] =
                            static_cast<float>(x[n * h + j] * inv_rms[n]);
                    }
                }
                trace->norm_output[static_cast<size_t>(site)] = std::move(t);
            }
        }
        if (opt.width_acc != nullptr) {
            auto& acc = opt.width_acc->channel_sq[static_cast<size_t>(site)];
            const int64_t TT = T;
            for (int b = 0; b < B; ++b) {
                for (int64_t j = 0; j < h; ++j) {
                    double s = 0.0;
                    for (int64_t t = 0; t < TT; ++t) {
                        const int64_t n = static_cast<int64_t>(b) * TT + t;
                        const double y = pre ? static_cast<double>(x[n * h + j]) *
                                                   static_cast<double>(inv_rms[n])
                                             : static_cast<double>(normed[n * h + j]);
                        s += std::abs(y);
                    }
                    const double mean = s / static_cast<double>(TT);
                    acc[static_cast<size_t>(j)] += mean * mean;
                }
            }
        }
        (void)gain;
    }

    void accumulate_neurons(WidthAccumulator& acc, int layer, const std::vector<S>& inner, int B,
                            int T) {
        const int64_t m = model_.cfg.mlp_hidden;
        auto& a = acc.neuron_sq[static_cast<size_t>(layer)];
        for (int b = 0; b < B; ++b) {
            for (int64_t u = 0; u < m; ++u) {
                double s = 0.0;
                for (int t = 0; t < T; ++t) {
                    const int64_t n = static_cast<int64_t>(b) * T + t;
                    s += std::abs(static_cast<double>(inner[n * m + u]));
                }
                const double mean = s / static_cast<double>(T);
                a[static_cast<size_t>(u)] += mean * mean;
            }
        }
    }

    void accumulate_heads(WidthAccumulator& acc, int layer, const std::vector<S>& attn_heads,
                          int B, int T) {
        const int64_t aw = model_.cfg.attn_width();
        const int hd = model_.cfg.head_dim;
        const int QH = model_.cfg.query_heads;
        auto& a = acc.head_sq[static_cast<size_t>(layer)];
        for (int b = 0; b < B; ++b) {
            for (int hh = 0; hh < QH; ++hh) {
                double s = 0.0;
                for (int t = 0; t < T; ++t) {
                    const int64_t n = static_cast<int64_t>(b) * T + t;
                    const S* vec = attn_heads.data() + n * aw + static_cast<int64_t>(hh) * hd;
                    double sq = 0.0;
                    for (int i = 0; i < hd; ++i) {
                        sq += static_cast<double>(vec[i]) * static_cast<double>(vec[i]);
                    }
                    s += std::sqrt(sq);
                }
                const double mean = s / static_cast<double>(T);
                a[static_cast<size_t>(hh)] += mean * mean;
            }
        }
    }

    void attention_fwd(LayerCache<S>& lc, int B, int T) {
        const ModelConfig& c = model_.cfg;
        const int QH = c.query_heads, hd = c.head_dim;
        const int64_t aw = c.attn_width(), kw = c.kv_width();
        const int per_group = c.heads_per_group();
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        parallel_for(static_cast<int64_t>(B) * QH, 1, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                const int b = static_cast<int>(i / QH);
                const int hh = static_cast<int>(i % QH);
                const int g = hh / per_group;
                CStridedMap<S> qh(lc.q.data() + static_cast<int64_t>(b) * T * aw + hh * hd, T, hd,
                                  OStride(aw));
                CStridedMap<S> kg(lc.k.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                CStridedMap<S> vg(lc.v.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                MapM<S> p(lc.probs.data() + i * T * T, T, T);
                p.noalias() = qh * kg.transpose() * scale;
                for (int r = 0; r < T; ++r) {
                    S* row = lc.probs.data() + i * T * T + static_cast<int64_t>(r) * T;
                    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> seg(row, r + 1);
                    seg = (seg - seg.maxCoeff()).exp();
                    seg *= S(1) / seg.sum();
                    for (int j = r + 1; j < T; ++j) row[j] = S(0);
                }
                StridedMap<S> oh(lc.attn_heads.data() + static_cast<int64_t>(b) * T * aw + hh * hd,
                                 T, hd, OStride(aw));
                oh.noalias() = p * vg;
            }
        });
    }

    void attention_bwd(const LayerCache<S>& lc, int B, int T, const std::vector<S>& d_heads,
                       std::vector<S>& dq, std::vector<S>& dk, std::vector<S>& dv) {
        const ModelConfig& c = model_.cfg;
        const int QH = c.query_heads, hd = c.head_dim, G = c.attention_groups;
        const int64_t aw = c.attn_width(), kw = c.kv_width();
        const int per_group = c.heads_per_group();
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        std::fill(dk.begin(), dk.end(), S(0));
        std::fill(dv.begin(), dv.end(), S(0));
        // One task per (batch row, KV group): K/V grads accumulate over the
        // group's query heads inside a single task, in fixed head order.
        parallel_for(static_cast<int64_t>(B) * G, 1, [&](int64_t i0, int64_t i1) {
            std::vector<S> dp(static_cast<size_t>(T) * T);
            for (int64_t i = i0; i < i1; ++i) {
                const int b = static_cast<int>(i / G);
                const int g = static_cast<int>(i % G);
                CStridedMap<S> kg(lc.k.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                CStridedMap<S> vg(lc.v.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                StridedMap<S> dkg(dk.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                StridedMap<S> dvg(dv.data() + static_cast<int64_t>(b) * T * kw + g * hd, T, hd,
                                  OStride(kw));
                for (int hh = g * per_group; hh < (g + 1) * per_group; ++hh) {
                    CStridedMap<S> qh(lc.q.data() + static_cast<int64_t>(b) * T * aw + hh * hd, T,
                                      hd, OStride(aw));
                    CStridedMap<S> doh(d_heads.data() + static_cast<int64_t>(b) * T * aw + hh * hd,
                                       T, hd, OStride(aw));
                    CMapM<S> p(lc.probs.data() + (static_cast<int64_t>(b) * QH + hh) * T * T, T, T);
                    MapM<S> dpm(dp.data(), T, T);
                    dpm.noalias() = doh * vg.transpose();
                    dvg.noalias() += p.transpose() * doh;
                    // Softmax backward, causal rows.
                    for (int r = 0; r < T; ++r) {
                        S dot = S(0);
                        const S* pr = p.data() + static_cast<int64_t>(r) * T;
                        S* dpr = dp.data() + static_cast<int64_t>(r) * T;
                        for (int j = 0; j <= r; ++j) dot += dpr[j] * pr[j];
                        for (int j = 0; j <= r; ++j) dpr[j] = pr[j] * (dpr[j] - dot);
                        for (int j = r + 1; j < T; ++j) dpr[j] = S(0);
                    }
                    StridedMap<S> dqh(dq.data() + static_cast<int64_t>(b) * T * aw + hh * hd, T,
                                      hd, OStride(aw));
                    dqh.noalias() = dpm * kg * scale;
                    dkg.noalias() += dpm.transpose() * qh * scale;
                }
            }
        });
    }

    struct Buffers {
        std::vector<S> dstream, dh1, dm1, dm2, dm3, daw, dq, dk, dv;
    };

    void bufs_resize(int64_t N, int64_t h, int64_t aw, int64_t kw, int64_t m) {
        bufs_.dstream.resize(N * h);
        bufs_.dh1.resize(N * h);
        bufs_.dm1.resize(N * m);
        bufs_.dm2.resize(N * m);
        bufs_.dm3.resize(N * m);
        bufs_.daw.resize(N * aw);
        bufs_.dq.resize(N * aw);
        bufs_.dk.resize(N * kw);
        bufs_.dv.resize(N * kw);
    }

    DenseModel<S> model_;
    ForwardCache<S> cache_;
    Buffers bufs_;
};

}  // namespace mshr
