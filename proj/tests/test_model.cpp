#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mshr/model.hpp"
#include "mshr/model_core.hpp"
#include "mshr/rng.hpp"
#include "reference_model.hpp"

using namespace mshr;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.depth = 2;
    c.hidden = 12;
    c.mlp_hidden = 20;
    c.query_heads = 4;
    c.attention_groups = 2;
    c.head_dim = 4;
    c.vocab = 13;
    c.context = 16;
    c.norm_eps = 1e-5f;
    return c;
}

std::vector<int32_t> random_tokens(int n, int vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int32_t> out(n);
    for (auto& t : out) t = static_cast<int32_t>(rng.next_below(vocab));
    return out;
}

}  // namespace

TEST_CASE("validate_config flags every violation") {
    ModelConfig c = tiny_config();
    CHECK(validate_config(c).empty());

    // Published architectures should pass as-is.
    ModelConfig width4b{32, 3072, 9216, 32, 8, 128, 128256, 8192, 1e-5f, false};
    CHECK(validate_config(width4b).empty());
    ModelConfig depth4b{16, 4096, 14336, 32, 8, 128, 128256, 8192, 1e-5f, false};
    CHECK(validate_config(depth4b).empty());

    c.query_heads = 6;
    c.attention_groups = 4;
    auto v = validate_config(c);
    REQUIRE(v.size() == 1);
    CHECK(v[0].find("query_heads mod groups") != std::string::npos);

    ModelConfig bad = tiny_config();
    bad.vocab = 0;
    bad.depth = 0;
    auto v2 = validate_config(bad);
    CHECK(v2.size() == 2);  // all violations reported, not just the first
}

TEST_CASE("count_params matches independent shape enumeration") {
    ModelConfig c;
    c.depth = 2;
    c.hidden = 8;
    c.mlp_hidden = 16;
    c.query_heads = 4;
    c.attention_groups = 2;
    c.head_dim = 2;
    c.vocab = 10;
    c.context = 16;

    // Oracle: enumerate every tensor shape by hand and sum.
    const int64_t aw = 4 * 2, kw = 2 * 2;
    const int64_t per_layer = aw * 8 + kw * 8 + kw * 8 + 8 * aw   // attn q,k,v,o
                              + 16 * 8 + 16 * 8 + 8 * 16          // mlp gate,up,down
                              + 8 + 8;                            // norms
    const int64_t expect_non_emb = 2 * per_layer + 8;             // + final.norm
    const int64_t expect_total = expect_non_emb + 2 * (10 * 8);   // embed + head

    auto counts = count_params(c);
    CHECK(counts.total == expect_total);
    CHECK(counts.non_embedding == expect_non_emb);

    ModelConfig tied = c;
    tied.tie_embeddings = true;
    auto tc = count_params(tied);
    CHECK(counts.total - tc.total == static_cast<int64_t>(c.vocab) * c.hidden);
    CHECK(tc.non_embedding == counts.non_embedding);
}

TEST_CASE("init_params is deterministic and norm gains are ones") {
    ModelConfig c = tiny_config();
    ParamSet a = init_params(c, 7);
    ParamSet b = init_params(c, 7);
    CHECK(a == b);
    ParamSet d = init_params(c, 8);
    CHECK(a != d);
    for (const auto& [name, t] : a.tensors) {
        if (name.find("norm") != std::string::npos) {
            for (float x : t.data) CHECK(x == 1.0f);
        }
    }
}

TEST_CASE("forward matches the straight-line reference model") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 3);
    const int B = 2, T = 7;
    auto tokens = random_tokens(B * T, c.vocab, 99);

    auto got = forward(p, tokens, B, T);
    auto want = ref::reference_forward(p, tokens, B, T);
    REQUIRE(got.logits.numel() == static_cast<int64_t>(want.size()));
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(std::abs(got.logits.data[i] - want[i]) < 1e-4);
    }

    // Wide mode agrees with the reference to double precision.
    Engine<double> eng(p);
    const auto& wide = eng.forward(tokens.data(), B, T);
    for (size_t i = 0; i < want.size(); ++i) {
        CHECK(std::abs(wide[i] - want[i]) < 1e-11);
    }
}

TEST_CASE("all-zero parameters give uniform next-token distribution") {
    ModelConfig c = tiny_config();
    ParamSet p = zeros_like_params(c);
    auto tokens = random_tokens(6, c.vocab, 5);
    auto out = forward(p, tokens, 1, 6);
    for (float v : out.logits.data) CHECK(v == 0.0f);
}

TEST_CASE("forward purity: permuting batch rows permutes logits") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 11);
    const int B = 3, T = 5;
    auto tokens = random_tokens(B * T, c.vocab, 123);
    auto base = forward(p, tokens, B, T);

    std::vector<int> perm = {2, 0, 1};
    std::vector<int32_t> permuted(tokens.size());
    for (int b = 0; b < B; ++b) {
        std::copy(tokens.begin() + perm[b] * T, tokens.begin() + (perm[b] + 1) * T,
                  permuted.begin() + b * T);
    }
    auto swapped = forward(p, permuted, B, T);
    const int64_t row = static_cast<int64_t>(T) * c.vocab;
    for (int b = 0; b < B; ++b) {
        for (int64_t i = 0; i < row; ++i) {
            CHECK(swapped.logits.data[b * row + i] == base.logits.data[perm[b] * row + i]);
        }
    }

    // Identical rows produce identical logits.
    std::vector<int32_t> dup;
    for (int b = 0; b < 2; ++b) dup.insert(dup.end(), tokens.begin(), tokens.begin() + T);
    auto two = forward(p, dup, 2, T);
    for (int64_t i = 0; i < row; ++i) {
        CHECK(two.logits.data[i] == two.logits.data[row + i]);
    }
}

TEST_CASE("causality: future edits leave earlier logits unchanged") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 17);
    const int T = 9;
    auto tokens = random_tokens(T, c.vocab, 7);
    auto base = forward(p, tokens, 1, T);

    auto edited = tokens;
    edited[T - 1] = (edited[T - 1] + 1) % c.vocab;
    edited[T - 2] = (edited[T - 2] + 3) % c.vocab;
    auto out = forward(p, edited, 1, T);
    for (int t = 0; t < T - 2; ++t) {
        for (int v = 0; v < c.vocab; ++v) {
            CHECK(out.logits.data[t * c.vocab + v] == base.logits.data[t * c.vocab + v]);
        }
    }
}

TEST_CASE("taps do not change logits, and trace shapes are right") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 23);
    const int B = 2, T = 6;
    auto tokens = random_tokens(B * T, c.vocab, 31);

    auto plain = forward(p, tokens, B, T);
    ForwardOptions opt;
    opt.taps = {true, true, true, true};
    auto tapped = forward(p, tokens, B, T, opt);
    CHECK(plain.logits.data == tapped.logits.data);

    REQUIRE(tapped.trace.mlp_inner.size() == 2);
    REQUIRE(tapped.trace.head_output.size() == 2);
    REQUIRE(tapped.trace.norm_output.size() == 5);
    REQUIRE(tapped.trace.residual.size() == 3);
    CHECK(tapped.trace.mlp_inner[0].shape == std::vector<int64_t>{B, T, c.mlp_hidden});
    CHECK(tapped.trace.head_output[1].shape == std::vector<int64_t>{B, T, c.attn_width()});
    CHECK(tapped.trace.norm_output[4].shape == std::vector<int64_t>{B, T, c.hidden});
    CHECK(tapped.trace.residual[0].shape == std::vector<int64_t>{B, T, c.hidden});
}

TEST_CASE("forward rejects bad inputs") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 1);
    std::vector<int32_t> tokens(4, 0);
    tokens[2] = static_cast<int32_t>(c.vocab);  // out of range
    CHECK_THROWS_AS((void)forward(p, tokens, 1, 4), std::invalid_argument);
    std::vector<int32_t> longseq(static_cast<size_t>(c.context) + 1, 1);
    CHECK_THROWS_AS((void)forward(p, longseq, 1, static_cast<int>(longseq.size())),
                    std::invalid_argument);
}

TEST_CASE("lm_loss identities") {
    // Uniform logits over V -> ln V exactly.
    Tensor logits({2, 3, 5});
    std::vector<int32_t> targets = {0, 1, 2, 3, 4, 0};
    CHECK(lm_loss(logits, targets) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    // Huge correct-logit margin -> loss ~ 0.
    Tensor hot({1, 2, 4});
    for (int n = 0; n < 2; ++n) hot.data[n * 4 + 1] = 50.0f;
    CHECK(lm_loss(hot, {1, 1}) < 1e-9);

    // Frozen oracle: two-way softmax at logits (0, ln 3), target 1:
    // loss = -ln(3/4) = 0.28768207245178085.
    Tensor two({1, 1, 2});
    two.data = {0.0f, static_cast<float>(std::log(3.0))};
    CHECK(lm_loss(two, {1}) == doctest::Approx(0.28768207245178085).epsilon(1e-6));

    CHECK_THROWS_AS(lm_loss(two, {1, 0}), std::invalid_argument);
}

TEST_CASE("score_continuation: identities and chain rule") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 29);

    std::vector<int32_t> prefix = {1, 2, 3};
    CHECK(score_continuation(p, prefix, {}) == 0.0);

    // Uniform model: k tokens cost exactly -k ln V.
    ParamSet z = zeros_like_params(c);
    std::vector<int32_t> cont = {4, 5};
    CHECK(score_continuation(z, prefix, cont) ==
          doctest::Approx(-2.0 * std::log(static_cast<double>(c.vocab))).epsilon(1e-6));

    // score(p, a++b) = score(p, a) + score(p++a, b)
    std::vector<int32_t> a = {4, 5}, b = {6, 0, 2};
    std::vector<int32_t> ab = {4, 5, 6, 0, 2};
    std::vector<int32_t> pa = {1, 2, 3, 4, 5};
    const double lhs = score_continuation(p, prefix, ab);
    const double rhs = score_continuation(p, prefix, a) + score_continuation(p, pa, b);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("gradients match central finite differences (wide mode)") {
    ModelConfig c = tiny_config();
    REQUIRE(count_params(c).total <= 10000);
    ParamSet p = init_params(c, 41);
    const int B = 2, T = 6;
    const int64_t N = B * T;
    auto tokens = random_tokens(B * T, c.vocab, 55);
    auto targets = random_tokens(B * T, c.vocab, 56);

    for (int mode = 0; mode < 2; ++mode) {
        // mode 0: CE; mode 1: KL against fixed teacher logits.
        std::vector<double> teacher(static_cast<size_t>(N) * c.vocab);
        Rng trng(77);
        for (auto& z : teacher) z = trng.next_normal();

        Engine<double> eng(p);
        auto loss_of = [&]() {
            eng.forward(tokens.data(), B, T);
            if (mode == 0) return eng.loss_ce(targets.data());
            return eng.loss_kl(teacher.data());
        };

        eng.forward(tokens.data(), B, T);
        std::vector<double> dlogits;
        if (mode == 0) {
            eng.loss_ce(targets.data(), &dlogits);
        } else {
            eng.loss_kl(teacher.data(), &dlogits);
        }
        DenseModel<double> grads = DenseModel<double>::zeros_like(c);
        eng.backward(dlogits, grads);

        const double fd_h = 1e-5;
        double worst = 0.0;
        grads.visit([&](const std::string& name, std::vector<double>& g) {
            // Probe a deterministic subset of coordinates per tensor to keep
            // the test quick; the acceptance suite sweeps every coordinate.
            Rng pick(Rng::derive(mode == 0 ? 101 : 202, name));
            const size_t n_probe = std::min<size_t>(g.size(), 25);
            std::vector<double>* slot = nullptr;
            eng.model().visit([&](const std::string& n2, std::vector<double>& v) {
                if (n2 == name) slot = &v;
            });
            REQUIRE(slot != nullptr);
            for (size_t probe = 0; probe < n_probe; ++probe) {
                const size_t idx = static_cast<size_t>(pick.next_below(g.size()));
                const double keep = (*slot)[idx];
                (*slot)[idx] = keep + fd_h;
                const double up = loss_of();
                (*slot)[idx] = keep - fd_h;
                const double down = loss_of();
                (*slot)[idx] = keep;
                const double numeric = (up - down) / (2.0 * fd_h);
                const double denom = std::max(1e-8, std::abs(g[idx]) + std::abs(numeric));
                worst = std::max(worst, std::abs(g[idx] - numeric) / denom);
            }
        });
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("KL at teacher == student is zero with zero gradients") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 61);
    const int B = 2, T = 5;
    auto tokens = random_tokens(B * T, c.vocab, 62);

    Engine<float> eng(p);
    const auto& logits = eng.forward(tokens.data(), B, T);
    std::vector<float> teacher(logits.begin(), logits.end());

    TokenBatch batch;
    batch.batch = B;
    batch.seq = T;
    batch.inputs = tokens;
    LossSpec spec;
    spec.kind = LossSpec::Kind::kl;
    spec.teacher_logits.shape = {B, T, c.vocab};
    spec.teacher_logits.data = teacher;
    auto res = backward(p, batch, spec);
    CHECK(std::abs(res.loss) <= 1e-9);
    for (const auto& [name, g] : res.grads) {
        for (float x : g.data) CHECK(x == 0.0f);
    }
}

TEST_CASE("single-weight model gradient equals the hand derivative") {
    // One layer, but every weight zero except one output-head entry; the
    // derivative of CE w.r.t. that entry is (softmax(z)_v - 1[v==target]) * e_j
    // where the input embedding is frozen. With zero weights everywhere the
    // final normed features are zero, so head gradients reduce to
    // p_v * feature_j form. Non-zero embedding makes it informative.
    ModelConfig c;
    c.depth = 1;
    c.hidden = 2;
    c.mlp_hidden = 2;
    c.query_heads = 1;
    c.attention_groups = 1;
    c.head_dim = 2;
    c.vocab = 3;
    c.context = 4;
    ParamSet p = zeros_like_params(c);
    for (auto& [name, t] : p.tensors) {
        if (name.find("norm") != std::string::npos) {
            for (auto& x : t.data) x = 1.0f;
        }
    }
    // Embedding row for token 0: (3, 4); all transformer weights zero, so the
    // residual stream stays (3,4); rms = sqrt((9+16)/2) = 3.5355339;
    // final normed = (0.8485281, 1.1313708) (eps ~ 0).
    p.at("embed.tok").data[0] = 3.0f;
    p.at("embed.tok").data[1] = 4.0f;
    // head.out row 1, col 0 = w: logits = (0, w*0.8485281, 0).
    const float w = 0.7f;
    p.at("head.out").data[1 * 2 + 0] = w;

    TokenBatch batch;
    batch.batch = 1;
    batch.seq = 1;
    batch.inputs = {0};
    batch.targets = {2};
    LossSpec spec;
    auto res = backward(p, batch, spec);

    const double f0 = 3.0 / std::sqrt((9.0 + 16.0) / 2.0 + 1e-5);
    const double z1 = w * f0;
    const double e0 = 1.0, e1 = std::exp(z1);
    const double p1 = e1 / (2.0 * e0 + e1);
    // dL/dw = p1 * f0 (target is 2, so no -1 term on logit 1)
    const double expect = p1 * f0;
    CHECK(res.grads.at("head.out").data[2] ==
          doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("CE gradient of output head on uniform model is softmax minus one-hot") {
    // All-zero model: logits are all zero, softmax is uniform. The head
    // gradient row for class v collapses to mean over positions of
    // (1/V - 1[v==target]) * final_normed_features = 0 features -> zero grads,
    // so probe the dlogits directly through the loss helper instead.
    const int64_t N = 4;
    const int V = 5;
    std::vector<float> logits(static_cast<size_t>(N) * V, 0.0f);
    std::vector<int32_t> targets = {1, 2, 3, 0};
    std::vector<float> dlogits;
    const double loss = ce_loss_grad(logits, targets.data(), N, V, &dlogits);
    CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(1e-7));
    for (int64_t n = 0; n < N; ++n) {
        for (int v = 0; v < V; ++v) {
            const double expect = (0.2 - (v == targets[n] ? 1.0 : 0.0)) / N;
            CHECK(dlogits[n * V + v] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("results are bitwise identical across worker counts") {
    ModelConfig c = tiny_config();
    ParamSet p = init_params(c, 71);
    const int B = 4, T = 8;
    auto tokens = random_tokens(B * T, c.vocab, 72);
    auto targets = random_tokens(B * T, c.vocab, 73);

    TokenBatch batch;
    batch.batch = B;
    batch.seq = T;
    batch.inputs = tokens;
    batch.targets = targets;
    LossSpec spec;

    set_thread_count(1);
    auto serial = backward(p, batch, spec);
    set_thread_count(4);
    auto parallel = backward(p, batch, spec);
    set_thread_count(0);

    CHECK(serial.loss == parallel.loss);
    CHECK(serial.grads == parallel.grads);
}
