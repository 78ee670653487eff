#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mshr/data.hpp"
#include "mshr/importance.hpp"
#include "mshr/model.hpp"
#include "mshr/rng.hpp"

using namespace mshr;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.depth = 3;
    c.hidden = 16;
    c.mlp_hidden = 24;
    c.query_heads = 4;
    c.attention_groups = 2;
    c.head_dim = 4;
    c.vocab = kByteVocab;
    c.context = 64;
    return c;
}

std::vector<std::vector<int32_t>> calib_windows(int n, int seq, uint64_t seed) {
    Corpus c = synth_corpus('A', 20000, seed);
    return sample_calibration(c, n, seq, seed);
}

}  // namespace

TEST_CASE("rank: descending stable order with index tie-break") {
    CHECK(rank({0.5f, 2.0f, 1.0f}) == std::vector<int>{1, 2, 0});
    CHECK(rank({1.0f, 1.0f, 1.0f}) == std::vector<int>{0, 1, 2});
    std::vector<float> s = {0.3f, 0.9f, 0.1f, 0.9f};
    auto r1 = rank(s);
    for (auto& x : s) x *= 7.0f;  // positive monotone rescale
    CHECK(rank(s) == r1);
    CHECK_THROWS_AS(rank({1.0f, NAN}), std::invalid_argument);
}

TEST_CASE("width importance: zero-gate neuron scores exactly zero") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 5);
    // Kill neuron 7 of layer 1: zero its gate row.
    Tensor& gate = p.at("layer.1.mlp.gate");
    for (int64_t j = 0; j < c.hidden; ++j) gate.data[7 * c.hidden + j] = 0.0f;

    auto imp = estimate_width_importance(p, calib_windows(8, 24, 3));
    CHECK(imp.neuron[1][7] == 0.0f);
    // Other neurons get positive scores.
    CHECK(imp.neuron[1][6] > 0.0f);
    CHECK(imp.calibration_samples == 8);
}

TEST_CASE("width importance: duplicating samples scales scores by sqrt(2)") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 9);
    auto windows = calib_windows(6, 24, 4);
    auto imp1 = estimate_width_importance(p, windows);

    auto doubled = windows;
    doubled.insert(doubled.end(), windows.begin(), windows.end());
    auto imp2 = estimate_width_importance(p, doubled);

    const double root2 = std::sqrt(2.0);
    for (int l = 0; l < c.depth; ++l) {
        for (int u = 0; u < c.mlp_hidden; ++u) {
            CHECK(imp2.neuron[l][u] ==
                  doctest::Approx(imp1.neuron[l][u] * root2).epsilon(1e-5));
        }
        for (int h = 0; h < c.query_heads; ++h) {
            CHECK(imp2.head[l][h] == doctest::Approx(imp1.head[l][h] * root2).epsilon(1e-5));
        }
        CHECK(rank(imp2.neuron[l]) == rank(imp1.neuron[l]));
    }
    for (int ch = 0; ch < c.hidden; ++ch) {
        CHECK(imp2.channel[ch] == doctest::Approx(imp1.channel[ch] * root2).epsilon(1e-5));
    }
}

TEST_CASE("width importance: single sample, single position degenerates to magnitude") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 13);
    // One window of length 1 (plus its target token).
    std::vector<std::vector<int32_t>> windows = {{kBosId, 97}};
    auto imp = estimate_width_importance(p, windows);

    ForwardOptions opt;
    opt.taps.mlp_inner = true;
    opt.taps.head_output = true;
    auto res = forward(p, {kBosId}, 1, 1, opt);
    for (int l = 0; l < c.depth; ++l) {
        for (int u = 0; u < c.mlp_hidden; ++u) {
            CHECK(imp.neuron[l][u] ==
                  doctest::Approx(std::abs(res.trace.mlp_inner[l].data[u])).epsilon(1e-5));
        }
        for (int h = 0; h < c.query_heads; ++h) {
            double sq = 0.0;
            for (int i = 0; i < c.head_dim; ++i) {
                const float v = res.trace.head_output[l].data[h * c.head_dim + i];
                sq += static_cast<double>(v) * v;
            }
            CHECK(imp.head[l][h] == doctest::Approx(std::sqrt(sq)).epsilon(1e-5));
        }
    }
}

TEST_CASE("width importance is insensitive to calibration order and leaves params untouched") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 21);
    ParamSet before = p;
    auto windows = calib_windows(10, 24, 8);
    auto imp1 = estimate_width_importance(p, windows);
    CHECK(p == before);

    std::reverse(windows.begin(), windows.end());
    auto imp2 = estimate_width_importance(p, windows);
    for (int l = 0; l < c.depth; ++l) {
        for (int u = 0; u < c.mlp_hidden; ++u) {
            const double denom = std::max(1e-12, std::abs(static_cast<double>(imp1.neuron[l][u])));
            CHECK(std::abs(imp1.neuron[l][u] - imp2.neuron[l][u]) / denom < 1e-6);
        }
    }
}

TEST_CASE("depth scan (loss): identity layer removal keeps the base loss") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 31);
    // Make layer 1 an exact identity: zero o and down projections.
    for (auto* name : {"layer.1.attn.o", "layer.1.mlp.down"}) {
        for (auto& v : p.at(name).data) v = 0.0f;
    }
    auto windows = calib_windows(8, 24, 9);
    auto scan = depth_scan_loss(p, windows, 1);
    CHECK(scan.values.size() == static_cast<size_t>(c.depth));

    // Removing the identity layer must not change the loss.
    {
        double loss_sum = 0.0;
        int64_t n_pos = 0;
        for (const auto& w : windows) {
            const int T = static_cast<int>(w.size()) - 1;
            std::vector<int32_t> in(w.begin(), w.end() - 1);
            std::vector<int32_t> tgt(w.begin() + 1, w.end());
            auto out = forward(p, in, 1, T);
            loss_sum += lm_loss(out.logits, tgt) * T;
            n_pos += T;
        }
        const double base = loss_sum / static_cast<double>(n_pos);
        CHECK(scan.values[1] == doctest::Approx(base).epsilon(1e-6));
    }

    CHECK_THROWS_AS((void)depth_scan_loss(p, windows, 0), std::invalid_argument);
    CHECK_THROWS_AS((void)depth_scan_loss(p, windows, c.depth), std::invalid_argument);
}

TEST_CASE("block importance: identity block scores zero, frozen cosine values") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 37);
    for (auto* name : {"layer.0.attn.o", "layer.0.mlp.down"}) {
        for (auto& v : p.at(name).data) v = 0.0f;
    }
    auto windows = calib_windows(6, 16, 10);
    auto scan = block_importance(p, windows, 1);
    REQUIRE(scan.values.size() == static_cast<size_t>(c.depth));
    CHECK(scan.values[0] == 0.0);     // identity block: cos == 1 exactly
    CHECK(scan.values[1] > 0.0);
    for (double v : scan.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 2.0);
    }
    CHECK(scan.bi_excluded == 0);
}

TEST_CASE("depth scan count and contiguous/non-contiguous selection") {
    DepthScan acc;
    acc.metric = DepthScan::Metric::task_accuracy;
    acc.block = 1;
    acc.values = {0.50, 0.59, 0.52};
    CHECK(select_contiguous(acc) == std::vector<int>{1});

    DepthScan loss;
    loss.metric = DepthScan::Metric::lm_loss;
    loss.block = 2;
    loss.values = {3.0, 1.5, 2.0};
    CHECK(select_contiguous(loss) == std::vector<int>{1, 2});

    DepthScan tie;
    tie.metric = DepthScan::Metric::lm_loss;
    tie.block = 1;
    tie.values = {2.0, 1.0, 1.0};
    CHECK(select_contiguous(tie) == std::vector<int>{1});  // lowest start wins

    DepthScan single;
    single.metric = DepthScan::Metric::lm_loss;
    single.block = 1;
    single.values = {3.0, 1.0, 2.0, 4.0};
    CHECK(select_noncontiguous(single, 2) == std::vector<int>{1, 2});
    CHECK(select_noncontiguous(single, 1) == select_contiguous(single));
    CHECK_THROWS_AS(select_noncontiguous(single, 4), std::invalid_argument);
    DepthScan block2 = single;
    block2.block = 2;
    CHECK_THROWS_AS(select_noncontiguous(block2, 1), std::invalid_argument);
}

TEST_CASE("scan and importance serialization round-trips") {
    ModelConfig c = small_config();
    ParamSet p = init_params(c, 41);
    auto imp = estimate_width_importance(p, calib_windows(4, 16, 11), 11);
    CHECK(width_importance_from_json(width_importance_to_json(imp)) == imp);

    auto scan = depth_scan_loss(p, calib_windows(4, 16, 12), 2);
    CHECK(depth_scan_from_json(depth_scan_to_json(scan)) == scan);

    const auto path = std::filesystem::temp_directory_path() / "mshr_scan_test.csv";
    depth_scan_to_csv(scan, path);
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "start_index,value");
    int lines = 0;
    std::string line;
    while (std::getline(f, line)) lines += !line.empty();
    CHECK(lines == static_cast<int>(scan.values.size()));
    std::filesystem::remove(path);
}

TEST_CASE("spearman: perfect, inverse, and tie handling") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {9, 7, 5, 3}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 1, 2, 2}, {1, 1, 2, 2}) == doctest::Approx(1.0));
    CHECK(std::abs(spearman({1, 2, 3, 4, 5}, {3, 1, 4, 1, 5})) < 1.0);
}
