#include "mshr/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mshr/model_core.hpp"

namespace mshr {

double eval_val_loss(const ParamSet& params, const Corpus& corpus, int n_batches, int seq_len,
                     int batch_size) {
    if (corpus.tokens.empty()) throw std::invalid_argument("eval_val_loss: empty corpus");
    const int64_t n_windows = (static_cast<int64_t>(corpus.tokens.size()) - 1) / seq_len;
    if (n_windows < 1) throw std::invalid_argument("eval_val_loss: corpus shorter than one window");
    const int64_t want = static_cast<int64_t>(n_batches) * batch_size;
    const int64_t rows_total = std::min<int64_t>(want, n_windows);

    Engine<float> eng(params);
    double loss_sum = 0.0;
    int64_t positions = 0;
    std::vector<int32_t> inputs, targets;
    for (int64_t row0 = 0; row0 < rows_total; row0 += batch_size) {
        const int rows = static_cast<int>(std::min<int64_t>(batch_size, rows_total - row0));
        inputs.resize(static_cast<size_t>(rows) * seq_len);
        targets.resize(static_cast<size_t>(rows) * seq_len);
        for (int r = 0; r < rows; ++r) {
            const int64_t start = (row0 + r) * seq_len;
            for (int t = 0; t < seq_len; ++t) {
                inputs[static_cast<size_t>(r) * seq_len + t] =
                    corpus.tokens[static_cast<size_t>(start + t)];
                targets[static_cast<size_t>(r) * seq_len + t] =
                    corpus.tokens[static_cast<size_t>(start + t + 1)];
            }
        }
        eng.forward(inputs.data(), rows, seq_len);
        const int64_t n = static_cast<int64_t>(rows) * seq_len;
        loss_sum += eng.loss_ce(targets.data()) * static_cast<double>(n);
        positions += n;
    }
    return loss_sum / static_cast<double>(positions);
}

namespace {

constexpr int kClozeBatchRows = 32;

}  // namespace

double eval_cloze(const ParamSet& params, const std::vector<ClozeItem>& items,
                  const std::vector<int>& skip_layers) {
    if (items.empty()) throw std::invalid_argument("eval_cloze: no items");
    Engine<float> eng(params);
    ForwardOptions opt;
    opt.skip_layers = skip_layers;
    const int64_t V = params.config.vocab;

    // Two rows per item (prefix + candidate), padded to the batch max length;
    // padding sits after the scored span, so causality keeps scores exact.
    const int64_t n_rows = static_cast<int64_t>(items.size()) * 2;
    std::vector<double> scores(static_cast<size_t>(n_rows), 0.0);
    std::vector<int32_t> buf;
    for (int64_t row0 = 0; row0 < n_rows; row0 += kClozeBatchRows) {
        const int rows = static_cast<int>(std::min<int64_t>(kClozeBatchRows, n_rows - row0));
        size_t max_len = 0;
        for (int r = 0; r < rows; ++r) {
            const ClozeItem& it = items[static_cast<size_t>((row0 + r) / 2)];
            const auto& cand = ((row0 + r) % 2 == 0) ? it.cand0 : it.cand1;
            max_len = std::max(max_len, it.prefix.size() + cand.size());
        }
        buf.assign(static_cast<size_t>(rows) * max_len, 0);
        for (int r = 0; r < rows; ++r) {
            const ClozeItem& it = items[static_cast<size_t>((row0 + r) / 2)];
            const auto& cand = ((row0 + r) % 2 == 0) ? it.cand0 : it.cand1;
            int32_t* dst = buf.data() + static_cast<size_t>(r) * max_len;
            std::copy(it.prefix.begin(), it.prefix.end(), dst);
            std::copy(cand.begin(), cand.end(), dst + it.prefix.size());
        }
        const auto& logits = eng.forward(buf.data(), rows, static_cast<int>(max_len), opt);
        for (int r = 0; r < rows; ++r) {
            const ClozeItem& it = items[static_cast<size_t>((row0 + r) / 2)];
            const auto& cand = ((row0 + r) % 2 == 0) ? it.cand0 : it.cand1;
            double total = 0.0;
            for (size_t j = 0; j < cand.size(); ++j) {
                const int64_t pos = static_cast<int64_t>(r) * static_cast<int64_t>(max_len) +
                                    static_cast<int64_t>(it.prefix.size()) + static_cast<int64_t>(j) - 1;
                const float* z = logits.data() + pos * V;
                double zmax = -HUGE_VAL;
                for (int64_t v = 0; v < V; ++v) zmax = std::max(zmax, static_cast<double>(z[v]));
                double sum = 0.0;
                for (int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(z[v]) - zmax);
                total += static_cast<double>(z[cand[j]]) - (zmax + std::log(sum));
            }
            scores[static_cast<size_t>(row0 + r)] = total;
        }
    }

    int64_t correct = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const double s0 = scores[2 * i];
        const double s1 = scores[2 * i + 1];
        const double labeled = items[i].label == 0 ? s0 : s1;
        const double other = items[i].label == 0 ? s1 : s0;
        if (labeled > other) correct += 1;
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace mshr
