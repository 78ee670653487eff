#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mshr/data.hpp"
#include "mshr/tensor.hpp"

namespace mshr {

// Optimizer and schedule hyperparameters. total_tokens == 0 is an explicit
// no-op budget; anything between 1 and one batch is rejected.
struct TrainConfig {
    double peak_lr = 1e-3;
    double min_lr = 1e-4;
    int64_t warmup_steps = 40;
    std::string schedule = "cosine";
    int batch_size = 16;
    int seq_len = 128;
    int64_t total_tokens = 0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    uint64_t seed = 0;
    std::string loss_mode = "ce";  // "ce" | "kl"
    int64_t eval_interval = 50;

    int64_t tokens_per_step() const { return static_cast<int64_t>(batch_size) * seq_len; }
    int64_t total_steps() const { return total_tokens / tokens_per_step(); }
};

std::vector<std::string> validate_train_config(const TrainConfig& tc);
std::string train_config_to_json(const TrainConfig& tc);
// Strict: unknown keys rejected. Missing keys keep their defaults.
TrainConfig train_config_from_json(const std::string& text);

// Linear warmup 0 -> peak over warmup_steps, then cosine decay peak -> min
// over the remaining steps. lr_at(warmup_steps) == peak, lr_at(total) == min.
double lr_at(int64_t step, const TrainConfig& tc, int64_t total_steps);

// Mean per-position forward KL(teacher || student) in nats, temperature 1.
double forward_kl(const Tensor& teacher_logits, const Tensor& student_logits);

struct MetricsRecord {
    int64_t step = 0;
    int64_t tokens_seen = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
    double wall_s = 0.0;

    bool same_numbers(const MetricsRecord& o) const {  // everything but wall time
        return step == o.step && tokens_seen == o.tokens_seen && lr == o.lr &&
               train_loss == o.train_loss && val_loss == o.val_loss;
    }
};

struct MetricsLog {
    std::vector<MetricsRecord> records;

    void append_jsonl(const std::filesystem::path& path) const;
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(int64_t at_step)
        : std::runtime_error("non-finite loss at step " + std::to_string(at_step)),
          step(at_step) {}
    int64_t step;
};

struct TrainResult {
    ParamSet params;
    MetricsLog log;
};

// Conventional CE training. Metrics are logged every eval_interval steps and
// at the final step; val_loss is filled when a held-out corpus is given.
TrainResult train_ce(const ParamSet& params, const Corpus& corpus, const TrainConfig& tc,
                     const Corpus* val_corpus = nullptr);

// CE fine-tune of a teacher on the shifted corpus (identical mechanics,
// typically a smaller budget). A zero budget returns the params untouched.
TrainResult correct_teacher(const ParamSet& teacher, const Corpus& corpus_b,
                            const TrainConfig& tc, const Corpus* val_corpus = nullptr);

// Logit-only forward-KL distillation; the teacher is evaluated in inference
// mode and never updated. Requires matching vocabularies and loss_mode "kl".
TrainResult distill(const ParamSet& student, const ParamSet& teacher, const Corpus& corpus,
                    const TrainConfig& tc, const Corpus* val_corpus = nullptr);

}  // namespace mshr
