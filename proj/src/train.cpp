#include "mshr/train.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>

#include "mshr/evalx.hpp"
#include "mshr/model_core.hpp"
#include "mshr/threading.hpp"

using json = nlohmann::json;

namespace mshr {

std::vector<std::string> validate_train_config(const TrainConfig& tc) {
    std::vector<std::string> v;
    if (!(tc.peak_lr > 0.0)) v.push_back("peak_lr must be > 0");
    if (!(tc.min_lr >= 0.0)) v.push_back("min_lr must be >= 0");
    if (tc.min_lr > tc.peak_lr) v.push_back("min_lr must be <= peak_lr");
    if (tc.warmup_steps < 0) v.push_back("warmup_steps must be >= 0");
    if (tc.schedule != "cosine") v.push_back("schedule must be 'cosine'");
    if (tc.batch_size < 1) v.push_back("batch_size must be >= 1");
    if (tc.seq_len < 1) v.push_back("seq_len must be >= 1");
    if (tc.total_tokens != 0 && tc.total_tokens < tc.tokens_per_step()) {
        v.push_back("total_tokens must be 0 or >= batch_size * seq_len");
    }
    if (!(tc.beta1 >= 0.0 && tc.beta1 < 1.0)) v.push_back("beta1 must be in [0, 1)");
    if (!(tc.beta2 >= 0.0 && tc.beta2 < 1.0)) v.push_back("beta2 must be in [0, 1)");
    if (!(tc.eps > 0.0)) v.push_back("eps must be > 0");
    if (tc.weight_decay < 0.0) v.push_back("weight_decay must be >= 0");
    if (tc.loss_mode != "ce" && tc.loss_mode != "kl") v.push_back("loss_mode must be ce or kl");
    if (tc.eval_interval < 1) v.push_back("eval_interval must be >= 1");
    return v;
}

std::string train_config_to_json(const TrainConfig& tc) {
    json j;
    j["peak_lr"] = tc.peak_lr;
    j["min_lr"] = tc.min_lr;
    j["warmup_steps"] = tc.warmup_steps;
    j["schedule"] = tc.schedule;
    j["batch_size"] = tc.batch_size;
    j["seq_len"] = tc.seq_len;
    j["total_tokens"] = tc.total_tokens;
    j["beta1"] = tc.beta1;
    j["beta2"] = tc.beta2;
    j["eps"] = tc.eps;
    j["weight_decay"] = tc.weight_decay;
    j["seed"] = tc.seed;
    j["loss_mode"] = tc.loss_mode;
    j["eval_interval"] = tc.eval_interval;
    return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("train config: not a JSON object");
    static const char* known[] = {"peak_lr", "min_lr",       "warmup_steps", "schedule",
                                  "batch_size", "seq_len",   "total_tokens", "beta1",
                                  "beta2",   "eps",          "weight_decay", "seed",
                                  "loss_mode", "eval_interval"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw std::invalid_argument("train config: unknown key '" + it.key() + "'");
    }
    TrainConfig tc;
    try {
        if (j.contains("peak_lr")) tc.peak_lr = j["peak_lr"].get<double>();
        if (j.contains("min_lr")) tc.min_lr = j["min_lr"].get<double>();
        if (j.contains("warmup_steps")) tc.warmup_steps = j["warmup_steps"].get<int64_t>();
        if (j.contains("schedule")) tc.schedule = j["schedule"].get<std::string>();
        if (j.contains("batch_size")) tc.batch_size = j["batch_size"].get<int>();
        if (j.contains("seq_len")) tc.seq_len = j["seq_len"].get<int>();
        if (j.contains("total_tokens")) tc.total_tokens = j["total_tokens"].get<int64_t>();
        if (j.contains("beta1")) tc.beta1 = j["beta1"].get<double>();
        if (j.contains("beta2")) tc.beta2 = j["beta2"].get<double>();
        if (j.contains("eps")) tc.eps = j["eps"].get<double>();
        if (j.contains("weight_decay")) tc.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("seed")) tc.seed = j["seed"].get<uint64_t>();
        if (j.contains("loss_mode")) tc.loss_mode = j["loss_mode"].get<std::string>();
        if (j.contains("eval_interval")) tc.eval_interval = j["eval_interval"].get<int64_t>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    auto violations = validate_train_config(tc);
    if (!violations.empty()) throw std::invalid_argument("train config: " + violations.front());
    return tc;
}

double lr_at(int64_t step, const TrainConfig& tc, int64_t total_steps) {
    if (step < 0 || step > total_steps) throw std::invalid_argument("lr_at: step out of range");
    const int64_t warmup = std::min<int64_t>(tc.warmup_steps, total_steps);
    if (warmup > 0 && step <= warmup) {
        return tc.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (total_steps == warmup) return tc.peak_lr;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return tc.min_lr +
           (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double forward_kl(const Tensor& teacher_logits, const Tensor& student_logits) {
    if (teacher_logits.shape != student_logits.shape || teacher_logits.shape.empty()) {
        throw std::invalid_argument("forward_kl: shape mismatch");
    }
    const int64_t V = teacher_logits.shape.back();
    const int64_t N = teacher_logits.numel() / V;
    return kl_loss_grad<float>(teacher_logits.ptr(), student_logits.data, N, V, nullptr);
}

void MetricsLog::append_jsonl(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("cannot write metrics file: " + path.string());
    for (const auto& r : records) {
        json j;
        j["step"] = r.step;
        j["tokens_seen"] = r.tokens_seen;
        j["lr"] = r.lr;
        j["train_loss"] = r.train_loss;
        if (r.val_loss.has_value()) j["val_loss"] = *r.val_loss;
        j["wall_s"] = r.wall_s;
        f << j.dump() << "\n";
    }
}

namespace {

struct AdamState {
    DenseModel<float> m, v;
    int64_t t = 0;

    explicit AdamState(const ModelConfig& cfg)
        : m(DenseModel<float>::zeros_like(cfg)), v(DenseModel<float>::zeros_like(cfg)) {}
};

double grad_global_norm(DenseModel<float>& grads) {
    double sum = 0.0;
    grads.visit([&](const std::string&, std::vector<float>& g) {
        double local = 0.0;
        for (float x : g) local += static_cast<double>(x) * x;
        sum += local;
    });
    return std::sqrt(sum);
}

void adam_step(DenseModel<float>& params, DenseModel<float>& grads, AdamState& st, double lr,
               const TrainConfig& tc, double grad_scale) {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.t));
    struct Slot {
        std::vector<float>* p;
        std::vector<float>* g;
        std::vector<float>* m;
        std::vector<float>* v;
    };
    std::vector<Slot> slots;
    params.visit([&](const std::string&, std::vector<float>& p) { slots.push_back({&p, nullptr, nullptr, nullptr}); });
    size_t i = 0;
    grads.visit([&](const std::string&, std::vector<float>& g) { slots[i++].g = &g; });
    i = 0;
    st.m.visit([&](const std::string&, std::vector<float>& m) { slots[i++].m = &m; });
    i = 0;
    st.v.visit([&](const std::string&, std::vector<float>& v) { slots[i++].v = &v; });

    const float b1 = static_cast<float>(tc.beta1);
    const float b2 = static_cast<float>(tc.beta2);
    const float gs = static_cast<float>(grad_scale);
    const float wd = static_cast<float>(lr * tc.weight_decay);
    const float step_size = static_cast<float>(lr / bc1);
    const float eps = static_cast<float>(tc.eps);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    for (auto& s : slots) {
        const int64_t n = static_cast<int64_t>(s.p->size());
        float* p = s.p->data();
        float* g = s.g->data();
        float* m = s.m->data();
        float* v = s.v->data();
        parallel_for(n, 1 << 14, [&](int64_t a, int64_t b) {
            for (int64_t k = a; k < b; ++k) {
                const float gk = g[k] * gs;
                m[k] = b1 * m[k] + (1.0f - b1) * gk;
                v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
                const float vhat = v[k] * inv_bc2;
                p[k] -= step_size * m[k] / (std::sqrt(vhat) + eps) + wd * p[k];
            }
        });
    }
}

struct LoopSpec {
    const ParamSet* init;
    const ParamSet* teacher;  // null for CE
    const Corpus* corpus;
    const TrainConfig* tc;
    const Corpus* val;
};

TrainResult run_loop(const LoopSpec& spec) {
    const TrainConfig& tc = *spec.tc;
    auto violations = validate_train_config(tc);
    if (!violations.empty()) throw std::invalid_argument("train: " + violations.front());
    if (tc.total_tokens == 0) {
        return {*spec.init, MetricsLog{}};
    }
    const int64_t steps = tc.total_steps();

    Engine<float> student(*spec.init);
    std::unique_ptr<Engine<float>> teacher;
    if (spec.teacher != nullptr) {
        if (spec.teacher->config.vocab != spec.init->config.vocab) {
            throw std::invalid_argument("distill: teacher and student vocabularies differ");
        }
        teacher = std::make_unique<Engine<float>>(*spec.teacher);
    }

    AdamState opt(spec.init->config);
    DenseModel<float> grads = DenseModel<float>::zeros_like(spec.init->config);
    BatchStream stream(*spec.corpus, tc.seq_len, tc.batch_size, tc.seed);
    MetricsLog log;
    std::vector<float> dlogits;
    const auto t0 = std::chrono::steady_clock::now();

    for (int64_t step = 1; step <= steps; ++step) {
        TokenBatch batch = stream.next();
        const double lr = lr_at(step, tc, steps);

        student.forward(batch.inputs.data(), batch.batch, batch.seq);
        double loss;
        if (teacher) {
            const auto& tlogits =
                teacher->forward(batch.inputs.data(), batch.batch, batch.seq);
            loss = student.loss_kl(tlogits.data(), &dlogits);
        } else {
            loss = student.loss_ce(batch.targets.data(), &dlogits);
        }
        if (!std::isfinite(loss)) throw DivergenceError(step);

        grads.set_zero();
        student.backward(dlogits, grads);
        const double norm = grad_global_norm(grads);
        const double scale = norm > 1.0 ? 1.0 / norm : 1.0;
        adam_step(student.model(), grads, opt, lr, tc, scale);

        if (step % tc.eval_interval == 0 || step == steps) {
            MetricsRecord r;
            r.step = step;
            r.tokens_seen = step * tc.tokens_per_step();
            r.lr = lr;
            r.train_loss = loss;
            if (spec.val != nullptr) {
                r.val_loss = eval_val_loss(student.export_params(), *spec.val, 8, tc.seq_len,
                                           tc.batch_size);
            }
            r.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log.records.push_back(r);
        }
    }
    return {student.export_params(), std::move(log)};
}

}  // namespace

TrainResult train_ce(const ParamSet& params, const Corpus& corpus, const TrainConfig& tc,
                     const Corpus* val_corpus) {
    if (tc.loss_mode != "ce") throw std::invalid_argument("train_ce: loss_mode must be 'ce'");
    LoopSpec spec{&params, nullptr, &corpus, &tc, val_corpus};
    return run_loop(spec);
}

TrainResult correct_teacher(const ParamSet& teacher, const Corpus& corpus_b,
                            const TrainConfig& tc, const Corpus* val_corpus) {
    if (tc.loss_mode != "ce") {
        throw std::invalid_argument("correct_teacher: loss_mode must be 'ce'");
    }
    LoopSpec spec{&teacher, nullptr, &corpus_b, &tc, val_corpus};
    return run_loop(spec);
}

TrainResult distill(const ParamSet& student, const ParamSet& teacher, const Corpus& corpus,
                    const TrainConfig& tc, const Corpus* val_corpus) {
    if (tc.loss_mode != "kl") throw std::invalid_argument("distill: loss_mode must be 'kl'");
    LoopSpec spec{&student, &teacher, &corpus, &tc, val_corpus};
    return run_loop(spec);
}

}  // namespace mshr
