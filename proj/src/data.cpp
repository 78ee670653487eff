#include "mshr/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mshr/rng.hpp"

using json = nlohmann::json;

namespace mshr {

std::vector<int32_t> tokenize_bytes(std::string_view bytes) {
    std::vector<int32_t> out;
    out.reserve(bytes.size() + 1);
    out.push_back(kBosId);
    for (unsigned char c : bytes) out.push_back(static_cast<int32_t>(c));
    return out;
}

std::string detokenize(const std::vector<int32_t>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int32_t t : tokens) {
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open corpus file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw std::runtime_error("corpus file is empty: " + path.string());
    Corpus c;
    c.tokens = tokenize_bytes(bytes);
    c.provenance = path.string();
    c.style = 'F';
    return c;
}

namespace {

// Order-1 chain over a small alphabet. Each symbol has four preferred
// successors; a space follows any letter with fixed probability, and a word
// starter follows a space. Structure is a pure function of the style.
struct MarkovLang {
    std::vector<uint8_t> alphabet;  // letters only (space handled separately)
    std::vector<std::array<uint8_t, 4>> successors;
    std::vector<uint8_t> starters;  // 8 word starters, Zipf-weighted
    double space_prob = 0.18;

    uint8_t sample_starter(Rng& rng) const {
        // weights 1/1, 1/2, ..., 1/8
        static constexpr double kCum[8] = {0.36790, 0.55185, 0.67448, 0.76646,
                                           0.84004, 0.90136, 0.95392, 1.00001};
        const double u = rng.next_double();
        for (int i = 0; i < 8; ++i) {
            if (u < kCum[i]) return starters[static_cast<size_t>(i)];
        }
        return starters[7];
    }

    uint8_t sample_next(uint8_t prev, Rng& rng) const {
        if (prev == ' ') return sample_starter(rng);
        const double u = rng.next_double();
        if (u < space_prob) return ' ';
        const double v = (u - space_prob) / (1.0 - space_prob);
        size_t idx = 0;
        for (size_t i = 0; i < alphabet.size(); ++i) {
            if (alphabet[i] == prev) {
                idx = i;
                break;
            }
        }
        const auto& succ = successors[idx];
        if (v < 0.45) return succ[0];
        if (v < 0.75) return succ[1];
        if (v < 0.90) return succ[2];
        return succ[3];
    }
};

MarkovLang build_lang(char style) {
    MarkovLang lang;
    if (style == 'A') {
        for (char c = 'a'; c <= 'z'; ++c) lang.alphabet.push_back(static_cast<uint8_t>(c));
    } else if (style == 'B') {
        for (char c = 'A'; c <= 'Z'; ++c) lang.alphabet.push_back(static_cast<uint8_t>(c));
        for (char c = '0'; c <= '9'; ++c) lang.alphabet.push_back(static_cast<uint8_t>(c));
    } else {
        throw std::invalid_argument("synth_corpus: style must be 'A' or 'B'");
    }
    // Fixed structural seed per style; the user's seed never reaches here.
    Rng rng(Rng::derive(0x57a71cull, std::string("lang:") + style));
    const size_t n = lang.alphabet.size();
    lang.successors.resize(n);
    for (size_t i = 0; i < n; ++i) {
        for (int j = 0; j < 4; ++j) {
            uint8_t pick;
            bool dup;
            do {
                pick = lang.alphabet[static_cast<size_t>(rng.next_below(n))];
                dup = false;
                for (int k = 0; k < j; ++k) dup = dup || lang.successors[i][static_cast<size_t>(k)] == pick;
            } while (dup);
            lang.successors[i][static_cast<size_t>(j)] = pick;
        }
    }
    for (int j = 0; j < 8; ++j) {
        lang.starters.push_back(lang.alphabet[static_cast<size_t>(rng.next_below(n))]);
    }
    return lang;
}

const MarkovLang& lang_for(char style) {
    static const MarkovLang a = build_lang('A');
    static const MarkovLang b = build_lang('B');
    if (style == 'A') return a;
    if (style == 'B') return b;
    throw std::invalid_argument("unknown style");
}

}  // namespace

Corpus synth_corpus(char style, int64_t n_tokens, uint64_t seed) {
    if (n_tokens < 1) throw std::invalid_argument("synth_corpus: n_tokens must be >= 1");
    const MarkovLang& lang = lang_for(style);
    Rng rng(Rng::derive(seed, std::string("synth:") + style));
    Corpus c;
    c.style = style;
    c.provenance = std::string("synth:") + style + ":" + std::to_string(seed);
    c.tokens.reserve(static_cast<size_t>(n_tokens));
    while (static_cast<int64_t>(c.tokens.size()) < n_tokens) {
        const int64_t doc_len = 200 + static_cast<int64_t>(rng.next_below(201));
        c.tokens.push_back(kBosId);
        uint8_t prev = lang.sample_starter(rng);
        c.tokens.push_back(prev);
        for (int64_t i = 1; i < doc_len; ++i) {
            prev = lang.sample_next(prev, rng);
            c.tokens.push_back(prev);
        }
    }
    c.tokens.resize(static_cast<size_t>(n_tokens));
    return c;
}

std::vector<std::vector<int32_t>> sample_calibration(const Corpus& corpus, int n_samples,
                                                     int seq_len, uint64_t seed) {
    if (n_samples < 1 || seq_len < 1) {
        throw std::invalid_argument("sample_calibration: bad n_samples/seq_len");
    }
    const int64_t len = static_cast<int64_t>(corpus.tokens.size());
    const int64_t n_windows = (len - 1) / seq_len;
    if (n_windows < n_samples) {
        throw std::invalid_argument("sample_calibration: corpus too short for requested samples");
    }
    std::vector<int64_t> slots(static_cast<size_t>(n_windows));
    std::iota(slots.begin(), slots.end(), 0);
    Rng rng(Rng::derive(seed, "calibration"));
    rng.shuffle(slots);
    std::vector<std::vector<int32_t>> out;
    out.reserve(static_cast<size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        const int64_t start = slots[static_cast<size_t>(i)] * seq_len;
        out.emplace_back(corpus.tokens.begin() + start,
                         corpus.tokens.begin() + start + seq_len + 1);
    }
    return out;
}

std::vector<ClozeItem> synth_cloze_set(int n_items, uint64_t seed) {
    if (n_items < 1) throw std::invalid_argument("synth_cloze_set: n_items must be >= 1");
    const MarkovLang& lang = lang_for('A');
    Rng rng(Rng::derive(seed, "cloze"));
    constexpr int kCandLen = 20;
    std::vector<ClozeItem> items;
    items.reserve(static_cast<size_t>(n_items));
    for (int i = 0; i < n_items; ++i) {
        const int prefix_len = 24 + static_cast<int>(rng.next_below(17));
        std::string prefix;
        uint8_t prev = lang.sample_starter(rng);
        prefix.push_back(static_cast<char>(prev));
        for (int j = 1; j < prefix_len; ++j) {
            prev = lang.sample_next(prev, rng);
            prefix.push_back(static_cast<char>(prev));
        }
        std::vector<int32_t> real(kCandLen);
        uint8_t state = prev;
        for (int j = 0; j < kCandLen; ++j) {
            state = lang.sample_next(state, rng);
            real[static_cast<size_t>(j)] = state;
        }
        std::vector<int32_t> fake;
        do {
            fake = real;
            for (auto& t : fake) {
                if (rng.next_double() < 0.35) {
                    t = lang.alphabet[static_cast<size_t>(rng.next_below(lang.alphabet.size()))];
                }
            }
        } while (fake == real);

        ClozeItem item;
        item.prefix = tokenize_bytes(prefix);
        item.label = static_cast<int>(rng.next_below(2));
        if (item.label == 0) {
            item.cand0 = real;
            item.cand1 = fake;
        } else {
            item.cand0 = fake;
            item.cand1 = real;
        }
        items.push_back(std::move(item));
    }
    return items;
}

void write_cloze_jsonl(const std::filesystem::path& path, const std::vector<ClozeItem>& items) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write cloze file: " + path.string());
    for (const auto& it : items) {
        json j;
        j["prefix"] = it.prefix;
        j["cand0"] = it.cand0;
        j["cand1"] = it.cand1;
        j["label"] = it.label;
        f << j.dump() << "\n";
    }
}

std::vector<ClozeItem> read_cloze_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open cloze file: " + path.string());
    std::vector<ClozeItem> items;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ClozeItem it;
        it.prefix = j.at("prefix").get<std::vector<int32_t>>();
        it.cand0 = j.at("cand0").get<std::vector<int32_t>>();
        it.cand1 = j.at("cand1").get<std::vector<int32_t>>();
        it.label = j.at("label").get<int>();
        items.push_back(std::move(it));
    }
    return items;
}

BatchStream::BatchStream(const Corpus& corpus, int seq_len, int batch_size, uint64_t seed)
    : corpus_(corpus), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len < 1 || batch_size < 1) throw std::invalid_argument("BatchStream: bad shape");
    n_windows_ = (static_cast<int64_t>(corpus.tokens.size()) - 1) / seq_len;
    if (n_windows_ < 1) throw std::invalid_argument("BatchStream: corpus too short for one window");
}

void BatchStream::refill() {
    std::vector<int64_t> order(static_cast<size_t>(n_windows_));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(Rng::derive(seed_, "batches"), static_cast<uint64_t>(epoch_)));
    rng.shuffle(order);
    epoch_ += 1;
    // consumed from the back; reverse so delivery follows `order`
    queue_.insert(queue_.begin(), order.rbegin(), order.rend());
}

TokenBatch BatchStream::next() {
    TokenBatch b;
    b.batch = batch_size_;
    b.seq = seq_len_;
    b.inputs.resize(static_cast<size_t>(batch_size_) * seq_len_);
    b.targets.resize(static_cast<size_t>(batch_size_) * seq_len_);
    b.offsets.resize(static_cast<size_t>(batch_size_));
    for (int r = 0; r < batch_size_; ++r) {
        if (queue_.empty()) refill();
        const int64_t win = queue_.back();
        queue_.pop_back();
        const int64_t start = win * seq_len_;
        b.offsets[static_cast<size_t>(r)] = start;
        for (int t = 0; t < seq_len_; ++t) {
            b.inputs[static_cast<size_t>(r) * seq_len_ + t] =
                corpus_.tokens[static_cast<size_t>(start + t)];
            b.targets[static_cast<size_t>(r) * seq_len_ + t] =
                corpus_.tokens[static_cast<size_t>(start + t + 1)];
        }
    }
    return b;
}

}  // namespace mshr
