#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mshr/batch.hpp"

namespace mshr {

// Byte-level vocabulary: 256 byte values plus BOS/EOS specials.
inline constexpr int32_t kByteVocab = 258;
inline constexpr int32_t kBosId = 256;
inline constexpr int32_t kEosId = 257;

struct Corpus {
    std::vector<int32_t> tokens;
    std::string provenance;  // file path or generator spec
    char style = 'F';        // 'A' | 'B' | 'F' (file)
};

// [BOS, byte0, byte1, ...]; exact inverse of detokenize on the byte payload.
std::vector<int32_t> tokenize_bytes(std::string_view bytes);
std::string detokenize(const std::vector<int32_t>& tokens);

Corpus load_corpus(const std::filesystem::path& path);

// Two fixed Markov byte languages with disjointly biased alphabets. The chain
// structure depends only on the style; the seed drives sampling, so corpora
// with different seeds are fresh samples of the same language.
Corpus synth_corpus(char style, int64_t n_tokens, uint64_t seed);

// n_samples windows of seq_len+1 tokens (inputs plus next-token targets),
// distinct window slots, deterministic in seed. Throws when the corpus has
// fewer than n_samples windows.
std::vector<std::vector<int32_t>> sample_calibration(const Corpus& corpus, int n_samples,
                                                     int seq_len, uint64_t seed);

struct ClozeItem {
    std::vector<int32_t> prefix;  // starts with BOS
    std::vector<int32_t> cand0;
    std::vector<int32_t> cand1;
    int label = 0;  // index of the real continuation

    bool operator==(const ClozeItem&) const = default;
};

// Two-choice completion items over the style-A grammar: the real continuation
// versus a corrupted copy of it. Labels are balanced by a fair coin.
std::vector<ClozeItem> synth_cloze_set(int n_items, uint64_t seed);

void write_cloze_jsonl(const std::filesystem::path& path, const std::vector<ClozeItem>& items);
std::vector<ClozeItem> read_cloze_jsonl(const std::filesystem::path& path);

// Deterministic shuffled window stream; every window of each epoch is used
// exactly once, epochs reshuffle with a seed derived from (seed, epoch).
class BatchStream {
public:
    BatchStream(const Corpus& corpus, int seq_len, int batch_size, uint64_t seed);

    TokenBatch next();
    int64_t windows_per_epoch() const { return n_windows_; }

private:
    void refill();

    const Corpus& corpus_;
    int seq_len_;
    int batch_size_;
    uint64_t seed_;
    int64_t n_windows_;
    int64_t epoch_ = 0;
    std::vector<int64_t> queue_;  // window indices, consumed from the back
};

}  // namespace mshr
