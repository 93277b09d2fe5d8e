#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "phd/common.hpp"

namespace phd {

// Byte-level corpus with a deterministic train/validation split. The boundary
// falls on a seq_len multiple so training windows never leak into validation.
struct Corpus {
  std::vector<uint8_t> bytes;
  int64_t train_end = 0;  // bytes [0, train_end) train, [train_end, size) validation
  int64_t seq_len = 0;

  static constexpr int64_t kVocabSize = 256;

  int64_t size() const { return static_cast<int64_t>(bytes.size()); }
  int64_t train_bytes() const { return train_end; }
  int64_t val_bytes() const { return size() - train_end; }
};

struct Batch {
  int64_t batch_size = 0;
  int64_t seq_len = 0;
  std::vector<int64_t> tokens;   // [batch][seq_len]
  std::vector<int64_t> targets;  // [batch][seq_len], shifted by one

  int64_t token_at(int64_t b, int64_t i) const { return tokens[static_cast<size_t>(b * seq_len + i)]; }
  int64_t target_at(int64_t b, int64_t i) const { return targets[static_cast<size_t>(b * seq_len + i)]; }
};

Corpus load_corpus(const std::string& path, double val_fraction, int64_t seq_len);

// Builds a Corpus from an in-memory buffer (testing and generated corpora).
Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double val_fraction, int64_t seq_len);

// batch_size windows drawn uniformly from the training region; a window is
// seq_len+1 bytes so every target is the byte after its token.
Batch next_batch(const Corpus& corpus, int64_t seq_len, int64_t batch_size,
                 std::mt19937_64& rng);

// Deterministic full-coverage validation windows, in order.
std::vector<int64_t> val_window_offsets(const Corpus& corpus, int64_t seq_len);
Batch window_batch(const Corpus& corpus, int64_t seq_len, int64_t offset);

}  // namespace phd
