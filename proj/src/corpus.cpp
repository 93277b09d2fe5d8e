#include "phd/corpus.hpp"

#include <fstream>

namespace phd {

Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double val_fraction, int64_t seq_len) {
  require(!bytes.empty(), "corpus: file is empty");
  require(val_fraction > 0.0 && val_fraction < 1.0, "corpus: val_fraction must be in (0,1)");
  require(seq_len >= 1, "corpus: seq_len must be >= 1");
  Corpus c;
  c.bytes = std::move(bytes);
  c.seq_len = seq_len;
  require(c.size() >= seq_len + 1, "corpus too small");
  const auto train_target = static_cast<int64_t>(static_cast<double>(c.size()) * (1.0 - val_fraction));
  c.train_end = (train_target / seq_len) * seq_len;  // boundary on a seq_len multiple
  require(c.train_end >= seq_len + 1, "corpus too small");
  return c;
}

Corpus load_corpus(const std::string& path, double val_fraction, int64_t seq_len) {
  std::ifstream f(path, std::ios::binary);
  require_io(f.good(), "corpus: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(!bytes.empty(), "corpus: file is empty: " + path);
  return corpus_from_bytes(std::move(bytes), val_fraction, seq_len);
}

Batch next_batch(const Corpus& corpus, int64_t seq_len, int64_t batch_size,
                 std::mt19937_64& rng) {
  require(seq_len + 1 <= corpus.train_bytes(), "next_batch: seq_len exceeds training bytes");
  require(batch_size >= 1, "next_batch: batch_size must be >= 1");
  Batch b;
  b.batch_size = batch_size;
  b.seq_len = seq_len;
  b.tokens.resize(static_cast<size_t>(batch_size * seq_len));
  b.targets.resize(static_cast<size_t>(batch_size * seq_len));
  // windows need seq_len + 1 bytes entirely inside [0, train_end)
  const auto span = static_cast<uint64_t>(corpus.train_end - seq_len);
  for (int64_t row = 0; row < batch_size; ++row) {
    const auto start = static_cast<int64_t>(rng() % span);
    for (int64_t i = 0; i < seq_len; ++i) {
      b.tokens[static_cast<size_t>(row * seq_len + i)] = corpus.bytes[static_cast<size_t>(start + i)];
      b.targets[static_cast<size_t>(row * seq_len + i)] =
          corpus.bytes[static_cast<size_t>(start + i + 1)];
    }
  }
  return b;
}

std::vector<int64_t> val_window_offsets(const Corpus& corpus, int64_t seq_len) {
  std::vector<int64_t> offsets;
  for (int64_t off = corpus.train_end; off + seq_len + 1 <= corpus.size(); off += seq_len)
    offsets.push_back(off);
  return offsets;
}

Batch window_batch(const Corpus& corpus, int64_t seq_len, int64_t offset) {
  require(offset >= 0 && offset + seq_len + 1 <= corpus.size(), "window_batch: window out of range");
  Batch b;
  b.batch_size = 1;
  b.seq_len = seq_len;
  b.tokens.resize(static_cast<size_t>(seq_len));
  b.targets.resize(static_cast<size_t>(seq_len));
  for (int64_t i = 0; i < seq_len; ++i) {
    b.tokens[static_cast<size_t>(i)] = corpus.bytes[static_cast<size_t>(offset + i)];
    b.targets[static_cast<size_t>(i)] = corpus.bytes[static_cast<size_t>(offset + i + 1)];
  }
  return b;
}

}  // namespace phd
