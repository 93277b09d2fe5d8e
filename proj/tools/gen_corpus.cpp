// Deterministic pseudo-text generator for the byte-level training corpus.
// The output has word/sentence/paragraph structure with a zipf-like word
// distribution, so a character model has real statistics to learn, and the
// same seed always produces the same file.

#include <CLI11.hpp>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

namespace {

std::vector<std::string> build_vocab(std::mt19937_64& rng, size_t count) {
  const std::vector<std::string> onsets{"b",  "d",  "f",  "g",  "h",  "k",  "l",  "m",
                                        "n",  "p",  "r",  "s",  "t",  "v",  "w",  "br",
                                        "ch", "cl", "cr", "dr", "fl", "fr", "gl", "gr",
                                        "pl", "pr", "sh", "sl", "sp", "st", "th", "tr"};
  const std::vector<std::string> vowels{"a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"};
  const std::vector<std::string> codas{"",  "",   "n", "r",  "s",  "t",
                                       "l", "d",  "m", "ng", "st", "ck"};
  std::vector<std::string> vocab;
  vocab.reserve(count);
  while (vocab.size() < count) {
    std::string w;
    const int syllables = 1 + static_cast<int>(rng() % 3);
    for (int s = 0; s < syllables; ++s) {
      w += onsets[rng() % onsets.size()];
      w += vowels[rng() % vowels.size()];
      w += codas[rng() % codas.size()];
    }
    if (w.size() >= 2 && w.size() <= 12) vocab.push_back(w);
  }
  return vocab;
}

const std::vector<std::string> kFunctionWords{
    "the", "of",   "and",  "to",    "in",   "a",    "is",   "that", "it",   "was",
    "for", "on",   "are",  "with",  "as",   "they", "at",   "be",   "this", "from",
    "or",  "had",  "by",   "not",   "but",  "what", "all",  "were", "when", "we",
    "there", "can", "an",  "which", "their", "said", "if",   "do",   "into", "over"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate a deterministic pseudo-text corpus"};
  std::string out_path = "data/corpus.txt";
  uint64_t target_bytes = 1 << 20;
  uint64_t seed = 20240601;
  app.add_option("-o,--out", out_path, "output file");
  app.add_option("-b,--bytes", target_bytes, "approximate size in bytes");
  app.add_option("-s,--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  std::mt19937_64 rng(seed);
  const auto vocab = build_vocab(rng, 1500);

  // zipf-like weights over the content vocabulary
  std::vector<double> weights(vocab.size());
  for (size_t i = 0; i < vocab.size(); ++i) weights[i] = 1.0 / static_cast<double>(i + 3);
  std::discrete_distribution<size_t> content(weights.begin(), weights.end());
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  std::string text;
  text.reserve(target_bytes + 256);
  while (text.size() < target_bytes) {
    const int sentences = 3 + static_cast<int>(rng() % 6);
    for (int s = 0; s < sentences && text.size() < target_bytes; ++s) {
      const int words = 5 + static_cast<int>(rng() % 11);
      for (int w = 0; w < words; ++w) {
        std::string word = coin(rng) < 0.45 ? kFunctionWords[rng() % kFunctionWords.size()]
                                            : vocab[content(rng)];
        if (w == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
        text += word;
        if (w + 1 < words) text += (w > 2 && coin(rng) < 0.08) ? ", " : " ";
      }
      const double p = coin(rng);
      text += p < 0.86 ? "." : (p < 0.94 ? "?" : "!");
      text += " ";
    }
    text += "\n\n";
  }
  text.resize(target_bytes);

  std::ofstream f(out_path, std::ios::binary);
  if (!f.good()) {
    std::cerr << "cannot open " << out_path << "\n";
    return 1;
  }
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::cout << "wrote " << text.size() << " bytes to " << out_path << "\n";
  return 0;
}
