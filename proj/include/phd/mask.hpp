#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "phd/common.hpp"

namespace phd {

enum class MaskVariant : uint8_t { Vanilla, NaiveRepeat, Phd, PhdSwa, PhdCswa };

constexpr int64_t kNoChunking = std::numeric_limits<int64_t>::max();

// Which (query, key) pairs may attend. K = repeat count, W = sliding window
// measured in hidden decoding tokens, C = chunk size in original positions.
struct MaskSpec {
  MaskVariant variant = MaskVariant::Vanilla;
  int64_t K = 1;
  int64_t W = 0;
  int64_t C = kNoChunking;
};

// 1-based original position n in [1, t] and copy index j in [1, K]. Copy 1 is
// the original token; copies >= 2 are hidden decoding tokens.
struct TokenCoord {
  int64_t n = 1;
  int64_t j = 1;
  bool operator==(const TokenCoord&) const = default;
};

enum class Layout : uint8_t { Interleaved, Grouped };

// Bijection between grouped and interleaved slot orders. Grouped order lists
// the t originals first, then hidden tokens in interleaved order.
struct LayoutMap {
  int64_t t = 0;
  int64_t K = 1;
  std::vector<int64_t> grouped_to_interleaved;
  std::vector<int64_t> interleaved_to_grouped;
};

struct MaskStats {
  int64_t true_entries = 0;
  int64_t per_query_max = 0;
};

struct SpecValidation {
  bool ok = true;
  std::vector<std::string> errors;  // one entry per violated invariant
  std::vector<std::string> notes;   // degenerate-form flags
};

// --- coordinate helpers ---------------------------------------------------

inline int64_t interleaved_index(TokenCoord c, int64_t K) { return (c.n - 1) * K + (c.j - 1); }

TokenCoord coord_at(Layout layout, int64_t slot, int64_t t, int64_t K);
int64_t slot_of(Layout layout, TokenCoord c, int64_t t, int64_t K);

// Chunk index of an original position, 1-based: chunk(p) = ceil(p / C).
inline int64_t chunk_of(int64_t pos, int64_t C) {
  return C == kNoChunking ? 1 : (pos - 1) / C + 1;
}
// First position of the chunk containing pos.
inline int64_t chunk_start(int64_t pos, int64_t C) {
  return C == kNoChunking ? 1 : ((pos - 1) / C) * C + 1;
}

// Number of hidden decoding tokens strictly before position n that queries at
// position n may see through the sliding window (0 when the variant has no
// window; all of them for NaiveRepeat).
int64_t window_len_before(const MaskSpec& spec, int64_t n);

// Hidden-buffer capacity the variant implies: 0, W, or unbounded.
int64_t hidden_window_capacity(const MaskSpec& spec);

// --- core mask operations ---------------------------------------------------

SpecValidation validate_spec(const MaskSpec& spec);

bool is_attendable(const MaskSpec& spec, int64_t t, TokenCoord query, TokenCoord key);

BoolMatrix build_mask(const MaskSpec& spec, int64_t t, Layout layout);

LayoutMap layout_permutation(int64_t t, int64_t K);

MaskStats mask_stats(const MaskSpec& spec, int64_t t);

// --- kernel-design gather ranges --------------------------------------------

// Per grouped query slot, the attendable keys form two contiguous grouped-slot
// ranges: a prefix of the originals block and a window+same-position span of
// the hidden block. This is what makes the grouped computation touch exactly
// mask_stats(spec, t).true_entries score entries.
struct AttnRanges {
  int64_t t = 0;
  int64_t K = 1;
  std::vector<int64_t> orig_end;   // keys [0, orig_end)
  std::vector<int64_t> hid_begin;  // keys [hid_begin, hid_end)
  std::vector<int64_t> hid_end;
  int64_t total_entries() const {
    int64_t n = 0;
    for (size_t i = 0; i < orig_end.size(); ++i)
      n += orig_end[i] + (hid_end[i] - hid_begin[i]);
    return n;
  }
};

AttnRanges grouped_attention_ranges(const MaskSpec& spec, int64_t t);

// --- naming and dumps -------------------------------------------------------

std::string variant_name(MaskVariant v);
MaskVariant variant_from_name(const std::string& name);

// Run naming convention: "<type>-K[-W-C]" with "inf" for an unbounded chunk.
std::string spec_name(const MaskSpec& spec);

void write_pgm(const BoolMatrix& mask, const std::string& path);
void write_mask_stats_csv(const MaskSpec& spec, int64_t t, Layout layout,
                          const std::string& path);

}  // namespace phd
