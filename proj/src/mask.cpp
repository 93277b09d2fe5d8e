#include "phd/mask.hpp"

#include <algorithm>
#include <fstream>

namespace phd {

TokenCoord coord_at(Layout layout, int64_t slot, int64_t t, int64_t K) {
  require(slot >= 0 && slot < t * K, "coord_at: slot out of range");
  if (layout == Layout::Interleaved) return {slot / K + 1, slot % K + 1};
  if (slot < t) return {slot + 1, 1};
  const int64_t h = slot - t;
  return {h / (K - 1) + 1, h % (K - 1) + 2};
}

int64_t slot_of(Layout layout, TokenCoord c, int64_t t, int64_t K) {
  require(c.n >= 1 && c.n <= t && c.j >= 1 && c.j <= K, "slot_of: coord out of range");
  if (layout == Layout::Interleaved) return interleaved_index(c, K);
  if (c.j == 1) return c.n - 1;
  return t + (c.n - 1) * (K - 1) + (c.j - 2);
}

int64_t window_len_before(const MaskSpec& spec, int64_t n) {
  const int64_t hidden_per_pos = spec.K - 1;
  switch (spec.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      return 0;
    case MaskVariant::NaiveRepeat:
      return (n - 1) * hidden_per_pos;
    case MaskVariant::PhdSwa:
      return std::min(spec.W, (n - 1) * hidden_per_pos);
    case MaskVariant::PhdCswa:
      return std::min(spec.W, (n - chunk_start(n, spec.C)) * hidden_per_pos);
  }
  return 0;
}

int64_t hidden_window_capacity(const MaskSpec& spec) {
  switch (spec.variant) {
    case MaskVariant::Vanilla:
    case MaskVariant::Phd:
      return 0;
    case MaskVariant::NaiveRepeat:
      return std::numeric_limits<int64_t>::max();
    case MaskVariant::PhdSwa:
    case MaskVariant::PhdCswa:
      return spec.W;
  }
  return 0;
}

SpecValidation validate_spec(const MaskSpec& spec) {
  SpecValidation r;
  auto fail = [&](const std::string& msg) {
    r.ok = false;
    r.errors.push_back(msg);
  };
  if (spec.K < 1) fail("K ≥ 1");
  if (spec.W < 0) fail("W ≥ 0");
  if (spec.C < 1) fail("C ≥ 1");
  switch (spec.variant) {
    case MaskVariant::Vanilla:
      if (spec.K != 1) fail("Vanilla requires K = 1");
      break;
    case MaskVariant::Phd:
      if (spec.W != 0) fail("PHD requires W = 0");
      break;
    case MaskVariant::PhdCswa:
      if (spec.C == kNoChunking) fail("PHD_CSWA requires a finite C");
      break;
    case MaskVariant::PhdSwa:
    case MaskVariant::NaiveRepeat:
      break;
  }
  if (r.ok) {
    if (spec.K == 1 && spec.variant != MaskVariant::Vanilla)
      r.notes.push_back("K = 1: degenerates to Vanilla");
    if ((spec.variant == MaskVariant::PhdSwa || spec.variant == MaskVariant::PhdCswa) &&
        spec.W == 0)
      r.notes.push_back("W = 0: degenerates to PHD");
    if (spec.variant == MaskVariant::PhdSwa && spec.C != kNoChunking)
      r.notes.push_back("C is ignored for PHD_SWA");
  }
  return r;
}

// Window membership of a hidden key (m, i) for a query at position n: the key
// must be among the last W hidden decoding tokens in interleaved order that
// precede position n (and share its chunk under PHD_CSWA). Only hidden
// queries (j >= 2) read the window; original tokens form a self-contained
// causal chain, which is what keeps prefill cost independent of K.
static bool in_window(const MaskSpec& spec, TokenCoord query, TokenCoord key) {
  if (key.j < 2 || query.j < 2 || key.n >= query.n) return false;
  if (spec.variant != MaskVariant::PhdSwa && spec.variant != MaskVariant::PhdCswa) return false;
  if (spec.variant == MaskVariant::PhdCswa &&
      chunk_of(key.n, spec.C) != chunk_of(query.n, spec.C))
    return false;
  // hidden tokens between the key and position `query.n` in interleaved order
  const int64_t newer = (spec.K - key.j) + (query.n - 1 - key.n) * (spec.K - 1);
  return newer < spec.W;
}

bool is_attendable(const MaskSpec& spec, int64_t t, TokenCoord query, TokenCoord key) {
  require(query.n >= 1 && query.n <= t && query.j >= 1 && query.j <= spec.K,
          "is_attendable: query coord out of range");
  require(key.n >= 1 && key.n <= t && key.j >= 1 && key.j <= spec.K,
          "is_attendable: key coord out of range");
  if (spec.variant == MaskVariant::NaiveRepeat)
    return interleaved_index(key, spec.K) <= interleaved_index(query, spec.K);
  // base rule: originals are globally visible, copies at the same position
  // are visible up to the query's own copy index
  if (key.j == 1 && key.n < query.n) return true;
  if (key.n == query.n && key.j <= query.j) return true;
  return in_window(spec, query, key);
}

BoolMatrix build_mask(const MaskSpec& spec, int64_t t, Layout layout) {
  require(t >= 1, "build_mask: t must be >= 1");
  const SpecValidation v = validate_spec(spec);
  require(v.ok, v.ok ? "" : "build_mask: invalid spec: " + v.errors.front());
  const int64_t total = t * spec.K;
  BoolMatrix m(total, total);
  for (int64_t q = 0; q < total; ++q) {
    const TokenCoord qc = coord_at(layout, q, t, spec.K);
    for (int64_t k = 0; k < total; ++k)
      m.at(q, k) = is_attendable(spec, t, qc, coord_at(layout, k, t, spec.K)) ? 1 : 0;
  }
  return m;
}

LayoutMap layout_permutation(int64_t t, int64_t K) {
  require(t >= 1 && K >= 1, "layout_permutation: t and K must be >= 1");
  LayoutMap map;
  map.t = t;
  map.K = K;
  const int64_t total = t * K;
  map.grouped_to_interleaved.resize(static_cast<size_t>(total));
  map.interleaved_to_grouped.resize(static_cast<size_t>(total));
  for (int64_t g = 0; g < total; ++g) {
    const int64_t inter = interleaved_index(coord_at(Layout::Grouped, g, t, K), K);
    map.grouped_to_interleaved[static_cast<size_t>(g)] = inter;
    map.interleaved_to_grouped[static_cast<size_t>(inter)] = g;
  }
  return map;
}

MaskStats mask_stats(const MaskSpec& spec, int64_t t) {
  const SpecValidation v = validate_spec(spec);
  require(v.ok, v.ok ? "" : "mask_stats: invalid spec: " + v.errors.front());
  const int64_t K = spec.K;
  MaskStats s;
  if (spec.variant == MaskVariant::NaiveRepeat) {
    const int64_t total = K * t;
    s.true_entries = total * (total + 1) / 2;
    s.per_query_max = total;
    return s;
  }
  // Per query (n, j): (n - 1) originals + j same-position copies + window.
  for (int64_t n = 1; n <= t; ++n) {
    const int64_t win = window_len_before(spec, n);
    s.true_entries += K * (n - 1) + K * (K + 1) / 2;
    // the window is read by hidden queries only
    s.true_entries += (K - 1) * win;
    const int64_t widest = (n - 1) + K + (K >= 2 ? win : 0);
    s.per_query_max = std::max(s.per_query_max, widest);
  }
  return s;
}

AttnRanges grouped_attention_ranges(const MaskSpec& spec, int64_t t) {
  const int64_t K = spec.K;
  const int64_t total = t * K;
  AttnRanges r;
  r.t = t;
  r.K = K;
  r.orig_end.resize(static_cast<size_t>(total));
  r.hid_begin.resize(static_cast<size_t>(total));
  r.hid_end.resize(static_cast<size_t>(total));
  const bool window_for_originals = spec.variant == MaskVariant::NaiveRepeat;
  for (int64_t s = 0; s < total; ++s) {
    const TokenCoord q = coord_at(Layout::Grouped, s, t, K);
    // originals (m, 1) with m <= n live at grouped slots [0, n)
    r.orig_end[static_cast<size_t>(s)] = q.n;
    if (K == 1) {
      r.hid_begin[static_cast<size_t>(s)] = 0;
      r.hid_end[static_cast<size_t>(s)] = 0;
      continue;
    }
    // hidden block: the window is a contiguous run ending where position n's
    // own copies start; same-position copies 2..j extend it to the right
    const int64_t own_base = t + (q.n - 1) * (K - 1);
    const int64_t win =
        (q.j >= 2 || window_for_originals) ? window_len_before(spec, q.n) : 0;
    r.hid_begin[static_cast<size_t>(s)] = own_base - win;
    r.hid_end[static_cast<size_t>(s)] = own_base + (q.j - 1);
  }
  return r;
}

std::string variant_name(MaskVariant v) {
  switch (v) {
    case MaskVariant::Vanilla: return "vanilla";
    case MaskVariant::NaiveRepeat: return "naive_repeat";
    case MaskVariant::Phd: return "phd";
    case MaskVariant::PhdSwa: return "phd_swa";
    case MaskVariant::PhdCswa: return "phd_cswa";
  }
  return "unknown";
}

MaskVariant variant_from_name(const std::string& name) {
  if (name == "vanilla") return MaskVariant::Vanilla;
  if (name == "naive_repeat" || name == "naive-repeat") return MaskVariant::NaiveRepeat;
  if (name == "phd") return MaskVariant::Phd;
  if (name == "phd_swa" || name == "phd-swa") return MaskVariant::PhdSwa;
  if (name == "phd_cswa" || name == "phd-cswa") return MaskVariant::PhdCswa;
  throw ContractError("unknown mask variant: " + name);
}

std::string spec_name(const MaskSpec& spec) {
  auto num = [](int64_t x) {
    return x == kNoChunking ? std::string("inf") : std::to_string(x);
  };
  switch (spec.variant) {
    case MaskVariant::Vanilla: return "Vanilla-1";
    case MaskVariant::NaiveRepeat: return "NaiveRepeat-" + std::to_string(spec.K);
    case MaskVariant::Phd: return "PHD-" + std::to_string(spec.K) + "-0-inf";
    case MaskVariant::PhdSwa:
      return "PHD-SWA-" + std::to_string(spec.K) + "-" + std::to_string(spec.W) + "-inf";
    case MaskVariant::PhdCswa:
      return "PHD-CSWA-" + std::to_string(spec.K) + "-" + std::to_string(spec.W) + "-" +
             num(spec.C);
  }
  return "unknown";
}

void write_pgm(const BoolMatrix& mask, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require_io(f.good(), "write_pgm: cannot open " + path);
  f << "P5\n" << mask.cols << " " << mask.rows << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(mask.cols));
  for (int64_t r = 0; r < mask.rows; ++r) {
    for (int64_t c = 0; c < mask.cols; ++c)
      row[static_cast<size_t>(c)] = mask.at(r, c) ? 255 : 0;
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  require_io(f.good(), "write_pgm: write failed for " + path);
}

void write_mask_stats_csv(const MaskSpec& spec, int64_t t, Layout layout,
                          const std::string& path) {
  const MaskStats s = mask_stats(spec, t);
  std::ofstream f(path);
  require_io(f.good(), "write_mask_stats_csv: cannot open " + path);
  f << "variant,K,W,C,t,layout,true_entries,per_query_max\n";
  f << variant_name(spec.variant) << "," << spec.K << "," << spec.W << ","
    << (spec.C == kNoChunking ? std::string("inf") : std::to_string(spec.C)) << "," << t << ","
    << (layout == Layout::Interleaved ? "interleaved" : "grouped") << "," << s.true_entries
    << "," << s.per_query_max << "\n";
}

}  // namespace phd
