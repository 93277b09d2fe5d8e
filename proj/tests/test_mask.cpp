#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "mask_oracle.hpp"
#include "phd/mask.hpp"

using namespace phd;
using phd::testing::oracle_mask;
using phd::testing::oracle_mask_fast;

namespace {

std::vector<MaskSpec> grid_specs(int64_t max_k, const std::vector<int64_t>& ws,
                                 const std::vector<int64_t>& cs) {
  std::vector<MaskSpec> specs;
  specs.push_back({MaskVariant::Vanilla, 1, 0, kNoChunking});
  for (int64_t k = 1; k <= max_k; ++k) {
    specs.push_back({MaskVariant::NaiveRepeat, k, 0, kNoChunking});
    specs.push_back({MaskVariant::Phd, k, 0, kNoChunking});
    for (int64_t w : ws) {
      specs.push_back({MaskVariant::PhdSwa, k, w, kNoChunking});
      for (int64_t c : cs) specs.push_back({MaskVariant::PhdCswa, k, w, c});
    }
  }
  return specs;
}

}  // namespace

TEST_CASE("is_attendable: base rule for a PHD copy-2 query") {
  MaskSpec spec{MaskVariant::Phd, 2, 0, kNoChunking};
  CHECK(is_attendable(spec, 2, {2, 2}, {1, 1}));
  CHECK(is_attendable(spec, 2, {2, 2}, {2, 1}));
  CHECK(is_attendable(spec, 2, {2, 2}, {2, 2}));
  CHECK_FALSE(is_attendable(spec, 2, {2, 2}, {1, 2}));
}

TEST_CASE("is_attendable: the first token attends only itself") {
  for (MaskSpec spec : grid_specs(3, {0, 2}, {4})) {
    const int64_t t = 4;
    CHECK(is_attendable(spec, t, {1, 1}, {1, 1}));
    for (int64_t n = 1; n <= t; ++n)
      for (int64_t j = 1; j <= spec.K; ++j)
        if (!(n == 1 && j == 1)) CHECK_FALSE(is_attendable(spec, t, {1, 1}, {n, j}));
  }
}

TEST_CASE("is_attendable: sliding window keeps the most recent hidden tokens") {
  MaskSpec spec{MaskVariant::PhdSwa, 2, 1, kNoChunking};
  CHECK(is_attendable(spec, 3, {3, 2}, {2, 2}));
  CHECK_FALSE(is_attendable(spec, 3, {3, 2}, {1, 2}));
}

TEST_CASE("is_attendable: out-of-range coordinates are rejected") {
  MaskSpec spec{MaskVariant::Phd, 2, 0, kNoChunking};
  CHECK_THROWS_AS(is_attendable(spec, 3, {4, 1}, {1, 1}), ContractError);
  CHECK_THROWS_AS(is_attendable(spec, 3, {1, 1}, {1, 3}), ContractError);
}

TEST_CASE("build_mask: frozen entry counts") {
  CHECK(build_mask({MaskVariant::Vanilla, 1, 0, kNoChunking}, 3, Layout::Interleaved)
            .count_true() == 6);
  CHECK(build_mask({MaskVariant::Phd, 2, 0, kNoChunking}, 3, Layout::Interleaved).count_true() ==
        15);
  CHECK(build_mask({MaskVariant::NaiveRepeat, 2, 0, kNoChunking}, 3, Layout::Interleaved)
            .count_true() == 21);
}

TEST_CASE("layout_permutation: identity for K=1, hand enumeration for K=3 t=2, round trip") {
  LayoutMap id = layout_permutation(5, 1);
  for (int64_t i = 0; i < 5; ++i) CHECK(id.grouped_to_interleaved[static_cast<size_t>(i)] == i);

  LayoutMap m = layout_permutation(2, 3);
  CHECK(m.grouped_to_interleaved == std::vector<int64_t>{0, 3, 1, 2, 4, 5});

  for (int64_t t = 1; t <= 6; ++t)
    for (int64_t k = 1; k <= 4; ++k) {
      LayoutMap lm = layout_permutation(t, k);
      for (int64_t i = 0; i < t * k; ++i) {
        CHECK(lm.interleaved_to_grouped[static_cast<size_t>(
                  lm.grouped_to_interleaved[static_cast<size_t>(i)])] == i);
      }
      // originals occupy grouped indices [0, t)
      for (int64_t g = 0; g < t; ++g)
        CHECK(lm.grouped_to_interleaved[static_cast<size_t>(g)] == g * k);
    }
}

TEST_CASE("build_mask: grouped mask is the permuted interleaved mask") {
  for (MaskSpec spec : grid_specs(3, {0, 1, 4}, {4, 8})) {
    for (int64_t t : {1, 2, 5, 9}) {
      BoolMatrix inter = build_mask(spec, t, Layout::Interleaved);
      BoolMatrix grouped = build_mask(spec, t, Layout::Grouped);
      LayoutMap lm = layout_permutation(t, spec.K);
      bool same = true;
      for (int64_t q = 0; q < t * spec.K && same; ++q)
        for (int64_t k = 0; k < t * spec.K && same; ++k)
          same = grouped.at(q, k) ==
                 inter.at(lm.grouped_to_interleaved[static_cast<size_t>(q)],
                          lm.grouped_to_interleaved[static_cast<size_t>(k)]);
      CHECK(same);
    }
  }
}

TEST_CASE("mask matches the brute-force oracle over the full grid") {
  for (MaskSpec spec : grid_specs(5, {0, 1, 4, 16}, {4, 8})) {
    for (int64_t t : {1, 2, 3, 7, 16}) {
      BoolMatrix got = build_mask(spec, t, Layout::Interleaved);
      BoolMatrix want = oracle_mask(spec, t, Layout::Interleaved);
      CHECK_MESSAGE(got == want, "variant=", variant_name(spec.variant), " K=", spec.K,
                    " W=", spec.W, " C=", spec.C, " t=", t);
      // the memoized oracle used on large grids agrees with the per-pair one
      CHECK(oracle_mask_fast(spec, t) == want);
    }
  }
}

TEST_CASE("mask_stats: frozen examples and closed form vs enumeration") {
  CHECK(mask_stats({MaskVariant::Vanilla, 1, 0, kNoChunking}, 3).true_entries == 6);
  CHECK(mask_stats({MaskVariant::Phd, 2, 0, kNoChunking}, 3).true_entries == 15);
  CHECK(mask_stats({MaskVariant::NaiveRepeat, 2, 0, kNoChunking}, 3).true_entries == 21);

  for (MaskSpec spec : grid_specs(5, {0, 1, 4, 8}, {4, 8})) {
    for (int64_t t : {1, 2, 5, 13, 32}) {
      BoolMatrix m = build_mask(spec, t, Layout::Interleaved);
      MaskStats s = mask_stats(spec, t);
      CHECK(s.true_entries == m.count_true());
      int64_t widest = 0;
      for (int64_t q = 0; q < m.rows; ++q) {
        int64_t row = 0;
        for (int64_t k = 0; k < m.cols; ++k) row += m.at(q, k);
        widest = std::max(widest, row);
      }
      CHECK(s.per_query_max == widest);
    }
  }
}

TEST_CASE("grouped_attention_ranges: entry totals match mask_stats") {
  for (MaskSpec spec : grid_specs(5, {0, 1, 4, 16}, {4, 8})) {
    for (int64_t t : {1, 2, 7, 16}) {
      AttnRanges r = grouped_attention_ranges(spec, t);
      CHECK(r.total_entries() == mask_stats(spec, t).true_entries);
      // and each query's gathered key set equals its grouped mask row
      BoolMatrix grouped = build_mask(spec, t, Layout::Grouped);
      bool same = true;
      for (int64_t q = 0; q < t * spec.K && same; ++q) {
        for (int64_t k = 0; k < t * spec.K && same; ++k) {
          const bool in_ranges = k < r.orig_end[static_cast<size_t>(q)] ||
                                 (k >= r.hid_begin[static_cast<size_t>(q)] &&
                                  k < r.hid_end[static_cast<size_t>(q)]);
          same = in_ranges == (grouped.at(q, k) != 0);
        }
      }
      CHECK_MESSAGE(same, "variant=", variant_name(spec.variant), " K=", spec.K, " W=", spec.W,
                    " C=", spec.C, " t=", t);
    }
  }
}

TEST_CASE("validate_spec: accepted, degenerate, rejected") {
  CHECK(validate_spec({MaskVariant::Phd, 2, 0, kNoChunking}).ok);

  SpecValidation swa0 = validate_spec({MaskVariant::PhdSwa, 2, 0, kNoChunking});
  CHECK(swa0.ok);
  REQUIRE(!swa0.notes.empty());
  CHECK(swa0.notes.front().find("degenerates to PHD") != std::string::npos);

  SpecValidation bad = validate_spec({MaskVariant::PhdCswa, 2, 16, 0});
  CHECK_FALSE(bad.ok);
  bool mentions_c = false;
  for (const auto& e : bad.errors) mentions_c = mentions_c || e.find("C ≥ 1") != std::string::npos;
  CHECK(mentions_c);

  CHECK_FALSE(validate_spec({MaskVariant::Vanilla, 2, 0, kNoChunking}).ok);
  CHECK_FALSE(validate_spec({MaskVariant::Phd, 2, 3, kNoChunking}).ok);
  CHECK_FALSE(validate_spec({MaskVariant::Phd, 0, 0, kNoChunking}).ok);
}

TEST_CASE("degeneracies: K=1 equals Vanilla for every variant") {
  const MaskSpec vanilla{MaskVariant::Vanilla, 1, 0, kNoChunking};
  for (int64_t t = 1; t <= 64; t += 7) {
    BoolMatrix want = build_mask(vanilla, t, Layout::Interleaved);
    for (MaskVariant v : {MaskVariant::NaiveRepeat, MaskVariant::Phd, MaskVariant::PhdSwa,
                          MaskVariant::PhdCswa}) {
      MaskSpec spec{v, 1, v == MaskVariant::PhdSwa || v == MaskVariant::PhdCswa ? 4 : 0,
                    v == MaskVariant::PhdCswa ? 8 : kNoChunking};
      CHECK(build_mask(spec, t, Layout::Interleaved) == want);
    }
  }
}

TEST_CASE("degeneracies: W=0 SWA equals PHD; C >= t CSWA equals SWA") {
  for (int64_t k = 2; k <= 5; ++k)
    for (int64_t t : {1, 3, 8, 21, 64}) {
      CHECK(build_mask({MaskVariant::PhdSwa, k, 0, kNoChunking}, t, Layout::Interleaved) ==
            build_mask({MaskVariant::Phd, k, 0, kNoChunking}, t, Layout::Interleaved));
      for (int64_t w : {1, 4, 16})
        CHECK(build_mask({MaskVariant::PhdCswa, k, w, t}, t, Layout::Interleaved) ==
              build_mask({MaskVariant::PhdSwa, k, w, kNoChunking}, t, Layout::Interleaved));
    }
}

TEST_CASE("monotonicity: PHD ⊆ PHD_CSWA ⊆ PHD_SWA ⊆ NaiveRepeat") {
  for (int64_t k = 2; k <= 4; ++k)
    for (int64_t w : {1, 4})
      for (int64_t c : {4, 8})
        for (int64_t t : {2, 7, 16}) {
          BoolMatrix phd = build_mask({MaskVariant::Phd, k, 0, kNoChunking}, t, Layout::Interleaved);
          BoolMatrix cswa = build_mask({MaskVariant::PhdCswa, k, w, c}, t, Layout::Interleaved);
          BoolMatrix swa = build_mask({MaskVariant::PhdSwa, k, w, kNoChunking}, t, Layout::Interleaved);
          BoolMatrix naive =
              build_mask({MaskVariant::NaiveRepeat, k, 0, kNoChunking}, t, Layout::Interleaved);
          for (size_t i = 0; i < phd.v.size(); ++i) {
            CHECK(phd.v[i] <= cswa.v[i]);
            CHECK(cswa.v[i] <= swa.v[i]);
            CHECK(swa.v[i] <= naive.v[i]);
          }
        }
}

TEST_CASE("every query can attend itself; no fully masked rows") {
  for (MaskSpec spec : grid_specs(4, {0, 1, 4}, {4}))
    for (int64_t t : {1, 2, 9}) {
      BoolMatrix m = build_mask(spec, t, Layout::Interleaved);
      for (int64_t q = 0; q < m.rows; ++q) CHECK(m.at(q, q) == 1);
    }
}

TEST_CASE("spec_name follows the type-K-W-C convention") {
  CHECK(spec_name({MaskVariant::Vanilla, 1, 0, kNoChunking}) == "Vanilla-1");
  CHECK(spec_name({MaskVariant::PhdCswa, 3, 16, 32}) == "PHD-CSWA-3-16-32");
  CHECK(spec_name({MaskVariant::PhdSwa, 2, 16, kNoChunking}) == "PHD-SWA-2-16-inf");
}
