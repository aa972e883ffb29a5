#pragma once

// Independent reference implementations used to cross-check library results.

#include <string>
#include <vector>

#include "mmchat/eval.hpp"

namespace mmchat::testing {

struct PairTally {
  std::size_t wins = 0, ties = 0, losses = 0;
};

// Pairwise outcome by sweeping every rank threshold: a response clears
// threshold k when its rank is at most k, and an unsuccessful response only
// clears the worst rank on its sheet. Whoever clears a threshold the other
// misses wins the item.
inline PairTally brute_force_pairwise(const std::vector<RankedItem>& items,
                                      const std::string& subject, const std::string& rival) {
  PairTally t;
  for (const auto& item : items) {
    int s = -1, r = -1;
    bool s_fail = false, r_fail = false;
    int worst = 0;
    for (const auto& resp : item.responses) {
      if (resp.rank > worst) worst = resp.rank;
    }
    for (const auto& resp : item.responses) {
      if (resp.model == subject) {
        s = resp.rank;
        s_fail = resp.unsuccessful;
      }
      if (resp.model == rival) {
        r = resp.rank;
        r_fail = resp.unsuccessful;
      }
    }
    if (s < 1 || r < 1) continue;
    int s_better = 0, r_better = 0;
    for (int k = 1; k <= worst; ++k) {
      const bool s_at_or_above = (s_fail ? worst : s) <= k;
      const bool r_at_or_above = (r_fail ? worst : r) <= k;
      if (s_at_or_above && !r_at_or_above) ++s_better;
      if (r_at_or_above && !s_at_or_above) ++r_better;
    }
    if (s_better > 0 && r_better == 0) {
      ++t.wins;
    } else if (r_better > 0 && s_better == 0) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  return t;
}

}  // namespace mmchat::testing
