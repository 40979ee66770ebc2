#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfda/engine.hpp"
#include "sfda/segnet.hpp"
#include "sfda/synthdata.hpp"

namespace sfda {

/// Per-image pooled bottleneck features (spatial mean per channel).
std::vector<std::vector<double>> bottleneck_features(const Segmentor<float>& net,
                                                     const Dataset& ds, EvalNorm norm,
                                                     std::size_t batch = 12);

struct PruneStudy {
  double fraction = 10.0;
  std::size_t pruned_channels = 0;
  double dice_full = 0.0;
  double dice_small = 0.0;  // after zeroing the smallest-|gamma_src| channels
  double dice_large = 0.0;  // after zeroing the largest-|gamma_src| channels
  double logit_change_small = 0.0;  // mean |logit difference| against the full model
  double logit_change_large = 0.0;
  std::string warning;

  double drop_small() const { return dice_full - dice_small; }
  double drop_large() const { return dice_full - dice_large; }
};

PruneStudy prune_study(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                       double fraction = 10.0, std::size_t batch = 12);

struct DomainDistanceStudy {
  double before = 0.0;  // source model on both domains
  double after = 0.0;   // source model on source, adapted model on target
};

/// Reads source images: a post-hoc diagnostic, never part of adaptation.
DomainDistanceStudy domain_distance_study(const Segmentor<float>& source_model,
                                          const Segmentor<float>& adapted,
                                          const Dataset& source, const Dataset& target,
                                          std::uint64_t seed, std::size_t batch = 12);

// Population variance of the last `window` entries (all of them if fewer).
double tail_variance(const std::vector<double>& values, std::size_t window);

}  // namespace sfda
