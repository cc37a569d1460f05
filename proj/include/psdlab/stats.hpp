#pragma once

#include <span>
#include <vector>

namespace psdlab {

// Fractional ranks (1-based); tied values share the mean of their ranks.
std::vector<double> fractionalRanks(std::span<const double> values);

double pearson(std::span<const double> x, std::span<const double> y);

// Pearson correlation of fractional ranks. Returns 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

double mean(std::span<const double> values);

}  // namespace psdlab
