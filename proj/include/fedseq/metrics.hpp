#pragma once

#include <cstdint>
#include <span>

namespace fedseq {

// Micro-averaged AP over a flat (example x label) score array. Ranks by
// descending score with ties broken by ascending input index; AP is the mean
// precision@k over the positive items. Throws std::invalid_argument when the
// arrays mismatch, are empty, hold non-finite scores, or have no positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct Summary {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * s / sqrt(n), sample std (ddof = 1)
  int n = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace fedseq
