#pragma once

#include <span>
#include <vector>

namespace magekt::metrics {

struct EvalResult {
    double auc = 0.0;
    double acc = 0.0;
    std::size_t n = 0;
    double threshold = 0.5;
};

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties credited 0.5. O(n log n) via average ranks.
/// Throws std::invalid_argument on length mismatch or single-class labels.
double auc(std::span<const int> labels, std::span<const double> scores);

/// Fraction of positions where (score >= threshold) equals the label.
double acc(std::span<const int> labels, std::span<const double> scores, double threshold = 0.5);

EvalResult evaluate(std::span<const int> labels, std::span<const double> scores, double threshold = 0.5);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation (Pearson correlation of average ranks).
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace magekt::metrics
