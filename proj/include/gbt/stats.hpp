#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gbt {

struct SampleGroup {
    std::string name;
    std::vector<double> values;
};

struct PairComparison {
    std::string a;
    std::string b;
    double statistic = 0.0;  // studentized range q for Tukey
    double p_value = 1.0;
};

struct StatTestResult {
    std::string test;  // "anova" | "tukey_hsd" | "paired_permutation"
    double statistic = 0.0;
    double df1 = 0.0;
    double df2 = 0.0;
    double p_value = 1.0;
    bool exact_separation = false;
    std::vector<PairComparison> pairs;
    std::int64_t permutations = 0;
    std::uint64_t seed = 0;
    bool exhaustive = false;
};

/// One-way fixed-effects ANOVA. All-identical data gives F = 0, p = 1;
/// zero within-group variance with distinct means sets the exact-separation
/// flag with p = 0.
StatTestResult one_way_anova(const std::vector<SampleGroup>& groups);

/// Tukey-Kramer HSD over every unordered pair, p-values from the
/// studentized range distribution.
StatTestResult tukey_hsd(const std::vector<SampleGroup>& groups);

enum class Alternative { two_sided, greater, less };

/// Sign-flip permutation test on paired differences. Exhaustive over all
/// 2^n assignments when n <= 20, otherwise n_perm seeded draws with the
/// (1 + count) / (1 + n_perm) estimate. force_sampled selects the Monte
/// Carlo path regardless of n (sampled-vs-exhaustive agreement checks).
StatTestResult paired_permutation_test(std::span<const double> a,
                                       std::span<const double> b,
                                       std::int64_t n_perm, std::uint64_t seed,
                                       Alternative alternative,
                                       bool force_sampled = false);

// Special functions, exposed for the oracle-backed tests.

/// Regularized incomplete beta I_x(a, b).
double regularized_incomplete_beta(double a, double b, double x);

double f_cdf(double f, double df1, double df2);
double student_t_cdf(double t, double df);

/// P(Q <= q) for the studentized range of k groups with df error degrees of
/// freedom, by nested adaptive Gauss-Legendre quadrature (absolute
/// tolerance ~1e-4 on the result).
double studentized_range_cdf(double q, int k, double df);

}  // namespace gbt
