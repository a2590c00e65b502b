#include "gbt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "gbt/rng.hpp"

namespace gbt {

namespace {

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double norm_pdf(double z) {
    const double inv_sqrt_2pi = 0.3989422804014326779399461;
    return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

// 15-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr double kGlNodes[15] = {
    -0.9879925180204854, -0.9372733924007060, -0.8482065834104272,
    -0.7244177313601700, -0.5709721726085388, -0.3941513470775634,
    -0.2011940939974345, 0.0,                 0.2011940939974345,
    0.3941513470775634,  0.5709721726085388,  0.7244177313601700,
    0.8482065834104272,  0.9372733924007060,  0.9879925180204854};
constexpr double kGlWeights[15] = {
    0.0307532419961173, 0.0703660474881081, 0.1071592204671719,
    0.1395706779261543, 0.1662692058169939, 0.1861610000155622,
    0.1984314853271116, 0.2025782419255613, 0.1984314853271116,
    0.1861610000155622, 0.1662692058169939, 0.1395706779261543,
    0.1071592204671719, 0.0703660474881081, 0.0307532419961173};

double gl15(const std::function<double(double)>& f, double a, double b) {
    const double mid = 0.5 * (a + b);
    const double half = 0.5 * (b - a);
    double acc = 0.0;
    for (int i = 0; i < 15; ++i)
        acc += kGlWeights[i] * f(mid + half * kGlNodes[i]);
    return acc * half;
}

double adaptive_gl(const std::function<double(double)>& f, double a, double b,
                   double tol, int depth = 0) {
    const double whole = gl15(f, a, b);
    const double mid = 0.5 * (a + b);
    const double left = gl15(f, a, mid);
    const double right = gl15(f, mid, b);
    if (depth >= 12 || std::abs(left + right - whole) <= tol)
        return left + right;
    return adaptive_gl(f, a, mid, tol * 0.5, depth + 1) +
           adaptive_gl(f, mid, b, tol * 0.5, depth + 1);
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0))
        throw std::invalid_argument("ibeta: a, b must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;

    // Continued fraction (modified Lentz); converges fastest for
    // x < (a + 1) / (a + b + 2), otherwise use the symmetry identity.
    if (x > (a + 1.0) / (a + b + 2.0))
        return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);

    const double ln_front = a * std::log(x) + b * std::log1p(-x) -
                            std::log(a) - std::lgamma(a) - std::lgamma(b) +
                            std::lgamma(a + b);
    const double front = std::exp(ln_front);

    const double tiny = 1e-300;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double result = d;
    for (int m = 1; m <= 400; ++m) {
        const double dm = static_cast<double>(m);
        // even step
        double num = dm * (b - dm) * x / ((a + 2.0 * dm - 1.0) * (a + 2.0 * dm));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        result *= d * c;
        // odd step
        num = -(a + dm) * (a + b + dm) * x /
              ((a + 2.0 * dm) * (a + 2.0 * dm + 1.0));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        const double delta = d * c;
        result *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return front * result;
}

double f_cdf(double f, double df1, double df2) {
    if (f <= 0.0) return 0.0;
    const double x = df1 * f / (df1 * f + df2);
    return regularized_incomplete_beta(df1 / 2.0, df2 / 2.0, x);
}

double student_t_cdf(double t, double df) {
    const double x = df / (df + t * t);
    const double half_tail =
        0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - half_tail : half_tail;
}

double studentized_range_cdf(double q, int k, double df) {
    if (k < 2) throw std::invalid_argument("studentized_range_cdf: k < 2");
    if (!(df > 0.0))
        throw std::invalid_argument("studentized_range_cdf: df <= 0");
    if (q <= 0.0) return 0.0;

    // P(range of k standard normals <= r)
    auto range_cdf = [k](double r) {
        if (r <= 0.0) return 0.0;
        auto integrand = [k, r](double z) {
            return norm_pdf(z) *
                   std::pow(norm_cdf(z) - norm_cdf(z - r),
                            static_cast<double>(k - 1));
        };
        const double lo = -8.5, hi = 8.5 + r;
        return std::min(1.0, k * adaptive_gl(integrand, lo, hi, 1e-7));
    };

    // Scale density of s = chi_df / sqrt(df).
    const double ln_norm = (1.0 - df / 2.0) * std::log(2.0) -
                           std::lgamma(df / 2.0) +
                           (df / 2.0) * std::log(df);
    auto scale_density = [df, ln_norm](double s) {
        if (s <= 0.0) return 0.0;
        return std::exp(ln_norm + (df - 1.0) * std::log(s) - df * s * s / 2.0);
    };

    const double s_hi = 1.0 + 12.0 / std::sqrt(df);
    auto outer = [&](double s) { return scale_density(s) * range_cdf(q * s); };
    const double value = adaptive_gl(outer, 1e-10, s_hi, 1e-6);
    return std::clamp(value, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

namespace {

struct AnovaDecomposition {
    int k = 0;
    std::int64_t total_n = 0;
    double msb = 0.0;
    double msw = 0.0;
    std::vector<double> means;
    std::vector<std::int64_t> sizes;
};

AnovaDecomposition decompose(const std::vector<SampleGroup>& groups) {
    if (groups.size() < 2)
        throw std::invalid_argument("anova: need at least 2 groups");
    AnovaDecomposition d;
    d.k = static_cast<int>(groups.size());
    double grand_sum = 0.0;
    for (const auto& g : groups) {
        if (g.values.size() < 2)
            throw std::invalid_argument("anova: each group needs n >= 2");
        for (double v : g.values) {
            if (!std::isfinite(v))
                throw std::invalid_argument("anova: non-finite value");
            grand_sum += v;
        }
        double sum = 0.0;
        for (double v : g.values) sum += v;
        d.means.push_back(sum / static_cast<double>(g.values.size()));
        d.sizes.push_back(static_cast<std::int64_t>(g.values.size()));
        d.total_n += static_cast<std::int64_t>(g.values.size());
    }
    if (d.total_n - d.k < 1)
        throw std::invalid_argument("anova: N - k must be >= 1");
    const double grand_mean = grand_sum / static_cast<double>(d.total_n);

    double ssb = 0.0, ssw = 0.0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const double dm = d.means[i] - grand_mean;
        ssb += static_cast<double>(d.sizes[i]) * dm * dm;
        for (double v : groups[i].values) {
            const double dv = v - d.means[i];
            ssw += dv * dv;
        }
    }
    d.msb = ssb / static_cast<double>(d.k - 1);
    d.msw = ssw / static_cast<double>(d.total_n - d.k);
    return d;
}

}  // namespace

StatTestResult one_way_anova(const std::vector<SampleGroup>& groups) {
    const AnovaDecomposition d = decompose(groups);
    StatTestResult r;
    r.test = "anova";
    r.df1 = static_cast<double>(d.k - 1);
    r.df2 = static_cast<double>(d.total_n - d.k);
    if (d.msw == 0.0) {
        if (d.msb == 0.0) {
            r.statistic = 0.0;
            r.p_value = 1.0;
        } else {
            r.statistic = std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
            r.exact_separation = true;
        }
        return r;
    }
    r.statistic = d.msb / d.msw;
    r.p_value = 1.0 - f_cdf(r.statistic, r.df1, r.df2);
    return r;
}

StatTestResult tukey_hsd(const std::vector<SampleGroup>& groups) {
    const AnovaDecomposition d = decompose(groups);
    StatTestResult r;
    r.test = "tukey_hsd";
    r.df1 = static_cast<double>(d.k);
    r.df2 = static_cast<double>(d.total_n - d.k);
    r.exact_separation = d.msw == 0.0;
    double max_q = 0.0;
    for (std::size_t i = 0; i < groups.size(); ++i)
        for (std::size_t j = i + 1; j < groups.size(); ++j) {
            PairComparison pair;
            pair.a = groups[i].name;
            pair.b = groups[j].name;
            const double diff = std::abs(d.means[i] - d.means[j]);
            if (d.msw == 0.0) {
                pair.statistic = diff == 0.0
                                     ? 0.0
                                     : std::numeric_limits<double>::infinity();
                pair.p_value = diff == 0.0 ? 1.0 : 0.0;
            } else {
                const double se = std::sqrt(
                    (d.msw / 2.0) *
                    (1.0 / static_cast<double>(d.sizes[i]) +
                     1.0 / static_cast<double>(d.sizes[j])));
                pair.statistic = diff / se;
                pair.p_value = 1.0 - studentized_range_cdf(pair.statistic, d.k,
                                                           r.df2);
            }
            max_q = std::max(max_q, pair.statistic);
            r.pairs.push_back(std::move(pair));
        }
    r.statistic = max_q;
    double min_p = 1.0;
    for (const auto& p : r.pairs) min_p = std::min(min_p, p.p_value);
    r.p_value = min_p;
    return r;
}

StatTestResult paired_permutation_test(std::span<const double> a,
                                       std::span<const double> b,
                                       std::int64_t n_perm, std::uint64_t seed,
                                       Alternative alternative,
                                       bool force_sampled) {
    if (a.size() != b.size())
        throw std::invalid_argument("permutation: length mismatch");
    if (a.empty()) throw std::invalid_argument("permutation: empty samples");

    const std::size_t n = a.size();
    std::vector<double> diffs(n);
    double t_obs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        diffs[i] = a[i] - b[i];
        t_obs += diffs[i];
    }
    t_obs /= static_cast<double>(n);

    // Tolerance keeps mathematically tied statistics counted as extreme.
    const double tie_eps = 1e-12 * (1.0 + std::abs(t_obs));
    auto is_extreme = [&](double t) {
        switch (alternative) {
            case Alternative::two_sided:
                return std::abs(t) >= std::abs(t_obs) - tie_eps;
            case Alternative::greater:
                return t >= t_obs - tie_eps;
            case Alternative::less:
                return t <= t_obs + tie_eps;
        }
        return false;
    };

    StatTestResult r;
    r.test = "paired_permutation";
    r.statistic = t_obs;
    r.seed = seed;

    if (n <= 20 && !force_sampled) {
        const std::uint64_t total = 1ULL << n;
        std::uint64_t count = 0;
        for (std::uint64_t pattern = 0; pattern < total; ++pattern) {
            double t = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                t += (pattern >> i) & 1 ? -diffs[i] : diffs[i];
            t /= static_cast<double>(n);
            if (is_extreme(t)) ++count;
        }
        r.exhaustive = true;
        r.permutations = static_cast<std::int64_t>(total);
        r.p_value = static_cast<double>(count) / static_cast<double>(total);
    } else {
        if (n_perm < 1)
            throw std::invalid_argument("permutation: n_perm must be >= 1");
        Rng rng(seed);
        std::int64_t count = 0;
        for (std::int64_t p = 0; p < n_perm; ++p) {
            double t = 0.0;
            std::size_t i = 0;
            while (i < n) {
                std::uint64_t bits = rng.next();
                for (int bit = 0; bit < 64 && i < n; ++bit, ++i)
                    t += (bits >> bit) & 1 ? -diffs[i] : diffs[i];
            }
            t /= static_cast<double>(n);
            if (is_extreme(t)) ++count;
        }
        r.exhaustive = false;
        r.permutations = n_perm;
        r.p_value = static_cast<double>(1 + count) /
                    static_cast<double>(1 + n_perm);
    }
    return r;
}

}  // namespace gbt
