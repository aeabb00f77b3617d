#pragma once

// Agreement and association statistics, the Williams test for dependent
// correlations, percentile bootstrap intervals and zero-inflated negative
// binomial regression.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <nlohmann/json.hpp>

#include "epvsq/error.hpp"
#include "epvsq/rng.hpp"

namespace epvsq::stats {

namespace detail {

inline void require_pairs(std::span<const double> x, std::span<const double> y, const char* op,
                          std::size_t min_n = 3) {
  if (x.size() != y.size()) throw ValidationError(std::string(op) + ": inputs differ in length");
  if (x.size() < min_n) throw ValidationError(std::string(op) + ": needs at least " + std::to_string(min_n) + " pairs");
}

inline double mean(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

}  // namespace detail

inline double pearson(std::span<const double> x, std::span<const double> y) {
  detail::require_pairs(x, y, "pearson");
  const double mx = detail::mean(x), my = detail::mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw DegenerateError("pearson: correlation undefined for a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> mid_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  detail::require_pairs(x, y, "spearman");
  const auto rx = mid_ranks(x), ry = mid_ranks(y);
  return pearson(rx, ry);
}

inline double mse(std::span<const double> pred, std::span<const double> label) {
  detail::require_pairs(pred, label, "mse", 1);
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - label[i]) * (pred[i] - label[i]);
  return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// ICC
// ---------------------------------------------------------------------------

enum class IccKind {
  AbsoluteAgreement,  // ICC(2,1)
  Consistency,        // ICC(3,1)
};

inline std::string_view to_string(IccKind k) { return k == IccKind::AbsoluteAgreement ? "icc2_1" : "icc3_1"; }

inline IccKind parse_icc_kind(std::string_view s) {
  if (s == "icc2_1" || s == "ICC(2,1)" || s == "absolute") return IccKind::AbsoluteAgreement;
  if (s == "icc3_1" || s == "ICC(3,1)" || s == "consistency") return IccKind::Consistency;
  throw ConfigError("unknown ICC variant '" + std::string(s) + "'");
}

// ratings: n subjects (rows) by k raters (columns), row-major.
inline double icc(std::span<const double> ratings, std::size_t n, std::size_t k,
                  IccKind kind = IccKind::AbsoluteAgreement) {
  if (n < 3 || k < 2) throw ValidationError("icc: needs at least 3 subjects and 2 raters");
  if (ratings.size() != n * k) throw ValidationError("icc: table size does not match n x k");
  const double grand = detail::mean(ratings);
  std::vector<double> row(n, 0.0), col(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      row[i] += ratings[i * k + j];
      col[j] += ratings[i * k + j];
    }
  }
  double ssr = 0, ssc = 0, sst = 0;
  for (std::size_t i = 0; i < n; ++i) ssr += (row[i] / k - grand) * (row[i] / k - grand);
  for (std::size_t j = 0; j < k; ++j) ssc += (col[j] / n - grand) * (col[j] / n - grand);
  for (double v : ratings) sst += (v - grand) * (v - grand);
  ssr *= static_cast<double>(k);
  ssc *= static_cast<double>(n);
  if (sst == 0) throw DegenerateError("icc: zero total variance");
  const double sse = std::max(0.0, sst - ssr - ssc);
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  const double msr = ssr / (dn - 1), msc = ssc / (dk - 1), mse_w = sse / ((dn - 1) * (dk - 1));
  if (kind == IccKind::Consistency) {
    const double den = msr + (dk - 1) * mse_w;
    if (den == 0) throw DegenerateError("icc: zero between-subject and residual variance");
    return (msr - mse_w) / den;
  }
  const double den = msr + (dk - 1) * mse_w + dk * (msc - mse_w) / dn;
  if (den == 0) throw DegenerateError("icc: zero variance denominator");
  return (msr - mse_w) / den;
}

inline double icc(std::span<const double> a, std::span<const double> b, IccKind kind = IccKind::AbsoluteAgreement) {
  detail::require_pairs(a, b, "icc");
  std::vector<double> t(a.size() * 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    t[2 * i] = a[i];
    t[2 * i + 1] = b[i];
  }
  return icc(t, a.size(), 2, kind);
}

// ---------------------------------------------------------------------------
// Williams test
// ---------------------------------------------------------------------------

struct WilliamsResult {
  double t = 0;
  double df = 0;
  double p = 1;
};

// Compares r13 against r23, two correlations with variable 1 in common, where
// r12 correlates the two competitors.
inline WilliamsResult williams_test(double r13, double r23, double r12, std::size_t n) {
  for (double r : {r13, r23, r12}) {
    if (!(std::abs(r) < 1)) throw ValidationError("williams_test: correlations must lie in (-1, 1)");
  }
  if (n <= 3) throw ValidationError("williams_test: needs n > 3");
  const double det = 1 - r12 * r12 - r13 * r13 - r23 * r23 + 2 * r12 * r13 * r23;
  if (!(det > 0)) throw DegenerateError("williams_test: correlation matrix is singular");
  const double dn = static_cast<double>(n);
  const double rbar = (r13 + r23) / 2;
  const double denom = 2 * ((dn - 1) / (dn - 3)) * det + rbar * rbar * std::pow(1 - r12, 3);
  WilliamsResult out;
  out.df = dn - 3;
  out.t = (r13 - r23) * std::sqrt((dn - 1) * (1 + r12) / denom);
  boost::math::students_t dist(out.df);
  out.p = std::min(1.0, 2 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t))));
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct Interval {
  double lower = 0, upper = 0;
  double estimate = 0;
  double level = 0.95;
  int reps = 0;
  std::uint64_t seed = 0;
};

using PairMetric = std::function<double(std::span<const double>, std::span<const double>)>;

// Percentile bootstrap over resampled pairs. Replicates where the metric is
// undefined (e.g. a constant resample) are skipped.
inline Interval bootstrap_ci(const PairMetric& metric, std::span<const double> x, std::span<const double> y, int reps,
                             double level, std::uint64_t seed) {
  detail::require_pairs(x, y, "bootstrap_ci", 1);
  if (reps < 100) throw ValidationError("bootstrap_ci: needs at least 100 replicates");
  if (!(level > 0 && level < 1)) throw ValidationError("bootstrap_ci: level must lie in (0, 1)");
  Interval out;
  out.level = level;
  out.reps = reps;
  out.seed = seed;
  out.estimate = metric(x, y);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(reps));
  std::vector<double> bx(x.size()), by(y.size());
  for (int r = 0; r < reps; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t j = rng.below(x.size());
      bx[i] = x[j];
      by[i] = y[j];
    }
    try {
      stats.push_back(metric(bx, by));
    } catch (const DegenerateError&) {
    }
  }
  if (stats.empty()) throw DegenerateError("bootstrap_ci: metric undefined on every replicate");
  std::sort(stats.begin(), stats.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(stats.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, stats.size() - 1);
    return stats[lo] + (pos - static_cast<double>(lo)) * (stats[hi] - stats[lo]);
  };
  out.lower = std::min(quantile((1 - level) / 2), out.estimate);
  out.upper = std::max(quantile(1 - (1 - level) / 2), out.estimate);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string method;
  double pearson = 0, spearman = 0, icc = 0, mse = 0;
  std::size_t n = 0;
  IccKind icc_kind = IccKind::AbsoluteAgreement;
  std::optional<Interval> pearson_ci, spearman_ci, icc_ci, mse_ci;
};

// A constant predictor (e.g. a collapsed network) leaves correlations and ICC
// undefined; the report carries NaN for those instead of aborting the run.
template <class F>
auto nan_if_degenerate(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DegenerateError&) {
    if constexpr (std::is_same_v<decltype(f()), double>) {
      return std::numeric_limits<double>::quiet_NaN();
    } else {
      return {};
    }
  }
}

inline EvalReport evaluate(std::string method, std::span<const double> pred, std::span<const double> label,
                           IccKind kind = IccKind::AbsoluteAgreement) {
  EvalReport r;
  r.method = std::move(method);
  r.n = pred.size();
  r.icc_kind = kind;
  r.pearson = nan_if_degenerate([&] { return pearson(pred, label); });
  r.spearman = nan_if_degenerate([&] { return spearman(pred, label); });
  r.icc = nan_if_degenerate([&] { return icc(pred, label, kind); });
  r.mse = mse(pred, label);
  return r;
}

inline void add_bootstrap(EvalReport& r, std::span<const double> pred, std::span<const double> label, int reps,
                          double level, std::uint64_t seed) {
  const IccKind kind = r.icc_kind;
  auto ci = [&](auto metric) -> std::optional<Interval> {
    return nan_if_degenerate([&] { return std::optional(bootstrap_ci(metric, pred, label, reps, level, seed)); });
  };
  r.pearson_ci = ci([](auto a, auto b) { return pearson(a, b); });
  r.spearman_ci = ci([](auto a, auto b) { return spearman(a, b); });
  r.icc_ci = ci([kind](auto a, auto b) { return icc(a, b, kind); });
  r.mse_ci = ci([](auto a, auto b) { return mse(a, b); });
}

inline nlohmann::json to_json(const Interval& i) {
  return {{"lower", i.lower}, {"upper", i.upper}, {"estimate", i.estimate},
          {"level", i.level}, {"reps", i.reps},   {"seed", i.seed}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"method", r.method}, {"pearson", r.pearson}, {"spearman", r.spearman}, {"icc", r.icc},
                   {"icc_kind", to_string(r.icc_kind)}, {"mse", r.mse}, {"n", r.n}};
  if (r.pearson_ci) j["pearson_ci"] = to_json(*r.pearson_ci);
  if (r.spearman_ci) j["spearman_ci"] = to_json(*r.spearman_ci);
  if (r.icc_ci) j["icc_ci"] = to_json(*r.icc_ci);
  if (r.mse_ci) j["mse_ci"] = to_json(*r.mse_ci);
  return j;
}

// ---------------------------------------------------------------------------
// Zero-inflated negative binomial regression
// ---------------------------------------------------------------------------

struct ZinbOptions {
  int max_iterations = 500;        // EM and quasi-Newton iterations combined
  double gradient_tolerance = 1e-6;
  bool inflation_covariates = false;  // logit(pi) = gamma0 (+ covariates)
  std::size_t rate_covariate = 0;     // column reported as the per-decade rate ratio
  double decade = 10.0;
};

struct ZinbFit {
  std::vector<double> count_coef;      // intercept, slopes (log link)
  std::vector<double> count_se;
  std::vector<double> inflation_coef;  // intercept (, slopes) (logit link)
  std::vector<double> inflation_se;
  double dispersion = 0;               // NB size theta; variance mu + mu^2 / theta
  double log_likelihood = 0;
  std::vector<double> ll_trace;        // after every optimiser iteration
  int iterations = 0;
  double gradient_norm = 0;
  bool converged = false;
  double rate_ratio = 0;               // exp(decade * slope)
  double rate_ratio_lower = 0, rate_ratio_upper = 0;
};

namespace zinb_detail {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Problem {
  Mat x;  // n x p, first column ones
  Mat z;  // n x q, first column ones
  std::vector<double> y;
  std::vector<double> lgamma_y1;
};

// Parameter vector: beta (p), gamma (q), log theta.
inline double log_likelihood(const Problem& pr, const Vec& th, Vec* grad) {
  const Eigen::Index p = pr.x.cols(), q = pr.z.cols();
  const Vec beta = th.head(p), gamma = th.segment(p, q);
  const double theta = std::exp(th[p + q]);
  const Vec eta = pr.x * beta, zeta = pr.z * gamma;
  if (grad) grad->setZero(th.size());
  double ll = 0;
  const double lgt = std::lgamma(theta), dgt = boost::math::digamma(theta);
  for (Eigen::Index i = 0; i < pr.x.rows(); ++i) {
    const double mu = std::exp(eta[i]);
    const double pi = 1.0 / (1.0 + std::exp(-zeta[i]));
    const double y = pr.y[static_cast<std::size_t>(i)];
    const double log_ratio = std::log(theta / (theta + mu));
    double d_eta, d_theta, d_zeta;
    if (y == 0) {
      const double log_f0 = theta * log_ratio;
      const double f0 = std::exp(log_f0);
      const double d = pi + (1 - pi) * f0;
      ll += std::log(d);
      const double w = (1 - pi) * f0 / d;
      d_eta = w * (-theta * mu / (theta + mu));
      d_theta = w * (log_ratio + mu / (theta + mu));
      d_zeta = pi * (1 - pi) * (1 - f0) / d;
    } else {
      ll += std::log1p(-pi) + std::lgamma(y + theta) - lgt - pr.lgamma_y1[static_cast<std::size_t>(i)] +
            theta * log_ratio + y * std::log(mu / (theta + mu));
      d_eta = theta * (y - mu) / (theta + mu);
      d_theta = boost::math::digamma(y + theta) - dgt + log_ratio + 1 - (y + theta) / (theta + mu);
      d_zeta = -pi;
    }
    if (grad) {
      grad->head(p) += d_eta * pr.x.row(i).transpose();
      grad->segment(p, q) += d_zeta * pr.z.row(i).transpose();
      (*grad)[p + q] += d_theta * theta;
    }
  }
  return ll;
}

inline Mat numeric_hessian(const Problem& pr, const Vec& th) {
  const Eigen::Index m = th.size();
  Mat h(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double step = 1e-5 * std::max(1.0, std::abs(th[j]));
    Vec tp = th, tm = th, gp, gm;
    tp[j] += step;
    tm[j] -= step;
    log_likelihood(pr, tp, &gp);
    log_likelihood(pr, tm, &gm);
    h.col(j) = (gp - gm) / (2 * step);
  }
  return (h + h.transpose()) / 2;
}

// Expected complete-data log-likelihood of the count part, weighted by the
// posterior probability (1 - w_i) that observation i is from the NB process.
inline double weighted_nb(const Problem& pr, const Vec& bt, const std::vector<double>& nb_weight, Vec* grad) {
  const Eigen::Index p = pr.x.cols();
  const double theta = std::exp(bt[p]);
  const Vec eta = pr.x * bt.head(p);
  if (grad) grad->setZero(p + 1);
  const double lgt = std::lgamma(theta), dgt = boost::math::digamma(theta);
  double q = 0;
  for (Eigen::Index i = 0; i < pr.x.rows(); ++i) {
    const double w = nb_weight[static_cast<std::size_t>(i)];
    if (w == 0) continue;
    const double y = pr.y[static_cast<std::size_t>(i)], mu = std::exp(eta[i]);
    const double log_ratio = std::log(theta / (theta + mu));
    q += w * (std::lgamma(y + theta) - lgt - pr.lgamma_y1[static_cast<std::size_t>(i)] + theta * log_ratio +
              y * std::log(mu / (theta + mu)));
    if (grad) {
      grad->head(p) += w * theta * (y - mu) / (theta + mu) * pr.x.row(i).transpose();
      (*grad)[p] += w * theta * (boost::math::digamma(y + theta) - dgt + log_ratio + 1 - (y + theta) / (theta + mu));
    }
  }
  return q;
}

// Damped Newton ascent on a concave-ish block with a numeric Hessian of the
// analytic gradient; steps are halved until the objective improves.
template <class F>
Vec newton_block(const F& f, Vec x, int steps) {
  for (int s = 0; s < steps; ++s) {
    Vec g;
    const double f0 = f(x, &g);
    Mat h(x.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double e = 1e-5 * std::max(1.0, std::abs(x[j]));
      Vec xp = x, xm = x, gp, gm;
      xp[j] += e;
      xm[j] -= e;
      f(xp, &gp);
      f(xm, &gm);
      h.col(j) = (gp - gm) / (2 * e);
    }
    h = (h + h.transpose()) / 2;
    Vec dir = (-h).ldlt().solve(g);
    if (!dir.allFinite() || g.dot(dir) <= 0) dir = g;  // fall back to steepest ascent
    double t = 1;
    bool improved = false;
    for (int k = 0; k < 40; ++k, t /= 2) {
      const Vec cand = x + t * dir;
      const double fc = f(cand, nullptr);
      if (std::isfinite(fc) && fc >= f0) {
        x = cand;
        improved = true;
        break;
      }
    }
    if (!improved || g.norm() < 1e-10) break;
  }
  return x;
}

}  // namespace zinb_detail

// counts: n observations; covariates: n rows of c columns (no intercept column).
inline ZinbFit zinb_fit(std::span<const double> counts, const std::vector<std::vector<double>>& covariates,
                        const ZinbOptions& opt = {}) {
  using namespace zinb_detail;
  const std::size_t n = counts.size();
  if (covariates.size() != n) throw ValidationError("zinb_fit: covariate rows do not match counts");
  const std::size_t c = n ? covariates[0].size() : 0;
  for (const auto& row : covariates) {
    if (row.size() != c) throw ValidationError("zinb_fit: ragged covariate matrix");
  }
  for (double y : counts) {
    if (!(y >= 0) || y != std::floor(y)) throw ValidationError("zinb_fit: counts must be non-negative integers");
  }
  const std::size_t p = c + 1, q = opt.inflation_covariates ? c + 1 : 1;
  const std::size_t n_params = p + q + 1;
  if (n < 10 * n_params) {
    throw ValidationError("zinb_fit: needs at least " + std::to_string(10 * n_params) + " observations");
  }
  if (std::all_of(counts.begin(), counts.end(), [](double y) { return y == 0; })) {
    throw DegenerateError("zinb_fit: all counts are zero");
  }
  if (c > 0 && opt.rate_covariate >= c) throw ValidationError("zinb_fit: rate covariate index out of range");

  // Centre covariates for conditioning; intercepts are mapped back at the end.
  std::vector<double> centre(c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t i = 0; i < n; ++i) centre[j] += covariates[i][j];
    centre[j] /= static_cast<double>(n);
  }
  Problem pr;
  pr.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  pr.z.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(q));
  for (std::size_t i = 0; i < n; ++i) {
    pr.x(i, 0) = 1;
    pr.z(i, 0) = 1;
    for (std::size_t j = 0; j < c; ++j) {
      pr.x(i, j + 1) = covariates[i][j] - centre[j];
      if (opt.inflation_covariates) pr.z(i, j + 1) = covariates[i][j] - centre[j];
    }
    pr.y.push_back(counts[i]);
    pr.lgamma_y1.push_back(std::lgamma(counts[i] + 1));
  }

  const Eigen::Index ip = static_cast<Eigen::Index>(p), iq = static_cast<Eigen::Index>(q);
  Vec th = Vec::Zero(static_cast<Eigen::Index>(n_params));
  double pos_mean = 0, zeros = 0;
  for (double y : counts) {
    pos_mean += y;
    zeros += y == 0;
  }
  pos_mean /= static_cast<double>(n) - zeros;
  th[0] = std::log(pos_mean);
  th[ip] = std::log(std::max(0.02, zeros / static_cast<double>(n) / 2) / (1 - std::max(0.02, zeros / static_cast<double>(n) / 2)));
  th[ip + iq] = 0.0;

  ZinbFit fit;
  double ll = log_likelihood(pr, th, nullptr);
  fit.ll_trace.push_back(ll);
  int iter = 0;

  // EM over the latent structural-zero indicator.
  std::vector<double> nb_weight(n);
  for (; iter < std::min(opt.max_iterations, 200); ++iter) {
    const Vec zeta = pr.z * th.segment(ip, iq);
    const Vec eta = pr.x * th.head(ip);
    const double theta = std::exp(th[ip + iq]);
    std::vector<double> post(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double pi = 1 / (1 + std::exp(-zeta[static_cast<Eigen::Index>(i)]));
      if (pr.y[i] > 0) {
        post[i] = 0;
      } else {
        const double f0 = std::exp(theta * std::log(theta / (theta + std::exp(eta[static_cast<Eigen::Index>(i)]))));
        post[i] = pi / (pi + (1 - pi) * f0);
      }
      nb_weight[i] = 1 - post[i];
    }
    // Inflation block: logistic regression on soft labels (exactly concave).
    auto logit_obj = [&](const Vec& g, Vec* grad) {
      const Vec zz = pr.z * g;
      double v = 0;
      if (grad) grad->setZero(g.size());
      for (std::size_t i = 0; i < n; ++i) {
        const double s = zz[static_cast<Eigen::Index>(i)];
        const double log_pi = -std::log1p(std::exp(-s)), log_1mpi = -std::log1p(std::exp(s));
        v += post[i] * log_pi + (1 - post[i]) * log_1mpi;
        if (grad) *grad += (post[i] - 1 / (1 + std::exp(-s))) * pr.z.row(static_cast<Eigen::Index>(i)).transpose();
      }
      return v;
    };
    Vec g_new = newton_block(logit_obj, Vec(th.segment(ip, iq)), 5);
    Vec bt(ip + 1);
    bt.head(ip) = th.head(ip);
    bt[ip] = th[ip + iq];
    auto nb_obj = [&](const Vec& v, Vec* grad) { return weighted_nb(pr, v, nb_weight, grad); };
    bt = newton_block(nb_obj, bt, 5);

    Vec cand = th;
    cand.head(ip) = bt.head(ip);
    cand.segment(ip, iq) = g_new;
    cand[ip + iq] = bt[ip];
    const double ll_new = log_likelihood(pr, cand, nullptr);
    if (!(ll_new >= ll)) break;  // EM guarantees ascent; stop if rounding says otherwise
    th = cand;
    const double gain = ll_new - ll;
    ll = ll_new;
    fit.ll_trace.push_back(ll);
    if (gain < 1e-9 * (1 + std::abs(ll))) {
      ++iter;
      break;
    }
  }

  // BFGS polishing on the full likelihood with a backtracking (monotone) line search.
  Vec grad;
  ll = log_likelihood(pr, th, &grad);
  Mat hinv = Mat::Identity(th.size(), th.size());
  {
    const Mat h = numeric_hessian(pr, th);
    Eigen::LDLT<Mat> ldlt(-h);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      hinv = ldlt.solve(Mat::Identity(th.size(), th.size()));
    }
  }
  for (; iter < opt.max_iterations && grad.norm() > opt.gradient_tolerance; ++iter) {
    Vec dir = hinv * grad;
    if (!(grad.dot(dir) > 0)) {
      hinv = Mat::Identity(th.size(), th.size());
      dir = grad;
    }
    double t = 1;
    Vec cand, cgrad;
    double cll = -INFINITY;
    bool moved = false;
    for (int k = 0; k < 60; ++k, t /= 2) {
      cand = th + t * dir;
      cll = log_likelihood(pr, cand, &cgrad);
      if (std::isfinite(cll) && cll >= ll + 1e-4 * t * grad.dot(dir)) {
        moved = true;
        break;
      }
    }
    if (!moved) break;
    const Vec s = cand - th, yv = grad - cgrad;  // ascent: curvature of -ll
    th = cand;
    ll = cll;
    grad = cgrad;
    fit.ll_trace.push_back(ll);
    const double sy = s.dot(yv);
    if (sy > 1e-12) {
      const Mat I = Mat::Identity(th.size(), th.size());
      hinv = (I - s * yv.transpose() / sy) * hinv * (I - yv * s.transpose() / sy) + s * s.transpose() / sy;
    }
  }
  fit.iterations = iter;
  fit.gradient_norm = grad.norm();
  fit.converged = fit.gradient_norm <= opt.gradient_tolerance;
  fit.log_likelihood = ll;

  // Observed information.
  const Mat info = -numeric_hessian(pr, th);
  Eigen::FullPivLU<Mat> lu(info);
  Mat cov = Mat::Constant(th.size(), th.size(), std::numeric_limits<double>::quiet_NaN());
  if (lu.isInvertible()) cov = lu.inverse();
  auto se = [&](const Vec& a) { return std::sqrt(std::max(0.0, a.dot(cov * a))); };

  // Undo centring: intercept_raw = intercept - sum(slope_j * centre_j).
  auto unpack = [&](Eigen::Index off, std::size_t len, std::vector<double>& coef, std::vector<double>& err) {
    coef.assign(len, 0);
    err.assign(len, 0);
    for (std::size_t j = 0; j < len; ++j) {
      Vec a = Vec::Zero(th.size());
      a[off + static_cast<Eigen::Index>(j)] = 1;
      if (j == 0) {
        for (std::size_t k = 1; k < len; ++k) a[off + static_cast<Eigen::Index>(k)] = -centre[k - 1];
      }
      coef[j] = a.dot(th);
      err[j] = se(a);
    }
  };
  unpack(0, p, fit.count_coef, fit.count_se);
  unpack(ip, q, fit.inflation_coef, fit.inflation_se);
  fit.dispersion = std::exp(th[ip + iq]);
  if (c > 0) {
    const double b = fit.count_coef[opt.rate_covariate + 1], s = fit.count_se[opt.rate_covariate + 1];
    fit.rate_ratio = std::exp(opt.decade * b);
    fit.rate_ratio_lower = std::exp(opt.decade * (b - 1.959963984540054 * s));
    fit.rate_ratio_upper = std::exp(opt.decade * (b + 1.959963984540054 * s));
  }
  return fit;
}

inline nlohmann::json to_json(const ZinbFit& f) {
  return {{"count_coef", f.count_coef},
          {"count_se", f.count_se},
          {"inflation_coef", f.inflation_coef},
          {"inflation_se", f.inflation_se},
          {"dispersion", f.dispersion},
          {"log_likelihood", f.log_likelihood},
          {"iterations", f.iterations},
          {"gradient_norm", f.gradient_norm},
          {"converged", f.converged},
          {"rate_ratio_per_decade", f.rate_ratio},
          {"rate_ratio_ci", {f.rate_ratio_lower, f.rate_ratio_upper}}};
}

}  // namespace epvsq::stats
