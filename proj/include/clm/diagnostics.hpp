#pragma once

// Self-checks: a finite-difference gradient harness and the invariant
// suites behind the `check` CLI command. Everything here is an independent
// route to a quantity the library also computes analytically, which is why
// the finite differences deliberately avoid the gradient code paths.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "clm/chart.hpp"
#include "clm/common.hpp"
#include "clm/model.hpp"
#include "clm/training.hpp"

namespace clm {

// Flat coordinate view over (X row-major, then W row-major, then u);
// the same ordering Gradients is compared under.
struct ParamsView {
  static size_t count(const ModelParams& p) {
    return static_cast<size_t>(p.X.size()) + p.W.size() + p.u.size();
  }

  static double get(const ModelParams& p, size_t idx) {
    return locate(const_cast<ModelParams&>(p), idx);
  }

  static void add(ModelParams& p, size_t idx, double delta) { locate(p, idx) += delta; }

  static double grad_get(const Gradients& g, size_t idx) {
    const size_t nx = g.dX.size(), nw = g.dW.size();
    if (idx < nx) return g.dX(idx / g.dX.cols(), idx % g.dX.cols());
    idx -= nx;
    if (idx < nw) return g.dW(idx / g.dW.cols(), idx % g.dW.cols());
    return g.du(idx - nw);
  }

 private:
  static double& locate(ModelParams& p, size_t idx) {
    const size_t nx = p.X.size(), nw = p.W.size();
    if (idx < nx) return p.X(idx / p.X.cols(), idx % p.X.cols());
    idx -= nx;
    if (idx < nw) return p.W(idx / p.W.cols(), idx % p.W.cols());
    return p.u(idx - nw);
  }
};

// Central differences of an arbitrary scalar objective, one coordinate at
// a time.
inline Gradients fd_gradient(const std::function<double(const ModelParams&)>& objective,
                             const ModelParams& base, double eps = 1e-5) {
  Gradients g = Gradients::zeros_like(base);
  ModelParams work = base;
  const size_t total = ParamsView::count(base);
  for (size_t idx = 0; idx < total; ++idx) {
    const double orig = ParamsView::get(base, idx);
    ParamsView::add(work, idx, eps);
    const double hi = objective(work);
    ParamsView::add(work, idx, -2.0 * eps);
    const double lo = objective(work);
    ParamsView::add(work, idx, eps);
    if (ParamsView::get(work, idx) != orig) ParamsView::add(work, idx, orig - ParamsView::get(work, idx));
    const double fd = (hi - lo) / (2.0 * eps);
    const size_t nx = base.X.size(), nw = base.W.size();
    if (idx < nx) {
      g.dX(idx / base.X.cols(), idx % base.X.cols()) = fd;
    } else if (idx < nx + nw) {
      const size_t w = idx - nx;
      g.dW(w / base.W.cols(), w % base.W.cols()) = fd;
    } else {
      g.du(idx - nx - nw) = fd;
    }
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline double max_rel_err(const Gradients& a, const Gradients& b) {
  double worst = 0.0;
  const size_t total = a.dX.size() + a.dW.size() + a.du.size();
  for (size_t idx = 0; idx < total; ++idx)
    worst = std::max(worst, rel_err(ParamsView::grad_get(a, idx), ParamsView::grad_get(b, idx)));
  return worst;
}

// ---------------------------------------------------------------------------
// Invariant checks
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  int cases = 0;

  bool pass() const { return std::isfinite(max_error) && max_error <= tolerance; }
};

// max |inside(k,k) + outside(k,k) - score| over leaves: every tree contains
// every leaf, so the product of any leaf's inside and outside scores must
// recover the sentence score.
inline double leaf_identity_error(const Chart& c) {
  double worst = 0.0;
  const double total = c.sentence_log_score();
  for (int k = 0; k < c.n; ++k)
    worst = std::max(worst, std::abs(c.inside(k, k) + c.outside(k, k) - total));
  return worst;
}

// |sum of binary rule posteriors - (n - 1)|: every binary tree over n
// leaves has exactly n - 1 internal nodes.
inline double posterior_mass_error(const Chart& c) {
  double mass = 0.0;
  for (const auto& r : rule_posteriors(c)) mass += r.weight;
  return std::abs(mass - (c.n - 1));
}

// max over spans of |1 - sum of split weights|.
inline double split_weight_error(const Chart& c) {
  double worst = 0.0;
  for (int width = 2; width <= c.n; ++width) {
    for (int i = 0; i + width - 1 < c.n; ++i) {
      const int j = i + width - 1;
      double sum = 0.0;
      for (int k = i; k < j; ++k) sum += c.split_weight(i, k, j);
      worst = std::max(worst, std::abs(sum - 1.0));
    }
  }
  return worst;
}

struct CheckOptions {
  int n_min = 1;
  int n_max = 6;
  int seeds = 5;
  std::vector<int> dims = {1, 2, 5};
  int vocab_size = 11;
  uint64_t seed = 1;
  double chart_tol = 1e-8;
  double fd_tol = 1e-4;
  double fd_eps = 1e-5;
  int fd_n_max = 4;  // FD sweeps are quadratic in parameter count
};

inline Sentence random_sentence(Rng& rng, int n, int vocab_size) {
  Sentence s;
  s.ids.reserve(n);
  for (int i = 0; i < n; ++i) s.ids.push_back(static_cast<int32_t>(rng.next_below(vocab_size)));
  return s;
}

// Runs the oracle-equivalence, chart-identity and finite-difference suites
// over random parameters and sentences. When `fixed` is non-null its
// parameters are used instead of random ones (dims are then ignored).
inline std::vector<CheckResult> run_checks(const CheckOptions& opt,
                                           const ModelParams* fixed = nullptr) {
  // Chart residuals are scaled by max(1, |log score|): identities that hold
  // to machine precision at initialization scale accumulate magnitude-
  // proportional rounding on saturated trained models.
  CheckResult oracle{"inside equals brute force /|score|", 0.0, opt.chart_tol, 0};
  CheckResult consistency{"inside_log = logsumexp(split_log)", 0.0, 1e-12, 0};
  CheckResult leaf{"leaf inside*outside identity /|score|", 0.0, opt.chart_tol, 0};
  CheckResult mass{"posterior mass = n-1 /|score|", 0.0, opt.chart_tol, 0};
  CheckResult weights{"split weights sum to 1 /|score|", 0.0, 1e-12, 0};
  CheckResult viterbi{"viterbi matches enumerated argmax /|score|", 0.0, 1e-9, 0};
  CheckResult fd_em{"em gradient vs FD of Q", 0.0, opt.fd_tol, 0};
  CheckResult fd_direct{"direct gradient vs FD of NLL", 0.0, opt.fd_tol, 0};

  std::vector<int> dims = fixed ? std::vector<int>{fixed->d} : opt.dims;
  for (int d : dims) {
    for (int sweep = 0; sweep < opt.seeds; ++sweep) {
      const uint64_t seed = mix_seed(opt.seed, d * 1000 + sweep);
      const int vocab = fixed ? fixed->vocab_size() : opt.vocab_size;
      ModelParams params = fixed ? *fixed : init_params(vocab, d, seed);
      Rng rng(mix_seed(seed, 0xabcdefULL));
      for (int n = opt.n_min; n <= opt.n_max; ++n) {
        Sentence s = random_sentence(rng, n, vocab);
        Chart c = inside(params, s);
        outside(params, c);
        const double scale = std::max(1.0, std::abs(c.sentence_log_score()));

        if (n <= kDefaultTreeCap) {
          oracle.max_error = std::max(
              oracle.max_error,
              std::abs(c.sentence_log_score() - brute_force_log_score(params, s)) / scale);
          ++oracle.cases;

          auto trees = enumerate_trees(n);
          double best = neg_inf;
          for (const auto& t : trees) best = std::max(best, tree_log_score(c, t));
          auto [tree, score] = viterbi_tree(params, s);
          viterbi.max_error = std::max(viterbi.max_error, std::abs(best - score) / scale);
          ++viterbi.cases;
        }

        for (int width = 2; width <= n; ++width) {
          for (int i = 0; i + width - 1 < n; ++i) {
            const int j = i + width - 1;
            std::vector<double> terms;
            for (int k = i; k < j; ++k) terms.push_back(c.split(i, k, j));
            consistency.max_error = std::max(
                consistency.max_error, std::abs(c.inside(i, j) - log_sum_exp(terms)));
          }
        }
        ++consistency.cases;

        leaf.max_error = std::max(leaf.max_error, leaf_identity_error(c) / scale);
        ++leaf.cases;
        mass.max_error = std::max(mass.max_error, posterior_mass_error(c) / scale);
        ++mass.cases;
        weights.max_error = std::max(weights.max_error, split_weight_error(c) / scale);
        ++weights.cases;

        if (n <= opt.fd_n_max) {
          // Finite differences validate the gradient code, so they always
          // run at initialization scale: on a saturated trained model the
          // truncation error of central differences swamps the comparison.
          const ModelParams fd_params =
              fixed ? init_params(vocab, d, mix_seed(seed, 0xfdfdULL)) : params;
          Gradients em = em_gradient(fd_params, s);
          Gradients em_fd = fd_gradient(
              [&](const ModelParams& pp) { return q_objective(fd_params, pp, s); }, fd_params,
              opt.fd_eps);
          fd_em.max_error = std::max(fd_em.max_error, max_rel_err(em, em_fd));
          ++fd_em.cases;

          Gradients direct = direct_gradient(fd_params, s);
          Gradients direct_fd = fd_gradient(
              [&](const ModelParams& pp) { return sentence_nll(pp, s); }, fd_params, opt.fd_eps);
          fd_direct.max_error = std::max(fd_direct.max_error, max_rel_err(direct, direct_fd));
          ++fd_direct.cases;
        }
      }
    }
  }
  return {oracle, consistency, leaf, mass, weights, viterbi, fd_em, fd_direct};
}

}  // namespace clm
