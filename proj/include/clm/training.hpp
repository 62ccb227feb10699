#pragma once

// The training core: the NLL objective, its EM decomposition, analytic
// gradients and Adagrad updates.
//
// Two gradient modes ship side by side:
//
//   em      Posterior-weighted energy gradients with the rule posteriors
//           and the expected-embedding mixture weights held fixed, built
//           from the recursive per-node jacobians in compose_grad_params.
//           This is the generalized-EM descent direction for the Q
//           objective (one Adagrad step per E-step).
//
//   direct  Exact gradient of the sentence NLL by reverse accumulation
//           through the whole chart, including the log-sum-exp nodes and
//           the softmax mixture weights.
//
// Both modes are finite-difference checked against their own objective;
// on sentences of length <= 2 no mixture weights exist and they agree.

#include <chrono>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "clm/chart.hpp"
#include "clm/common.hpp"
#include "clm/corpus.hpp"
#include "clm/model.hpp"

namespace clm {

struct Gradients {
  Mat dX;
  Mat dW;
  Vec du;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients g;
    g.dX = Mat::Zero(p.X.rows(), p.X.cols());
    g.dW = Mat::Zero(p.W.rows(), p.W.cols());
    g.du = Vec::Zero(p.u.size());
    return g;
  }

  void add(const Gradients& o) {
    dX += o.dX;
    dW += o.dW;
    du += o.du;
  }

  bool all_finite() const { return dX.allFinite() && dW.allFinite() && du.allFinite(); }
};

enum class GradMode { Em, Direct };

inline const char* to_string(GradMode m) { return m == GradMode::Em ? "em" : "direct"; }
inline GradMode grad_mode_from_string(const std::string& s) {
  if (s == "em") return GradMode::Em;
  if (s == "direct") return GradMode::Direct;
  throw value_error("unknown grad mode: " + s);
}

struct TrainConfig {
  double learning_rate = 1.0;
  double l2 = 0.1;
  int epochs = 5;
  int d = 25;
  uint64_t seed = 0;
  GradMode grad_mode = GradMode::Em;
  double adagrad_epsilon = 1e-8;
  int max_sentence_length = 40;
  int workers = 1;
  double theta = 1.0;  // structural probability; fixed, never updated

  void validate() const {
    if (!(learning_rate > 0.0)) throw config_error("learning_rate must be positive");
    if (l2 < 0.0) throw config_error("l2 must be non-negative");
    if (epochs < 0) throw config_error("epochs must be non-negative");
    if (d < 1) throw config_error("d must be >= 1");
    if (max_sentence_length < 1) throw config_error("max_sentence_length must be >= 1");
    if (workers < 1) throw config_error("workers must be >= 1");
    if (!(theta > 0.0)) throw config_error("theta must be positive");
  }
};

inline double sentence_nll(const ModelParams& p, const Sentence& s) {
  return -inside(p, s).sentence_log_score();
}

// ---------------------------------------------------------------------------
// Frozen-weight recomputation: rebuild every span embedding bottom-up under
// new parameters but with the mixture weights of an existing chart. The hook
// sees each binary rule's freshly composed parent embedding.
// ---------------------------------------------------------------------------

template <typename RuleHook>
Mat frozen_recompute(const ModelParams& p, const Chart& c, RuleHook&& hook) {
  if (p.d != c.d) throw value_error("model dimension does not match chart");
  const int n = c.n;
  Mat emb = Mat::Zero(p.d, static_cast<Eigen::Index>(n) * n);
  const auto WL = p.W.leftCols(p.d);
  const auto WR = p.W.rightCols(p.d);
  for (int i = 0; i < n; ++i) emb.col(c.span_index(i, i)) = p.X.row(c.ids[i]).transpose();
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      Vec mix = Vec::Zero(p.d);
      for (int k = i; k < j; ++k) {
        Vec pa = apply_activation(p.f, WL * emb.col(c.span_index(i, k)) +
                                       WR * emb.col(c.span_index(k + 1, j)));
        hook(i, k, j, pa);
        mix += c.split_weight(i, k, j) * pa;
      }
      emb.col(c.span_index(i, j)) = mix;
    }
  }
  return emb;
}

inline Mat recompute_embeddings_frozen(const ModelParams& p, const Chart& c) {
  return frozen_recompute(p, c, [](int, int, int, const Vec&) {});
}

// Expected complete-data objective Q(params; params_old). Posteriors and
// mixture weights come from the chart under params_old; energies are
// re-evaluated under the new parameters.
inline double q_objective(const ModelParams& params_old, const ModelParams& params, const Sentence& s) {
  if (params_old.d != params.d || params_old.vocab_size() != params.vocab_size())
    throw value_error("q_objective: parameter sets have mismatched shapes");
  Chart c = inside(params_old, s);
  outside(params_old, c);
  const double total = c.sentence_log_score();
  const double log_theta = std::log(params.theta);
  double q = 0.0;
  for (int i = 0; i < c.n; ++i) {
    Vec x = params.X.row(c.ids[i]).transpose();
    q -= -rule_energy(params, x);  // leaf posterior is 1
  }
  frozen_recompute(params, c, [&](int i, int k, int j, const Vec& pa) {
    const double post = std::exp(c.split(i, k, j) + c.outside(i, j) - total);
    q -= post * (-rule_energy(params, pa) + log_theta);
  });
  return q;
}

// ---------------------------------------------------------------------------
// Recursive per-node jacobians (forward accumulation, mixture weights fixed).
//
// d_w maps the span embedding against vec(W) in row-major order (entry
// (r, c) of W sits at column r * 2d + c); d_x holds one d x d block per
// word id occurring in the span. Base cases: a leaf has d_w = 0 and
// d_x[own word] = I. A composition node applies the chain rule through
// pa = f(W [c1; c2]): the W jacobian gains the direct slot term plus
// W times the stacked child jacobians, everything scaled by f'.
// ---------------------------------------------------------------------------

struct SpanJacobians {
  Mat d_w;                               // d x 2d^2
  std::unordered_map<int32_t, Mat> d_x;  // word id -> d x d
};

struct ChartJacobians {
  int n = 0;
  int d = 0;
  std::vector<SpanJacobians> spans;

  const SpanJacobians& at(int i, int j) const {
    if (i < 0 || j >= n || i > j) throw value_error("span out of range");
    return spans[static_cast<size_t>(i) * n + j];
  }
};

namespace detail {

// Bottom-up sweep computing every span's jacobians; calls
// hook(i, k, j, pa, dpa_dw, dpa_dx) for each binary rule instance.
template <typename RuleHook>
ChartJacobians jacobian_sweep(const ModelParams& p, const Chart& c, RuleHook&& hook) {
  if (!c.has_inside) throw value_error("jacobians require a completed inside pass");
  if (p.d != c.d) throw value_error("model dimension does not match chart");
  const int n = c.n;
  const int d = p.d;
  const int wcols = 2 * d * d;
  const auto WL = p.W.leftCols(d);
  const auto WR = p.W.rightCols(d);

  ChartJacobians jac;
  jac.n = n;
  jac.d = d;
  jac.spans.resize(static_cast<size_t>(n) * n);

  for (int i = 0; i < n; ++i) {
    auto& sj = jac.spans[c.span_index(i, i)];
    sj.d_w = Mat::Zero(d, wcols);  // no composition below a leaf
    sj.d_x.emplace(c.ids[i], Mat::Identity(d, d));
  }

  Mat stacked(2 * d, wcols);
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      auto& sj = jac.spans[c.span_index(i, j)];
      sj.d_w = Mat::Zero(d, wcols);

      for (int k = i; k < j; ++k) {
        const auto& left = jac.spans[c.span_index(i, k)];
        const auto& right = jac.spans[c.span_index(k + 1, j)];
        const Vec c1 = c.expected.col(c.span_index(i, k));
        const Vec c2 = c.expected.col(c.span_index(k + 1, j));
        Vec pa = apply_activation(p.f, WL * c1 + WR * c2);
        const Vec fprime = activation_derivative_from_value(p.f, pa);

        stacked.topRows(d) = left.d_w;
        stacked.bottomRows(d) = right.d_w;
        Mat dpa_dw = p.W * stacked;
        for (int r = 0; r < d; ++r) {
          dpa_dw.block(r, r * 2 * d, 1, d) += c1.transpose();
          dpa_dw.block(r, r * 2 * d + d, 1, d) += c2.transpose();
        }
        dpa_dw.array().colwise() *= fprime.array();

        std::unordered_map<int32_t, Mat> dpa_dx;
        auto accumulate_child = [&](const std::unordered_map<int32_t, Mat>& child, const auto& block) {
          for (const auto& [word, jx] : child) {
            auto it = dpa_dx.find(word);
            if (it == dpa_dx.end()) it = dpa_dx.emplace(word, Mat::Zero(d, d)).first;
            it->second += block * jx;
          }
        };
        accumulate_child(left.d_x, WL);
        accumulate_child(right.d_x, WR);
        for (auto& [word, jx] : dpa_dx) jx.array().colwise() *= fprime.array();

        hook(i, k, j, pa, dpa_dw, dpa_dx);

        const double w = c.split_weight(i, k, j);
        sj.d_w += w * dpa_dw;
        for (const auto& [word, jx] : dpa_dx) {
          auto it = sj.d_x.find(word);
          if (it == sj.d_x.end()) it = sj.d_x.emplace(word, Mat::Zero(d, d)).first;
          it->second += w * jx;
        }
      }
    }
  }
  return jac;
}

}  // namespace detail

// Per-span derivatives of the expected embeddings w.r.t. W and X, mixture
// weights treated as constants.
inline ChartJacobians compose_grad_params(const ModelParams& p, const Chart& c) {
  return detail::jacobian_sweep(p, c, [](int, int, int, const Vec&, const Mat&,
                                         const std::unordered_map<int32_t, Mat>&) {});
}

// ---------------------------------------------------------------------------
// Gradient modes
// ---------------------------------------------------------------------------

// Gradient of Q at params: sum over rule instances of posterior times the
// energy gradient, posteriors and mixture weights fixed.
inline Gradients em_gradient_from_chart(const ModelParams& p, Chart& c) {
  if (!c.has_outside) outside(p, c);
  const double total = c.sentence_log_score();
  const int d = p.d;
  Gradients g = Gradients::zeros_like(p);

  for (int i = 0; i < c.n; ++i) {  // leaf rules, posterior 1
    const int32_t word = c.ids[i];
    Vec x = p.X.row(word).transpose();
    const double gp = energy_map_derivative(p.g, p.u.dot(x));
    g.du += gp * x;
    g.dX.row(word) += gp * p.u.transpose();
  }

  detail::jacobian_sweep(p, c, [&](int i, int k, int j, const Vec& pa, const Mat& dpa_dw,
                                   const std::unordered_map<int32_t, Mat>& dpa_dx) {
    const double post = std::exp(c.split(i, k, j) + c.outside(i, j) - total);
    const double gp = energy_map_derivative(p.g, p.u.dot(pa));
    const double scale = post * gp;
    g.du += scale * pa;
    Eigen::RowVectorXd de_dw = p.u.transpose() * dpa_dw;  // 1 x 2d^2
    for (int r = 0; r < d; ++r) g.dW.row(r) += scale * de_dw.segment(r * 2 * d, 2 * d);
    for (const auto& [word, jx] : dpa_dx) g.dX.row(word) += scale * (p.u.transpose() * jx);
  });
  return g;
}

inline Gradients em_gradient(const ModelParams& p, const Sentence& s) {
  Chart c = inside(p, s);
  outside(p, c);
  return em_gradient_from_chart(p, c);
}

// Exact NLL gradient: one reverse sweep over the chart DAG. Spans are
// visited widest first so each span's adjoint is complete before its own
// splits are expanded; the mixture weights' softmax is differentiated too.
inline Gradients direct_gradient_from_chart(const ModelParams& p, const Chart& c) {
  const int n = c.n;
  const int d = p.d;
  const auto WL = p.W.leftCols(d);
  const auto WR = p.W.rightCols(d);

  std::vector<double> a_il(static_cast<size_t>(n) * n, 0.0);
  Mat a_emb = Mat::Zero(d, static_cast<Eigen::Index>(n) * n);
  a_il[c.span_index(0, n - 1)] = -1.0;  // NLL = -inside(0, n-1)

  Gradients g = Gradients::zeros_like(p);

  for (int width = n; width >= 2; --width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      const double ail = a_il[c.span_index(i, j)];
      const Vec aemb = a_emb.col(c.span_index(i, j));
      const double aemb_dot_mix = aemb.dot(c.expected.col(c.span_index(i, j)));
      for (int k = i; k < j; ++k) {
        const Vec c1 = c.expected.col(c.span_index(i, k));
        const Vec c2 = c.expected.col(c.span_index(k + 1, j));
        Vec pa = apply_activation(p.f, WL * c1 + WR * c2);
        const double w = c.split_weight(i, k, j);

        // split_log adjoint: log-sum-exp route plus the softmax route of the
        // expected-embedding mixture.
        const double a_split = ail * w + w * (aemb.dot(pa) - aemb_dot_mix);
        a_il[c.span_index(i, k)] += a_split;
        a_il[c.span_index(k + 1, j)] += a_split;

        const double a_energy = -a_split;  // log zeta = -E + log theta
        const double gp = energy_map_derivative(p.g, p.u.dot(pa));
        Vec a_pa = w * aemb + (a_energy * gp) * p.u;
        g.du += (a_energy * gp) * pa;

        Vec a_z = activation_derivative_from_value(p.f, pa).cwiseProduct(a_pa);
        g.dW.leftCols(d) += a_z * c1.transpose();
        g.dW.rightCols(d) += a_z * c2.transpose();
        a_emb.col(c.span_index(i, k)) += WL.transpose() * a_z;
        a_emb.col(c.span_index(k + 1, j)) += WR.transpose() * a_z;
      }
    }
  }

  for (int i = 0; i < n; ++i) {
    const int32_t word = c.ids[i];
    Vec x = p.X.row(word).transpose();
    const double a_energy = -a_il[c.span_index(i, i)];  // inside(i,i) = -E(x)
    const double gp = energy_map_derivative(p.g, p.u.dot(x));
    g.du += (a_energy * gp) * x;
    Vec a_x = (a_energy * gp) * p.u + a_emb.col(c.span_index(i, i));
    g.dX.row(word) += a_x.transpose();
  }
  return g;
}

inline Gradients direct_gradient(const ModelParams& p, const Sentence& s) {
  Chart c = inside(p, s);
  return direct_gradient_from_chart(p, c);
}

// Gradient plus the NLL of the same chart (shared by the training loop).
inline std::pair<Gradients, double> sentence_gradient(const ModelParams& p, const Sentence& s,
                                                      GradMode mode) {
  Chart c = inside(p, s);
  const double nll = -c.sentence_log_score();
  if (mode == GradMode::Em) {
    outside(p, c);
    return {em_gradient_from_chart(p, c), nll};
  }
  return {direct_gradient_from_chart(p, c), nll};
}

// ---------------------------------------------------------------------------
// Adagrad
// ---------------------------------------------------------------------------

struct AdagradState {
  Mat accX;
  Mat accW;
  Vec accu;

  static AdagradState zeros_like(const ModelParams& p) {
    AdagradState st;
    st.accX = Mat::Zero(p.X.rows(), p.X.cols());
    st.accW = Mat::Zero(p.W.rows(), p.W.cols());
    st.accu = Vec::Zero(p.u.size());
    return st;
  }
};

// Per coordinate: add the l2 term to the raw gradient, accumulate its
// square, scale the step by 1 / (sqrt(accum) + eps).
inline void adagrad_step(ModelParams& p, AdagradState& st, const Gradients& g,
                         const TrainConfig& cfg) {
  if (g.dX.rows() != p.X.rows() || g.dX.cols() != p.X.cols() || g.dW.rows() != p.W.rows() ||
      g.dW.cols() != p.W.cols() || g.du.size() != p.u.size())
    throw value_error("adagrad_step: gradient shapes do not match parameters");
  auto update = [&](auto& param, auto& acc, const auto& grad) {
    auto gt = (grad.array() + 2.0 * cfg.l2 * param.array()).eval();
    acc.array() += gt.square();
    param.array() -= cfg.learning_rate * gt / (acc.array().sqrt() + cfg.adagrad_epsilon);
  };
  update(p.X, st.accX, g.dX);
  update(p.W, st.accW, g.dW);
  update(p.u, st.accu, g.du);
}

// ---------------------------------------------------------------------------
// Training loop: generalized EM with one Adagrad step per E-step.
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double objective = 0.0;    // sum over visited sentences of NLL + l2 * ||params||^2
  double regularizer = 0.0;  // the l2 part of the objective
  double wall_seconds = 0.0;
  int skipped = 0;

  std::string to_line() const {
    std::ostringstream out;
    out << "epoch=" << epoch << " objective=" << format_double(objective)
        << " regularizer=" << format_double(regularizer)
        << " wall_s=" << format_double(wall_seconds) << " skipped=" << skipped;
    return out.str();
  }
};

struct TrainResult {
  ModelParams params;
  AdagradState opt;
  std::vector<EpochStats> epochs;
};

inline double params_sq_norm(const ModelParams& p) {
  return p.X.squaredNorm() + p.W.squaredNorm() + p.u.squaredNorm();
}

// Sentences are visited in an order reshuffled each epoch from the seed.
// With workers > 1, gradients of `workers` consecutive sentences are
// computed in parallel against the same parameters and applied as one
// summed step; reruns are bit-identical only for a fixed worker count.
template <typename EpochCallback>
TrainResult train(const TrainConfig& cfg, const std::vector<Sentence>& corpus, int vocab_size,
                  EpochCallback&& on_epoch) {
  cfg.validate();
  if (corpus.empty()) throw value_error("training corpus is empty");

  TrainResult result;
  result.params = init_params(vocab_size, cfg.d, cfg.seed);
  result.params.theta = cfg.theta;
  result.opt = AdagradState::zeros_like(result.params);

  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(cfg.seed, 0x706f63685f00ULL + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);

    EpochStats stats;
    stats.epoch = epoch;

    std::vector<size_t> batch;
    batch.reserve(cfg.workers);
    size_t cursor = 0;
    while (cursor < order.size()) {
      batch.clear();
      while (cursor < order.size() && static_cast<int>(batch.size()) < cfg.workers) {
        const size_t idx = order[cursor++];
        if (corpus[idx].size() > cfg.max_sentence_length) {
          ++stats.skipped;
          continue;
        }
        batch.push_back(idx);
      }
      if (batch.empty()) continue;

      std::vector<Gradients> grads(batch.size());
      std::vector<double> nlls(batch.size(), 0.0);
      std::vector<std::string> errors(batch.size());
      parallel_for(batch.size(), cfg.workers, [&](size_t lo, size_t hi) {
        for (size_t b = lo; b < hi; ++b) {
          try {
            auto [grad, nll] = sentence_gradient(result.params, corpus[batch[b]], cfg.grad_mode);
            grads[b] = std::move(grad);
            nlls[b] = nll;
          } catch (const std::exception& e) {
            errors[b] = e.what();
          }
        }
      });
      for (size_t b = 0; b < batch.size(); ++b)
        if (!errors[b].empty())
          throw numeric_error("sentence " + std::to_string(batch[b]) + ": " + errors[b]);

      const double reg = cfg.l2 * params_sq_norm(result.params);
      for (size_t b = 0; b < batch.size(); ++b) {
        stats.objective += nlls[b] + reg;
        stats.regularizer += reg;
      }
      Gradients step = std::move(grads[0]);
      for (size_t b = 1; b < batch.size(); ++b) step.add(grads[b]);
      if (!step.all_finite())
        throw numeric_error("non-finite gradient in epoch " + std::to_string(epoch));
      adagrad_step(result.params, result.opt, step, cfg);
    }

    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(stats);
    on_epoch(epoch, result, stats);
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const std::vector<Sentence>& corpus,
                         int vocab_size) {
  return train(cfg, corpus, vocab_size,
               [](int, const TrainResult&, const EpochStats&) {});
}

// --- checkpoint serialization (model + Adagrad accumulators) -------------

inline std::string checkpoint_to_string(const ModelParams& p, const AdagradState& st) {
  std::ostringstream out;
  out << model_to_string(p);
  out << "adagrad v1\n";
  out << "accX " << st.accX.rows() << ' ' << st.accX.cols() << "\n";
  write_matrix(out, st.accX);
  out << "accW " << st.accW.rows() << ' ' << st.accW.cols() << "\n";
  write_matrix(out, st.accW);
  out << "accu " << st.accu.size() << "\n";
  write_matrix(out, st.accu.transpose());
  return out.str();
}

inline std::pair<ModelParams, AdagradState> checkpoint_from_string(const std::string& text) {
  const std::string marker = "adagrad v1\n";
  const auto pos = text.find(marker);
  if (pos == std::string::npos) throw io_error("checkpoint file has no optimizer section");
  ModelParams p = model_from_string(text.substr(0, pos));
  std::istringstream in(text.substr(pos + marker.size()));
  AdagradState st;
  std::string line;
  auto read_section = [&](const char* tag, int rows, int cols) {
    if (!std::getline(in, line)) throw io_error("truncated checkpoint file");
    std::ostringstream want;
    want << tag << ' ' << rows;
    if (cols > 0) want << ' ' << cols;
    if (line != want.str()) throw io_error("bad checkpoint section, expected '" + want.str() + "'");
    return read_matrix(in, rows, cols > 0 ? cols : 1, tag);
  };
  st.accX = read_section("accX", p.vocab_size(), p.d);
  st.accW = read_section("accW", p.d, 2 * p.d);
  if (!std::getline(in, line) || line != "accu " + std::to_string(p.d))
    throw io_error("bad checkpoint section, expected 'accu'");
  st.accu = read_matrix(in, 1, p.d, "accu").transpose();
  return {std::move(p), std::move(st)};
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, const AdagradState& st) {
  write_text_file(path, checkpoint_to_string(p, st));
}

inline std::pair<ModelParams, AdagradState> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace clm
