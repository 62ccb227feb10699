#pragma once

// Inside-Outside dynamic programs over sentence spans.
//
// The chart marginalizes an unnormalized sentence score over every full
// binary bracketing in O(n^3 d^2). Each span keeps a single expected
// embedding: the softmax-weighted (over splits, by that split's inside
// score) average of the split compositions. That unique representation is
// what makes the span DP exact, so the outside pass and all posteriors
// reuse the rule scores frozen by the inside pass instead of re-composing.
//
// All arithmetic stays in log space; linear-space products underflow past
// n of about 30.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "clm/common.hpp"
#include "clm/corpus.hpp"
#include "clm/model.hpp"

namespace clm {

struct Chart {
  int n = 0;
  int d = 0;
  std::vector<int32_t> ids;

  std::vector<double> inside_log;   // span (i,j) -> log pi(i,j)
  std::vector<double> outside_log;  // span (i,j) -> log beta(i,j)
  std::vector<double> split_log;    // (i,k,j) -> log of that split's inside contribution
  std::vector<double> rule_log;     // (i,k,j) -> log zeta of the binary rule
  Mat expected;                     // d x n^2; column per span

  bool has_inside = false;
  bool has_outside = false;

  int span_index(int i, int j) const { return i * n + j; }
  int split_index(int i, int k, int j) const { return (i * n + j) * n + k; }

  void check_span(int i, int j) const {
    if (i < 0 || j >= n || i > j) throw value_error("span out of range");
  }

  double inside(int i, int j) const { return inside_log[span_index(i, j)]; }
  double outside(int i, int j) const { return outside_log[span_index(i, j)]; }
  double split(int i, int k, int j) const { return split_log[split_index(i, k, j)]; }
  double zeta(int i, int k, int j) const { return rule_log[split_index(i, k, j)]; }

  // Posterior weight of split k within span (i,j); the weights used for the
  // expected-embedding mixture. They sum to 1 over k by construction.
  double split_weight(int i, int k, int j) const {
    return std::exp(split(i, k, j) - inside(i, j));
  }

  double sentence_log_score() const {
    if (!has_inside) throw value_error("chart has no inside pass");
    return inside(0, n - 1);
  }
};

// Accessor with the range checks; leaf spans return the word embedding row.
inline Vec expected_embedding(const Chart& chart, int i, int j) {
  chart.check_span(i, j);
  if (!chart.has_inside) throw value_error("chart has no inside pass");
  return chart.expected.col(chart.span_index(i, j));
}

inline Chart inside(const ModelParams& p, const Sentence& s) {
  p.validate();
  const int n = s.size();
  if (n < 1) throw value_error("cannot score an empty sentence");
  for (int32_t id : s.ids)
    if (id < 0 || id >= p.vocab_size()) throw value_error("sentence id out of vocabulary range");

  Chart c;
  c.n = n;
  c.d = p.d;
  c.ids = s.ids;
  c.inside_log.assign(static_cast<size_t>(n) * n, neg_inf);
  c.outside_log.assign(static_cast<size_t>(n) * n, neg_inf);
  c.split_log.assign(static_cast<size_t>(n) * n * n, neg_inf);
  c.rule_log.assign(static_cast<size_t>(n) * n * n, neg_inf);
  c.expected.setZero(p.d, static_cast<Eigen::Index>(n) * n);

  const double log_theta = std::log(p.theta);
  const auto WL = p.W.leftCols(p.d);
  const auto WR = p.W.rightCols(p.d);

  for (int i = 0; i < n; ++i) {
    Vec x = p.X.row(s.ids[i]).transpose();
    c.expected.col(c.span_index(i, i)) = x;
    c.inside_log[c.span_index(i, i)] = -rule_energy(p, x);
  }

  std::vector<double> terms;
  Mat pas(p.d, n);  // split compositions for the current span
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      terms.clear();
      for (int k = i; k < j; ++k) {
        Vec z = WL * c.expected.col(c.span_index(i, k)) +
                WR * c.expected.col(c.span_index(k + 1, j));
        Vec pa = apply_activation(p.f, z);
        pas.col(k - i) = pa;
        const double lz = -apply_energy_map(p.g, p.u.dot(pa)) + log_theta;
        c.rule_log[c.split_index(i, k, j)] = lz;
        const double sl = lz + c.inside(i, k) + c.inside(k + 1, j);
        c.split_log[c.split_index(i, k, j)] = sl;
        terms.push_back(sl);
      }
      const double total = log_sum_exp(terms);
      c.inside_log[c.span_index(i, j)] = total;
      Vec mix = Vec::Zero(p.d);
      for (int k = i; k < j; ++k)
        mix += std::exp(c.split(i, k, j) - total) * pas.col(k - i);
      c.expected.col(c.span_index(i, j)) = mix;
    }
  }
  c.has_inside = true;
  if (!std::isfinite(c.sentence_log_score()))
    throw numeric_error("inside score is not finite");
  return c;
}

// Fills outside_log. Uses the rule scores frozen by the inside pass: the
// expected embeddings make zeta a pure function of the span, so no
// re-composition happens here.
inline void outside(const ModelParams& p, Chart& c) {
  if (!c.has_inside) throw value_error("outside requires a completed inside pass");
  if (p.d != c.d) throw value_error("model dimension does not match chart");
  const int n = c.n;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) c.outside_log[c.span_index(i, j)] = neg_inf;
  c.outside_log[c.span_index(0, n - 1)] = 0.0;  // the full span is always the root

  for (int width = n; width >= 2; --width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      const double beta = c.outside(i, j);
      if (beta == neg_inf) continue;
      for (int k = i; k < j; ++k) {
        const double lz = c.zeta(i, k, j);
        double& left = c.outside_log[c.span_index(i, k)];
        left = log_add(left, lz + c.inside(k + 1, j) + beta);
        double& right = c.outside_log[c.span_index(k + 1, j)];
        right = log_add(right, lz + c.inside(i, k) + beta);
      }
    }
  }
  c.has_outside = true;
}

struct RulePosterior {
  int i = 0;
  int k = 0;
  int j = 0;
  double weight = 0.0;  // mu(r) / p(W)
};

// Posterior weight of every binary rule instance. Leaf rules always have
// posterior 1 (every tree contains every leaf) and are not listed.
inline std::vector<RulePosterior> rule_posteriors(const Chart& c) {
  if (!c.has_outside) throw value_error("rule_posteriors requires a completed outside pass");
  const double total = c.sentence_log_score();
  std::vector<RulePosterior> out;
  for (int width = 2; width <= c.n; ++width) {
    for (int i = 0; i + width - 1 < c.n; ++i) {
      const int j = i + width - 1;
      for (int k = i; k < j; ++k)
        out.push_back({i, k, j, std::exp(c.split(i, k, j) + c.outside(i, j) - total)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary trees: the Viterbi bracketing and the all-trees oracle.
// ---------------------------------------------------------------------------

struct BinaryTree;
using TreePtr = std::shared_ptr<const BinaryTree>;

struct BinaryTree {
  int leaf = -1;  // word position for leaves, -1 for internal nodes
  TreePtr left;
  TreePtr right;

  bool is_leaf() const { return leaf >= 0; }
};

inline TreePtr make_leaf(int pos) {
  auto t = std::make_shared<BinaryTree>();
  t->leaf = pos;
  return t;
}

inline TreePtr make_node(TreePtr l, TreePtr r) {
  auto t = std::make_shared<BinaryTree>();
  t->left = std::move(l);
  t->right = std::move(r);
  return t;
}

struct SplitRule {
  int i = 0;
  int k = 0;
  int j = 0;
};

namespace detail {
// Returns the covered span; appends the internal (i, k, j) rules.
inline std::pair<int, int> collect_rules(const BinaryTree& t, std::vector<SplitRule>& rules) {
  if (t.is_leaf()) return {t.leaf, t.leaf};
  auto [li, lj] = collect_rules(*t.left, rules);
  auto [ri, rj] = collect_rules(*t.right, rules);
  if (lj + 1 != ri) throw value_error("malformed tree: children do not cover adjacent spans");
  rules.push_back({li, lj, rj});
  return {li, rj};
}
}  // namespace detail

inline std::vector<SplitRule> tree_rules(const TreePtr& t) {
  std::vector<SplitRule> rules;
  if (t) detail::collect_rules(*t, rules);
  return rules;
}

inline int tree_leaf_count(const TreePtr& t) {
  if (!t) return 0;
  if (t->is_leaf()) return 1;
  return tree_leaf_count(t->left) + tree_leaf_count(t->right);
}

// "((w1 w2) (w3 (w4 w5)))" with leaf labels supplied by the caller.
template <typename LabelFn>
std::string to_bracketed(const TreePtr& t, LabelFn&& label) {
  if (!t) return "";
  if (t->is_leaf()) return label(t->leaf);
  return "(" + to_bracketed(t->left, label) + " " + to_bracketed(t->right, label) + ")";
}

inline std::string to_bracketed(const TreePtr& t, const Vocab& vocab, const Sentence& s) {
  return to_bracketed(t, [&](int pos) { return vocab.token(s.ids[pos]); });
}

// All full binary bracketings of n leaves; Catalan(n-1) of them. Subtrees
// are shared, so the result stays small even near the cap.
inline constexpr int kDefaultTreeCap = 12;

inline std::vector<TreePtr> enumerate_trees(int n, int cap = kDefaultTreeCap) {
  if (n < 1) throw value_error("enumerate_trees: n must be >= 1");
  if (n > cap) throw value_error("enumerate_trees: n exceeds the enumeration cap of " + std::to_string(cap));
  std::vector<std::vector<std::vector<TreePtr>>> memo(
      n, std::vector<std::vector<TreePtr>>(n));
  for (int i = 0; i < n; ++i) memo[i][i] = {make_leaf(i)};
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      auto& out = memo[i][j];
      for (int k = i; k < j; ++k)
        for (const auto& l : memo[i][k])
          for (const auto& r : memo[k + 1][j]) out.push_back(make_node(l, r));
    }
  }
  return memo[0][n - 1];
}

// Score of one tree under the chart's frozen semantics: leaf scores plus the
// chart's rule scores (which use expected child embeddings).
inline double tree_log_score(const Chart& c, const TreePtr& t) {
  if (tree_leaf_count(t) != c.n) throw value_error("tree does not cover the sentence");
  double total = 0.0;
  for (int i = 0; i < c.n; ++i) total += c.inside(i, i);
  for (const auto& r : tree_rules(t)) total += c.zeta(r.i, r.k, r.j);
  return total;
}

// Direct evaluation of the marginal: log-sum-exp over every enumerated tree.
// This is the oracle the inside DP is tested against.
inline double brute_force_log_score(const ModelParams& p, const Sentence& s,
                                    int cap = kDefaultTreeCap) {
  if (s.size() > cap) throw value_error("brute_force_log_score: sentence exceeds the enumeration cap");
  Chart c = inside(p, s);
  std::vector<double> scores;
  for (const auto& t : enumerate_trees(s.size(), cap)) scores.push_back(tree_log_score(c, t));
  return log_sum_exp(scores);
}

// Max-product analogue of the inside recursion over the same frozen rule
// scores. Ties break toward the smallest split point.
inline std::pair<TreePtr, double> viterbi_tree(const ModelParams& p, const Sentence& s) {
  Chart c = inside(p, s);
  const int n = c.n;
  std::vector<double> best(static_cast<size_t>(n) * n, neg_inf);
  std::vector<int> arg(static_cast<size_t>(n) * n, -1);
  for (int i = 0; i < n; ++i) best[c.span_index(i, i)] = c.inside(i, i);
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width - 1 < n; ++i) {
      const int j = i + width - 1;
      double& b = best[c.span_index(i, j)];
      for (int k = i; k < j; ++k) {
        const double v = c.zeta(i, k, j) + best[c.span_index(i, k)] + best[c.span_index(k + 1, j)];
        if (v > b) {
          b = v;
          arg[c.span_index(i, j)] = k;
        }
      }
    }
  }
  std::function<TreePtr(int, int)> build = [&](int i, int j) -> TreePtr {
    if (i == j) return make_leaf(i);
    const int k = arg[c.span_index(i, j)];
    return make_node(build(i, k), build(k + 1, j));
  };
  return {build(0, n - 1), best[c.span_index(0, n - 1)]};
}

// Scores the single left-branching bracketing, composing children directly
// along that one path; the sequential-tree diagnostic.
inline double chain_tree_log_score(const ModelParams& p, const Sentence& s) {
  p.validate();
  const int n = s.size();
  if (n < 1) throw value_error("cannot score an empty sentence");
  const double log_theta = std::log(p.theta);
  Vec cur = p.X.row(s.ids[0]).transpose();
  double total = -rule_energy(p, cur);
  for (int i = 1; i < n; ++i) {
    Vec x = p.X.row(s.ids[i]).transpose();
    total += -rule_energy(p, x);
    cur = compose(p, cur, x);
    total += -rule_energy(p, cur) + log_theta;
  }
  return total;
}

}  // namespace clm
