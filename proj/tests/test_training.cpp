#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "clm/diagnostics.hpp"
#include "clm/training.hpp"
#include "synthetic.hpp"

using namespace clm;

namespace {

Sentence seq(std::initializer_list<int32_t> ids) {
  Sentence s;
  s.ids = ids;
  return s;
}

}  // namespace

TEST_CASE("sentence_nll") {
  ModelParams p = init_params(5, 3, 7);

  SUBCASE("single word with zero energies") {
    p.u.setZero();
    CHECK(sentence_nll(p, seq({2})) == 0.0);
  }

  SUBCASE("three words with zero energies count the two trees") {
    p.u.setZero();
    p.theta = 1.0;
    CHECK(sentence_nll(p, seq({0, 1, 2})) == doctest::Approx(-std::numbers::ln2).epsilon(1e-14));
  }

  SUBCASE("negates the oracle marginal") {
    Rng rng(9);
    for (int n = 1; n <= 7; ++n) {
      Sentence s = random_sentence(rng, n, 5);
      CHECK(sentence_nll(p, s) == doctest::Approx(-brute_force_log_score(p, s)).epsilon(1e-10));
    }
  }
}

TEST_CASE("q_objective") {
  ModelParams p = init_params(5, 3, 11);

  SUBCASE("equals the NLL at the old parameters on a pair") {
    Sentence s = seq({1, 4});
    CHECK(q_objective(p, p, s) == doctest::Approx(sentence_nll(p, s)).epsilon(1e-13));
  }

  SUBCASE("zero energies in both parameter sets give zero") {
    ModelParams z = p;
    z.u.setZero();
    z.theta = 1.0;
    for (auto s : {seq({0}), seq({0, 1}), seq({3, 2, 0, 1})})
      CHECK(q_objective(z, z, s) == doctest::Approx(0.0).epsilon(1e-13));
  }

  SUBCASE("three words at d=1 match an enumeration-based hand expansion") {
    ModelParams po;  // old parameters: chart, posteriors, mixture weights
    po.d = 1;
    po.X.resize(3, 1);
    po.X << 0.4, -0.3, 0.9;
    po.W.resize(1, 2);
    po.W << 0.8, -0.5;
    po.u.resize(1);
    po.u << 0.6;
    po.theta = 0.85;

    ModelParams pn = po;  // new parameters: energies are re-evaluated here
    pn.X << -0.2, 0.5, 0.1;
    pn.W << 0.3, 0.7;
    pn.u << -0.4;
    pn.theta = 0.85;

    // Old chart, scalar route (both trees enumerated explicitly).
    const double x1 = 0.4, x2 = -0.3, x3 = 0.9;
    const double w1 = 0.8, w2 = -0.5, u0 = 0.6, lt = std::log(0.85);
    const double il1 = -u0 * x1, il2 = -u0 * x2, il3 = -u0 * x3;
    const double p12 = std::tanh(w1 * x1 + w2 * x2);
    const double p23 = std::tanh(w1 * x2 + w2 * x3);
    const double il12 = (-u0 * p12 + lt) + il1 + il2;
    const double il23 = (-u0 * p23 + lt) + il2 + il3;
    const double pa_a = std::tanh(w1 * x1 + w2 * p23);
    const double pa_b = std::tanh(w1 * p12 + w2 * x3);
    const double sl_a = (-u0 * pa_a + lt) + il1 + il23;  // tree 1(23)
    const double sl_b = (-u0 * pa_b + lt) + il12 + il3;  // tree (12)3
    const double il13 = log_add(sl_a, sl_b);
    const double post_a = std::exp(sl_a - il13);
    const double post_b = std::exp(sl_b - il13);

    // New energies on embeddings rebuilt under pn with the old weights.
    const double y1 = -0.2, y2 = 0.5, y3 = 0.1;
    const double v1 = 0.3, v2 = 0.7, un = -0.4, ltn = std::log(0.85);
    const double q12 = std::tanh(v1 * y1 + v2 * y2);
    const double q23 = std::tanh(v1 * y2 + v2 * y3);
    const double qa = std::tanh(v1 * y1 + v2 * q23);
    const double qb = std::tanh(v1 * q12 + v2 * y3);

    double q = 0.0;
    q += un * y1 + un * y2 + un * y3;                 // leaves, posterior 1
    q -= post_a * (-un * q23 + ltn);                  // rule (2,3), tree A only
    q -= post_b * (-un * q12 + ltn);                  // rule (1,2), tree B only
    q -= post_a * (-un * qa + ltn);                   // root split after word 1
    q -= post_b * (-un * qb + ltn);                   // root split after word 2
    CHECK(q_objective(po, pn, seq({0, 1, 2})) == doctest::Approx(q).epsilon(1e-13));
  }

  SUBCASE("mismatched shapes are rejected") {
    ModelParams other = init_params(5, 2, 1);
    CHECK_THROWS_AS(q_objective(p, other, seq({0, 1})), value_error);
  }
}

TEST_CASE("compose_grad_params base cases") {
  ModelParams p = init_params(4, 2, 13);
  Chart c = inside(p, seq({1, 3}));
  ChartJacobians jac = compose_grad_params(p, c);

  SUBCASE("leaves have zero W jacobian and identity for their own word") {
    const auto& leaf = jac.at(0, 0);
    CHECK(leaf.d_w.lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE(leaf.d_x.count(1) == 1);
    CHECK((leaf.d_x.at(1) - Mat::Identity(2, 2)).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(leaf.d_x.count(3) == 0);
  }

  SUBCASE("a width-2 node at d=1 reduces to f' times the children") {
    ModelParams q;
    q.d = 1;
    q.X.resize(2, 1);
    q.X << 0.7, -0.2;
    q.W.resize(1, 2);
    q.W << 0.5, 0.9;
    q.u.resize(1);
    q.u << 0.3;
    Chart cc = inside(q, seq({0, 1}));
    ChartJacobians jj = compose_grad_params(q, cc);
    const double pa = std::tanh(0.5 * 0.7 + 0.9 * -0.2);
    const double fp = 1.0 - pa * pa;
    const auto& node = jj.at(0, 1);
    REQUIRE(node.d_w.cols() == 2);
    CHECK(node.d_w(0, 0) == doctest::Approx(fp * 0.7).epsilon(1e-14));
    CHECK(node.d_w(0, 1) == doctest::Approx(fp * -0.2).epsilon(1e-14));
  }
}

TEST_CASE("compose_grad_params matches finite differences of frozen embeddings") {
  const int d = 2;
  ModelParams p = init_params(4, d, 17);
  Sentence s = seq({0, 2, 2, 1});  // repeated word exercises summed jacobians
  Chart c = inside(p, s);
  ChartJacobians jac = compose_grad_params(p, c);
  const double eps = 1e-6;

  for (int i = 0; i < s.size(); ++i) {
    for (int j = i + 1; j < s.size(); ++j) {
      const auto& sj = jac.at(i, j);
      const int col = c.span_index(i, j);

      for (int r = 0; r < d; ++r) {
        for (int cc = 0; cc < 2 * d; ++cc) {
          ModelParams hi = p, lo = p;
          hi.W(r, cc) += eps;
          lo.W(r, cc) -= eps;
          Vec fd = (recompute_embeddings_frozen(hi, c).col(col) -
                    recompute_embeddings_frozen(lo, c).col(col)) /
                   (2 * eps);
          Vec an = sj.d_w.col(r * 2 * d + cc);
          CHECK((fd - an).lpNorm<Eigen::Infinity>() < 1e-7);
        }
      }

      for (int32_t word : {0, 1, 2, 3}) {
        for (int cc = 0; cc < d; ++cc) {
          ModelParams hi = p, lo = p;
          hi.X(word, cc) += eps;
          lo.X(word, cc) -= eps;
          Vec fd = (recompute_embeddings_frozen(hi, c).col(col) -
                    recompute_embeddings_frozen(lo, c).col(col)) /
                   (2 * eps);
          Vec an = sj.d_x.count(word) ? Vec(sj.d_x.at(word).col(cc)) : Vec(Vec::Zero(d));
          CHECK((fd - an).lpNorm<Eigen::Infinity>() < 1e-7);
        }
      }
    }
  }
}

TEST_CASE("em_gradient") {
  SUBCASE("closed form at u = 0: only du survives") {
    ModelParams p = init_params(5, 3, 19);
    p.u.setZero();
    Sentence s = seq({0, 4, 2, 1});
    Chart c = inside(p, s);
    outside(p, c);

    Vec expected_du = Vec::Zero(3);
    for (int i = 0; i < s.size(); ++i) expected_du += p.X.row(s.ids[i]).transpose();
    for (const auto& r : rule_posteriors(c)) {
      Vec pa = compose(p, expected_embedding(c, r.i, r.k), expected_embedding(c, r.k + 1, r.j));
      expected_du += r.weight * pa;
    }

    Gradients g = em_gradient(p, s);
    CHECK((g.du - expected_du).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(g.dW.lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(g.dX.lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("matches finite differences of Q") {
    for (int d : {1, 3}) {
      for (uint64_t sweep = 0; sweep < 3; ++sweep) {
        ModelParams p = init_params(5, d, mix_seed(23, d * 10 + sweep));
        Rng rng(mix_seed(29, d * 10 + sweep));
        for (int n : {1, 2, 3, 4}) {
          Sentence s = random_sentence(rng, n, 5);
          Gradients an = em_gradient(p, s);
          Gradients fd = fd_gradient(
              [&](const ModelParams& pp) { return q_objective(p, pp, s); }, p, 1e-5);
          CHECK(max_rel_err(an, fd) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("direct_gradient") {
  SUBCASE("single-word closed form") {
    ModelParams p = init_params(4, 3, 31);
    Sentence s = seq({2});
    Gradients g = direct_gradient(p, s);
    // NLL = E = u . x for the identity energy map
    CHECK((g.du - p.X.row(2).transpose()).lpNorm<Eigen::Infinity>() < 1e-15);
    CHECK((g.dX.row(2).transpose() - p.u).lpNorm<Eigen::Infinity>() < 1e-15);
    CHECK(g.dW.lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("agrees with em_gradient when no mixture weights exist") {
    ModelParams p = init_params(5, 4, 37);
    for (auto s : {seq({3}), seq({1, 4}), seq({2, 2})}) {
      Gradients a = direct_gradient(p, s);
      Gradients b = em_gradient(p, s);
      CHECK(max_rel_err(a, b) < 1e-12);
    }
  }

  SUBCASE("matches finite differences of the NLL") {
    for (int d : {1, 3}) {
      for (uint64_t sweep = 0; sweep < 3; ++sweep) {
        ModelParams p = init_params(5, d, mix_seed(41, d * 10 + sweep));
        Rng rng(mix_seed(43, d * 10 + sweep));
        for (int n : {1, 2, 3, 4, 5}) {
          Sentence s = random_sentence(rng, n, 5);
          Gradients an = direct_gradient(p, s);
          Gradients fd = fd_gradient(
              [&](const ModelParams& pp) { return sentence_nll(pp, s); }, p, 1e-5);
          CHECK(max_rel_err(an, fd) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("adagrad_step") {
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.l2 = 0.0;
  cfg.adagrad_epsilon = 1e-8;

  ModelParams p = init_params(3, 2, 47);
  AdagradState st = AdagradState::zeros_like(p);

  SUBCASE("first step is about -lr * sign(gradient)") {
    Gradients g = Gradients::zeros_like(p);
    g.dW(0, 0) = 4.0;
    g.dW(1, 3) = -0.25;
    ModelParams before = p;
    adagrad_step(p, st, g, cfg);
    CHECK(p.W(0, 0) - before.W(0, 0) == doctest::Approx(-0.5).epsilon(1e-6));
    CHECK(p.W(1, 3) - before.W(1, 3) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(p.W(0, 1) == before.W(0, 1));
    CHECK((p.X - before.X).lpNorm<Eigen::Infinity>() == 0.0);
  }

  SUBCASE("zero gradient and zero l2 leave parameters untouched") {
    Gradients g = Gradients::zeros_like(p);
    ModelParams before = p;
    adagrad_step(p, st, g, cfg);
    CHECK(model_to_string(p) == model_to_string(before));
  }

  SUBCASE("steps shrink under a constant gradient") {
    Gradients g = Gradients::zeros_like(p);
    g.du(0) = 1.5;
    const double u0 = p.u(0);
    adagrad_step(p, st, g, cfg);
    const double step1 = std::abs(p.u(0) - u0);
    const double u1 = p.u(0);
    adagrad_step(p, st, g, cfg);
    const double step2 = std::abs(p.u(0) - u1);
    CHECK(step2 < step1);
    CHECK(step1 > 0.0);
  }

  SUBCASE("the l2 term is part of the accumulated gradient") {
    cfg.l2 = 0.1;
    Gradients g = Gradients::zeros_like(p);
    p.u(0) = 2.0;
    adagrad_step(p, st, g, cfg);
    CHECK(p.u(0) < 2.0);              // decay pulls toward zero
    CHECK(st.accu(0) > 0.0);          // and the accumulator saw 2*l2*param
  }

  SUBCASE("shape mismatches are rejected") {
    Gradients g = Gradients::zeros_like(init_params(3, 5, 1));
    CHECK_THROWS_AS(adagrad_step(p, st, g, cfg), value_error);
  }
}

TEST_CASE("train") {
  auto corpus = clmtest::synthetic_corpus(100, 30, 3, 8, 61);
  const int vocab_size = 31;  // content plus unk

  TrainConfig cfg;
  cfg.d = 5;
  cfg.epochs = 5;
  cfg.seed = 71;

  SUBCASE("zero epochs returns the untouched initialization") {
    TrainConfig z = cfg;
    z.epochs = 0;
    TrainResult r = train(z, corpus, vocab_size);
    CHECK(model_to_string(r.params) == model_to_string(init_params(vocab_size, z.d, z.seed)));
    CHECK(r.epochs.empty());
  }

  SUBCASE("same seed reproduces the final model byte for byte") {
    TrainConfig small = cfg;
    small.epochs = 2;
    TrainResult a = train(small, corpus, vocab_size);
    TrainResult b = train(small, corpus, vocab_size);
    CHECK(model_to_string(a.params) == model_to_string(b.params));
    CHECK(checkpoint_to_string(a.params, a.opt) == checkpoint_to_string(b.params, b.opt));
    TrainConfig other = small;
    other.seed = 72;
    CHECK(model_to_string(train(other, corpus, vocab_size).params) != model_to_string(a.params));
  }

  SUBCASE("the regularized objective trends down") {
    TrainResult r = train(cfg, corpus, vocab_size);
    REQUIRE(r.epochs.size() == 5);
    int drops = 0;
    for (size_t e = 1; e < r.epochs.size(); ++e) {
      CHECK(std::isfinite(r.epochs[e].objective));
      drops += r.epochs[e].objective < r.epochs[e - 1].objective;
    }
    CHECK(drops >= 3);  // 4 transitions exist; allow one plateau
    CHECK(r.params.X.allFinite());
  }

  SUBCASE("overlong sentences are skipped, not scored") {
    auto padded = corpus;
    Sentence longs;
    for (int i = 0; i < 20; ++i) longs.ids.push_back(i % 30);
    padded.push_back(longs);
    TrainConfig capped = cfg;
    capped.epochs = 1;
    capped.max_sentence_length = 10;
    TrainResult r = train(capped, padded, vocab_size);
    CHECK(r.epochs[0].skipped == 1);
  }

  SUBCASE("empty corpus is an error") {
    CHECK_THROWS_AS(train(cfg, {}, vocab_size), value_error);
  }

  SUBCASE("direct mode trains too") {
    TrainConfig dm = cfg;
    dm.grad_mode = GradMode::Direct;
    dm.epochs = 2;
    TrainResult r = train(dm, corpus, vocab_size);
    CHECK(r.epochs.size() == 2);
    CHECK(std::isfinite(r.epochs.back().objective));
  }

  SUBCASE("parallel training reproduces itself for a fixed worker count") {
    TrainConfig par = cfg;
    par.epochs = 2;
    par.workers = 2;
    TrainResult a = train(par, corpus, vocab_size);
    TrainResult b = train(par, corpus, vocab_size);
    CHECK(model_to_string(a.params) == model_to_string(b.params));
    // chunked updates are a different schedule than single-worker training
    TrainConfig single = par;
    single.workers = 1;
    CHECK(model_to_string(train(single, corpus, vocab_size).params) != model_to_string(a.params));
  }
}

TEST_CASE("checkpoint serialization round trips") {
  ModelParams p = init_params(6, 3, 83);
  AdagradState st = AdagradState::zeros_like(p);
  st.accX.setConstant(0.25);
  st.accW(1, 2) = 7.5;
  st.accu(0) = 1e-3;
  std::string text = checkpoint_to_string(p, st);
  auto [p2, st2] = checkpoint_from_string(text);
  CHECK(checkpoint_to_string(p2, st2) == text);
  CHECK((st2.accW - st.accW).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK_THROWS_AS(checkpoint_from_string(model_to_string(p)), io_error);
}
