// clm: compositional language model toolkit.
//
// Subcommands: build-vocab, train, score, eval, distort, check.
// Exit codes: 0 success, 2 configuration errors, 3 file I/O errors,
// 4 numeric failures (including failed self-checks), 1 anything else.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "clm/chart.hpp"
#include "clm/common.hpp"
#include "clm/corpus.hpp"
#include "clm/diagnostics.hpp"
#include "clm/eval.hpp"
#include "clm/model.hpp"
#include "clm/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

clm::Vocab load_vocab_checked(const std::string& path) { return clm::load_vocab(path); }

// A model trained against one vocabulary must not be applied with another.
std::pair<clm::ModelParams, clm::Vocab> load_model_and_vocab(const std::string& model_path,
                                                             const std::string& vocab_path) {
  clm::ModelParams params = clm::load_model(model_path);
  clm::Vocab vocab = load_vocab_checked(vocab_path);
  if (params.vocab_size() != vocab.size())
    throw clm::config_error("model expects a vocabulary of size " +
                            std::to_string(params.vocab_size()) + ", got " +
                            std::to_string(vocab.size()));
  if (params.vocab_hash != 0 && params.vocab_hash != vocab.hash())
    throw clm::config_error("vocabulary hash does not match the one the model was trained with");
  return {std::move(params), std::move(vocab)};
}

struct BuildVocabArgs {
  std::string corpus;
  std::string out;
  int min_count = 1;
};

int cmd_build_vocab(const BuildVocabArgs& a) {
  clm::Vocab vocab = clm::build_vocab(clm::read_text_lines(a.corpus), a.min_count);
  clm::save_vocab(a.out, vocab);
  std::cout << "wrote " << a.out << " (" << vocab.size() - 1 << " content tokens + "
            << clm::kUnkToken << ")\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string corpus;
  std::string vocab;
  std::string out_dir = "run";
  clm::TrainConfig cfg;
  std::string grad_mode = "em";
  bool seed_given = false;
};

// Plain key=value lines; '#' starts a comment. Flags override file values.
std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::string line : clm::read_text_lines(path)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw clm::config_error("bad config line (expected key=value): " + line);
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void merge_train_config(const CLI::App* sub, TrainArgs& a) {
  if (a.config.empty()) return;
  auto flag_given = [&](const char* name) { return sub->count(name) > 0; };
  for (const auto& [key, value] : parse_config_file(a.config)) {
    try {
      if (key == "corpus") {
        if (!flag_given("--corpus")) a.corpus = value;
      } else if (key == "vocab") {
        if (!flag_given("--vocab")) a.vocab = value;
      } else if (key == "out-dir") {
        if (!flag_given("--out-dir")) a.out_dir = value;
      } else if (key == "epochs") {
        if (!flag_given("--epochs")) a.cfg.epochs = static_cast<int>(clm::parse_int(value));
      } else if (key == "d") {
        if (!flag_given("--d")) a.cfg.d = static_cast<int>(clm::parse_int(value));
      } else if (key == "learning-rate") {
        if (!flag_given("--learning-rate")) a.cfg.learning_rate = clm::parse_double(value);
      } else if (key == "l2") {
        if (!flag_given("--l2")) a.cfg.l2 = clm::parse_double(value);
      } else if (key == "seed") {
        if (!flag_given("--seed")) a.cfg.seed = clm::parse_uint64(value);
        a.seed_given = true;
      } else if (key == "grad-mode") {
        if (!flag_given("--grad-mode")) a.grad_mode = value;
      } else if (key == "adagrad-epsilon") {
        if (!flag_given("--adagrad-epsilon")) a.cfg.adagrad_epsilon = clm::parse_double(value);
      } else if (key == "max-sentence-length") {
        if (!flag_given("--max-sentence-length"))
          a.cfg.max_sentence_length = static_cast<int>(clm::parse_int(value));
      } else if (key == "workers") {
        if (!flag_given("--workers")) a.cfg.workers = static_cast<int>(clm::parse_int(value));
      } else if (key == "theta") {
        if (!flag_given("--theta")) a.cfg.theta = clm::parse_double(value);
      } else {
        throw clm::config_error("unknown config key: " + key);
      }
    } catch (const clm::io_error& e) {
      throw clm::config_error("config key '" + key + "': " + e.what());
    }
  }
}

int cmd_train(TrainArgs& a) {
  if (a.corpus.empty()) throw clm::config_error("train needs --corpus (flag or config file)");
  if (a.vocab.empty()) throw clm::config_error("train needs --vocab (flag or config file)");
  if (!a.seed_given) throw clm::config_error("train needs an explicit --seed (flag or config file)");
  if (!std::filesystem::exists(a.corpus)) throw clm::config_error("corpus file not found: " + a.corpus);
  if (!std::filesystem::exists(a.vocab)) throw clm::config_error("vocab file not found: " + a.vocab);
  a.cfg.grad_mode = clm::grad_mode_from_string(a.grad_mode);
  a.cfg.validate();
  clm::Vocab vocab = load_vocab_checked(a.vocab);
  auto sentences = clm::encode_corpus(vocab, clm::read_text_lines(a.corpus));
  if (sentences.empty()) throw clm::value_error("training corpus has no sentences");

  std::filesystem::create_directories(a.out_dir);
  const std::string log_path = a.out_dir + "/train.log";
  std::string log_text;

  auto result = clm::train(a.cfg, sentences, vocab.size(),
                           [&](int epoch, const clm::TrainResult& r, const clm::EpochStats& st) {
                             std::string line = st.to_line();
                             std::cout << line << "\n";
                             log_text += line + "\n";
                             char name[64];
                             std::snprintf(name, sizeof(name), "/checkpoint-%03d.ckpt", epoch);
                             clm::ModelParams ckpt = r.params;
                             ckpt.vocab_hash = vocab.hash();
                             clm::save_checkpoint(a.out_dir + name, ckpt, r.opt);
                           });
  result.params.vocab_hash = vocab.hash();
  clm::save_model(a.out_dir + "/model.txt", result.params);
  clm::write_text_file(log_path, log_text);
  std::cout << "wrote " << a.out_dir << "/model.txt\n";
  return kExitOk;
}

struct ScoreArgs {
  std::string model;
  std::string vocab;
  std::string text;
  bool tree = false;
  bool chain = false;
};

int cmd_score(const ScoreArgs& a) {
  auto [params, vocab] = load_model_and_vocab(a.model, a.vocab);
  clm::Sentence s = clm::encode(vocab, a.text);
  clm::Chart chart = clm::inside(params, s);
  std::cout << clm::format_double(chart.sentence_log_score()) << "\n";
  if (a.tree) {
    auto [tree, score] = clm::viterbi_tree(params, s);
    std::cout << clm::to_bracketed(tree, vocab, s) << "\n";
    std::cout << "viterbi " << clm::format_double(score) << "\n";
  }
  if (a.chain) {
    std::cout << "chain " << clm::format_double(clm::chain_tree_log_score(params, s)) << "\n";
  }
  return kExitOk;
}

struct EvalArgs {
  std::string model;
  std::string vocab;
  std::string test;
  std::vector<double> levels{0.1, 0.2, 0.4};
  double baseline = 0.1;
  int runs = 10;
  uint64_t seed = 0;
  int workers = 1;
  std::string out;
  std::string plot;
};

int cmd_eval(const EvalArgs& a) {
  auto [params, vocab] = load_model_and_vocab(a.model, a.vocab);
  auto testset = clm::encode_corpus(vocab, clm::read_text_lines(a.test));
  if (testset.empty()) throw clm::value_error("test corpus has no sentences");
  clm::EvalReport report =
      clm::evaluate(params, testset, vocab, a.levels, a.baseline, a.seed, a.runs, a.workers);
  const std::string csv = clm::report_to_csv(report);
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    clm::write_text_file(a.out, csv);
    std::cout << "wrote " << a.out << "\n";
  }
  if (!a.plot.empty()) {
    clm::write_text_file(a.plot, clm::report_to_plot_data(report));
    std::cout << "wrote " << a.plot << "\n";
  }
  return kExitOk;
}

struct DistortArgs {
  std::string vocab;
  std::string text;
  double level = 0.1;
  uint64_t seed = 0;
};

int cmd_distort(const DistortArgs& a) {
  clm::Vocab vocab = load_vocab_checked(a.vocab);
  clm::Sentence s = clm::encode(vocab, a.text);
  clm::Sentence out = clm::distort(s, {a.level, a.seed}, vocab);
  std::cout << clm::decode(vocab, out) << "\n";
  return kExitOk;
}

struct CheckArgs {
  std::string model;
  bool random = false;
  clm::CheckOptions opt;
};

int cmd_check(const CheckArgs& a) {
  std::vector<clm::CheckResult> results;
  if (!a.model.empty()) {
    clm::ModelParams params = clm::load_model(a.model);
    results = clm::run_checks(a.opt, &params);
  } else {
    results = clm::run_checks(a.opt);
  }
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.pass();
    std::printf("[%s] %-38s max_err=%.3e tol=%.0e cases=%d\n", r.pass() ? "PASS" : "FAIL",
                r.name.c_str(), r.max_error, r.tolerance, r.cases);
  }
  if (!ok) throw clm::numeric_error("one or more self-checks failed");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional language model toolkit"};
  app.require_subcommand(1);

  BuildVocabArgs bv;
  auto* sub_bv = app.add_subcommand("build-vocab", "build a vocabulary file from a corpus");
  sub_bv->add_option("--corpus", bv.corpus, "one sentence per line")->required()->check(CLI::ExistingFile);
  sub_bv->add_option("--min-count", bv.min_count, "minimum token frequency")->check(CLI::PositiveNumber);
  sub_bv->add_option("--out", bv.out, "output vocab path")->required();

  TrainArgs tr;
  auto* sub_tr = app.add_subcommand("train", "train a model with generalized EM + Adagrad");
  sub_tr->add_option("--config", tr.config, "key=value config file; flags override file values")
      ->check(CLI::ExistingFile);
  sub_tr->add_option("--corpus", tr.corpus)->check(CLI::ExistingFile);
  sub_tr->add_option("--vocab", tr.vocab)->check(CLI::ExistingFile);
  sub_tr->add_option("--out-dir", tr.out_dir, "checkpoint/log directory");
  sub_tr->add_option("--epochs", tr.cfg.epochs)->check(CLI::NonNegativeNumber);
  sub_tr->add_option("--d", tr.cfg.d, "embedding dimension")->check(CLI::PositiveNumber);
  sub_tr->add_option("--learning-rate", tr.cfg.learning_rate);
  sub_tr->add_option("--l2", tr.cfg.l2, "l2 regularization coefficient");
  sub_tr->add_option("--seed", tr.cfg.seed);
  sub_tr->add_option("--grad-mode", tr.grad_mode)->check(CLI::IsMember({"em", "direct"}));
  sub_tr->add_option("--adagrad-epsilon", tr.cfg.adagrad_epsilon);
  sub_tr->add_option("--max-sentence-length", tr.cfg.max_sentence_length)->check(CLI::PositiveNumber);
  sub_tr->add_option("--workers", tr.cfg.workers)->check(CLI::PositiveNumber);
  sub_tr->add_option("--theta", tr.cfg.theta, "fixed binary-rule probability");

  ScoreArgs sc;
  auto* sub_sc = app.add_subcommand("score", "log score of one sentence");
  sub_sc->add_option("--model", sc.model)->required()->check(CLI::ExistingFile);
  sub_sc->add_option("--vocab", sc.vocab)->required()->check(CLI::ExistingFile);
  sub_sc->add_option("--text", sc.text, "whitespace-tokenized sentence")->required();
  sub_sc->add_flag("--tree", sc.tree, "also print the best bracketing");
  sub_sc->add_flag("--chain", sc.chain, "also print the left-branching sequential-tree score");

  EvalArgs ev;
  auto* sub_ev = app.add_subcommand("eval", "contrastive entropy report");
  sub_ev->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
  sub_ev->add_option("--vocab", ev.vocab)->required()->check(CLI::ExistingFile);
  sub_ev->add_option("--test", ev.test)->required()->check(CLI::ExistingFile);
  sub_ev->add_option("--levels", ev.levels, "distortion levels")->delimiter(',');
  sub_ev->add_option("--baseline", ev.baseline, "baseline level for ratios");
  sub_ev->add_option("--runs", ev.runs)->check(CLI::PositiveNumber);
  sub_ev->add_option("--seed", ev.seed)->required();
  sub_ev->add_option("--workers", ev.workers)->check(CLI::PositiveNumber);
  sub_ev->add_option("--out", ev.out, "report CSV path (stdout when omitted)");
  sub_ev->add_option("--plot", ev.plot, "companion level-vs-H_C data file");

  DistortArgs di;
  auto* sub_di = app.add_subcommand("distort", "print a distorted copy of a sentence");
  sub_di->add_option("--vocab", di.vocab)->required()->check(CLI::ExistingFile);
  sub_di->add_option("--text", di.text)->required();
  sub_di->add_option("--level", di.level)->check(CLI::Range(0.0, 1.0));
  sub_di->add_option("--seed", di.seed)->required();

  CheckArgs ck;
  auto* sub_ck = app.add_subcommand("check", "run the invariant and gradient self-checks");
  auto* opt_model = sub_ck->add_option("--model", ck.model, "check a trained model")->check(CLI::ExistingFile);
  sub_ck->add_flag("--random", ck.random, "check randomly initialized parameters")->excludes(opt_model);
  sub_ck->add_option("--n-min", ck.opt.n_min)->check(CLI::PositiveNumber);
  sub_ck->add_option("--n-max", ck.opt.n_max)->check(CLI::PositiveNumber);
  sub_ck->add_option("--seeds", ck.opt.seeds, "random restarts per setting")->check(CLI::PositiveNumber);
  sub_ck->add_option("--dims", ck.opt.dims, "dimensions to sweep in random mode")->delimiter(',');
  sub_ck->add_option("--vocab-size", ck.opt.vocab_size)->check(CLI::PositiveNumber);
  sub_ck->add_option("--seed", ck.opt.seed)->required();
  sub_ck->add_option("--fd-n-max", ck.opt.fd_n_max, "longest sentence for finite-difference sweeps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (sub_bv->parsed()) return cmd_build_vocab(bv);
    if (sub_tr->parsed()) {
      tr.seed_given = tr.seed_given || sub_tr->count("--seed") > 0;
      merge_train_config(sub_tr, tr);
      return cmd_train(tr);
    }
    if (sub_sc->parsed()) return cmd_score(sc);
    if (sub_ev->parsed()) return cmd_eval(ev);
    if (sub_di->parsed()) return cmd_distort(di);
    if (sub_ck->parsed()) {
      if (ck.model.empty() && !ck.random)
        throw clm::config_error("check needs --model or --random");
      return cmd_check(ck);
    }
  } catch (const clm::config_error& e) {
    std::cerr << "error (config): " << e.what() << "\n";
    return kExitConfig;
  } catch (const clm::io_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIo;
  } catch (const clm::numeric_error& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return kExitNumeric;
  } catch (const clm::value_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
