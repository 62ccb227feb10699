#pragma once

// Contrastive Entropy evaluation: mean per-sentence entropy gap between
// distorted and original test sentences, at one or more distortion levels,
// plus the scale-invariant ratio against a baseline level.
//
// Entropies are bits (base-2) per sentence and come from unnormalized
// scores, so individual values may be negative; only gaps and ratios carry
// meaning. The metric helpers accept any entropy function so the algebra
// (shift cancellation, scale equivariance) can be exercised directly.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "clm/chart.hpp"
#include "clm/common.hpp"
#include "clm/corpus.hpp"
#include "clm/model.hpp"
#include "clm/training.hpp"

namespace clm {

// -log2 of the unnormalized sentence score.
inline double sentence_entropy(const ModelParams& p, const Sentence& s) {
  return sentence_nll(p, s) / std::numbers::ln2;
}

using EntropyFn = std::function<double(const Sentence&)>;

inline EntropyFn entropy_fn(const ModelParams& p) {
  return [&p](const Sentence& s) { return sentence_entropy(p, s); };
}

// Mean over sentences of H(distorted) - H(original). Each sentence draws
// its own distortion seed from (seed, sentence index), so a fixed seed
// fixes the whole evaluation.
inline double contrastive_entropy(const EntropyFn& entropy, const std::vector<Sentence>& testset,
                                  const Vocab& vocab, double level, uint64_t seed,
                                  int workers = 1) {
  if (testset.empty()) throw value_error("contrastive_entropy: empty test set");
  std::vector<double> gaps(testset.size(), 0.0);
  std::vector<std::string> errors(testset.size());
  parallel_for(testset.size(), workers, [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      try {
        DistortionSpec spec{level, mix_seed(seed, i)};
        Sentence distorted = distort(testset[i], spec, vocab);
        gaps[i] = entropy(distorted) - entropy(testset[i]);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  });
  double total = 0.0;  // index-ordered reduction keeps the sum reproducible
  for (size_t i = 0; i < testset.size(); ++i) {
    if (!errors[i].empty()) throw numeric_error("sentence " + std::to_string(i) + ": " + errors[i]);
    total += gaps[i];
  }
  return total / static_cast<double>(testset.size());
}

inline double contrastive_entropy(const ModelParams& p, const std::vector<Sentence>& testset,
                                  const Vocab& vocab, double level, uint64_t seed,
                                  int workers = 1) {
  return contrastive_entropy(entropy_fn(p), testset, vocab, level, seed, workers);
}

inline double contrastive_ratio(double h_c_level, double h_c_baseline) {
  if (h_c_baseline == 0.0) throw value_error("contrastive_ratio: baseline contrastive entropy is zero");
  return h_c_level / h_c_baseline;
}

struct EvalReport {
  std::vector<double> levels;
  std::vector<double> h_c;   // bits per sentence, aligned with levels
  std::vector<double> h_cr;  // ratio against the baseline level
  double baseline_level = 0.0;
  int runs = 0;
  int n_sentences = 0;
  uint64_t seed = 0;
};

// Averages contrastive entropy over `runs` independently seeded
// distortions per level, then fills the ratios.
inline EvalReport evaluate(const EntropyFn& entropy, const std::vector<Sentence>& testset,
                           const Vocab& vocab, const std::vector<double>& levels,
                           double baseline_level, uint64_t seed, int runs = 10,
                           int workers = 1) {
  if (levels.empty()) throw value_error("evaluate: no distortion levels given");
  if (runs < 1) throw value_error("evaluate: runs must be >= 1");
  EvalReport report;
  report.levels = levels;
  report.baseline_level = baseline_level;
  report.runs = runs;
  report.n_sentences = static_cast<int>(testset.size());
  report.seed = seed;

  auto averaged = [&](double level) {
    double sum = 0.0;
    for (int r = 0; r < runs; ++r)
      sum += contrastive_entropy(entropy, testset, vocab, level, mix_seed(seed, 0x72756e00ULL + r),
                                 workers);
    return sum / runs;
  };

  const double base = averaged(baseline_level);
  for (double level : levels) {
    const double hc = level == baseline_level ? base : averaged(level);
    report.h_c.push_back(hc);
    report.h_cr.push_back(contrastive_ratio(hc, base));
  }
  return report;
}

inline EvalReport evaluate(const ModelParams& p, const std::vector<Sentence>& testset,
                           const Vocab& vocab, const std::vector<double>& levels,
                           double baseline_level, uint64_t seed, int runs = 10,
                           int workers = 1) {
  return evaluate(entropy_fn(p), testset, vocab, levels, baseline_level, seed, runs, workers);
}

// --- report files --------------------------------------------------------

inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "level,h_c_bits,h_cr,runs,n_sentences,seed\n";
  for (size_t i = 0; i < r.levels.size(); ++i) {
    out << format_double(r.levels[i]) << ',' << format_double(r.h_c[i]) << ','
        << format_double(r.h_cr[i]) << ',' << r.runs << ',' << r.n_sentences << ',' << r.seed
        << "\n";
  }
  return out.str();
}

inline EvalReport report_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "level,h_c_bits,h_cr,runs,n_sentences,seed")
    throw io_error("bad report CSV header");
  EvalReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw io_error("bad report CSV row: " + line);
    r.levels.push_back(parse_double(f[0]));
    r.h_c.push_back(parse_double(f[1]));
    r.h_cr.push_back(parse_double(f[2]));
    r.runs = static_cast<int>(parse_int(f[3]));
    r.n_sentences = static_cast<int>(parse_int(f[4]));
    r.seed = parse_uint64(f[5]);
  }
  return r;
}

// Two-column level / H_C data for external plotting.
inline std::string report_to_plot_data(const EvalReport& r) {
  std::ostringstream out;
  out << "# level h_c_bits\n";
  for (size_t i = 0; i < r.levels.size(); ++i)
    out << format_double(r.levels[i]) << ' ' << format_double(r.h_c[i]) << "\n";
  return out.str();
}

}  // namespace clm
