#pragma once

// Model parameters and the per-rule scoring primitives.
//
// A rule instance is either a leaf (a word) or a binary composition of two
// child embeddings. Its unnormalized log score is -E plus the structural
// log prob for binary rules; the Gibbs partition function is fixed to 1,
// so all sentence scores are unnormalized and only differences matter.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "clm/common.hpp"

namespace clm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { Tanh, Sigmoid };
enum class EnergyMap { Identity, Tanh };

inline const char* to_string(Activation f) {
  return f == Activation::Tanh ? "tanh" : "sigmoid";
}
inline const char* to_string(EnergyMap g) {
  return g == EnergyMap::Identity ? "identity" : "tanh";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw value_error("unknown activation: " + s);
}
inline EnergyMap energy_map_from_string(const std::string& s) {
  if (s == "identity") return EnergyMap::Identity;
  if (s == "tanh") return EnergyMap::Tanh;
  throw value_error("unknown energy map: " + s);
}

inline double apply_energy_map(EnergyMap g, double x) {
  return g == EnergyMap::Identity ? x : std::tanh(x);
}
inline double energy_map_derivative(EnergyMap g, double x) {
  if (g == EnergyMap::Identity) return 1.0;
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

struct ModelParams {
  int d = 0;
  Mat X;  // |V| x d word embeddings
  Mat W;  // d x 2d composition weights
  Vec u;  // length-d scoring vector
  Activation f = Activation::Tanh;
  EnergyMap g = EnergyMap::Identity;
  double theta = 1.0;        // fixed structural probability of the binary rule
  uint64_t vocab_hash = 0;   // binds the model to the vocab it was built for

  int vocab_size() const { return static_cast<int>(X.rows()); }

  void validate() const {
    if (d < 1) throw value_error("model dimension must be >= 1");
    if (X.cols() != d || W.rows() != d || W.cols() != 2 * d || u.size() != d)
      throw value_error("model parameter shapes are inconsistent");
    if (!(theta > 0.0)) throw value_error("theta must be positive");
    if (!X.allFinite() || !W.allFinite() || !u.allFinite())
      throw numeric_error("model parameters contain non-finite values");
  }
};

inline Vec apply_activation(Activation f, const Vec& z) {
  if (f == Activation::Tanh) return z.array().tanh();
  return (1.0 / (1.0 + (-z.array()).exp())).matrix();
}

// f'(z) expressed through the activation value y = f(z).
inline Vec activation_derivative_from_value(Activation f, const Vec& y) {
  if (f == Activation::Tanh) return (1.0 - y.array().square()).matrix();
  return (y.array() * (1.0 - y.array())).matrix();
}

// pa = f(W [c1; c2])
inline Vec compose(const ModelParams& p, const Vec& c1, const Vec& c2) {
  if (c1.size() != p.d || c2.size() != p.d)
    throw value_error("compose: child vectors must have length d");
  Vec z = p.W.leftCols(p.d) * c1 + p.W.rightCols(p.d) * c2;
  return apply_activation(p.f, z);
}

// E(r) = g(u^T pa)
inline double rule_energy(const ModelParams& p, const Vec& pa) {
  if (pa.size() != p.d) throw value_error("rule_energy: embedding must have length d");
  return apply_energy_map(p.g, p.u.dot(pa));
}

struct RuleInstance {
  enum class Kind { Leaf, Binary };
  Kind kind = Kind::Leaf;
  int i = 0;       // span start, inclusive
  int j = 0;       // span end, inclusive
  int k = -1;      // split point for binary rules, i <= k < j
  Vec parent_embedding;
};

// log zeta_r: -E for leaves, -E + ln(theta) for binary rules. Everything is
// kept in log space; with finite parameters this is always finite.
inline double rule_log_score(const ModelParams& p, const RuleInstance& r) {
  const double e = rule_energy(p, r.parent_embedding);
  if (r.kind == RuleInstance::Kind::Binary) return -e + std::log(p.theta);
  return -e;
}

// X, W uniform in [-1/sqrt(d), 1/sqrt(d)]; u uniform in [-0.1, 0.1].
inline ModelParams init_params(int vocab_size, int d, uint64_t seed) {
  if (d < 1) throw value_error("model dimension must be >= 1");
  if (vocab_size < 1) throw value_error("vocab size must be >= 1");
  ModelParams p;
  p.d = d;
  Rng rng(seed);
  const double r = 1.0 / std::sqrt(static_cast<double>(d));
  p.X.resize(vocab_size, d);
  for (int i = 0; i < vocab_size; ++i)
    for (int j = 0; j < d; ++j) p.X(i, j) = rng.next_double(-r, r);
  p.W.resize(d, 2 * d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < 2 * d; ++j) p.W(i, j) = rng.next_double(-r, r);
  p.u.resize(d);
  for (int i = 0; i < d; ++i) p.u(i) = rng.next_double(-0.1, 0.1);
  return p;
}

// --- serialization -----------------------------------------------------
// Plain text, row-major, shortest round-trip decimal per entry. Re-saving a
// loaded model reproduces the file byte for byte.

inline void write_matrix(std::ostringstream& out, const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ' ';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

inline std::string model_to_string(const ModelParams& p) {
  std::ostringstream out;
  out << "clm model v1\n";
  out << "d " << p.d << " vocab " << p.vocab_size()
      << " vocab_hash " << p.vocab_hash
      << " theta " << format_double(p.theta)
      << " f " << to_string(p.f) << " g " << to_string(p.g) << "\n";
  out << "X " << p.vocab_size() << ' ' << p.d << "\n";
  write_matrix(out, p.X);
  out << "W " << p.d << ' ' << 2 * p.d << "\n";
  write_matrix(out, p.W);
  out << "u " << p.d << "\n";
  write_matrix(out, p.u.transpose());
  return out.str();
}

inline Mat read_matrix(std::istream& in, int rows, int cols, const char* what) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    std::string line;
    if (!std::getline(in, line)) throw io_error(std::string("truncated matrix: ") + what);
    auto f = split_whitespace(line);
    if (static_cast<int>(f.size()) != cols) throw io_error(std::string("bad matrix row in ") + what);
    for (int j = 0; j < cols; ++j) m(i, j) = parse_double(f[j]);
  }
  return m;
}

inline ModelParams model_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "clm model v1") throw io_error("bad model header");
  if (!std::getline(in, line)) throw io_error("truncated model file");
  auto h = split_whitespace(line);
  if (h.size() != 12 || h[0] != "d" || h[2] != "vocab" || h[4] != "vocab_hash" ||
      h[6] != "theta" || h[8] != "f" || h[10] != "g")
    throw io_error("bad model metadata line");
  ModelParams p;
  p.d = static_cast<int>(parse_int(h[1]));
  const int vs = static_cast<int>(parse_int(h[3]));
  p.vocab_hash = parse_uint64(h[5]);
  p.theta = parse_double(h[7]);
  p.f = activation_from_string(h[9]);
  p.g = energy_map_from_string(h[11]);

  auto expect_header = [&](const std::string& want) {
    if (!std::getline(in, line)) throw io_error("truncated model file");
    if (line != want) throw io_error("bad section header, expected '" + want + "'");
  };
  expect_header("X " + std::to_string(vs) + ' ' + std::to_string(p.d));
  p.X = read_matrix(in, vs, p.d, "X");
  expect_header("W " + std::to_string(p.d) + ' ' + std::to_string(2 * p.d));
  p.W = read_matrix(in, p.d, 2 * p.d, "W");
  expect_header("u " + std::to_string(p.d));
  p.u = read_matrix(in, 1, p.d, "u").transpose();
  p.validate();
  return p;
}

inline void save_model(const std::string& path, const ModelParams& p) {
  write_text_file(path, model_to_string(p));
}

inline ModelParams load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open model file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_string(ss.str());
}

}  // namespace clm
