#pragma once

// Text ingestion: vocabulary construction, sentence encoding and the seeded
// distortion generator used by the contrastive-entropy metric.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "clm/common.hpp"

namespace clm {

inline const std::string kUnkToken = "<unk>";

struct Vocab {
  std::vector<std::string> tokens;          // id -> surface form
  std::unordered_map<std::string, int> index;  // surface form -> id
  std::vector<int64_t> counts;              // id -> build-time occurrences
  int unk_id = -1;

  int size() const { return static_cast<int>(tokens.size()); }

  int lookup(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? unk_id : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw value_error("token id out of range");
    return tokens[id];
  }

  uint64_t hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (int id = 0; id < size(); ++id) {
      std::string rec = tokens[id] + "\x1f" + std::to_string(counts[id]) + "\x1e";
      h = fnv1a({rec.data(), rec.size()}, h);
    }
    std::string tail = "unk:" + std::to_string(unk_id);
    return fnv1a({tail.data(), tail.size()}, h);
  }
};

struct Sentence {
  std::vector<int32_t> ids;

  int size() const { return static_cast<int>(ids.size()); }
  bool empty() const { return ids.empty(); }
};

struct DistortionSpec {
  double level = 0.0;  // fraction of positions to resample, in [0, 1]
  uint64_t seed = 0;
};

// Builds a vocabulary over whitespace tokens. Content ids are assigned by
// descending count with lexicographic tie-break; the unknown token always
// takes the last id. Tokens below min_count fold into <unk>'s count.
inline Vocab build_vocab(const std::vector<std::string>& lines, int min_count = 1) {
  if (min_count < 1) throw value_error("min_count must be >= 1");
  std::unordered_map<std::string, int64_t> freq;
  int64_t unk_count = 0;
  int64_t total = 0;
  for (const auto& line : lines) {
    for (auto& tok : split_whitespace(line)) {
      ++total;
      if (tok == kUnkToken) {
        ++unk_count;
      } else {
        ++freq[tok];
      }
    }
  }
  if (total == 0) throw value_error("empty corpus: no tokens after whitespace splitting");

  std::vector<std::pair<std::string, int64_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, c] : freq) {
    if (c >= min_count) {
      kept.emplace_back(tok, c);
    } else {
      unk_count += c;
    }
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.tokens.reserve(kept.size() + 1);
  v.counts.reserve(kept.size() + 1);
  for (auto& [tok, c] : kept) {
    v.index.emplace(tok, v.size());
    v.tokens.push_back(tok);
    v.counts.push_back(c);
  }
  v.unk_id = v.size();
  v.index.emplace(kUnkToken, v.unk_id);
  v.tokens.push_back(kUnkToken);
  v.counts.push_back(unk_count);
  return v;
}

inline Sentence encode(const Vocab& vocab, const std::string& line) {
  auto toks = split_whitespace(line);
  if (toks.empty()) throw value_error("cannot encode an empty line");
  Sentence s;
  s.ids.reserve(toks.size());
  for (auto& t : toks) s.ids.push_back(vocab.lookup(t));
  return s;
}

inline std::string decode(const Vocab& vocab, const Sentence& s) {
  std::string out;
  for (int i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(s.ids[i]);
  }
  return out;
}

// Resamples exactly ceil(level * |s|) distinct positions, drawing replacement
// ids uniformly from the vocabulary minus <unk>. Pure function of its inputs.
inline Sentence distort(const Sentence& s, const DistortionSpec& spec, const Vocab& vocab) {
  if (s.empty()) throw value_error("cannot distort an empty sentence");
  if (!(spec.level >= 0.0 && spec.level <= 1.0)) throw value_error("distortion level must be in [0, 1]");
  const int n = s.size();
  // Snap near-integer products so e.g. level=0.3, n=10 yields 3, not 4.
  const double raw = spec.level * n;
  int m = static_cast<int>(std::ceil(raw - 1e-9));
  m = std::clamp(m, 0, n);
  Sentence out = s;
  if (m == 0) return out;

  Rng rng(spec.seed);
  std::vector<int> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  const int candidates = vocab.size() - 1;  // excludes <unk>
  if (candidates < 1) throw value_error("vocabulary has no content tokens to draw from");
  for (int t = 0; t < m; ++t) {
    const int pick = t + static_cast<int>(rng.next_below(static_cast<uint64_t>(n - t)));
    std::swap(pos[t], pos[pick]);
    int id = static_cast<int>(rng.next_below(static_cast<uint64_t>(candidates)));
    if (id >= vocab.unk_id) ++id;
    out.ids[pos[t]] = id;
  }
  return out;
}

// --- serialization -----------------------------------------------------

// Format:
//   clm vocab v1
//   size <V> unk <unk_id>
//   <id> <token> <count>      (one line per id, in id order)
inline std::string vocab_to_string(const Vocab& v) {
  std::ostringstream out;
  out << "clm vocab v1\n";
  out << "size " << v.size() << " unk " << v.unk_id << "\n";
  for (int id = 0; id < v.size(); ++id) {
    out << id << ' ' << v.tokens[id] << ' ' << v.counts[id] << "\n";
  }
  return out.str();
}

inline Vocab vocab_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "clm vocab v1") throw io_error("bad vocab header");
  if (!std::getline(in, line)) throw io_error("truncated vocab file");
  auto hdr = split_whitespace(line);
  if (hdr.size() != 4 || hdr[0] != "size" || hdr[2] != "unk") throw io_error("bad vocab size line");
  const int n = static_cast<int>(parse_int(hdr[1]));
  const int unk = static_cast<int>(parse_int(hdr[3]));
  Vocab v;
  v.unk_id = unk;
  for (int id = 0; id < n; ++id) {
    if (!std::getline(in, line)) throw io_error("truncated vocab file");
    auto f = split_whitespace(line);
    if (f.size() != 3 || parse_int(f[0]) != id) throw io_error("bad vocab entry at id " + std::to_string(id));
    v.index.emplace(f[1], id);
    v.tokens.push_back(f[1]);
    v.counts.push_back(parse_int(f[2]));
  }
  if (unk < 0 || unk >= n || v.tokens[unk] != kUnkToken) throw io_error("vocab file has no valid unk entry");
  return v;
}

inline void save_vocab(const std::string& path, const Vocab& v) {
  write_text_file(path, vocab_to_string(v));
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open vocab file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return vocab_from_string(ss.str());
}

// Encodes non-blank corpus lines; blank lines are skipped.
inline std::vector<Sentence> encode_corpus(const Vocab& vocab, const std::vector<std::string>& lines) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& line : lines) {
    if (split_whitespace(line).empty()) continue;
    out.push_back(encode(vocab, line));
  }
  return out;
}

}  // namespace clm
