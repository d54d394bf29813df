#pragma once

// Lowercased byte-pair tokenizer with start/end markers and a fixed context.
//
// Base symbols are the 256 bytes plus their 256 end-of-word variants; each
// merge rule appends one symbol. Words are split on whitespace into runs of
// letters, single digits and runs of punctuation before merging.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "grain/digest.hpp"
#include "grain/errors.hpp"

namespace grain {

using TokenIds = std::vector<int>;

enum class Overflow { kStrict, kTruncate };

struct Encoded {
  TokenIds ids;
  bool truncated = false;
};

class BpeTokenizer {
 public:
  static constexpr const char* kEndOfWord = "</w>";
  static constexpr int kDefaultContext = 77;

  BpeTokenizer() : BpeTokenizer(std::vector<std::pair<std::string, std::string>>{}) {}

  explicit BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges, int context = kDefaultContext)
      : merges_(std::move(merges)), context_(context) {
    for (int b = 0; b < 256; ++b) add_symbol(std::string(1, static_cast<char>(b)));
    for (int b = 0; b < 256; ++b) add_symbol(std::string(1, static_cast<char>(b)) + kEndOfWord);
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [a, b] = merges_[r];
      if (!symbol_ids_.contains(a) || !symbol_ids_.contains(b))
        throw ConfigError("merge rule " + std::to_string(r) + " references an unknown symbol");
      ranks_.emplace(a + '\x1f' + b, static_cast<int>(r));
      if (!symbol_ids_.contains(a + b)) add_symbol(a + b);
    }
    start_id_ = add_symbol("<|startoftext|>");
    end_id_ = add_symbol("<|endoftext|>");
  }

  // Merge file: optional "#" comment lines, then one "left right" pair per line.
  static BpeTokenizer from_file(const std::string& path, int context = kDefaultContext) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open vocabulary file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_string(ss.str(), context);
  }

  static BpeTokenizer from_string(std::string_view text, int context = kDefaultContext) {
    std::vector<std::pair<std::string, std::string>> merges;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
        throw ConfigError("malformed merge rule: " + line);
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return BpeTokenizer(std::move(merges), context);
  }

  std::string serialize() const {
    std::string out = "#version: grain-bpe 1\n";
    for (const auto& [a, b] : merges_) out += a + " " + b + "\n";
    return out;
  }

  std::string identifier() const {
    return "grain-bpe-" + std::to_string(merges_.size()) + "-" + digest_string(serialize());
  }

  int vocab_size() const { return static_cast<int>(symbols_.size()); }
  int context_length() const { return context_; }
  int start_id() const { return start_id_; }
  int end_id() const { return end_id_; }
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }

  // Lowercases and splits into pre-tokens.
  static std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    enum class Kind { kNone, kLetter, kPunct } kind = Kind::kNone;
    auto flush = [&]() {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
      kind = Kind::kNone;
    };
    for (unsigned char c : text) {
      if (std::isspace(c)) {
        flush();
      } else if (std::isdigit(c)) {
        flush();
        words.emplace_back(1, static_cast<char>(c));
      } else if (std::isalpha(c) || c >= 0x80) {
        if (kind != Kind::kLetter) flush();
        kind = Kind::kLetter;
        current.push_back(static_cast<char>(std::tolower(c)));
      } else {
        if (kind != Kind::kPunct) flush();
        kind = Kind::kPunct;
        current.push_back(static_cast<char>(c));
      }
    }
    flush();
    return words;
  }

  // Token ids without start/end markers.
  TokenIds encode_words(std::string_view text) const {
    TokenIds ids;
    for (const auto& word : split_words(text)) {
      for (const auto& piece : bpe(word)) ids.push_back(symbol_ids_.at(piece));
    }
    return ids;
  }

  // [start] tokens... [end]. In strict mode sequences longer than the context
  // raise; in truncate mode the tail is dropped and the end marker kept.
  Encoded encode(std::string_view text, Overflow mode = Overflow::kStrict) const {
    Encoded out;
    out.ids.push_back(start_id_);
    const auto body = encode_words(text);
    out.ids.insert(out.ids.end(), body.begin(), body.end());
    out.ids.push_back(end_id_);
    if (static_cast<int>(out.ids.size()) > context_) {
      if (mode == Overflow::kStrict)
        throw TokenizationError("text needs " + std::to_string(out.ids.size()) + " tokens; context is " +
                                std::to_string(context_));
      out.ids.resize(static_cast<std::size_t>(context_));
      out.ids.back() = end_id_;
      out.truncated = true;
    }
    return out;
  }

  std::string decode(const TokenIds& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == start_id_ || id == end_id_) continue;
      std::string s = symbol(id);
      const auto pos = s.rfind(kEndOfWord);
      if (pos != std::string::npos && pos + 4 == s.size()) {
        s.erase(pos);
        s += ' ';
      }
      out += s;
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  // Greedy frequency-based merge learning over a corpus of texts.
  static std::vector<std::pair<std::string, std::string>> learn_merges(const std::vector<std::string>& corpus,
                                                                        std::size_t n_merges) {
    std::map<std::vector<std::string>, long> words;
    for (const auto& text : corpus) {
      for (const auto& w : split_words(text)) {
        std::vector<std::string> syms;
        for (std::size_t i = 0; i < w.size(); ++i) syms.emplace_back(1, w[i]);
        syms.back() += kEndOfWord;
        ++words[syms];
      }
    }
    std::vector<std::pair<std::string, std::string>> merges;
    while (merges.size() < n_merges) {
      std::map<std::pair<std::string, std::string>, long> counts;
      for (const auto& [syms, freq] : words)
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += freq;
      if (counts.empty()) break;
      // Highest count wins; std::map order breaks ties lexicographically.
      auto best = counts.begin();
      for (auto it = counts.begin(); it != counts.end(); ++it)
        if (it->second > best->second) best = it;
      if (best->second < 2) break;
      const auto pair = best->first;
      merges.push_back(pair);
      std::map<std::vector<std::string>, long> next;
      for (const auto& [syms, freq] : words) {
        std::vector<std::string> merged;
        for (std::size_t i = 0; i < syms.size(); ++i) {
          if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
            merged.push_back(syms[i] + syms[i + 1]);
            ++i;
          } else {
            merged.push_back(syms[i]);
          }
        }
        next[merged] += freq;
      }
      words = std::move(next);
    }
    return merges;
  }

 private:
  int add_symbol(const std::string& s) {
    const int id = static_cast<int>(symbols_.size());
    symbols_.push_back(s);
    symbol_ids_.emplace(s, id);
    return id;
  }

  std::vector<std::string> bpe(const std::string& word) const {
    std::vector<std::string> syms;
    for (std::size_t i = 0; i < word.size(); ++i) syms.emplace_back(1, word[i]);
    if (syms.empty()) return syms;
    syms.back() += kEndOfWord;
    while (syms.size() > 1) {
      int best_rank = -1;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = ranks_.find(syms[i] + '\x1f' + syms[i + 1]);
        if (it != ranks_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
      }
      if (best_rank < 0) break;
      const auto& [a, b] = merges_[static_cast<std::size_t>(best_rank)];
      std::vector<std::string> next;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(a + b);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
    return syms;
  }

  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> ranks_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> symbol_ids_;
  int context_ = kDefaultContext;
  int start_id_ = -1;
  int end_id_ = -1;
};

}  // namespace grain
