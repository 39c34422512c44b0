#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "l0drop/errors.hpp"
#include "l0drop/rng.hpp"
#include "l0drop/transformer.hpp"

namespace l0drop {

using Sentence = std::vector<std::string>;

inline Sentence split_tokens(const std::string& line) {
    Sentence out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        out.push_back(tok);
    }
    return out;
}

inline std::string join_tokens(const Sentence& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += s[i];
    }
    return out;
}

// Token <-> id map. Ids 0..3 are <pad> <bos> <eos> <unk>; the remaining
// tokens follow by descending corpus frequency, ties broken lexicographically.
class Vocab {
public:
    static inline const std::vector<std::string> kSpecials{"<pad>", "<bos>", "<eos>", "<unk>"};

    Vocab() {
        for (const auto& s : kSpecials) {
            add(s);
        }
    }

    static Vocab build(const std::vector<Sentence>& corpus) {
        std::map<std::string, std::size_t> counts;
        for (const auto& s : corpus) {
            for (const auto& t : s) {
                ++counts[t];
            }
        }
        std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
        std::stable_sort(items.begin(), items.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocab v;
        for (const auto& [tok, _] : items) {
            if (!v.contains(tok)) {
                v.add(tok);
            }
        }
        return v;
    }

    static Vocab from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), tokens.begin())) {
            throw DataError("vocabulary must start with <pad> <bos> <eos> <unk>");
        }
        Vocab v;
        for (std::size_t i = kSpecials.size(); i < tokens.size(); ++i) {
            if (v.contains(tokens[i])) {
                throw DataError("duplicate vocabulary entry '" + tokens[i] + "'");
            }
            v.add(tokens[i]);
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    bool contains(const std::string& t) const { return ids_.count(t) != 0; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int id(const std::string& t) const {
        auto it = ids_.find(t);
        return it == ids_.end() ? kUnkId : it->second;
    }
    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw DomainError("token id " + std::to_string(id) + " outside vocabulary");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const Sentence& s) const {
        std::vector<int> out;
        out.reserve(s.size());
        for (const auto& t : s) {
            out.push_back(id(t));
        }
        return out;
    }
    Sentence decode(const std::vector<int>& ids) const {
        Sentence out;
        for (int i : ids) {
            out.push_back(token(i));
        }
        return out;
    }

    // 64-bit FNV-1a over the newline-joined token list; checkpoints record it
    // so decoding with a different vocabulary is caught.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& t : tokens_) {
            for (unsigned char c : t) {
                h = (h ^ c) * 0x100000001b3ull;
            }
            h = (h ^ '\n') * 0x100000001b3ull;
        }
        return h;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) {
            throw DataError("cannot write vocabulary " + path.string());
        }
        for (const auto& t : tokens_) {
            os << t << '\n';
        }
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) {
            throw DataError("cannot read vocabulary " + path.string());
        }
        std::vector<std::string> toks;
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty()) {
                toks.push_back(line);
            }
        }
        return from_tokens(toks);
    }

private:
    void add(const std::string& t) {
        ids_.emplace(t, static_cast<int>(tokens_.size()));
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

struct Corpus {
    std::vector<std::vector<int>> src;
    std::vector<std::vector<int>> tgt;
    std::vector<std::vector<std::string>> tags;  // optional, aligned with src
    Vocab src_vocab;
    Vocab tgt_vocab;

    std::size_t size() const { return src.size(); }

    void validate() const {
        if (src.size() != tgt.size()) {
            throw DataError("source and target sentence counts differ");
        }
        if (!tags.empty() && tags.size() != src.size()) {
            throw DataError("tag file sentence count differs from the source");
        }
        auto check = [](const std::vector<std::vector<int>>& side, const Vocab& v, const char* name) {
            for (const auto& s : side) {
                for (int id : s) {
                    if (id < 0 || static_cast<std::size_t>(id) >= v.size()) {
                        throw DataError(std::string(name) + " id " + std::to_string(id) + " outside vocabulary");
                    }
                }
            }
        };
        check(src, src_vocab, "source");
        check(tgt, tgt_vocab, "target");
    }
};

enum class ToyTask { copy, reverse, sorted };

inline ToyTask parse_toy_task(const std::string& s) {
    if (s == "copy") {
        return ToyTask::copy;
    }
    if (s == "reverse") {
        return ToyTask::reverse;
    }
    if (s == "sorted") {
        return ToyTask::sorted;
    }
    throw ConfigError("unknown toy task '" + s + "' (expected copy, reverse or sorted)");
}

// Sentence pairs over the tokens "0".."vocab-1", lengths uniform in
// [min_len, max_len]. Sorting compares tokens numerically.
inline std::vector<std::pair<Sentence, Sentence>> make_toy_pairs(ToyTask task, std::size_t vocab,
                                                                 std::size_t min_len, std::size_t max_len,
                                                                 std::size_t size, std::uint64_t seed) {
    if (vocab == 0 || min_len == 0 || min_len > max_len || size == 0) {
        throw ConfigError("toy corpus needs vocab > 0, 0 < min_len <= max_len and size > 0");
    }
    RngState rng(seed, 0x70c0);
    std::vector<std::pair<Sentence, Sentence>> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        const std::size_t n = min_len + rng.below(max_len - min_len + 1);
        std::vector<std::size_t> ids(n);
        for (auto& x : ids) {
            x = rng.below(vocab);
        }
        std::vector<std::size_t> t = ids;
        if (task == ToyTask::reverse) {
            std::reverse(t.begin(), t.end());
        } else if (task == ToyTask::sorted) {
            std::sort(t.begin(), t.end());
        }
        Sentence s, y;
        for (auto x : ids) {
            s.push_back(std::to_string(x));
        }
        for (auto x : t) {
            y.push_back(std::to_string(x));
        }
        out.emplace_back(std::move(s), std::move(y));
    }
    return out;
}

inline Corpus corpus_from_pairs(const std::vector<std::pair<Sentence, Sentence>>& pairs) {
    std::vector<Sentence> s, t;
    for (const auto& [a, b] : pairs) {
        s.push_back(a);
        t.push_back(b);
    }
    Corpus c;
    c.src_vocab = Vocab::build(s);
    c.tgt_vocab = Vocab::build(t);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        c.src.push_back(c.src_vocab.encode(s[i]));
        c.tgt.push_back(c.tgt_vocab.encode(t[i]));
    }
    return c;
}

inline Corpus make_toy_corpus(ToyTask task, std::size_t vocab, std::size_t min_len, std::size_t max_len,
                              std::size_t size, std::uint64_t seed) {
    return corpus_from_pairs(make_toy_pairs(task, vocab, min_len, max_len, size, seed));
}

inline std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    std::vector<Sentence> out;
    std::string line;
    while (std::getline(is, line)) {
        out.push_back(split_tokens(line));
    }
    return out;
}

inline void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sents) {
    std::ofstream os(path);
    if (!os) {
        throw DataError("cannot write " + path.string());
    }
    for (const auto& s : sents) {
        os << join_tokens(s) << '\n';
    }
}

// Parallel text: one sentence per line, whitespace tokenized. Empty files,
// empty lines and differing line counts are data errors.
inline std::vector<std::pair<Sentence, Sentence>> read_parallel(const std::filesystem::path& src_path,
                                                                const std::filesystem::path& tgt_path) {
    const auto s = read_sentences(src_path);
    const auto t = read_sentences(tgt_path);
    if (s.empty() || t.empty()) {
        throw DataError("empty parallel input");
    }
    if (s.size() != t.size()) {
        throw DataError("line counts differ: " + std::to_string(s.size()) + " source vs " +
                        std::to_string(t.size()) + " target");
    }
    std::vector<std::pair<Sentence, Sentence>> out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i].empty() || t[i].empty()) {
            throw DataError("empty sentence on line " + std::to_string(i + 1));
        }
        out.emplace_back(s[i], t[i]);
    }
    return out;
}

inline void write_ids(const std::filesystem::path& path, const std::vector<std::vector<int>>& ids) {
    std::ofstream os(path);
    if (!os) {
        throw DataError("cannot write " + path.string());
    }
    for (const auto& s : ids) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            os << (i ? " " : "") << s[i];
        }
        os << '\n';
    }
}

inline std::vector<std::vector<int>> read_ids(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    std::vector<std::vector<int>> out;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::vector<int> s;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                s.push_back(std::stoi(tok, &used));
                if (used != tok.size()) {
                    throw std::invalid_argument(tok);
                }
            } catch (const std::logic_error&) {
                throw DataError("malformed id '" + tok + "' in " + path.string());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// Prepared corpus directory: src.vocab, tgt.vocab, train.src.ids, train.tgt.ids
// and, when present, train.tags.
inline void save_corpus(const std::filesystem::path& dir, const Corpus& c) {
    std::filesystem::create_directories(dir);
    c.src_vocab.save(dir / "src.vocab");
    c.tgt_vocab.save(dir / "tgt.vocab");
    write_ids(dir / "train.src.ids", c.src);
    write_ids(dir / "train.tgt.ids", c.tgt);
    if (!c.tags.empty()) {
        write_sentences(dir / "train.tags", c.tags);
    }
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus c;
    c.src_vocab = Vocab::load(dir / "src.vocab");
    c.tgt_vocab = Vocab::load(dir / "tgt.vocab");
    c.src = read_ids(dir / "train.src.ids");
    c.tgt = read_ids(dir / "train.tgt.ids");
    if (std::filesystem::exists(dir / "train.tags")) {
        c.tags = read_sentences(dir / "train.tags");
    }
    if (c.src.empty()) {
        throw DataError("prepared corpus in " + dir.string() + " is empty");
    }
    c.validate();
    return c;
}

// Random batch of sentence indices whose target tokens (plus EOS) reach
// `token_budget`; always at least one sentence.
inline std::vector<std::size_t> sample_batch(const Corpus& c, std::size_t token_budget, RngState& rng) {
    if (c.size() == 0) {
        throw DataError("cannot sample from an empty corpus");
    }
    std::vector<std::size_t> out;
    std::size_t tokens = 0;
    do {
        const auto i = static_cast<std::size_t>(rng.below(c.size()));
        out.push_back(i);
        tokens += c.tgt[i].size() + 1;
    } while (tokens < token_budget);
    return out;
}

}  // namespace l0drop
