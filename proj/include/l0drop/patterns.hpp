#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "l0drop/corpus.hpp"
#include "l0drop/errors.hpp"

namespace l0drop {

// Corpus token counts, ordered by descending count with lexicographic ties.
class FrequencyTable {
public:
    FrequencyTable() = default;

    static FrequencyTable from_corpus(const std::vector<Sentence>& corpus) {
        FrequencyTable t;
        for (const auto& s : corpus) {
            for (const auto& tok : s) {
                t.add(tok, 1);
            }
        }
        return t;
    }

    void add(const std::string& token, std::size_t count) {
        if (count == 0) {
            throw DataError("frequency counts must be positive ('" + token + "')");
        }
        counts_[token] += count;
        total_ += count;
    }

    std::size_t total() const { return total_; }
    std::size_t size() const { return counts_.size(); }
    bool empty() const { return counts_.empty(); }
    std::size_t count(const std::string& token) const {
        auto it = counts_.find(token);
        return it == counts_.end() ? 0 : it->second;
    }

    std::vector<std::pair<std::string, std::size_t>> ordered() const {
        std::vector<std::pair<std::string, std::size_t>> v(counts_.begin(), counts_.end());
        std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        return v;
    }

    // "token<TAB>count" per line, in table order.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) {
            throw DataError("cannot write frequency table " + path.string());
        }
        for (const auto& [tok, n] : ordered()) {
            os << tok << '\t' << n << '\n';
        }
    }

    static FrequencyTable load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) {
            throw DataError("cannot read frequency table " + path.string());
        }
        FrequencyTable t;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) {
                continue;
            }
            const auto tab = line.find('\t');
            if (tab == std::string::npos || tab == 0) {
                throw DataError("frequency table line " + std::to_string(lineno) + " is not token<TAB>count");
            }
            std::size_t n = 0;
            try {
                std::size_t used = 0;
                n = std::stoul(line.substr(tab + 1), &used);
                if (used != line.size() - tab - 1) {
                    throw std::invalid_argument("trailing");
                }
            } catch (const std::logic_error&) {
                throw DataError("frequency table line " + std::to_string(lineno) + " has a bad count");
            }
            t.add(line.substr(0, tab), n);
        }
        return t;
    }

private:
    std::map<std::string, std::size_t> counts_;
    std::size_t total_ = 0;
};

// Smallest prefix of the frequency ordering (descending, or ascending when
// `inverse`) whose cumulative corpus mass reaches `coverage`.
inline std::set<std::string> build_drop_set_freq(const FrequencyTable& table, double coverage, bool inverse) {
    if (table.empty()) {
        throw DataError("frequency table is empty");
    }
    if (!(coverage > 0.0 && coverage < 1.0)) {
        throw ConfigError("coverage must lie in (0, 1)");
    }
    auto order = table.ordered();
    if (inverse) {
        std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    }
    std::set<std::string> out;
    std::size_t mass = 0;
    const double total = static_cast<double>(table.total());
    for (const auto& [tok, n] : order) {
        if (static_cast<double>(mass) / total >= coverage) {
            break;
        }
        out.insert(tok);
        mass += n;
    }
    return out;
}

struct SparsityPattern {
    enum class Kind { tag, freq, inv_freq, group };
    Kind kind = Kind::group;
    std::set<std::string> drop_tags;
    std::set<std::string> drop_tokens;  // freq kinds
    double coverage_target = 0.0;

    static SparsityPattern group() { return {}; }
    static SparsityPattern tag(std::set<std::string> tags) {
        SparsityPattern p;
        p.kind = Kind::tag;
        p.drop_tags = std::move(tags);
        return p;
    }
    static SparsityPattern frequency(const FrequencyTable& table, double coverage, bool inverse) {
        SparsityPattern p;
        p.kind = inverse ? Kind::inv_freq : Kind::freq;
        p.coverage_target = coverage;
        p.drop_tokens = build_drop_set_freq(table, coverage, inverse);
        return p;
    }
};

inline SparsityPattern::Kind parse_pattern_kind(const std::string& s) {
    if (s == "tag") {
        return SparsityPattern::Kind::tag;
    }
    if (s == "freq") {
        return SparsityPattern::Kind::freq;
    }
    if (s == "inv-freq" || s == "inv_freq") {
        return SparsityPattern::Kind::inv_freq;
    }
    if (s == "group") {
        return SparsityPattern::Kind::group;
    }
    throw ConfigError("unknown pattern '" + s + "' (expected tag, freq, inv-freq or group)");
}

// Binary keep (1) / drop (0) gates. Group keeps 1-based odd positions. A mask
// that would drop every token keeps the first one.
inline std::vector<double> mask_sentence(const SparsityPattern& p, const Sentence& tokens,
                                         const std::vector<std::string>* tags = nullptr) {
    const std::size_t n = tokens.size();
    std::vector<double> g(n, 1.0);
    switch (p.kind) {
        case SparsityPattern::Kind::group:
            for (std::size_t i = 1; i < n; i += 2) {
                g[i] = 0.0;
            }
            break;
        case SparsityPattern::Kind::tag:
            if (!tags) {
                throw DataError("tag pattern needs a tag sequence");
            }
            if (tags->size() != n) {
                throw DataError("tag sequence has " + std::to_string(tags->size()) + " tags for " +
                                std::to_string(n) + " tokens");
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (p.drop_tags.count((*tags)[i])) {
                    g[i] = 0.0;
                }
            }
            break;
        case SparsityPattern::Kind::freq:
        case SparsityPattern::Kind::inv_freq:
            for (std::size_t i = 0; i < n; ++i) {
                if (p.drop_tokens.count(tokens[i])) {
                    g[i] = 0.0;
                }
            }
            break;
    }
    if (n > 0 && std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) {
        g[0] = 1.0;
    }
    return g;
}

inline std::set<std::string> parse_tag_set(const std::string& csv) {
    std::set<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.insert(item);
        }
    }
    return out;
}

}  // namespace l0drop
