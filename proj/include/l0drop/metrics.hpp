#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

namespace l0drop {

// Fraction of reference positions reproduced exactly; positions beyond the
// shorter sequence count as misses against max(|hyp|, |ref|).
struct TokenAccuracy {
    std::size_t matches = 0;
    std::size_t total = 0;

    void add(const std::vector<int>& hyp, const std::vector<int>& ref) {
        const std::size_t n = std::min(hyp.size(), ref.size());
        for (std::size_t i = 0; i < n; ++i) {
            matches += hyp[i] == ref[i];
        }
        total += std::max(hyp.size(), ref.size());
    }
    double value() const { return total ? static_cast<double>(matches) / static_cast<double>(total) : 1.0; }
};

// Corpus n-gram overlap, n = 1..4: geometric mean of clipped n-gram
// precisions times a brevity penalty. Zero counts are smoothed by adding one
// to numerator and denominator for n > 1.
class NgramOverlap {
public:
    void add(const std::vector<int>& hyp, const std::vector<int>& ref) {
        hyp_len_ += hyp.size();
        ref_len_ += ref.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            const auto h = counts(hyp, n);
            const auto r = counts(ref, n);
            for (const auto& [g, c] : h) {
                auto it = r.find(g);
                match_[n - 1] += it == r.end() ? 0 : std::min(c, it->second);
                total_[n - 1] += c;
            }
        }
    }

    double value() const {
        if (hyp_len_ == 0) {
            return 0.0;
        }
        double log_p = 0.0;
        for (std::size_t n = 0; n < 4; ++n) {
            const double num = static_cast<double>(match_[n]) + (n ? 1.0 : 0.0);
            const double den = static_cast<double>(total_[n]) + (n ? 1.0 : 0.0);
            if (num == 0.0 || den == 0.0) {
                return 0.0;
            }
            log_p += std::log(num / den) / 4.0;
        }
        const double bp =
            hyp_len_ >= ref_len_ ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len_) / static_cast<double>(hyp_len_));
        return bp * std::exp(log_p);
    }

private:
    static std::map<std::vector<int>, std::size_t> counts(const std::vector<int>& s, std::size_t n) {
        std::map<std::vector<int>, std::size_t> out;
        for (std::size_t i = 0; i + n <= s.size(); ++i) {
            ++out[std::vector<int>(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
        }
        return out;
    }

    std::size_t hyp_len_ = 0, ref_len_ = 0;
    std::size_t match_[4] = {0, 0, 0, 0};
    std::size_t total_[4] = {0, 0, 0, 0};
};

}  // namespace l0drop
