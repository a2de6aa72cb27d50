#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "repsteer/errors.hpp"
#include "repsteer/losses.hpp"
#include "repsteer/model.hpp"
#include "repsteer/parallel.hpp"
#include "repsteer/rng.hpp"
#include "repsteer/tokenizer.hpp"
#include "repsteer/triples.hpp"

namespace repsteer {

// Shortest round-trip decimal form of a double.
inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// MC1 ---------------------------------------------------------------------------

// The prompt is the question followed by a newline; each choice is scored as
// its text followed by EOS, so a choice that is a prefix of another is not
// favored for stopping early.
inline std::vector<int> mcq_prompt(const McqItem& item) { return encode(item.question + "\n"); }
inline std::vector<int> mcq_completion(const std::string& choice) {
    auto c = encode(choice);
    c.push_back(kEosToken);
    return c;
}

struct ItemRecord {
    std::string item_id;
    std::size_t chosen = 0;
    std::size_t true_index = 0;
    std::vector<double> logprobs;
    bool correct() const { return chosen == true_index; }
};

struct EvalReport {
    double mc1 = 0.0;
    std::size_t n_items = 0;    // scored items (the denominator)
    std::size_t n_skipped = 0;  // items with a choice longer than max_seq
    std::vector<ItemRecord> records;
    std::vector<std::string> skipped_ids;
};

struct Mc1Options {
    bool per_token_normalize = false;
};

inline std::size_t argmax_lowest(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

template <typename T>
EvalReport mc1_score(const ModelWeights<T>& w, const LoraAdapter<T>* adapter, const std::vector<McqItem>& items,
                     const Mc1Options& opt = {}) {
    if (items.empty()) throw DataError("mc1_score: no items");
    for (const auto& it : items) it.validate();
    const auto max_seq = static_cast<std::size_t>(w.config.max_seq);

    std::vector<std::optional<ItemRecord>> slots(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        const McqItem& item = items[i];
        const auto prompt = mcq_prompt(item);
        std::vector<std::vector<int>> comps;
        for (const auto& c : item.choices) {
            comps.push_back(mcq_completion(c));
            if (prompt.size() + comps.back().size() > max_seq) return;
        }
        ItemRecord rec{item.id, 0, item.true_index, {}};
        for (const auto& c : comps) {
            double lp = completion_logprob(w, adapter, prompt, c);
            if (opt.per_token_normalize) lp /= double(c.size());
            rec.logprobs.push_back(lp);
        }
        rec.chosen = argmax_lowest(rec.logprobs);
        slots[i] = std::move(rec);
    });

    EvalReport r;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!slots[i]) {
            ++r.n_skipped;
            r.skipped_ids.push_back(items[i].id);
            continue;
        }
        correct += slots[i]->correct() ? 1 : 0;
        r.records.push_back(std::move(*slots[i]));
    }
    r.n_items = r.records.size();
    if (r.n_items == 0) throw DataError("mc1_score: every item exceeds max_seq");
    r.mc1 = double(correct) / double(r.n_items);
    return r;
}

// KL divergence -------------------------------------------------------------------

inline constexpr double kKlEpsilon = 1e-9;

// sum_i p_i ln(p_i / q_i) after adding eps to every mass and renormalizing.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q, double eps = kKlEpsilon) {
    if (p.size() != q.size() || p.empty()) throw ShapeError("kl_divergence: histograms differ in size or are empty");
    const double sp = std::accumulate(p.begin(), p.end(), 0.0) + eps * double(p.size());
    const double sq = std::accumulate(q.begin(), q.end(), 0.0) + eps * double(q.size());
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pi = (p[i] + eps) / sp;
        const double qi = (q[i] + eps) / sq;
        kl += pi * std::log(pi / qi);
    }
    return std::max(kl, 0.0);
}

struct HistogramPair {
    std::vector<double> p, q;  // normalized masses
    double lo = 0.0, hi = 0.0;
    bool degenerate = false;   // both samples put all mass in one shared bin
};

// Equal-width bins over the pooled [min, max]; the maximum lands in the last bin.
inline HistogramPair shared_histograms(const std::vector<double>& a, const std::vector<double>& b, std::size_t bins) {
    if (bins < 2) throw ConfigError("histogram needs at least 2 bins");
    if (a.empty() || b.empty()) throw DataError("histogram of an empty sample");
    HistogramPair h;
    h.lo = std::min(*std::min_element(a.begin(), a.end()), *std::min_element(b.begin(), b.end()));
    h.hi = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()));
    h.p.assign(bins, 0.0);
    h.q.assign(bins, 0.0);
    const double width = (h.hi - h.lo) / double(bins);
    auto fill = [&](const std::vector<double>& xs, std::vector<double>& out) {
        for (const double x : xs) {
            std::size_t k = width > 0.0 ? static_cast<std::size_t>((x - h.lo) / width) : 0;
            out[std::min(k, bins - 1)] += 1.0 / double(xs.size());
        }
    };
    fill(a, h.p);
    fill(b, h.q);
    const auto single = [](const std::vector<double>& m) {
        return std::count_if(m.begin(), m.end(), [](double v) { return v > 0.0; }) == 1;
    };
    h.degenerate = single(h.p) && single(h.q) &&
                   std::max_element(h.p.begin(), h.p.end()) - h.p.begin() == std::max_element(h.q.begin(), h.q.end()) - h.q.begin();
    return h;
}

// Distance statistics ----------------------------------------------------------------

struct DistanceStats {
    std::vector<double> d_plus, d_minus;
    std::vector<std::string> triple_ids;
    double mean_plus = 0, mean_minus = 0, std_plus = 0, std_minus = 0;
    double kl_pn = 0, kl_np = 0;
    std::size_t bins = 30;
    bool degenerate = false;
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (const double x : v) s += x;
    return s / double(v.size());
}

// Population standard deviation.
inline double std_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (const double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size()));
}

// Fills the summary fields from the samples.
inline void summarize(DistanceStats& s) {
    if (s.d_plus.empty() || s.d_plus.size() != s.d_minus.size()) throw DataError("distance stats: sample lists empty or unequal");
    s.mean_plus = mean_of(s.d_plus);
    s.mean_minus = mean_of(s.d_minus);
    s.std_plus = std_of(s.d_plus);
    s.std_minus = std_of(s.d_minus);
    const HistogramPair h = shared_histograms(s.d_plus, s.d_minus, s.bins);
    s.degenerate = h.degenerate;
    if (h.degenerate) {
        s.kl_pn = s.kl_np = 0.0;
    } else {
        s.kl_pn = kl_divergence(h.p, h.q);
        s.kl_np = kl_divergence(h.q, h.p);
    }
}

// d_plus = d(M(T), M(T+)), d_minus = d(M(T), M(T-)) over n_sample triples drawn
// without replacement.
template <typename T>
DistanceStats distance_stats(const ModelWeights<T>& w, const LoraAdapter<T>* adapter,
                             const std::vector<ContrastTriple>& triples, std::size_t n_sample, std::uint64_t seed,
                             std::size_t bins = 30) {
    if (n_sample == 0) throw ConfigError("distance_stats: n_sample must be positive");
    if (n_sample > triples.size()) {
        throw ConfigError("distance_stats: n_sample " + std::to_string(n_sample) + " exceeds the " +
                          std::to_string(triples.size()) + " available triples");
    }
    if (bins < 2) throw ConfigError("distance_stats: bins must be >= 2");
    std::vector<std::size_t> idx(triples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "stats/sample"));
    rng.shuffle(idx);
    idx.resize(n_sample);

    DistanceStats s;
    s.bins = bins;
    s.d_plus.resize(n_sample);
    s.d_minus.resize(n_sample);
    parallel_for(n_sample, [&](std::size_t i) {
        const ContrastTriple& t = triples[idx[i]];
        const auto r = run_reps(w, adapter, t.neutral.tokens, t.neutral.span);
        const auto rp = run_reps(w, adapter, t.positive.tokens, t.positive.span);
        const auto rn = run_reps(w, adapter, t.negative.tokens, t.negative.span);
        s.d_plus[i] = double(rep_distance(r, rp));
        s.d_minus[i] = double(rep_distance(r, rn));
    });
    for (const auto i : idx) s.triple_ids.push_back(triples[i].id);
    summarize(s);
    return s;
}

// CSV export ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

inline std::string eval_report_csv(const EvalReport& r) {
    std::size_t kmax = 0;
    for (const auto& rec : r.records) kmax = std::max(kmax, rec.logprobs.size());
    std::ostringstream os;
    os << "# columns: item_id,chosen,true,correct,logprob_0..logprob_" << (kmax ? kmax - 1 : 0)
       << " (sum of completion token log-probs; empty when the item has fewer choices)\n";
    os << "item_id,chosen,true,correct";
    for (std::size_t k = 0; k < kmax; ++k) os << ",logprob_" << k;
    os << "\n";
    for (const auto& rec : r.records) {
        os << rec.item_id << "," << rec.chosen << "," << rec.true_index << "," << (rec.correct() ? 1 : 0);
        for (std::size_t k = 0; k < kmax; ++k) os << "," << (k < rec.logprobs.size() ? fmt_real(rec.logprobs[k]) : "");
        os << "\n";
    }
    os << "# mc1=" << fmt_real(r.mc1) << " n_items=" << r.n_items << " n_skipped=" << r.n_skipped << "\n";
    return os.str();
}

inline std::string distance_stats_csv(const DistanceStats& s) {
    std::ostringstream os;
    os << "# columns: idx,d_plus,d_minus (mean per-token l2 distance of neutral vs positive / negative rendering); "
          "last row is the summary\n";
    os << "idx,d_plus,d_minus\n";
    for (std::size_t i = 0; i < s.d_plus.size(); ++i) {
        os << i << "," << fmt_real(s.d_plus[i]) << "," << fmt_real(s.d_minus[i]) << "\n";
    }
    os << "summary,mean_plus=" << fmt_real(s.mean_plus) << ";mean_minus=" << fmt_real(s.mean_minus)
       << ";std_plus=" << fmt_real(s.std_plus) << ";std_minus=" << fmt_real(s.std_minus) << ";kl_pn=" << fmt_real(s.kl_pn)
       << ";kl_np=" << fmt_real(s.kl_np) << ";bins=" << s.bins << ";degenerate=" << (s.degenerate ? 1 : 0) << "\n";
    return os.str();
}

// Parses a distance-stats CSV back into samples and summary.
inline DistanceStats parse_distance_stats_csv(const std::string& text) {
    DistanceStats s;
    std::istringstream is(text);
    std::string line;
    bool header = false, summary = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != "idx,d_plus,d_minus") throw DataError("distance stats csv: unexpected header '" + line + "'");
            header = true;
            continue;
        }
        if (line.rfind("summary,", 0) == 0) {
            std::istringstream kv(line.substr(8));
            std::string item;
            while (std::getline(kv, item, ';')) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) throw DataError("distance stats csv: bad summary field '" + item + "'");
                const std::string k = item.substr(0, eq);
                const double v = std::stod(item.substr(eq + 1));
                if (k == "mean_plus") s.mean_plus = v;
                else if (k == "mean_minus") s.mean_minus = v;
                else if (k == "std_plus") s.std_plus = v;
                else if (k == "std_minus") s.std_minus = v;
                else if (k == "kl_pn") s.kl_pn = v;
                else if (k == "kl_np") s.kl_np = v;
                else if (k == "bins") s.bins = static_cast<std::size_t>(v);
                else if (k == "degenerate") s.degenerate = v != 0.0;
            }
            summary = true;
            continue;
        }
        std::istringstream row(line);
        std::string idx, dp, dm;
        if (!std::getline(row, idx, ',') || !std::getline(row, dp, ',') || !std::getline(row, dm, ',')) {
            throw DataError("distance stats csv: malformed row '" + line + "'");
        }
        s.d_plus.push_back(std::stod(dp));
        s.d_minus.push_back(std::stod(dm));
    }
    if (!header || !summary) throw DataError("distance stats csv: missing header or summary row");
    return s;
}

}  // namespace repsteer
