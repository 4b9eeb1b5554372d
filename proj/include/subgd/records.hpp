#pragma once

// Evaluation record CSV I/O, per-method summaries, Wilcoxon comparisons
// against the best method, and plot-data series.

#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "subgd/binary_io.hpp"
#include "subgd/meta.hpp"
#include "subgd/stats.hpp"

namespace subgd {

inline constexpr const char* kRecordsHeader = "run_id,benchmark,method,task_id,seed,support_size,steps_used,mse";

/// Shortest round-trip decimal; +inf as `inf`.
inline std::string format_double(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    if (std::isnan(x)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    if (s == "inf") return kInf;
    if (s == "-inf") return -kInf;
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ValidationError("not a number: '" + s + "'");
    return v;
}

inline std::uint64_t parse_u64(const std::string& s) {
    std::uint64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ValidationError("not an integer: '" + s + "'");
    return v;
}

inline void check_csv_field(const std::string& s) {
    if (s.find_first_of(",\n\r\"") != std::string::npos)
        throw ValidationError("record field '" + s + "' contains a CSV delimiter");
}

inline std::string records_to_csv(const std::vector<EvalRecord>& records) {
    std::string out = std::string(kRecordsHeader) + "\n";
    for (const auto& r : records) {
        check_csv_field(r.run_id);
        check_csv_field(r.benchmark);
        check_csv_field(r.method);
        out += r.run_id + ',' + r.benchmark + ',' + r.method + ',' + std::to_string(r.task_id) + ',' +
               std::to_string(r.seed) + ',' + std::to_string(r.support_size) + ',' + std::to_string(r.steps_used) + ',' +
               format_double(r.mse) + '\n';
    }
    return out;
}

inline void write_records_csv(const fs::path& path, const std::vector<EvalRecord>& records) {
    write_file_atomic(path, records_to_csv(records));
}

inline std::vector<EvalRecord> parse_records_csv(const std::string& text, const std::string& source = "<records>") {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kRecordsHeader)
        throw CorruptFileError(source + ": missing or unexpected records header");
    std::vector<EvalRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            f.push_back(line.substr(pos, comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (f.size() != 8)
            throw CorruptFileError(source + ":" + std::to_string(lineno) + ": expected 8 fields, got " +
                                   std::to_string(f.size()));
        try {
            out.push_back({f[0], f[1], f[2], parse_u64(f[3]), parse_u64(f[4]), parse_u64(f[5]), parse_u64(f[6]),
                           parse_double(f[7])});
        } catch (const ValidationError& e) {
            throw CorruptFileError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<EvalRecord> read_records_csv(const fs::path& path) {
    return parse_records_csv(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Summaries

/// The central statistic per benchmark: medians for RLC (outliers), means otherwise.
inline bool uses_median(const std::string& benchmark) { return benchmark == "rlc"; }

struct MethodSummary {
    std::string benchmark;
    std::string method;
    std::size_t support_size = 0;
    std::size_t n = 0;
    double mean = 0.0;          // over finite records
    std::size_t inf_count = 0;  // records left out of the mean
    double median = 0.0;        // all records, +inf included
    Interval ci;                // 95% bootstrap interval of the central statistic
    bool best = false;
    bool bold = false;          // not significantly worse than the best method
};

struct ComparisonResult {
    std::string benchmark;
    std::string method_a; // the best method
    std::string method_b;
    std::size_t support_size = 0;
    std::size_t n_pairs = 0;
    bool tested = false;  // false when fewer than 5 non-zero differences
    double w_plus = 0.0;
    double p_value = 1.0;
    double mean_a = 0.0, mean_b = 0.0;
    double median_a = 0.0, median_b = 0.0;
};

struct Report {
    std::vector<MethodSummary> summaries;
    std::vector<ComparisonResult> comparisons;
};

struct ReportOptions {
    double alpha = 0.01;
    std::uint64_t bootstrap_seed = 0;
    std::size_t resamples = kBootstrapResamples;
};

using PairKey = std::pair<std::size_t, std::uint64_t>; // (task_id, seed)

/// Two-sided paired comparison of method b against method a on shared (task, seed) keys.
inline ComparisonResult compare_methods(const std::map<PairKey, double>& a, const std::map<PairKey, double>& b) {
    ComparisonResult c;
    std::vector<double> xa, xb;
    for (const auto& [k, v] : a) {
        const auto it = b.find(k);
        if (it == b.end()) continue;
        xa.push_back(v);
        xb.push_back(it->second);
    }
    c.n_pairs = xa.size();
    c.mean_a = finite_mean(xa).mean;
    c.mean_b = finite_mean(xb).mean;
    c.median_a = median(xa);
    c.median_b = median(xb);
    try {
        const auto w = wilcoxon_signed_rank(xa, xb);
        c.tested = true;
        c.w_plus = w.w_plus;
        c.p_value = w.p_value;
    } catch (const ValidationError&) {
        c.tested = false;
    }
    return c;
}

/// Groups records by (benchmark, support size, method); per group computes
/// mean (finite only), median and a bootstrap CI, then tests every method
/// against the group's best one.
inline Report build_report(const std::vector<EvalRecord>& records, const ReportOptions& opt = {}) {
    if (records.empty()) throw ValidationError("report: no records");
    using GroupKey = std::pair<std::string, std::size_t>;
    std::map<GroupKey, std::map<std::string, std::map<PairKey, double>>> groups;
    std::map<GroupKey, std::vector<std::string>> order; // methods in first-seen order
    for (const auto& r : records) {
        const GroupKey g{r.benchmark, r.support_size};
        auto& methods = groups[g];
        if (!methods.contains(r.method)) order[g].push_back(r.method);
        methods[r.method][{r.task_id, r.seed}] = r.mse;
    }
    Report rep;
    for (const auto& [g, methods] : groups) {
        const bool by_median = uses_median(g.first);
        std::vector<MethodSummary> sums;
        for (const auto& name : order[g]) {
            const auto& vals = methods.at(name);
            std::vector<double> v;
            for (const auto& [k, x] : vals) v.push_back(x);
            MethodSummary s;
            s.benchmark = g.first;
            s.method = name;
            s.support_size = g.second;
            s.n = v.size();
            const auto fm = finite_mean(v);
            s.mean = fm.mean;
            s.inf_count = fm.excluded;
            s.median = median(v);
            const std::uint64_t seed = derive_seed(derive_seed(opt.bootstrap_seed, g.second), sums.size());
            if (by_median)
                s.ci = bootstrap_ci(v, [](std::vector<double>& d) { return median(d); }, seed, opt.resamples);
            else
                s.ci = bootstrap_ci(v, [](std::vector<double>& d) { return finite_mean(d).mean; }, seed, opt.resamples);
            sums.push_back(std::move(s));
        }
        std::size_t best = 0;
        for (std::size_t i = 1; i < sums.size(); ++i) {
            const double ci = by_median ? sums[i].median : sums[i].mean;
            const double cb = by_median ? sums[best].median : sums[best].mean;
            if (ci < cb || (std::isnan(cb) && !std::isnan(ci))) best = i;
        }
        sums[best].best = sums[best].bold = true;
        for (std::size_t i = 0; i < sums.size(); ++i) {
            if (i == best) continue;
            auto c = compare_methods(methods.at(sums[best].method), methods.at(sums[i].method));
            c.benchmark = g.first;
            c.method_a = sums[best].method;
            c.method_b = sums[i].method;
            c.support_size = g.second;
            sums[i].bold = !c.tested || c.p_value >= opt.alpha;
            rep.comparisons.push_back(std::move(c));
        }
        for (auto& s : sums) rep.summaries.push_back(std::move(s));
    }
    return rep;
}

inline std::string summary_csv(const Report& rep) {
    std::string out = "benchmark,method,support_size,n,mean,inf_count,median,ci_lower,ci_upper,ci_statistic,best,bold\n";
    for (const auto& s : rep.summaries) {
        out += s.benchmark + ',' + s.method + ',' + std::to_string(s.support_size) + ',' + std::to_string(s.n) + ',' +
               format_double(s.mean) + ',' + std::to_string(s.inf_count) + ',' + format_double(s.median) + ',' +
               format_double(s.ci.lower) + ',' + format_double(s.ci.upper) + ',' +
               (uses_median(s.benchmark) ? "median" : "mean") + ',' + (s.best ? "1" : "0") + ',' +
               (s.bold ? "1" : "0") + '\n';
    }
    return out;
}

inline std::string comparisons_csv(const Report& rep) {
    std::string out =
        "benchmark,support_size,method_a,method_b,n_pairs,tested,w_plus,p_value,mean_a,mean_b,median_a,median_b\n";
    for (const auto& c : rep.comparisons) {
        out += c.benchmark + ',' + std::to_string(c.support_size) + ',' + c.method_a + ',' + c.method_b + ',' +
               std::to_string(c.n_pairs) + ',' + (c.tested ? "1" : "0") + ',' + format_double(c.w_plus) + ',' +
               format_double(c.p_value) + ',' + format_double(c.mean_a) + ',' + format_double(c.mean_b) + ',' +
               format_double(c.median_a) + ',' + format_double(c.median_b) + '\n';
    }
    return out;
}

/// Markdown table; bold marks methods not significantly worse than the best.
inline std::string summary_markdown(const Report& rep, double alpha = 0.01) {
    char buf[160];
    std::string out;
    std::string current;
    for (const auto& s : rep.summaries) {
        const std::string group = s.benchmark + ", support " + std::to_string(s.support_size);
        if (group != current) {
            if (!current.empty()) out += '\n';
            current = group;
            out += "### " + group + "\n\n| method | n | mean | median | 95% CI (" +
                   std::string(uses_median(s.benchmark) ? "median" : "mean") + ", bootstrap) |\n|---|---|---|---|---|\n";
        }
        const std::string name = s.bold ? "**" + s.method + "**" : s.method;
        std::snprintf(buf, sizeof buf, "| %s | %zu | %.4g%s | %.4g | [%.4g, %.4g] |\n", name.c_str(), s.n, s.mean,
                      s.inf_count ? "*" : "", s.median, s.ci.lower, s.ci.upper);
        out += buf;
    }
    std::size_t infs = 0;
    for (const auto& s : rep.summaries) infs += s.inf_count;
    std::snprintf(buf, sizeof buf, "\nBold: not significantly worse than the best method (two-sided Wilcoxon, alpha=%g).\n",
                  alpha);
    out += buf;
    if (infs > 0)
        out += "* Mean over finite records only; " + std::to_string(infs) +
               " diverged records (+inf) are counted in the medians.\n";
    return out;
}

// ---------------------------------------------------------------------------
// Method labels of the form kind[@r], r an integer or "full".

struct MethodLabel {
    std::string kind;                // sgd, subgd, subgd_unweighted, diagonal, random
    std::optional<std::size_t> rank; // nullopt: full
    bool has_rank = false;
};

inline MethodLabel parse_method_label(const std::string& label) {
    MethodLabel m;
    const auto at = label.find('@');
    m.kind = label.substr(0, at);
    static const std::set<std::string> kinds{"sgd", "subgd", "subgd_unweighted", "diagonal", "random"};
    if (!kinds.contains(m.kind)) throw ValidationError("unknown method '" + label + "'");
    if (at != std::string::npos) {
        m.has_rank = true;
        const std::string r = label.substr(at + 1);
        if (r != "full") {
            const auto v = parse_u64(r);
            if (v == 0) throw ValidationError("method '" + label + "': rank must be >= 1");
            m.rank = static_cast<std::size_t>(v);
        }
    }
    if (m.kind == "sgd" && m.has_rank) throw ValidationError("method '" + label + "': sgd takes no rank");
    return m;
}

/// Ablation series: kind, r (full as the given full rank), mean, CI, from summaries of ranked labels.
inline std::string ablation_tsv(const Report& rep, std::size_t full_rank) {
    std::string out = "method\tr\tsupport_size\tmean\tmedian\tci_lower\tci_upper\n";
    for (const auto& s : rep.summaries) {
        MethodLabel m;
        try {
            m = parse_method_label(s.method);
        } catch (const ValidationError&) {
            continue;
        }
        if (!m.has_rank && m.kind != "sgd") continue;
        const std::string r = m.kind == "sgd" ? "0" : std::to_string(m.rank.value_or(full_rank));
        out += m.kind + '\t' + r + '\t' + std::to_string(s.support_size) + '\t' + format_double(s.mean) + '\t' +
               format_double(s.median) + '\t' + format_double(s.ci.lower) + '\t' + format_double(s.ci.upper) + '\n';
    }
    return out;
}

/// Support-size curve per method (the central statistic with its CI).
inline std::string support_curve_tsv(const Report& rep) {
    std::string out = "benchmark\tmethod\tsupport_size\tmean\tmedian\tci_lower\tci_upper\n";
    for (const auto& s : rep.summaries)
        out += s.benchmark + '\t' + s.method + '\t' + std::to_string(s.support_size) + '\t' + format_double(s.mean) +
               '\t' + format_double(s.median) + '\t' + format_double(s.ci.lower) + '\t' + format_double(s.ci.upper) +
               '\n';
    return out;
}

} // namespace subgd
