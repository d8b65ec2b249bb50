#include "towertrain/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

namespace towertrain {

namespace {

struct RawLine {
    std::size_t number = 0;  // 1-based line number in the file
    std::string text;
};

std::vector<std::string> tokens_of(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

bool parse_index(const std::string& tok, std::size_t& out) {
    const char* b = tok.data();
    const char* e = b + tok.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e;
}

bool parse_value(const std::string& tok, double& out) {
    const char* b = tok.data();
    const char* e = b + tok.size();
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && p == e && std::isfinite(out);
}

Triple parse_pair_line(const RawLine& line) {
    const auto toks = tokens_of(line.text);
    std::size_t i = 0, j = 0;
    double r = 0.0;
    if (toks.size() != 3 || !parse_index(toks[0], i) || !parse_index(toks[1], j) ||
        !parse_value(toks[2], r))
        throw DataError("interactions: malformed line " + std::to_string(line.number) + ": '" +
                        line.text + "'");
    if (i == 0 || j == 0)
        throw DataError("interactions: indices are 1-based, line " +
                        std::to_string(line.number));
    return {i - 1, j - 1, r};
}

}  // namespace

ObservedSet load_interactions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("interactions: cannot open '" + path + "'");

    std::vector<RawLine> lines;
    std::string text;
    for (std::size_t no = 1; std::getline(is, text); ++no) {
        const std::size_t hash = text.find('#');
        if (hash != std::string::npos) text.erase(hash);
        if (tokens_of(text).empty()) continue;
        lines.push_back({no, std::move(text)});
        text.clear();
    }
    if (lines.empty()) throw DataError("interactions: '" + path + "' holds no data");

    // Header candidate: three integer tokens whose count matches the number
    // of remaining lines and whose shape contains every pair.
    std::size_t rows = 0, cols = 0, count = 0;
    bool header = false;
    {
        const auto toks = tokens_of(lines[0].text);
        header = toks.size() == 3 && parse_index(toks[0], rows) && parse_index(toks[1], cols) &&
                 parse_index(toks[2], count) && count == lines.size() - 1;
    }
    std::vector<Triple> entries;
    entries.reserve(lines.size());
    for (std::size_t l = header ? 1 : 0; l < lines.size(); ++l)
        entries.push_back(parse_pair_line(lines[l]));
    if (header) {
        for (std::size_t l = 0; l < entries.size(); ++l)
            if (entries[l].i >= rows || entries[l].j >= cols) {
                // Shape contradicts the header reading; fall back to data.
                entries.insert(entries.begin(), parse_pair_line(lines[0]));
                header = false;
                break;
            }
    }
    if (!header) {
        if (entries.empty()) throw DataError("interactions: '" + path + "' holds no data");
        rows = cols = 0;
        for (const Triple& t : entries) {
            rows = std::max(rows, t.i + 1);
            cols = std::max(cols, t.j + 1);
        }
    }
    if (rows == 0 || cols == 0)
        throw DataError("interactions: '" + path + "' declares an empty shape");
    try {
        return ObservedSet(rows, cols, std::move(entries));
    } catch (const DataError& e) {
        throw DataError("interactions: '" + path + "': " + e.what());
    }
}

void save_interactions(const std::string& path, const ObservedSet& o) {
    std::ofstream os(path);
    if (!os) throw DataError("interactions: cannot open '" + path + "' for writing");
    os << o.rows() << ' ' << o.cols() << ' ' << o.nnz() << '\n';
    char buf[64];
    for (const Triple& t : o.triples()) {
        std::snprintf(buf, sizeof(buf), "%zu %zu %.17g\n", t.i + 1, t.j + 1, t.value);
        os << buf;
    }
    if (!os) throw DataError("interactions: write failed for '" + path + "'");
}

std::pair<ObservedSet, ObservedSet> make_split(const ObservedSet& o, double ratio,
                                               std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must lie in (0, 1)");
    const std::size_t count = o.nnz();
    const std::size_t ntrain = std::size_t(std::llround(ratio * double(count)));
    if (ntrain == 0 || ntrain == count)
        throw DataError("split: a side would be empty (" + std::to_string(count) + " pairs, ratio " +
                        std::to_string(ratio) + ")");

    std::vector<std::size_t> order(count);
    for (std::size_t t = 0; t < count; ++t) order[t] = t;
    // Explicit Fisher-Yates so the split does not depend on the standard
    // library's shuffle implementation.
    std::mt19937_64 eng(seed);
    for (std::size_t t = count - 1; t > 0; --t) {
        const std::size_t r = std::size_t(eng() % (t + 1));
        std::swap(order[t], order[r]);
    }

    const auto all = o.triples();
    std::vector<Triple> train, test;
    train.reserve(ntrain);
    test.reserve(count - ntrain);
    for (std::size_t t = 0; t < count; ++t)
        (t < ntrain ? train : test).push_back(all[order[t]]);
    return {ObservedSet(o.rows(), o.cols(), std::move(train)),
            ObservedSet(o.rows(), o.cols(), std::move(test))};
}

std::pair<DenseMatrix, DenseMatrix> build_imputation(ImputationKind kind, std::size_t k,
                                                     std::size_t rows, std::size_t cols,
                                                     const std::string& path_p,
                                                     const std::string& path_q) {
    if (kind == ImputationKind::constant) {
        if (k == 0) throw ConfigError("imputation: k must be positive");
        const double v = 1.0 / std::sqrt(double(k));
        DenseMatrix p(rows, k), q(cols, k);
        p.fill(-v);
        q.fill(v);
        return {std::move(p), std::move(q)};
    }
    DenseMatrix p = load_dense_matrix(path_p);
    DenseMatrix q = load_dense_matrix(path_q);
    if (p.rows() != rows || q.rows() != cols || p.cols() != k || q.cols() != k)
        throw DataError("imputation: file shapes do not match rows x k / cols x k");
    return {std::move(p), std::move(q)};
}

DenseMatrix load_dense_matrix(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("dense matrix: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw DataError("dense matrix: '" + path + "' is empty");
    std::stringstream hs(line);
    std::string magic, version;
    std::size_t rows = 0, cols = 0;
    hs >> magic >> version >> rows >> cols;
    if (!hs || magic != "towertrain-dense" || version != "v1")
        throw DataError("dense matrix: bad header in '" + path + "'");
    Vec entries;
    entries.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(is, line))
            throw DataError("dense matrix: '" + path + "' is truncated at row " +
                            std::to_string(r + 1));
        const auto toks = tokens_of(line);
        if (toks.size() != cols)
            throw DataError("dense matrix: row " + std::to_string(r + 1) + " of '" + path +
                            "' has " + std::to_string(toks.size()) + " values, expected " +
                            std::to_string(cols));
        for (const auto& tok : toks) {
            double v = 0.0;
            if (!parse_value(tok, v))
                throw DataError("dense matrix: bad value '" + tok + "' in '" + path + "'");
            entries.push_back(v);
        }
    }
    return DenseMatrix(rows, cols, std::move(entries));
}

void save_dense_matrix(const std::string& path, const DenseMatrix& m) {
    std::ofstream os(path);
    if (!os) throw DataError("dense matrix: cannot open '" + path + "' for writing");
    os << "towertrain-dense v1 " << m.rows() << ' ' << m.cols() << '\n';
    char buf[48];
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", m(r, c));
            os << buf << (c + 1 == m.cols() ? '\n' : ' ');
        }
    }
    if (!os) throw DataError("dense matrix: write failed for '" + path + "'");
}

}  // namespace towertrain
