#include "towertrain/tower.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "towertrain/parallel.hpp"

namespace towertrain {

FeatureSet FeatureSet::one_hot(std::size_t count) {
    FeatureSet f;
    f.mode = InputMode::one_hot;
    f.count = count;
    f.dim = count;
    return f;
}

FeatureSet FeatureSet::dense(DenseMatrix rows) {
    FeatureSet f;
    f.mode = InputMode::dense;
    f.count = rows.rows();
    f.dim = rows.cols();
    f.rows = std::move(rows);
    return f;
}

namespace {

inline double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }
// Convention: derivative 1 at exactly zero.
inline double elu_prime(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }

DenseMatrix elu_all(const DenseMatrix& s) {
    DenseMatrix a(s.rows(), s.cols());
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < s.rows(); ++r) {
        const double* srow = s.row(r);
        double* arow = a.row(r);
        for (std::size_t c = 0; c < s.cols(); ++c) arow[c] = elu(srow[c]);
    }
    return a;
}

void mul_elu_prime(DenseMatrix& t, const DenseMatrix& pre) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < t.rows(); ++r) {
        const double* prow = pre.row(r);
        double* trow = t.row(r);
        for (std::size_t c = 0; c < t.cols(); ++c) trow[c] *= elu_prime(prow[c]);
    }
}

// out = a * W + 1 b^T with W row-major fan_in x fan_out.
DenseMatrix affine(const DenseMatrix& a, const double* w, const double* b, std::size_t in,
                   std::size_t out) {
    DenseMatrix s(a.rows(), out);
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* arow = a.row(r);
        double* srow = s.row(r);
        for (std::size_t c = 0; c < out; ++c) srow[c] = b[c];
        for (std::size_t t = 0; t < in; ++t) {
            const double av = arow[t];
            const double* wrow = w + t * out;
            for (std::size_t c = 0; c < out; ++c) srow[c] += av * wrow[c];
        }
    }
    return s;
}

// out += a * W
void add_matmul(const DenseMatrix& a, const double* w, DenseMatrix& out) {
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double* arow = a.row(r);
        double* orow = out.row(r);
        for (std::size_t t = 0; t < a.cols(); ++t) {
            const double av = arow[t];
            const double* wrow = w + t * out.cols();
            for (std::size_t c = 0; c < out.cols(); ++c) orow[c] += av * wrow[c];
        }
    }
}

// out = d * W^T with W fan_in x fan_out, d batch x fan_out.
DenseMatrix times_wt(const DenseMatrix& d, const double* w, std::size_t in, std::size_t out) {
    DenseMatrix nd(d.rows(), in);
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < d.rows(); ++r) {
        const double* drow = d.row(r);
        double* orow = nd.row(r);
        for (std::size_t i = 0; i < in; ++i) {
            const double* wrow = w + i * out;
            double s = 0.0;
            for (std::size_t c = 0; c < out; ++c) s += drow[c] * wrow[c];
            orow[i] = s;
        }
    }
    return nd;
}

// One-hot first layer: row lookup  out[r,:] = W[ids[r],:] + b.
DenseMatrix lookup_rows(const double* w, const double* b, std::size_t out,
                        std::span<const std::size_t> ids) {
    DenseMatrix s(ids.size(), out);
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* wrow = w + ids[r] * out;
        double* srow = s.row(r);
        for (std::size_t c = 0; c < out; ++c) srow[c] = wrow[c] + b[c];
    }
    return s;
}

DenseMatrix gather_rows(const DenseMatrix& src, std::span<const std::size_t> ids) {
    DenseMatrix out(ids.size(), src.cols());
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* srow = src.row(ids[r]);
        double* orow = out.row(r);
        for (std::size_t c = 0; c < src.cols(); ++c) orow[c] = srow[c];
    }
    return out;
}

// grad_b += column sums of delta; deterministic (per column, ascending rows).
void colsum_into(const DenseMatrix& d, double* out) {
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < d.cols(); ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < d.rows(); ++r) s += d(r, c);
        out[c] += s;
    }
}

// grad_W += a^T * d, tiled over output rows; each tile accumulates over the
// batch in ascending order (worker-count independent).
void accum_at(const DenseMatrix& a, const DenseMatrix& d, double* out) {
    const std::size_t rr = a.rows(), m = a.cols(), n = d.cols();
    constexpr std::size_t kTile = 64;
    const std::size_t ntiles = (m + kTile - 1) / kTile;
#pragma omp parallel for schedule(static)
    for (std::size_t tile = 0; tile < ntiles; ++tile) {
        const std::size_t ilo = tile * kTile;
        const std::size_t ihi = std::min(m, ilo + kTile);
        for (std::size_t r = 0; r < rr; ++r) {
            const double* arow = a.row(r);
            const double* drow = d.row(r);
            for (std::size_t i = ilo; i < ihi; ++i) {
                const double av = arow[i];
                double* orow = out + i * n;
                for (std::size_t c = 0; c < n; ++c) orow[c] += av * drow[c];
            }
        }
    }
}

// One-hot first layer gradient: scatter delta rows; ids are distinct so rows
// are written by exactly one worker.
void scatter_rows(const DenseMatrix& d, std::span<const std::size_t> ids, double* out) {
    const std::size_t n = d.cols();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* drow = d.row(r);
        double* orow = out + ids[r] * n;
        for (std::size_t c = 0; c < n; ++c) orow[c] += drow[c];
    }
}

std::string mode_name(InputMode m) { return m == InputMode::one_hot ? "one_hot" : "dense"; }

InputMode parse_mode(const std::string& s) {
    if (s == "one_hot") return InputMode::one_hot;
    if (s == "dense") return InputMode::dense;
    throw DataError("unknown input mode '" + s + "'");
}

}  // namespace

Tower::Tower(TowerSpec spec) : spec_(std::move(spec)) {
    if (spec_.input_dim == 0) throw ConfigError("tower: input_dim must be positive");
    if (spec_.output_dim == 0) throw ConfigError("tower: output_dim must be positive");
    for (std::size_t h : spec_.hidden)
        if (h == 0) throw ConfigError("tower: hidden layer width must be positive");

    std::vector<std::size_t> dims;
    dims.push_back(spec_.input_dim);
    dims.insert(dims.end(), spec_.hidden.begin(), spec_.hidden.end());
    dims.push_back(spec_.output_dim);

    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        LayerView lv;
        lv.in = dims[l];
        lv.out = dims[l + 1];
        lv.w_off = off;
        off += lv.in * lv.out;
        lv.b_off = off;
        off += lv.out;
        layers_.push_back(lv);
    }
    dim_ = off;
}

Vec Tower::init_params(std::uint64_t seed) const {
    Vec p(dim_, 0.0);
    std::mt19937_64 eng(seed);
    for (const LayerView& lv : layers_) {
        const double bound = std::sqrt(6.0 / double(lv.in + lv.out));
        for (std::size_t t = 0; t < lv.in * lv.out; ++t) {
            const double u = double(eng() >> 11) * 0x1.0p-53;  // [0, 1)
            p[lv.w_off + t] = (2.0 * u - 1.0) * bound;
        }
        // biases stay zero
    }
    return p;
}

namespace {

void check_batch(const TowerSpec& spec, const FeatureSet& feats,
                 std::span<const std::size_t> ids) {
    if (feats.mode != spec.input_mode) throw DimensionError("tower: feature mode mismatch");
    const std::size_t expect = spec.input_mode == InputMode::one_hot ? feats.count : feats.dim;
    if (expect != spec.input_dim) throw DimensionError("tower: feature width mismatch");
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= feats.count) throw DimensionError("tower: entity id out of range");
        if (r > 0 && ids[r] <= ids[r - 1])
            throw DimensionError("tower: batch ids must be ascending and distinct");
    }
}

}  // namespace

DenseMatrix Tower::forward(std::span<const double> params, const FeatureSet& feats,
                           std::span<const std::size_t> ids, ForwardTape* tape) const {
    if (params.size() != dim_) throw DimensionError("tower: params size mismatch");
    check_batch(spec_, feats, ids);
    if (tape) {
        tape->ids.assign(ids.begin(), ids.end());
        tape->pre.clear();
        tape->post.clear();
        tape->batch = ids.size();
    }
    const std::size_t L = layers_.size();
    DenseMatrix own;
    const DenseMatrix* input = nullptr;
    for (std::size_t l = 0; l < L; ++l) {
        const LayerView& lv = layers_[l];
        const double* w = params.data() + lv.w_off;
        const double* b = params.data() + lv.b_off;
        DenseMatrix s;
        if (l == 0) {
            if (spec_.input_mode == InputMode::one_hot)
                s = lookup_rows(w, b, lv.out, ids);
            else
                s = affine(gather_rows(feats.rows, ids), w, b, lv.in, lv.out);
        } else {
            s = affine(*input, w, b, lv.in, lv.out);
        }
        if (l + 1 == L) return s;
        DenseMatrix a = elu_all(s);
        if (tape) {
            tape->pre.push_back(std::move(s));
            tape->post.push_back(std::move(a));
            input = &tape->post.back();
        } else {
            own = std::move(a);
            input = &own;
        }
    }
    throw Error("tower: empty layer list");
}

DenseMatrix Tower::forward_all(std::span<const double> params, const FeatureSet& feats,
                               ForwardTape* tape) const {
    std::vector<std::size_t> ids(feats.count);
    for (std::size_t i = 0; i < feats.count; ++i) ids[i] = i;
    return forward(params, feats, ids, tape);
}

Vec Tower::vjp(std::span<const double> params, const FeatureSet& feats, const ForwardTape& tape,
               const DenseMatrix& cotangents) const {
    if (params.size() != dim_) throw DimensionError("tower: params size mismatch");
    const std::size_t L = layers_.size();
    if (tape.pre.size() != L - 1 || tape.post.size() != L - 1)
        throw DimensionError("tower: tape does not match tower depth");
    if (cotangents.rows() != tape.batch || cotangents.cols() != spec_.output_dim)
        throw DimensionError("tower: cotangent shape mismatch");

    Vec grad(dim_, 0.0);
    DenseMatrix delta = cotangents;
    for (std::size_t l = L; l-- > 0;) {
        const LayerView& lv = layers_[l];
        colsum_into(delta, grad.data() + lv.b_off);
        if (l == 0) {
            if (spec_.input_mode == InputMode::one_hot)
                scatter_rows(delta, tape.ids, grad.data() + lv.w_off);
            else
                accum_at(gather_rows(feats.rows, tape.ids), delta, grad.data() + lv.w_off);
        } else {
            accum_at(tape.post[l - 1], delta, grad.data() + lv.w_off);
        }
        if (l > 0) {
            DenseMatrix nd = times_wt(delta, params.data() + lv.w_off, lv.in, lv.out);
            mul_elu_prime(nd, tape.pre[l - 1]);
            delta = std::move(nd);
        }
    }
    return grad;
}

DenseMatrix Tower::jvp(std::span<const double> params, const FeatureSet& feats,
                       const ForwardTape& tape, std::span<const double> direction) const {
    if (params.size() != dim_ || direction.size() != dim_)
        throw DimensionError("tower: params/direction size mismatch");
    const std::size_t L = layers_.size();
    if (tape.pre.size() != L - 1 || tape.post.size() != L - 1)
        throw DimensionError("tower: tape does not match tower depth");

    const LayerView& lv0 = layers_[0];
    DenseMatrix t;
    DenseMatrix a0;
    if (spec_.input_mode == InputMode::one_hot) {
        t = lookup_rows(direction.data() + lv0.w_off, direction.data() + lv0.b_off, lv0.out,
                        tape.ids);
    } else {
        a0 = gather_rows(feats.rows, tape.ids);
        t = affine(a0, direction.data() + lv0.w_off, direction.data() + lv0.b_off, lv0.in,
                   lv0.out);
    }
    for (std::size_t l = 1; l < L; ++l) {
        const LayerView& lv = layers_[l];
        mul_elu_prime(t, tape.pre[l - 1]);  // t becomes the post-activation tangent
        DenseMatrix nt = affine(tape.post[l - 1], direction.data() + lv.w_off,
                                direction.data() + lv.b_off, lv.in, lv.out);
        add_matmul(t, params.data() + lv.w_off, nt);
        t = std::move(nt);
    }
    return t;
}

namespace {

std::string hidden_to_string(const std::vector<std::size_t>& hidden) {
    if (hidden.empty()) return "-";
    std::string s;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(hidden[i]);
    }
    return s;
}

std::vector<std::size_t> hidden_from_string(const std::string& s) {
    std::vector<std::size_t> out;
    if (s == "-") return out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) throw DataError("checkpoint: malformed hidden list '" + s + "'");
        out.push_back(std::stoull(tok));
    }
    return out;
}

void write_tower_line(std::ostream& os, const char* tag, const TowerSpec& spec) {
    os << "tower " << tag << ' ' << mode_name(spec.input_mode) << ' ' << spec.input_dim << ' '
       << hidden_to_string(spec.hidden) << ' ' << spec.output_dim << '\n';
}

TowerSpec read_tower_line(std::istream& is, const char* tag) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("checkpoint: truncated header");
    std::stringstream ss(line);
    std::string kw, got_tag, mode, hidden;
    TowerSpec spec;
    ss >> kw >> got_tag >> mode >> spec.input_dim >> hidden >> spec.output_dim;
    if (!ss || kw != "tower" || got_tag != tag)
        throw DataError("checkpoint: malformed tower line '" + line + "'");
    spec.input_mode = parse_mode(mode);
    spec.hidden = hidden_from_string(hidden);
    return spec;
}

}  // namespace

void save_checkpoint(const std::string& path, const TowerSpec& u, const TowerSpec& v,
                     std::span<const double> theta) {
    const std::size_t need = Tower(u).param_count() + Tower(v).param_count();
    if (theta.size() != need) throw DimensionError("checkpoint: theta size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    os << "towertrain-checkpoint v1\n";
    write_tower_line(os, "u", u);
    write_tower_line(os, "v", v);
    os << "theta " << theta.size() << "\n";
    os.write(reinterpret_cast<const char*>(theta.data()),
             std::streamsize(theta.size() * sizeof(double)));
    if (!os) throw DataError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
    std::string magic;
    if (!std::getline(is, magic) || magic != "towertrain-checkpoint v1")
        throw DataError("checkpoint: bad magic line in '" + path + "'");
    Checkpoint ck;
    ck.spec_u = read_tower_line(is, "u");
    ck.spec_v = read_tower_line(is, "v");
    std::string line;
    if (!std::getline(is, line)) throw DataError("checkpoint: truncated header");
    std::stringstream ss(line);
    std::string kw;
    std::size_t n = 0;
    ss >> kw >> n;
    if (!ss || kw != "theta") throw DataError("checkpoint: malformed theta line");
    const std::size_t need = Tower(ck.spec_u).param_count() + Tower(ck.spec_v).param_count();
    if (n != need) throw DataError("checkpoint: theta size does not match tower shapes");
    ck.theta.resize(n);
    is.read(reinterpret_cast<char*>(ck.theta.data()), std::streamsize(n * sizeof(double)));
    if (is.gcount() != std::streamsize(n * sizeof(double)))
        throw DataError("checkpoint: truncated parameter payload");
    if (!all_finite(ck.theta)) throw NumericError("checkpoint: non-finite parameters");
    return ck;
}

}  // namespace towertrain
