// Command line driver: train / eval / gradcheck / oracle-compare.
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "towertrain/data_io.hpp"
#include "towertrain/optim.hpp"
#include "towertrain/oracle.hpp"
#include "towertrain/parallel.hpp"
#include "towertrain/synth.hpp"

namespace tt = towertrain;

namespace {

struct RunConfig {
    std::string dataset_train, dataset_test;
    std::string hidden = "256,256";
    std::size_t k = 128;
    std::string loss = "logistic";
    double omega_log2 = 0.0, lambda_log2 = 0.0;
    std::string method = "gd";
    double sg_rho = 0.01, sg_alpha = 0.1, sg_step_size = 0.0;
    double ls_eta = 1e-4;
    double cg_xi = 0.1;
    int cg_max_iters = 30;
    std::uint64_t seed = 1;
    std::size_t max_passes = 10;
    std::string trace_path;
    std::size_t map_every = 1;
    bool exclude_train = true;
    int workers = 0;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw tt::ConfigError("config: bad numeric value '" + v + "' for " + key);
    }
}

std::size_t to_count(const std::string& key, const std::string& v) {
    const double x = to_real(key, v);
    if (x < 0 || x != std::floor(x)) throw tt::ConfigError("config: " + key + " must be a count");
    return std::size_t(x);
}

bool to_flag(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw tt::ConfigError("config: bad flag value '" + v + "' for " + key);
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "dataset.train") c.dataset_train = value;
    else if (key == "dataset.test") c.dataset_test = value;
    else if (key == "model.hidden") c.hidden = value;
    else if (key == "model.k") c.k = to_count(key, value);
    else if (key == "loss") c.loss = value;
    else if (key == "omega_log2") c.omega_log2 = to_real(key, value);
    else if (key == "lambda_log2") c.lambda_log2 = to_real(key, value);
    else if (key == "method") c.method = value;
    else if (key == "sg.rho") c.sg_rho = to_real(key, value);
    else if (key == "sg.alpha") c.sg_alpha = to_real(key, value);
    else if (key == "sg.step_size") c.sg_step_size = to_real(key, value);
    else if (key == "ls.eta") c.ls_eta = to_real(key, value);
    else if (key == "cg.xi") c.cg_xi = to_real(key, value);
    else if (key == "cg.max_iters") c.cg_max_iters = int(to_count(key, value));
    else if (key == "seed") c.seed = std::uint64_t(to_count(key, value));
    else if (key == "max_passes") c.max_passes = to_count(key, value);
    else if (key == "trace.path") c.trace_path = value;
    else if (key == "eval.map_every") c.map_every = to_count(key, value);
    else if (key == "eval.exclude_train") c.exclude_train = to_flag(key, value);
    else if (key == "workers") c.workers = int(to_count(key, value));
    else throw tt::ConfigError("config: unknown key '" + key + "'");
}

void apply_assignment(RunConfig& c, const std::string& text, const std::string& where) {
    const auto eq = text.find('=');
    if (eq == std::string::npos)
        throw tt::ConfigError("config: expected key=value in " + where + ": '" + text + "'");
    apply_key(c, trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
}

void load_config_file(RunConfig& c, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw tt::ConfigError("config: cannot open '" + path + "'");
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        apply_assignment(c, line, path + ":" + std::to_string(ln));
    }
}

void apply_preset(RunConfig& c, const std::string& name) {
    if (name == "ml1m") {
        c.omega_log2 = -4;
        c.lambda_log2 = 2;
    } else if (name == "ml10m") {
        c.omega_log2 = -8;
        c.lambda_log2 = -2;
    } else if (name == "netflix") {
        c.omega_log2 = -8;
        c.lambda_log2 = 0;
    } else if (name == "wiki-simple") {
        c.omega_log2 = -10;
        c.lambda_log2 = 2;
    } else {
        throw tt::ConfigError("config: unknown preset '" + name + "'");
    }
}

std::vector<std::size_t> parse_hidden(const std::string& text) {
    std::vector<std::size_t> dims;
    const std::string t = trim(text);
    if (t.empty() || t == "none") return dims;
    std::size_t pos = 0;
    while (pos <= t.size()) {
        const auto comma = t.find(',', pos);
        const std::string tok = trim(t.substr(pos, comma == std::string::npos ? std::string::npos
                                                                              : comma - pos));
        dims.push_back(to_count("model.hidden", tok));
        if (dims.back() == 0) throw tt::ConfigError("config: zero-width hidden layer");
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return dims;
}

// Reindexes a loaded interaction set into the training shape, rejecting
// entities outside it.
tt::ObservedSet fit_to_shape(const tt::ObservedSet& o, std::size_t m, std::size_t n,
                             const std::string& what) {
    if (o.rows() > m || o.cols() > n)
        throw tt::DataError(what + ": entity indices exceed the training shape");
    return tt::ObservedSet(m, n, o.triples());
}

struct BuiltProblem {
    tt::TowerSpec spec_u, spec_v;
    tt::PairwiseObjective engine;
    tt::ObservedSet test;
    bool has_test = false;
};

BuiltProblem build_problem(const RunConfig& c, const std::string& imput_p_path,
                           const std::string& imput_q_path) {
    if (c.dataset_train.empty()) throw tt::ConfigError("config: dataset.train is required");
    tt::set_worker_count(c.workers);

    tt::ObservedSet train = tt::load_interactions(c.dataset_train);
    const std::size_t m = train.rows(), n = train.cols();
    if (c.k == 0) throw tt::ConfigError("config: model.k must be positive");

    tt::TowerSpec su, sv;
    su.input_mode = tt::InputMode::one_hot;
    su.input_dim = m;
    su.hidden = parse_hidden(c.hidden);
    su.output_dim = c.k;
    sv = su;
    sv.input_dim = n;

    const auto kind = imput_p_path.empty() ? tt::ImputationKind::constant
                                           : tt::ImputationKind::file;
    if (kind == tt::ImputationKind::file && imput_q_path.empty())
        throw tt::ConfigError("config: imputation files must be given for both sides");
    auto [ip, iq] = tt::build_imputation(kind, c.k, m, n, imput_p_path, imput_q_path);

    tt::ProblemData data =
        tt::make_problem(std::move(train), tt::FeatureSet::one_hot(m), tt::FeatureSet::one_hot(n),
                         tt::Vec(m, 1.0), tt::Vec(n, 1.0), std::move(ip), std::move(iq),
                         std::exp2(c.omega_log2), std::exp2(c.lambda_log2),
                         tt::parse_loss(c.loss));

    BuiltProblem out{su, sv, tt::PairwiseObjective(su, sv, std::move(data)), {}, false};
    if (!c.dataset_test.empty()) {
        out.test = fit_to_shape(tt::load_interactions(c.dataset_test), m, n, "dataset.test");
        out.has_test = true;
    }
    return out;
}

tt::RunOptions to_run_options(const RunConfig& c, double time_budget_s) {
    tt::RunOptions opt;
    opt.method = tt::parse_method(c.method);
    opt.ls.eta = c.ls_eta;
    opt.cg.xi = c.cg_xi;
    opt.cg.max_iters = c.cg_max_iters;
    opt.sg.rho = c.sg_rho;
    opt.sg.alpha = c.sg_alpha;
    opt.sg.step_size = c.sg_step_size;
    opt.max_passes = c.max_passes;
    opt.seed = c.seed;
    opt.map_every = c.map_every;
    opt.exclude_train = c.exclude_train;
    opt.time_budget_s = time_budget_s;
    return opt;
}

int cmd_train(const RunConfig& c, const std::string& imput_p, const std::string& imput_q,
              const std::string& model_in, const std::string& model_out, double time_budget_s) {
    BuiltProblem prob = build_problem(c, imput_p, imput_q);
    tt::Vec theta;
    if (!model_in.empty()) {
        const tt::Checkpoint ck = tt::load_checkpoint(model_in);
        if (ck.theta.size() != prob.engine.dim())
            throw tt::DataError("model: checkpoint size does not match the configured model");
        theta = ck.theta;
    } else {
        theta = prob.engine.tower_u().init_params(c.seed);
        const tt::Vec tv = prob.engine.tower_v().init_params(c.seed + 0x9e3779b9u);
        theta.insert(theta.end(), tv.begin(), tv.end());
    }

    const tt::RunOptions opt = to_run_options(c, time_budget_s);
    const tt::RunResult res =
        tt::run(prob.engine, std::move(theta), opt, prob.has_test ? &prob.test : nullptr);

    std::printf("# method %s  m %zu  n %zu  observed %zu  params %zu\n", c.method.c_str(),
                prob.engine.data().m(), prob.engine.data().n(),
                prob.engine.data().observed.nnz(), prob.engine.dim());
    std::printf("# initial objective %.10g\n", res.initial_objective);
    for (const tt::TraceRecord& r : res.trace) {
        std::printf("pass %zu  step %zu  time %.3f  obj %.10g  delta %.3g  ls %zu  cg %zu",
                    r.pass, r.step, r.wall_time_s, r.objective, r.step_size, r.n_line_search,
                    r.n_cg);
        if (r.map_at_5) std::printf("  map@5 %.6f", *r.map_at_5);
        std::printf("\n");
    }
    if (!c.trace_path.empty()) tt::write_trace(c.trace_path, res.trace);
    if (!model_out.empty())
        tt::save_checkpoint(model_out, prob.spec_u, prob.spec_v, res.theta);
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& test_path,
             const std::string& train_path, std::size_t k, bool exclude_train, int workers) {
    tt::set_worker_count(workers);
    const tt::Checkpoint ck = tt::load_checkpoint(model_path);
    if (ck.spec_u.input_mode != tt::InputMode::one_hot ||
        ck.spec_v.input_mode != tt::InputMode::one_hot)
        throw tt::ConfigError("eval: only entity-id (one-hot) checkpoints are supported");
    const std::size_t m = ck.spec_u.input_dim, n = ck.spec_v.input_dim;

    const tt::Tower tu(ck.spec_u), tv(ck.spec_v);
    const std::size_t du = tu.param_count();
    const std::span<const double> theta(ck.theta);
    const tt::DenseMatrix p =
        tu.forward_all(theta.subspan(0, du), tt::FeatureSet::one_hot(m), nullptr);
    const tt::DenseMatrix q =
        tv.forward_all(theta.subspan(du), tt::FeatureSet::one_hot(n), nullptr);

    const tt::ObservedSet test = fit_to_shape(tt::load_interactions(test_path), m, n, "test");
    tt::ObservedSet train;
    if (!train_path.empty()) train = fit_to_shape(tt::load_interactions(train_path), m, n, "train");
    const double map = tt::map_at_k(p, q, test, k,
                                    (exclude_train && !train_path.empty()) ? &train : nullptr);
    std::printf("map@%zu %.10f\n", k, map);
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t instances, bool corrupt) {
    double worst_fd = 0.0, worst_fd_u = 0.0, worst_fd_v = 0.0, worst_dual = 0.0;
    std::mt19937_64 eng(seed);
    for (std::size_t t = 0; t < instances; ++t) {
        const tt::TinyInstance inst = tt::random_tiny_instance(seed + 1000 * t);
        const tt::PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
        const std::size_t dim = engine.dim();
        tt::GramianCache cache;
        tt::Vec g = engine.gradient(inst.theta, 0, cache);
        if (corrupt) g[0] += 1.0;

        const auto fd_error = [&](std::size_t lo, std::size_t hi) {
            tt::Vec d(dim, 0.0);
            double norm = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                d[i] = 2.0 * (double(eng() >> 11) * 0x1p-53) - 1.0;
                norm += d[i] * d[i];
            }
            norm = std::sqrt(norm);
            for (std::size_t i = lo; i < hi; ++i) d[i] /= norm;
            const double eps = 1e-6 * (1.0 + tt::norm2(inst.theta));
            tt::Vec plus = inst.theta, minus = inst.theta;
            tt::axpy(eps, d, plus);
            tt::axpy(-eps, d, minus);
            tt::GramianCache scratch;
            const double fd = (engine.objective(plus, 1, scratch) -
                               engine.objective(minus, 2, scratch)) /
                              (2.0 * eps);
            const double gd = tt::dot(g, d);
            return std::abs(fd - gd) / std::max({std::abs(fd), std::abs(gd), 1e-6});
        };
        worst_fd = std::max(worst_fd, fd_error(0, dim));
        worst_fd_u = std::max(worst_fd_u, fd_error(0, engine.dim_u()));
        worst_fd_v = std::max(worst_fd_v, fd_error(engine.dim_u(), dim));

        // Duality: <jvp(d), M> must equal d . vjp(M) on each tower.
        engine.refresh_cache(inst.theta, 0, cache);
        const auto duality = [&](const tt::Tower& tw, std::span<const double> params,
                                 const tt::FeatureSet& feats, const tt::ForwardTape& tape) {
            const std::size_t rows = tape.batch, cols = tw.spec().output_dim;
            tt::DenseMatrix cot(rows, cols);
            tt::Vec d(tw.param_count());
            for (std::size_t i = 0; i < cot.size(); ++i)
                cot.data()[i] = 2.0 * (double(eng() >> 11) * 0x1p-53) - 1.0;
            for (std::size_t i = 0; i < d.size(); ++i)
                d[i] = 2.0 * (double(eng() >> 11) * 0x1p-53) - 1.0;
            const tt::DenseMatrix w = tw.jvp(params, feats, tape, d);
            const double lhs = tt::frobenius_inner(w, cot);
            const tt::Vec grad = tw.vjp(params, feats, tape, cot);
            const double rhs = tt::dot(d, grad);
            return std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-8});
        };
        worst_dual = std::max(worst_dual, duality(engine.tower_u(), engine.theta_u(inst.theta),
                                                  engine.data().feats_u, cache.P.tape));
        worst_dual = std::max(worst_dual, duality(engine.tower_v(), engine.theta_v(inst.theta),
                                                  engine.data().feats_v, cache.Q.tape));
    }
    std::printf("gradcheck over %zu instances\n", instances);
    std::printf("  max fd relative error (joint)   %.3e\n", worst_fd);
    std::printf("  max fd relative error (tower u) %.3e\n", worst_fd_u);
    std::printf("  max fd relative error (tower v) %.3e\n", worst_fd_v);
    std::printf("  max vjp/jvp duality error       %.3e\n", worst_dual);
    if (worst_fd > 1e-5 || worst_fd_u > 1e-5 || worst_fd_v > 1e-5)
        throw tt::CheckFailure("gradcheck: finite-difference error above 1e-5");
    if (worst_dual > 1e-10) throw tt::CheckFailure("gradcheck: duality error above 1e-10");
    std::printf("gradcheck ok\n");
    return 0;
}

int cmd_oracle_compare(std::uint64_t seed, std::size_t instances) {
    double worst_obj = 0.0, worst_grad = 0.0, worst_gn = 0.0;
    std::mt19937_64 eng(seed ^ 0xabcdef12u);
    for (std::size_t t = 0; t < instances; ++t) {
        const tt::TinyInstance inst = tt::random_tiny_instance(seed + 7777 * t);
        const tt::PairwiseObjective engine(inst.spec_u, inst.spec_v, inst.data);
        tt::GramianCache cache;

        const double fast_obj = engine.objective(inst.theta, 0, cache);
        const double ref_obj = tt::oracle::naive_objective(engine, inst.theta);
        worst_obj = std::max(worst_obj,
                             std::abs(fast_obj - ref_obj) / std::max(1.0, std::abs(ref_obj)));

        const tt::Vec fast_g = engine.gradient(inst.theta, 0, cache);
        const tt::Vec ref_g = tt::oracle::naive_gradient(engine, inst.theta);
        double dn = 0.0, rn = 0.0;
        for (std::size_t i = 0; i < fast_g.size(); ++i) {
            dn += (fast_g[i] - ref_g[i]) * (fast_g[i] - ref_g[i]);
            rn += ref_g[i] * ref_g[i];
        }
        worst_grad = std::max(worst_grad, std::sqrt(dn) / std::max(1.0, std::sqrt(rn)));

        tt::Vec d(engine.dim());
        for (double& x : d) x = 2.0 * (double(eng() >> 11) * 0x1p-53) - 1.0;
        const tt::Vec fast_gn = engine.gn_product(inst.theta, d, 0, cache);
        const tt::Vec ref_gn = tt::oracle::naive_gn_product(engine, inst.theta, d);
        dn = rn = 0.0;
        for (std::size_t i = 0; i < fast_gn.size(); ++i) {
            dn += (fast_gn[i] - ref_gn[i]) * (fast_gn[i] - ref_gn[i]);
            rn += ref_gn[i] * ref_gn[i];
        }
        worst_gn = std::max(worst_gn, std::sqrt(dn) / std::max(1.0, std::sqrt(rn)));
    }
    std::printf("oracle comparison over %zu instances\n", instances);
    std::printf("  max objective relative error  %.3e\n", worst_obj);
    std::printf("  max gradient relative error   %.3e\n", worst_grad);
    std::printf("  max gn-product relative error %.3e\n", worst_gn);
    if (worst_obj > 1e-10 || worst_grad > 1e-10 || worst_gn > 1e-10)
        throw tt::CheckFailure("oracle-compare: disagreement above 1e-10");
    std::printf("oracle comparison ok\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"all-pairs two-tower similarity trainer"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path, preset;
    std::vector<std::string> overrides;
    std::string imput_p, imput_q, model_in, model_out;
    double time_budget_s = 0.0;

    CLI::App* train = app.add_subcommand("train", "fit a model and write a trace");
    train->add_option("--config", config_path, "key = value configuration file");
    train->add_option("--preset", preset, "hyper-parameter preset: ml1m, ml10m, netflix, wiki-simple");
    train->add_option("--set", overrides, "override one config key (key=value, repeatable)");
    train->add_option("--imputation-p", imput_p, "dense imputed-embedding file, left side");
    train->add_option("--imputation-q", imput_q, "dense imputed-embedding file, right side");
    train->add_option("--model", model_in, "checkpoint to warm start from");
    train->add_option("--save-model", model_out, "checkpoint path to write after training");
    train->add_option("--time-budget", time_budget_s, "stop after this many seconds of training");

    std::string ev_model, ev_test, ev_train;
    std::size_t ev_k = 5;
    bool ev_no_exclude = false;
    int ev_workers = 0;
    CLI::App* ev = app.add_subcommand("eval", "ranking metric of a saved model");
    ev->add_option("--model", ev_model, "checkpoint path")->required();
    ev->add_option("--test", ev_test, "test interaction file")->required();
    ev->add_option("--train", ev_train, "training interactions to exclude from ranking");
    ev->add_option("--k", ev_k, "ranking cutoff (default 5)");
    ev->add_flag("--no-exclude-train", ev_no_exclude, "rank training items too");
    ev->add_option("--workers", ev_workers, "worker cap (0 = hardware default)");

    std::uint64_t gc_seed = 1;
    std::size_t gc_instances = 20;
    bool gc_corrupt = false;
    CLI::App* gc = app.add_subcommand("gradcheck",
                                      "finite-difference and duality checks on random instances");
    gc->add_option("--seed", gc_seed, "instance seed");
    gc->add_option("--instances", gc_instances, "number of random instances");
    gc->add_flag("--corrupt", gc_corrupt, "perturb the gradient first (must fail)");

    std::uint64_t oc_seed = 1;
    std::size_t oc_instances = 25;
    CLI::App* oc = app.add_subcommand("oracle-compare",
                                      "fast engine against brute-force references");
    oc->add_option("--seed", oc_seed, "instance seed");
    oc->add_option("--instances", oc_instances, "number of random instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed()) {
            if (!preset.empty()) apply_preset(cfg, preset);
            if (!config_path.empty()) load_config_file(cfg, config_path);
            for (const std::string& o : overrides) apply_assignment(cfg, o, "--set");
            return cmd_train(cfg, imput_p, imput_q, model_in, model_out, time_budget_s);
        }
        if (ev->parsed())
            return cmd_eval(ev_model, ev_test, ev_train, ev_k, !ev_no_exclude, ev_workers);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_instances, gc_corrupt);
        if (oc->parsed()) return cmd_oracle_compare(oc_seed, oc_instances);
    } catch (const tt::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const tt::SizeGuardError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const tt::DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const tt::DimensionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const tt::NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const tt::CheckFailure& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 5;
    } catch (const tt::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
