#include "mfct/optimize.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace mfct {

// ---------------------------------------------------------------------------
// Policy evaluation

namespace {

ObjectiveEstimate estimate_one(const ModelSpec& model, const SimConfig& cfg, const FeedbackPolicy& policy,
                               OptTarget target, int mkv_max_iter, double mkv_tol, bool* blown)
{
    if (target == OptTarget::NSystem) {
        SimOutput out = simulate_nsystem(model, cfg, policy);
        if (blown) *blown = out.diagnostics.nan_flag;
        return estimate_n_objective(model, out);
    }
    FixedPointResult fp = mkv_fixed_point(model, cfg, policy, mkv_max_iter, mkv_tol);
    SimOutput out = simulate_decoupled(model, cfg, fp.flow, policy);
    if (blown) *blown = out.diagnostics.nan_flag;
    return estimate_gamma(model, out, fp.flow);
}

template <typename Fn>
void parallel_for(int count, int workers, Fn&& fn)
{
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    const int w = std::min(workers, count);
    for (int t = 0; t < w; ++t)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace

double evaluate_policy(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                       const FeedbackPolicy& policy, OptTarget target)
{
    double acc = 0.0;
    for (std::uint64_t seed : opt.eval_seeds) {
        SimConfig cfg = sim_config;
        cfg.seed = seed;
        bool blown = false;
        const ObjectiveEstimate e = estimate_one(model, cfg, policy, target, opt.mkv_max_iter, opt.mkv_tol, &blown);
        acc += blown ? opt.penalty_blowup : e.value;
    }
    return acc / static_cast<double>(opt.eval_seeds.size());
}

ObjectiveEstimate evaluate_policy_estimate(const ModelSpec& model, const SimConfig& sim_config,
                                           const std::vector<std::uint64_t>& seeds, const FeedbackPolicy& policy,
                                           OptTarget target, int mkv_max_iter, double mkv_tol)
{
    ObjectiveEstimate pooled;
    double se2 = 0.0;
    for (std::uint64_t seed : seeds) {
        SimConfig cfg = sim_config;
        cfg.seed = seed;
        const ObjectiveEstimate e = estimate_one(model, cfg, policy, target, mkv_max_iter, mkv_tol, nullptr);
        pooled.value += e.value;
        pooled.running += e.running;
        pooled.terminal += e.terminal;
        pooled.n_samples += e.n_samples;
        pooled.correlated_se = pooled.correlated_se || e.correlated_se;
        se2 += e.std_error * e.std_error;
    }
    const double S = static_cast<double>(seeds.size());
    pooled.value /= S;
    pooled.running /= S;
    pooled.terminal /= S;
    pooled.std_error = std::sqrt(se2) / S;
    return pooled;
}

// ---------------------------------------------------------------------------
// Derivative-free search

namespace {

std::vector<std::uint64_t> holdouts(const OptimizeConfig& opt)
{
    if (!opt.holdout_seeds.empty()) return opt.holdout_seeds;
    std::vector<std::uint64_t> h;
    h.reserve(opt.eval_seeds.size());
    for (std::uint64_t s : opt.eval_seeds) h.push_back(derive_seed(s, 0x401d0u));
    return h;
}

struct Evaluator {
    const ModelSpec& model;
    const SimConfig& sim_config;
    const OptimizeConfig& opt;
    const FeedbackPolicy& family;
    OptTarget target;

    double operator()(const Eigen::VectorXd& theta) const
    {
        FeedbackPolicy p = family;
        p.set_params(theta);
        return evaluate_policy(model, sim_config, opt, p, target);
    }
};

OptimizeResult run_cross_entropy(const Evaluator& ev, const CrossEntropyOpts& co, const OptimizeConfig& opt)
{
    const int dim = ev.family.param_count();
    const int pop = co.population;
    if (pop < 4) throw InvalidParam("cross_entropy: population must be >= 4");
    if (!(co.elite_frac > 0.0 && co.elite_frac <= 0.5)) throw InvalidParam("cross_entropy: elite_frac in (0, 0.5]");
    const int elites = std::max(2, static_cast<int>(std::ceil(pop * co.elite_frac)));

    const CounterRng rng(opt.opt_seed, Stream::Optimizer);
    Eigen::VectorXd mu = ev.family.params();
    Eigen::VectorXd sigma = Eigen::VectorXd::Constant(dim, co.init_sigma);

    OptimizeResult res{ev.family, {}, {}, {}, {}};
    Eigen::VectorXd best_theta = mu;
    double best_val = ev(mu);
    res.value_history.push_back(best_val);
    res.mean_history.push_back(best_val);
    res.theta_history.push_back(best_theta);

    std::vector<Eigen::VectorXd> cand(pop, Eigen::VectorXd(dim));
    std::vector<double> vals(pop);
    for (int it = 0; it < co.iters; ++it) {
        for (int c = 0; c < pop; ++c) {
            if (c == 0) {
                cand[c] = best_theta; // elitism: keep the incumbent in play
                continue;
            }
            for (int j = 0; j < dim; ++j)
                cand[c][j] = mu[j] + sigma[j] * rng.normal(static_cast<std::uint32_t>(c),
                                                           static_cast<std::uint32_t>(it),
                                                           static_cast<std::uint32_t>(j));
        }
        parallel_for(pop, opt.workers, [&](int c) { vals[c] = ev(cand[c]); });

        bool all_blown = true;
        for (double v : vals)
            if (v > opt.penalty_blowup + 1.0) all_blown = false;
        if (all_blown) throw AllCandidatesBlewUp("cross_entropy: every candidate diverged");

        std::vector<int> order(pop);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return vals[a] > vals[b]; });

        if (vals[order[0]] > best_val) {
            best_val = vals[order[0]];
            best_theta = cand[order[0]];
        }
        Eigen::VectorXd m = Eigen::VectorXd::Zero(dim), s2 = Eigen::VectorXd::Zero(dim);
        for (int e = 0; e < elites; ++e) m += cand[order[e]];
        m /= elites;
        for (int e = 0; e < elites; ++e) s2 += (cand[order[e]] - m).cwiseAbs2();
        sigma = (s2 / elites).cwiseSqrt().cwiseMax(co.sigma_floor);
        mu = m;

        res.value_history.push_back(best_val);
        res.mean_history.push_back(ev(mu));
        res.theta_history.push_back(best_theta);
    }
    res.policy.set_params(best_theta);
    return res;
}

OptimizeResult run_nelder_mead(const Evaluator& ev, const NelderMeadOpts& nm, const OptimizeConfig& opt)
{
    const int dim = ev.family.param_count();
    std::vector<Eigen::VectorXd> simplex;
    std::vector<double> vals;
    simplex.push_back(ev.family.params());
    for (int j = 0; j < dim; ++j) {
        Eigen::VectorXd v = ev.family.params();
        v[j] += nm.simplex_scale;
        simplex.push_back(v);
    }
    vals.resize(simplex.size());
    for (std::size_t i = 0; i < simplex.size(); ++i) vals[i] = ev(simplex[i]);

    OptimizeResult res{ev.family, {}, {}, {}, {}};
    auto record = [&]() {
        res.value_history.push_back(res.value_history.empty()
                                        ? *std::max_element(vals.begin(), vals.end())
                                        : std::max(res.value_history.back(),
                                                   *std::max_element(vals.begin(), vals.end())));
    };
    record();

    // maximize: work on -f with the textbook minimization moves
    for (int it = 0; it < nm.iters; ++it) {
        std::vector<int> order(simplex.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) { return vals[a] > vals[b]; });
        const int worst = order.back();
        const int second_worst = order[order.size() - 2];

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(dim);
        for (int idx : order)
            if (idx != worst) centroid += simplex[idx];
        centroid /= dim;

        const Eigen::VectorXd refl = centroid + (centroid - simplex[worst]);
        const double frefl = ev(refl);
        if (frefl > vals[order[0]]) {
            const Eigen::VectorXd expa = centroid + 2.0 * (centroid - simplex[worst]);
            const double fexpa = ev(expa);
            if (fexpa > frefl) {
                simplex[worst] = expa;
                vals[worst] = fexpa;
            } else {
                simplex[worst] = refl;
                vals[worst] = frefl;
            }
        } else if (frefl > vals[second_worst]) {
            simplex[worst] = refl;
            vals[worst] = frefl;
        } else {
            const Eigen::VectorXd contr = centroid + 0.5 * (simplex[worst] - centroid);
            const double fcontr = ev(contr);
            if (fcontr > vals[worst]) {
                simplex[worst] = contr;
                vals[worst] = fcontr;
            } else {
                for (std::size_t i = 0; i < simplex.size(); ++i) {
                    if (static_cast<int>(i) == order[0]) continue;
                    simplex[i] = simplex[order[0]] + 0.5 * (simplex[i] - simplex[order[0]]);
                    vals[i] = ev(simplex[i]);
                }
            }
        }
        record();
    }
    const auto bi = std::distance(vals.begin(), std::max_element(vals.begin(), vals.end()));
    res.policy.set_params(simplex[bi]);
    return res;
}

OptimizeResult run_grid(const Evaluator& ev, const GridOpts& go, const OptimizeConfig& opt)
{
    const int dim = ev.family.param_count();
    if (dim > 3) throw InvalidParam("grid search: at most 3 parameters");
    if (go.resolution < 2) throw InvalidParam("grid search: resolution must be >= 2");
    long total = 1;
    for (int j = 0; j < dim; ++j) total *= go.resolution;

    OptimizeResult res{ev.family, {}, {}, {}, {}};
    Eigen::VectorXd center = ev.family.params();
    Eigen::VectorXd best_theta = center;
    double best_val = -std::numeric_limits<double>::infinity();
    std::vector<double> vals(total);
    std::vector<Eigen::VectorXd> thetas(total, Eigen::VectorXd(dim));
    for (long c = 0; c < total; ++c) {
        long rem = c;
        for (int j = 0; j < dim; ++j) {
            const int idx = static_cast<int>(rem % go.resolution);
            rem /= go.resolution;
            thetas[c][j] = center[j] - go.radius + 2.0 * go.radius * idx / (go.resolution - 1);
        }
    }
    parallel_for(static_cast<int>(total), opt.workers, [&](int c) { vals[c] = ev(thetas[c]); });
    for (long c = 0; c < total; ++c) {
        if (vals[c] > best_val) {
            best_val = vals[c];
            best_theta = thetas[c];
        }
        res.value_history.push_back(best_val);
    }
    res.policy.set_params(best_theta);
    return res;
}

} // namespace

OptimizeResult optimize_policy(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                               const FeedbackPolicy& family, OptTarget target)
{
    if (opt.eval_seeds.empty()) throw InvalidParam("optimize_policy: need at least one eval seed");
    const Evaluator ev{model, sim_config, opt, family, target};

    OptimizeResult res = std::visit(
        [&](const auto& m) -> OptimizeResult {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, CrossEntropyOpts>) return run_cross_entropy(ev, m, opt);
            else if constexpr (std::is_same_v<M, NelderMeadOpts>) return run_nelder_mead(ev, m, opt);
            else return run_grid(ev, m, opt);
        },
        opt.method);

    if (opt.polish_iters > 0) {
        const FdAscentResult fd =
            fd_policy_ascent(model, sim_config, opt, res.policy, target, opt.polish_iters, 1e-3, 0.1);
        res.policy = fd.policy;
        const double last = res.value_history.empty() ? -std::numeric_limits<double>::infinity()
                                                      : res.value_history.back();
        res.value_history.push_back(std::max(fd.value, last));
        res.theta_history.push_back(res.policy.params());
    }

    res.best = evaluate_policy_estimate(model, sim_config, holdouts(opt), res.policy, target, opt.mkv_max_iter,
                                        opt.mkv_tol);
    return res;
}

// ---------------------------------------------------------------------------
// LQ oracle

namespace {

// RK4 for scalar ODEs with a time-interpolated coefficient array.
double interp(const Eigen::VectorXd& grid, const Eigen::VectorXd& vals, double t)
{
    const int n = static_cast<int>(grid.size());
    if (t <= grid[0]) return vals[0];
    if (t >= grid[n - 1]) return vals[n - 1];
    int lo = 0, hi = n - 1;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        (grid[mid] <= t ? lo : hi) = mid;
    }
    const double w = (t - grid[lo]) / (grid[lo + 1] - grid[lo]);
    return (1.0 - w) * vals[lo] + w * vals[lo + 1];
}

} // namespace

OracleSolution solve_lq_oracle(const ModelSpec& model, int steps)
{
    if (model.name() != "lq_meanfield") throw NotLQ("solve_lq_oracle: model is not the lq_meanfield builtin");
    const auto& prm = model.params();
    auto P = [&](const char* k) {
        auto it = prm.find(k);
        if (it == prm.end()) throw NotLQ(std::string("solve_lq_oracle: missing parameter ") + k);
        return it->second;
    };
    const double beta = P("beta"), gamma = P("gamma"), sigma0 = P("sigma0");
    const double q = P("q"), qbar = P("qbar"), s = P("s"), r = P("r");
    const double qT = P("qT"), qbarT = P("qbarT"), sT = P("sT");
    const double m0 = P("lambda_mean"), V0 = P("lambda_sd") * P("lambda_sd");
    const double T = model.horizon();

    const double Qy = q + qbar;
    const double QyT = qT + qbarT;
    const double Qm = q + qbar * (1.0 - s) * (1.0 - s);
    const double QmT = qT + qbarT * (1.0 - sT) * (1.0 - sT);

    // Fine backward grid for the two Riccati equations
    const int sub = 16;
    const int N = steps * sub;
    const double h = T / N;
    Eigen::VectorXd fine_t(N + 1), fineP(N + 1), finePi(N + 1);
    for (int i = 0; i <= N; ++i) fine_t[i] = T * (static_cast<double>(i) / N);

    auto riccati_rhs = [&](double drift_coef, double Qrun, double Pv) {
        return Pv * Pv / r - 2.0 * drift_coef * Pv - Qrun; // dP/dt forward in t
    };
    fineP[N] = QyT;
    finePi[N] = QmT;
    for (int i = N; i > 0; --i) {
        // integrate dP/dt backward: step from t_i to t_{i-1} with RK4
        auto back_step = [&](double drift_coef, double Qrun, double Pv) {
            const double k1 = riccati_rhs(drift_coef, Qrun, Pv);
            const double k2 = riccati_rhs(drift_coef, Qrun, Pv - 0.5 * h * k1);
            const double k3 = riccati_rhs(drift_coef, Qrun, Pv - 0.5 * h * k2);
            const double k4 = riccati_rhs(drift_coef, Qrun, Pv - h * k3);
            return Pv - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        };
        fineP[i - 1] = back_step(beta, Qy, fineP[i]);
        finePi[i - 1] = back_step(beta + gamma, Qm, finePi[i]);
        if (std::abs(fineP[i - 1]) > 1e12 || std::abs(finePi[i - 1]) > 1e12)
            throw RiccatiBlowup("solve_lq_oracle: Riccati escape (parameters outside the well-posed regime)");
    }

    // Forward mean and variance flows under the optimal feedback
    Eigen::VectorXd fine_m(N + 1), fine_V(N + 1);
    fine_m[0] = m0;
    fine_V[0] = V0;
    auto Pi_at = [&](double t) { return interp(fine_t, finePi, t); };
    auto Pf_at = [&](double t) { return interp(fine_t, fineP, t); };
    for (int i = 0; i < N; ++i) {
        const double t = fine_t[i];
        auto mdot = [&](double tt, double m) { return (beta + gamma - Pi_at(tt) / r) * m; };
        auto vdot = [&](double tt, double V) { return 2.0 * (beta - Pf_at(tt) / r) * V + sigma0 * sigma0; };
        {
            const double k1 = mdot(t, fine_m[i]);
            const double k2 = mdot(t + 0.5 * h, fine_m[i] + 0.5 * h * k1);
            const double k3 = mdot(t + 0.5 * h, fine_m[i] + 0.5 * h * k2);
            const double k4 = mdot(t + h, fine_m[i] + h * k3);
            fine_m[i + 1] = fine_m[i] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        {
            const double k1 = vdot(t, fine_V[i]);
            const double k2 = vdot(t + 0.5 * h, fine_V[i] + 0.5 * h * k1);
            const double k3 = vdot(t + 0.5 * h, fine_V[i] + 0.5 * h * k2);
            const double k4 = vdot(t + h, fine_V[i] + h * k3);
            fine_V[i + 1] = fine_V[i] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
    }

    // cost = 1/2 Pi(0) m0^2 + 1/2 P(0) V0 + 1/2 sigma0^2 int P dt (Simpson)
    double intP = 0.0;
    for (int i = 0; i < N; i += 2) intP += (h / 3.0) * (fineP[i] + 4.0 * fineP[i + 1] + fineP[i + 2]);
    const double cost = 0.5 * finePi[0] * m0 * m0 + 0.5 * fineP[0] * V0 + 0.5 * sigma0 * sigma0 * intP;

    OracleSolution sol{Eigen::VectorXd(), Eigen::VectorXd(), Eigen::VectorXd(), Eigen::VectorXd(),
                       Eigen::VectorXd(), FeedbackPolicy::linear(model.action_set(), 1, uniform_grid(T, steps)),
                       -cost, MeasureFlow()};
    sol.grid = uniform_grid(T, steps);
    sol.fluct_gain.resize(steps + 1);
    sol.mean_gain.resize(steps + 1);
    sol.mean_path.resize(steps + 1);
    sol.var_path.resize(steps + 1);
    std::vector<FlowEntry> entries(steps + 1);
    for (int k = 0; k <= steps; ++k) {
        sol.fluct_gain[k] = fineP[k * sub];
        sol.mean_gain[k] = finePi[k * sub];
        sol.mean_path[k] = fine_m[k * sub];
        sol.var_path[k] = fine_V[k * sub];
        FlowEntry e;
        e.mean = Eigen::VectorXd::Constant(1, sol.mean_path[k]);
        const double m = sol.mean_path[k], V = sol.var_path[k];
        if (V <= 0.0) {
            e.p_moment = std::abs(m);
        } else {
            const double sd = std::sqrt(V);
            e.p_moment = sd * std::sqrt(2.0 / M_PI) * std::exp(-m * m / (2.0 * V)) +
                         m * std::erf(m / (sd * std::sqrt(2.0)));
        }
        entries[k] = std::move(e);
    }
    sol.mean_flow = MeasureFlow(std::move(entries), model.exponents().p);

    // linear policy: a*(t, x) = -(P/r) x + ((P - Pi)/r) m*
    Eigen::VectorXd theta(2 * (steps + 1));
    for (int k = 0; k <= steps; ++k) {
        theta[k] = -sol.fluct_gain[k] / r;
        theta[steps + 1 + k] = (sol.fluct_gain[k] - sol.mean_gain[k]) / r * sol.mean_path[k];
    }
    sol.policy.set_params(std::move(theta));
    return sol;
}

EpsilonReport epsilon_report(double reference_value, double reference_se, const ObjectiveEstimate& candidate)
{
    EpsilonReport r;
    r.epsilon_hat = std::max(0.0, reference_value - candidate.value);
    r.combined_std_error = std::sqrt(reference_se * reference_se + candidate.std_error * candidate.std_error);
    return r;
}

FdAscentResult fd_policy_ascent(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                                FeedbackPolicy start, OptTarget target, int iters, double fd_step, double lr0)
{
    const Evaluator ev{model, sim_config, opt, start, target};
    Eigen::VectorXd theta = start.params();
    double val = ev(theta);
    double lr = lr0;
    const int dim = static_cast<int>(theta.size());

    FdAscentResult res{start, val, 0};
    Eigen::VectorXd grad(dim);
    for (int it = 0; it < iters && lr > 1e-7; ++it) {
        for (int j = 0; j < dim; ++j) {
            Eigen::VectorXd tp = theta, tm = theta;
            tp[j] += fd_step;
            tm[j] -= fd_step;
            grad[j] = (ev(tp) - ev(tm)) / (2.0 * fd_step);
        }
        const Eigen::VectorXd trial = theta + lr * grad;
        const double tv = ev(trial);
        if (tv > val) {
            theta = trial;
            val = tv;
            lr *= 1.3;
        } else {
            lr *= 0.5;
        }
        res.iterations = it + 1;
    }
    res.policy.set_params(theta);
    res.value = val;
    return res;
}

} // namespace mfct
