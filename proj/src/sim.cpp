#include "mfct/sim.hpp"

#include <algorithm>
#include <cmath>

namespace mfct {

Eigen::VectorXd uniform_grid(double horizon, int steps)
{
    Eigen::VectorXd g(steps + 1);
    for (int k = 0; k <= steps; ++k) g[k] = horizon * (static_cast<double>(k) / steps);
    return g;
}

// ---------------------------------------------------------------------------
// MeasureFlow

MeasureFlow::MeasureFlow(std::vector<FlowEntry> entries, double p) : entries_(std::move(entries)), p_(p)
{
    for (const auto& e : entries_)
        if (!e.mean.allFinite() || !std::isfinite(e.p_moment)) throw Error("MeasureFlow: non-finite entry");
}

MeasureView MeasureFlow::view(int k) const
{
    MeasureView v;
    v.mean = entries_.at(k).mean;
    v.p_moment = entries_.at(k).p_moment;
    v.samples = nullptr;
    return v;
}

double MeasureFlow::distance(const MeasureFlow& other) const
{
    if (size() != other.size()) throw GridMismatch("MeasureFlow::distance: lengths differ");
    double d = 0.0;
    for (int k = 0; k < size(); ++k) {
        const double dm = (entries_[k].mean - other.entries_[k].mean).norm();
        const double dp = std::abs(entries_[k].p_moment - other.entries_[k].p_moment);
        d = std::max(d, dm + dp);
    }
    return d;
}

// ---------------------------------------------------------------------------
// ControlTrace

ControlTrace ControlTrace::from_actions(std::vector<Eigen::MatrixXd> per_step_actions)
{
    ControlTrace t;
    t.actions_ = std::move(per_step_actions);
    return t;
}

ControlTrace ControlTrace::from_relaxed(std::shared_ptr<const std::vector<RelaxedControl>> controls,
                                        const Eigen::VectorXd& sim_grid)
{
    ControlTrace t;
    t.relaxed_ = std::move(controls);
    const int steps = static_cast<int>(sim_grid.size()) - 1;
    t.interval_index_.resize(t.relaxed_->size());
    for (std::size_t i = 0; i < t.relaxed_->size(); ++i) {
        auto& idx = t.interval_index_[i];
        idx.resize(steps);
        const auto& q = (*t.relaxed_)[i];
        for (int k = 0; k < steps; ++k) {
            const double mid = 0.5 * (sim_grid[k] + sim_grid[k + 1]);
            idx[k] = q.interval_of(mid);
        }
    }
    return t;
}

ControlTrace::AtomsRef ControlTrace::at(int particle, int step) const
{
    AtomsRef r;
    if (relaxed_) {
        const AtomList& al = (*relaxed_)[particle].interval(interval_index_[particle][step]);
        r.actions_ = al.actions.data();
        r.weights_ = al.weights.data();
        r.count_ = al.count();
        r.k_ = static_cast<int>(al.actions.rows());
    } else {
        const Eigen::MatrixXd& A = actions_.at(step);
        r.actions_ = A.data() + static_cast<std::ptrdiff_t>(particle) * A.rows();
        r.weights_ = nullptr;
        r.count_ = 1;
        r.k_ = static_cast<int>(A.rows());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Simulation core

namespace {

constexpr double kGridTol = 1e-9;

// Order-canonical empirical statistics (sorted summation makes them exact
// under particle permutations).
FlowEntry empirical_entry(const Eigen::MatrixXd& states, double p, std::vector<double>& buf)
{
    const int d = static_cast<int>(states.rows());
    const int n = static_cast<int>(states.cols());
    FlowEntry e;
    e.mean.resize(d);
    buf.resize(n);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < n; ++i) buf[i] = states(j, i);
        std::sort(buf.begin(), buf.end());
        double s = 0.0;
        for (double v : buf) s += v;
        e.mean[j] = s / n;
    }
    for (int i = 0; i < n; ++i) buf[i] = std::pow(states.col(i).norm(), p);
    std::sort(buf.begin(), buf.end());
    double s = 0.0;
    for (double v : buf) s += v;
    e.p_moment = s / n;
    return e;
}

void check_control_grid(const RelaxedControl& q, const Eigen::VectorXd& grid, double horizon)
{
    if (std::abs(q.horizon() - horizon) > kGridTol * std::max(1.0, horizon))
        throw GridMismatch("relaxed control horizon differs from the model horizon");
    const int steps = static_cast<int>(grid.size()) - 1;
    const double dt = horizon / steps;
    for (int j = 0; j < q.time_grid().size(); ++j) {
        const double t = q.time_grid()[j];
        const double k = std::round(t / dt);
        if (std::abs(t - k * dt) > kGridTol * std::max(1.0, horizon))
            throw GridMismatch("relaxed control grid does not align with the simulation grid");
    }
}

struct DriverRef {
    const FeedbackPolicy* policy = nullptr;
    std::shared_ptr<const std::vector<RelaxedControl>> relaxed;
};

SimOutput simulate_core(const ModelSpec& model, const SimConfig& config, const MeasureFlow* frozen,
                        const DriverRef& driver)
{
    const int n = config.n_particles;
    const int steps = config.steps;
    const int d = model.dim_state();
    const int ka = model.action_set().dim();
    const double T = model.horizon();
    const double dt = T / steps;
    const double sqdt = std::sqrt(dt);
    const double p = model.exponents().p;

    if (n < 1 || steps < 1) throw InvalidParam("simulate: n_particles and steps must be positive");
    if (frozen && frozen->size() != steps + 1)
        throw GridMismatch("simulate_decoupled: flow length must be steps + 1");
    if (driver.relaxed) {
        if (static_cast<int>(driver.relaxed->size()) != n)
            throw SizeMismatch("simulate: one relaxed control per particle required");
    }
    int noise_ref = config.noise_ref_steps > 0 ? config.noise_ref_steps : steps;
    if (noise_ref % steps != 0) throw InvalidParam("simulate: noise_ref_steps must be a multiple of steps");
    const int nsub = noise_ref / steps;
    if (!config.particle_labels.empty() && static_cast<int>(config.particle_labels.size()) != n)
        throw InvalidParam("simulate: particle_labels size must match n_particles");
    auto label = [&](int i) {
        return config.particle_labels.empty() ? static_cast<std::uint32_t>(i) : config.particle_labels[i];
    };

    const Eigen::VectorXd grid = uniform_grid(T, steps);
    if (driver.relaxed)
        for (const auto& q : *driver.relaxed) check_control_grid(q, grid, T);

    const CounterRng init_rng(config.seed, Stream::Init);
    const CounterRng noise_rng(config.seed, Stream::Noise);

    Eigen::MatrixXd states(d, n);
    {
        Eigen::VectorXd x(d);
        for (int i = 0; i < n; ++i) {
            model.initial_law().sample(init_rng, label(i), x);
            states.col(i) = x;
        }
    }

    std::vector<Eigen::MatrixXd> frames;
    frames.reserve(steps + 1);
    std::vector<FlowEntry> realized(steps + 1);
    std::vector<Eigen::MatrixXd> applied; // policy mode
    if (driver.policy) applied.assign(steps, Eigen::MatrixXd(ka, n));

    // Per-particle control interval lookup for relaxed mode (midpoint of
    // each step, robust to roundoff at cell edges).
    std::vector<std::vector<int>> interval_index;
    if (driver.relaxed) {
        interval_index.resize(n);
        for (int i = 0; i < n; ++i) {
            interval_index[i].resize(steps);
            for (int k = 0; k < steps; ++k)
                interval_index[i][k] = (*driver.relaxed)[i].interval_of(0.5 * (grid[k] + grid[k + 1]));
        }
    }

    Eigen::VectorXd rewards = Eigen::VectorXd::Zero(n);
    std::vector<double> buf;
    Eigen::VectorXd bbar(d), xi(d), act(ka);
    Eigen::MatrixXd vbar(d, d);
    Eigen::VectorXd xi_raw(d);
    AtomList policy_atom;
    if (driver.policy) {
        policy_atom.actions.resize(ka, 1);
        policy_atom.weights = Eigen::VectorXd::Ones(1);
    }

    SimDiagnostics diag;
    diag.steps_completed = 0;
    bool blown = false;

    for (int k = 0; k <= steps; ++k) {
        frames.push_back(states.transpose());
        realized[k] = empirical_entry(states, p, buf);
        diag.max_abs = std::max(diag.max_abs, states.cwiseAbs().maxCoeff());
        if (k == steps || blown) {
            if (blown && k < steps) {
                // hold the state; paths stay finite, the flag records the event
                for (int kk = k + 1; kk <= steps; ++kk) {
                    frames.push_back(states.transpose());
                    realized[kk] = realized[k];
                }
            }
            break;
        }

        const double t = grid[k];
        // Dynamics view: live empirical law (with samples) or the frozen flow.
        std::unique_ptr<EmpiricalLaw> live_law;
        MeasureView dyn_view;
        if (frozen) {
            dyn_view = frozen->view(k);
        } else {
            live_law = std::make_unique<EmpiricalLaw>(frames.back());
            dyn_view.mean = realized[k].mean;
            dyn_view.p_moment = realized[k].p_moment;
            dyn_view.samples = live_law.get();
        }
        // Reward view: sample-less flow entry with the run's convention, so
        // post-hoc re-evaluation from the stored flow reproduces rewards
        // bit for bit.
        MeasureView rew_view;
        if (frozen) rew_view = frozen->view(k);
        else {
            rew_view.mean = realized[k].mean;
            rew_view.p_moment = realized[k].p_moment;
        }

        for (int i = 0; i < n; ++i) {
            const AtomList* alist;
            if (driver.policy) {
                driver.policy->evaluate(t, states.col(i), act);
                applied[k].col(i) = act;
                policy_atom.actions.col(0) = act;
                alist = &policy_atom;
            } else {
                alist = &(*driver.relaxed)[i].interval(interval_index[i][k]);
            }

            // running reward, left-endpoint quadrature
            double f_acc = 0.0;
            for (int j = 0; j < alist->count(); ++j)
                f_acc += alist->weights[j] * model.running_reward(t, states.col(i), rew_view, alist->actions.col(j));
            rewards[i] += dt * f_acc;

            effective_coefficients(model, t, states.col(i), dyn_view, *alist, bbar, vbar);

            // Brownian increment, optionally assembled from the reference grid.
            if (nsub == 1) {
                noise_rng.normals(label(i), static_cast<std::uint32_t>(k), xi.data(), d);
            } else {
                xi.setZero();
                for (int s = 0; s < nsub; ++s) {
                    noise_rng.normals(label(i), static_cast<std::uint32_t>(k * nsub + s), xi_raw.data(), d);
                    xi += xi_raw;
                }
                xi /= std::sqrt(static_cast<double>(nsub));
            }

            states.col(i) += dt * bbar + sqdt * (vbar * xi);
        }
        diag.steps_completed = k + 1;

        if (states.cwiseAbs().maxCoeff() > config.blowup_threshold || !states.allFinite()) {
            blown = true;
            // replace any non-finite values so downstream statistics stay usable
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    if (!std::isfinite(states(j, i)))
                        states(j, i) = std::copysign(config.blowup_threshold, states(j, i));
        }
    }
    diag.nan_flag = blown;

    // terminal reward with the terminal flow view
    {
        MeasureView term_view;
        if (frozen) term_view = frozen->view(steps);
        else {
            term_view.mean = realized[steps].mean;
            term_view.p_moment = realized[steps].p_moment;
        }
        for (int i = 0; i < n; ++i)
            rewards[i] += model.terminal_reward(frames[steps].row(i).transpose(), term_view);
    }

    ControlTrace trace = driver.policy ? ControlTrace::from_actions(std::move(applied))
                                       : ControlTrace::from_relaxed(driver.relaxed, grid);

    return SimOutput{PathEnsemble(std::move(frames), grid), std::move(trace), std::move(rewards),
                     MeasureFlow(std::move(realized), p), diag};
}

} // namespace

SimOutput simulate_nsystem(const ModelSpec& model, const SimConfig& config, const FeedbackPolicy& policy)
{
    DriverRef d;
    d.policy = &policy;
    return simulate_core(model, config, nullptr, d);
}

SimOutput simulate_nsystem(const ModelSpec& model, const SimConfig& config,
                           std::shared_ptr<const std::vector<RelaxedControl>> controls)
{
    DriverRef d;
    d.relaxed = std::move(controls);
    return simulate_core(model, config, nullptr, d);
}

SimOutput simulate_decoupled(const ModelSpec& model, const SimConfig& config, const MeasureFlow& flow,
                             const FeedbackPolicy& policy)
{
    DriverRef d;
    d.policy = &policy;
    return simulate_core(model, config, &flow, d);
}

SimOutput simulate_decoupled(const ModelSpec& model, const SimConfig& config, const MeasureFlow& flow,
                             std::shared_ptr<const std::vector<RelaxedControl>> controls)
{
    DriverRef d;
    d.relaxed = std::move(controls);
    return simulate_core(model, config, &flow, d);
}

FixedPointResult mkv_fixed_point(const ModelSpec& model, const SimConfig& config, const FeedbackPolicy& policy,
                                 int max_iter, double tol)
{
    const double p = model.exponents().p;
    // Start from the constant flow carrying the empirical initial-cloud
    // statistics (sampled with the run's own seed).
    const CounterRng init_rng(config.seed, Stream::Init);
    Eigen::MatrixXd init(model.dim_state(), config.n_particles);
    {
        Eigen::VectorXd x(model.dim_state());
        for (int i = 0; i < config.n_particles; ++i) {
            model.initial_law().sample(init_rng, static_cast<std::uint32_t>(i), x);
            init.col(i) = x;
        }
    }
    std::vector<double> buf;
    std::vector<FlowEntry> entries(config.steps + 1);
    {
        FlowEntry e0;
        {
            // reuse the canonical empirical statistics
            const int n = config.n_particles;
            const int d = model.dim_state();
            e0.mean.resize(d);
            buf.resize(n);
            for (int j = 0; j < d; ++j) {
                for (int i = 0; i < n; ++i) buf[i] = init(j, i);
                std::sort(buf.begin(), buf.end());
                double s = 0.0;
                for (double v : buf) s += v;
                e0.mean[j] = s / n;
            }
            for (int i = 0; i < n; ++i) buf[i] = std::pow(init.col(i).norm(), p);
            std::sort(buf.begin(), buf.end());
            double s = 0.0;
            for (double v : buf) s += v;
            e0.p_moment = s / n;
        }
        for (auto& e : entries) e = e0;
    }
    MeasureFlow flow(std::move(entries), p);

    FixedPointResult res;
    for (int it = 0; it < max_iter; ++it) {
        SimOutput out = simulate_decoupled(model, config, flow, policy);
        const double gap = flow.distance(out.realized_flow);
        flow = out.realized_flow;
        res.iterations = it + 1;
        if (gap < tol) {
            res.converged = true;
            break;
        }
    }
    res.flow = std::move(flow);
    return res;
}

namespace {

double coupling_gap(const SimOutput& a, const SimOutput& b)
{
    const auto& fa = a.paths.frames();
    const auto& fb = b.paths.frames();
    const int n = a.paths.size();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double sup = 0.0;
        for (std::size_t k = 0; k < fa.size(); ++k)
            sup = std::max(sup, (fa[k].row(i) - fb[k].row(i)).norm());
        acc += sup * sup;
    }
    return acc / n;
}

} // namespace

CouplingResult couple_from_mkv(const ModelSpec& model, const SimConfig& config, const MeasureFlow& mkv_flow,
                               const FeedbackPolicy& policy)
{
    CouplingResult r{simulate_nsystem(model, config, policy), simulate_decoupled(model, config, mkv_flow, policy),
                     0.0};
    r.coupling_gap = coupling_gap(r.interacting, r.decoupled);
    return r;
}

CouplingResult couple_from_mkv(const ModelSpec& model, const SimConfig& config, const MeasureFlow& mkv_flow,
                               std::shared_ptr<const std::vector<RelaxedControl>> controls)
{
    CouplingResult r{simulate_nsystem(model, config, controls),
                     simulate_decoupled(model, config, mkv_flow, controls), 0.0};
    r.coupling_gap = coupling_gap(r.interacting, r.decoupled);
    return r;
}

// ---------------------------------------------------------------------------
// Test functions and the martingale diagnostic

TestFunction TestFunction::coordinate(int axis)
{
    TestFunction f;
    f.kind_ = Kind::Coordinate;
    f.axis_ = axis;
    return f;
}

TestFunction TestFunction::quadratic()
{
    TestFunction f;
    f.kind_ = Kind::Quadratic;
    return f;
}

TestFunction TestFunction::bump(Eigen::VectorXd center, double width)
{
    if (!(width > 0.0)) throw InvalidParam("TestFunction::bump: width must be positive");
    TestFunction f;
    f.kind_ = Kind::Bump;
    f.center_ = std::move(center);
    f.width_ = width;
    return f;
}

double TestFunction::value(Eigen::Ref<const Eigen::VectorXd> x) const
{
    switch (kind_) {
    case Kind::Coordinate:
        return x[axis_];
    case Kind::Quadratic:
        return x.squaredNorm();
    case Kind::Bump: {
        const double s = (x - center_).squaredNorm() / (width_ * width_);
        if (s >= 1.0) return 0.0;
        return std::exp(-1.0 / (1.0 - s));
    }
    }
    return 0.0;
}

void TestFunction::gradient(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> out) const
{
    switch (kind_) {
    case Kind::Coordinate:
        out.setZero();
        out[axis_] = 1.0;
        return;
    case Kind::Quadratic:
        out = 2.0 * x;
        return;
    case Kind::Bump: {
        const double w2 = width_ * width_;
        const double s = (x - center_).squaredNorm() / w2;
        if (s >= 1.0) {
            out.setZero();
            return;
        }
        const double psi = std::exp(-1.0 / (1.0 - s));
        const double dpsi = -psi / ((1.0 - s) * (1.0 - s)); // d/ds
        out = dpsi * 2.0 / w2 * (x - center_);
        return;
    }
    }
}

void TestFunction::hessian(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::MatrixXd> out) const
{
    const int d = static_cast<int>(x.size());
    switch (kind_) {
    case Kind::Coordinate:
        out.setZero();
        return;
    case Kind::Quadratic:
        out = 2.0 * Eigen::MatrixXd::Identity(d, d);
        return;
    case Kind::Bump: {
        const double w2 = width_ * width_;
        const double s = (x - center_).squaredNorm() / w2;
        if (s >= 1.0) {
            out.setZero();
            return;
        }
        const double om = 1.0 - s;
        const double psi = std::exp(-1.0 / om);
        const double dpsi = -psi / (om * om);
        const double d2psi = psi / (om * om * om * om) - 2.0 * psi / (om * om * om);
        const Eigen::VectorXd u = (x - center_);
        out = (4.0 / (w2 * w2)) * d2psi * (u * u.transpose()) +
              (2.0 / w2) * dpsi * Eigen::MatrixXd::Identity(d, d);
        return;
    }
    }
}

DefectEstimate martingale_defect(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow,
                                 const TestFunction& phi, double s, double t, const TestFunction* h_bump)
{
    const auto& grid = output.paths.time_grid();
    if (flow.size() != grid.size()) throw GridMismatch("martingale_defect: flow/grid length mismatch");
    auto locate = [&](double tau) {
        for (int k = 0; k < grid.size(); ++k)
            if (std::abs(grid[k] - tau) <= 1e-9 * std::max(1.0, grid[grid.size() - 1])) return k;
        throw GridMismatch("martingale_defect: time is not a grid point");
    };
    const int ks = locate(s);
    const int kt = locate(t);
    if (ks >= kt) throw InvalidParam("martingale_defect: need s < t");

    const int n = output.paths.size();
    const int d = model.dim_state();

    Eigen::VectorXd grad(d), b(d);
    Eigen::MatrixXd hess(d, d), sig(d, model.dim_noise());

    Eigen::VectorXd vals(n);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int k = ks; k < kt; ++k) {
            const double tk = grid[k];
            const double dt = grid[k + 1] - grid[k];
            const Eigen::VectorXd x = output.paths.frames()[k].row(i).transpose();
            const MeasureView view = flow.view(k);
            phi.gradient(x, grad);
            phi.hessian(x, hess);
            const auto atoms = output.controls.at(i, k);
            double lphi = 0.0;
            for (int j = 0; j < atoms.count(); ++j) {
                model.drift(tk, x, view, atoms.action(j), b);
                model.volatility(tk, x, view, atoms.action(j), sig);
                const double gen = grad.dot(b) + 0.5 * (sig * sig.transpose() * hess).trace();
                lphi += atoms.weight(j) * gen;
            }
            acc += dt * lphi;
        }
        const Eigen::VectorXd xs = output.paths.frames()[ks].row(i).transpose();
        const Eigen::VectorXd xt = output.paths.frames()[kt].row(i).transpose();
        double v = phi.value(xt) - phi.value(xs) - acc;
        if (h_bump) v *= h_bump->value(xs);
        vals[i] = v;
    }

    DefectEstimate e;
    e.defect_mean = vals.mean();
    const double var = (vals.array() - e.defect_mean).square().sum() / std::max(1, n - 1);
    e.std_error = std::sqrt(var / n);
    return e;
}

} // namespace mfct
