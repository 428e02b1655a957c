#include "mfct/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mfct {

// ---------------------------------------------------------------------------
// ActionSet

ActionSet ActionSet::box(Eigen::VectorXd lower, Eigen::VectorXd upper)
{
    if (lower.size() != upper.size() || lower.size() == 0) throw InvalidParam("ActionSet::box: bad bounds");
    if ((lower.array() > upper.array()).any()) throw InvalidParam("ActionSet::box: lower > upper");
    ActionSet s;
    s.kind_ = Kind::Box;
    s.dim_ = static_cast<int>(lower.size());
    s.lower_ = std::move(lower);
    s.upper_ = std::move(upper);
    return s;
}

ActionSet ActionSet::finite(std::vector<Eigen::VectorXd> points)
{
    if (points.empty()) throw InvalidParam("ActionSet::finite: empty atom list");
    ActionSet s;
    s.kind_ = Kind::Finite;
    s.dim_ = static_cast<int>(points[0].size());
    for (const auto& p : points)
        if (p.size() != s.dim_) throw InvalidParam("ActionSet::finite: ragged atoms");
    s.points_ = std::move(points);
    return s;
}

ActionSet ActionSet::ball(int dim, double radius)
{
    if (dim < 1 || radius < 0.0) throw InvalidParam("ActionSet::ball: bad parameters");
    ActionSet s;
    s.kind_ = Kind::Ball;
    s.dim_ = dim;
    s.radius_ = radius;
    return s;
}

bool ActionSet::contains(Eigen::Ref<const Eigen::VectorXd> a, double tol) const
{
    if (a.size() != dim_) return false;
    switch (kind_) {
    case Kind::Box:
        return (a.array() >= lower_.array() - tol).all() && (a.array() <= upper_.array() + tol).all();
    case Kind::Ball:
        return a.norm() <= radius_ + tol;
    case Kind::Finite:
        for (const auto& p : points_)
            if ((a - p).norm() <= tol) return true;
        return false;
    }
    return false;
}

void ActionSet::project(Eigen::Ref<const Eigen::VectorXd> in, Eigen::Ref<Eigen::VectorXd> out) const
{
    switch (kind_) {
    case Kind::Box:
        out = in.cwiseMax(lower_).cwiseMin(upper_);
        return;
    case Kind::Ball: {
        const double r = in.norm();
        if (r > radius_ && r > 0.0) out = in * (radius_ / r);
        else out = in;
        return;
    }
    case Kind::Finite: {
        int best = 0;
        double bestd = (in - points_[0]).squaredNorm();
        for (int i = 1; i < static_cast<int>(points_.size()); ++i) {
            const double d = (in - points_[i]).squaredNorm();
            if (d < bestd) {
                bestd = d;
                best = i;
            }
        }
        out = points_[best];
        return;
    }
    }
}

double ActionSet::norm_bound() const
{
    switch (kind_) {
    case Kind::Box: {
        if (!lower_.allFinite() || !upper_.allFinite()) return std::numeric_limits<double>::infinity();
        return lower_.cwiseAbs().cwiseMax(upper_.cwiseAbs()).norm();
    }
    case Kind::Ball:
        return radius_;
    case Kind::Finite: {
        double b = 0.0;
        for (const auto& p : points_) b = std::max(b, p.norm());
        return b;
    }
    }
    return std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// MeasureView

MeasureView MeasureView::of(const EmpiricalLaw& law, double p)
{
    MeasureView v;
    v.mean = law.mean();
    v.p_moment = law.moment(p);
    v.samples = &law;
    return v;
}

MeasureView MeasureView::dirac(Eigen::VectorXd point, double p)
{
    MeasureView v;
    v.p_moment = std::pow(point.norm(), p);
    v.mean = std::move(point);
    v.samples = nullptr;
    return v;
}

// ---------------------------------------------------------------------------
// InitialLaw

InitialLaw InitialLaw::dirac(Eigen::VectorXd point)
{
    InitialLaw l;
    l.kind_ = Kind::Dirac;
    l.a_ = std::move(point);
    return l;
}

InitialLaw InitialLaw::gaussian(Eigen::VectorXd mean, Eigen::VectorXd sd)
{
    if (mean.size() != sd.size()) throw InvalidParam("InitialLaw::gaussian: mean/sd size mismatch");
    if ((sd.array() < 0.0).any()) throw InvalidParam("InitialLaw::gaussian: negative sd");
    InitialLaw l;
    l.kind_ = Kind::Gaussian;
    l.a_ = std::move(mean);
    l.b_ = std::move(sd);
    return l;
}

InitialLaw InitialLaw::uniform_box(Eigen::VectorXd lower, Eigen::VectorXd upper)
{
    if (lower.size() != upper.size()) throw InvalidParam("InitialLaw::uniform_box: size mismatch");
    if ((lower.array() > upper.array()).any()) throw InvalidParam("InitialLaw::uniform_box: lower > upper");
    InitialLaw l;
    l.kind_ = Kind::UniformBox;
    l.a_ = std::move(lower);
    l.b_ = std::move(upper);
    return l;
}

void InitialLaw::sample(const CounterRng& rng, std::uint32_t particle, Eigen::Ref<Eigen::VectorXd> out) const
{
    const int d = dim();
    switch (kind_) {
    case Kind::Dirac:
        out = a_;
        return;
    case Kind::Gaussian:
        for (int j = 0; j < d; ++j) out[j] = a_[j] + b_[j] * rng.normal(particle, 0, static_cast<std::uint32_t>(j));
        return;
    case Kind::UniformBox:
        for (int j = 0; j < d; ++j) {
            const double u = rng.uniform(particle, 0, static_cast<std::uint32_t>(j));
            out[j] = a_[j] + (b_[j] - a_[j]) * u;
        }
        return;
    }
}

Eigen::VectorXd InitialLaw::mean() const
{
    switch (kind_) {
    case Kind::Dirac:
        return a_;
    case Kind::Gaussian:
        return a_;
    case Kind::UniformBox:
        return 0.5 * (a_ + b_);
    }
    return a_;
}

namespace {

// Gauss-Hermite nodes/weights for E[f(Z)], Z standard normal
// (Golub-Welsch on the probabilists' recurrence).
void gauss_hermite(int n, Eigen::VectorXd& nodes, Eigen::VectorXd& weights)
{
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        const double off = std::sqrt(static_cast<double>(i));
        J(i, i - 1) = off;
        J(i - 1, i) = off;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes = es.eigenvalues();
    weights.resize(n);
    for (int i = 0; i < n; ++i) {
        const double v0 = es.eigenvectors()(0, i);
        weights[i] = v0 * v0;
    }
}

} // namespace

double InitialLaw::moment(double q) const
{
    const int d = dim();
    switch (kind_) {
    case Kind::Dirac:
        return std::pow(a_.norm(), q);
    case Kind::Gaussian: {
        if (d == 1) {
            if (b_[0] == 0.0) return std::pow(std::abs(a_[0]), q);
            Eigen::VectorXd z, w;
            gauss_hermite(48, z, w);
            double s = 0.0;
            for (int i = 0; i < z.size(); ++i) s += w[i] * std::pow(std::abs(a_[0] + b_[0] * z[i]), q);
            return s;
        }
        break;
    }
    case Kind::UniformBox: {
        if (d == 1) {
            const double l = a_[0], u = b_[0];
            if (u == l) return std::pow(std::abs(l), q);
            auto F = [q](double x) { return std::copysign(std::pow(std::abs(x), q + 1.0), x) / (q + 1.0); };
            return (F(u) - F(l)) / (u - l);
        }
        break;
    }
    }
    // Monte Carlo fallback for multivariate laws, fixed internal seed.
    CounterRng rng(0x1a55eedULL, Stream::Init);
    const int n = 4096;
    Eigen::VectorXd x(d);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        sample(rng, static_cast<std::uint32_t>(i), x);
        s += std::pow(x.norm(), q);
    }
    return s / n;
}

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec::ModelSpec(int dim_state, int dim_noise, double horizon, ActionSet action_set, Exponents exponents,
                     DriftFn drift, VolFn volatility, RunningRewardFn running_reward,
                     TerminalRewardFn terminal_reward, InitialLaw initial_law, std::string name,
                     std::map<std::string, double> params)
    : dim_state_(dim_state),
      dim_noise_(dim_noise),
      horizon_(horizon),
      action_set_(std::move(action_set)),
      exponents_(exponents),
      drift_(std::move(drift)),
      vol_(std::move(volatility)),
      running_(std::move(running_reward)),
      terminal_(std::move(terminal_reward)),
      initial_law_(std::move(initial_law)),
      name_(std::move(name)),
      params_(std::move(params))
{
    if (dim_state_ < 1 || dim_noise_ < 1) throw InvalidParam("ModelSpec: dimensions must be positive");
    if (!(horizon_ > 0.0)) throw InvalidParam("ModelSpec: horizon must be positive");
    const auto& e = exponents_;
    // p' > p >= max(1, p_sigma), p' >= 2 >= p_sigma >= 0
    if (!(e.p_prime > e.p && e.p >= std::max(1.0, e.p_sigma) && e.p_prime >= 2.0 && 2.0 >= e.p_sigma &&
          e.p_sigma >= 0.0))
        throw InvalidParam("ModelSpec: exponents violate the standing constraints");
    if (initial_law_.dim() != dim_state_) throw InvalidParam("ModelSpec: initial law dimension mismatch");
    if (!drift_ || !vol_ || !running_ || !terminal_) throw InvalidParam("ModelSpec: missing coefficient");
}

// ---------------------------------------------------------------------------
// Builtins

namespace {

double get(const std::map<std::string, double>& m, const std::string& k, double dflt)
{
    auto it = m.find(k);
    return it == m.end() ? dflt : it->second;
}

void check_known(const std::map<std::string, double>& overrides, const std::map<std::string, double>& defaults,
                 const std::string& model)
{
    for (const auto& [k, v] : overrides)
        if (defaults.find(k) == defaults.end())
            throw InvalidParam("builtin_model " + model + ": unknown parameter '" + k + "'");
}

InitialLaw scalar_law(double mean, double sd)
{
    Eigen::VectorXd m(1), s(1);
    m[0] = mean;
    s[0] = sd;
    if (sd == 0.0) return InitialLaw::dirac(m);
    return InitialLaw::gaussian(m, s);
}

} // namespace

std::map<std::string, double> builtin_params(const std::string& name, const std::map<std::string, double>& overrides)
{
    std::map<std::string, double> p;
    if (name == "ou_chaos") {
        p = {{"kappa", 1.0}, {"sigma0", 1.0}, {"T", 1.0}, {"lambda_mean", 0.0}, {"lambda_sd", 1.0}};
    } else if (name == "lq_meanfield") {
        p = {{"beta", 0.3},  {"gamma", 0.4},  {"sigma0", 0.4}, {"q", 1.0},           {"qbar", 0.6},
             {"s", 0.7},     {"r", 1.0},      {"qT", 1.0},     {"qbarT", 0.6},       {"sT", 0.7},
             {"a_max", 4.0}, {"T", 1.0},      {"lambda_mean", 1.2}, {"lambda_sd", 0.4}};
    } else if (name == "bang_relaxed") {
        p = {{"eps", 0.1}, {"T", 1.0}};
    } else {
        throw UnknownModel("builtin_model: unknown model '" + name + "'");
    }
    check_known(overrides, p, name);
    for (const auto& [k, v] : overrides) p[k] = v;
    return p;
}

ModelSpec builtin_model(const std::string& name, const std::map<std::string, double>& params)
{
    const auto p = builtin_params(name, params);
    const Exponents expo{1.0, 2.0, 0.0};

    if (name == "ou_chaos") {
        const double kappa = get(p, "kappa", 1.0);
        const double sigma0 = get(p, "sigma0", 1.0);
        if (kappa < 0.0) throw InvalidParam("ou_chaos: kappa must be nonnegative");
        if (sigma0 < 0.0) throw InvalidParam("ou_chaos: sigma0 must be nonnegative");
        Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
        return ModelSpec(
            1, 1, get(p, "T", 1.0), ActionSet::finite({zero}), expo,
            [kappa](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                    Eigen::Ref<const Eigen::VectorXd>, Eigen::Ref<Eigen::VectorXd> out) {
                out[0] = kappa * (m.mean[0] - x[0]);
            },
            [sigma0](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&,
                     Eigen::Ref<const Eigen::VectorXd>, Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = sigma0; },
            [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&,
               Eigen::Ref<const Eigen::VectorXd>) { return 0.0; },
            [](Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m) {
                const double dev = x[0] - m.mean[0];
                return -dev * dev;
            },
            scalar_law(get(p, "lambda_mean", 0.0), get(p, "lambda_sd", 1.0)), "ou_chaos", p);
    }

    if (name == "lq_meanfield") {
        const double beta = get(p, "beta", 0.3), gamma = get(p, "gamma", 0.4), sigma0 = get(p, "sigma0", 0.4);
        const double q = get(p, "q", 1.0), qbar = get(p, "qbar", 0.6), s = get(p, "s", 0.7), r = get(p, "r", 1.0);
        const double qT = get(p, "qT", 1.0), qbarT = get(p, "qbarT", 0.6), sT = get(p, "sT", 0.7);
        const double a_max = get(p, "a_max", 4.0);
        if (r <= 0.0) throw InvalidParam("lq_meanfield: r must be positive");
        if (q < 0.0 || qbar < 0.0 || qT < 0.0 || qbarT < 0.0)
            throw InvalidParam("lq_meanfield: state costs must be nonnegative");
        if (a_max <= 0.0) throw InvalidParam("lq_meanfield: a_max must be positive");
        if (sigma0 < 0.0) throw InvalidParam("lq_meanfield: sigma0 must be nonnegative");
        Eigen::VectorXd lo(1), hi(1);
        lo[0] = -a_max;
        hi[0] = a_max;
        return ModelSpec(
            1, 1, get(p, "T", 1.0), ActionSet::box(lo, hi), expo,
            [beta, gamma](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                          Eigen::Ref<const Eigen::VectorXd> a, Eigen::Ref<Eigen::VectorXd> out) {
                out[0] = beta * x[0] + gamma * m.mean[0] + a[0];
            },
            [sigma0](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&,
                     Eigen::Ref<const Eigen::VectorXd>, Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = sigma0; },
            [q, qbar, s, r](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                            Eigen::Ref<const Eigen::VectorXd> a) {
                const double dev = x[0] - s * m.mean[0];
                return -0.5 * (q * x[0] * x[0] + qbar * dev * dev + r * a[0] * a[0]);
            },
            [qT, qbarT, sT](Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m) {
                const double dev = x[0] - sT * m.mean[0];
                return -0.5 * (qT * x[0] * x[0] + qbarT * dev * dev);
            },
            scalar_law(get(p, "lambda_mean", 1.2), get(p, "lambda_sd", 0.4)), "lq_meanfield", p);
    }

    if (name == "bang_relaxed") {
        const double eps = get(p, "eps", 0.1);
        if (eps < 0.0) throw InvalidParam("bang_relaxed: eps must be nonnegative");
        Eigen::VectorXd minus(1), plus(1);
        minus[0] = -1.0;
        plus[0] = 1.0;
        return ModelSpec(
            1, 1, get(p, "T", 1.0), ActionSet::finite({minus, plus}), expo,
            [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd> a,
               Eigen::Ref<Eigen::VectorXd> out) { out[0] = a[0]; },
            [eps](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                  Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = eps; },
            [](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>) {
                return -x[0] * x[0];
            },
            [](Eigen::Ref<const Eigen::VectorXd>, const MeasureView&) { return 0.0; },
            scalar_law(0.0, 0.0), "bang_relaxed", p);
    }

    throw UnknownModel("builtin_model: unknown model '" + name + "'");
}

// ---------------------------------------------------------------------------
// Validators

const CheckResult* ValidationReport::find(const std::string& name) const
{
    for (const auto& c : checks)
        if (c.name == name) return &c;
    return nullptr;
}

namespace {

struct ProbePoint {
    double t;
    Eigen::VectorXd x;
    EmpiricalLaw cloud;
    MeasureView view;
    double cloud_pp_moment; // integral of |z|^{p'}
    Eigen::VectorXd a;
};

// Draws an action roughly at scale `radius`, constrained to the set.
Eigen::VectorXd draw_action(const ActionSet& A, const CounterRng& rng, std::uint32_t pt, std::uint32_t lvl,
                            double radius, int salt)
{
    Eigen::VectorXd raw(A.dim());
    for (int j = 0; j < A.dim(); ++j)
        raw[j] = radius * (2.0 * rng.uniform(pt, lvl, static_cast<std::uint32_t>(100 + salt * 16 + j)) - 1.0);
    Eigen::VectorXd a(A.dim());
    A.project(raw, a);
    return a;
}

std::vector<ProbePoint> draw_probe_level(const ModelSpec& model, const ProbePlan& plan, int level)
{
    const CounterRng rng(plan.seed, Stream::Probe);
    const double R = plan.radii.at(level);
    const int d = model.dim_state();
    const double p = model.exponents().p;
    const int cloud_size = 8;

    std::vector<ProbePoint> pts;
    pts.reserve(plan.samples_per_level);
    for (int i = 0; i < plan.samples_per_level; ++i) {
        const auto pt = static_cast<std::uint32_t>(i);
        const auto lvl = static_cast<std::uint32_t>(level);
        ProbePoint q{0.0, Eigen::VectorXd(d), EmpiricalLaw(Eigen::MatrixXd::Zero(1, d)), MeasureView{}, 0.0,
                     Eigen::VectorXd(model.action_set().dim())};
        q.t = model.horizon() * rng.uniform(pt, lvl, 0);
        for (int j = 0; j < d; ++j) q.x[j] = R * (2.0 * rng.uniform(pt, lvl, static_cast<std::uint32_t>(1 + j)) - 1.0);
        Eigen::MatrixXd cloud(cloud_size, d);
        for (int c = 0; c < cloud_size; ++c)
            for (int j = 0; j < d; ++j)
                cloud(c, j) = R * (2.0 * rng.uniform(pt, lvl, static_cast<std::uint32_t>(10 + c * d + j)) - 1.0);
        q.cloud = EmpiricalLaw(std::move(cloud));
        q.view = MeasureView::of(q.cloud, p);
        q.cloud_pp_moment = q.cloud.moment(model.exponents().p_prime);
        q.a = draw_action(model.action_set(), rng, pt, lvl, R, 0);
        pts.push_back(std::move(q));
    }
    return pts;
}

double loglog_slope(const std::vector<double>& radii, const std::vector<double>& values)
{
    // Least squares of log(value) on log(radius); levels with ~zero values
    // are dropped.
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < radii.size(); ++i) {
        if (values[i] > 1e-14) {
            lx.push_back(std::log(radii[i]));
            ly.push_back(std::log(values[i]));
        }
    }
    if (lx.size() < 2) return -std::numeric_limits<double>::infinity();
    const double n = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i];
        sy += ly[i];
        sxx += lx[i] * lx[i];
        sxy += lx[i] * ly[i];
    }
    const double denom = n * sxx - sx * sx;
    if (denom <= 0.0) return -std::numeric_limits<double>::infinity();
    return (n * sxy - sx * sy) / denom;
}

void ensure_finite(double v, const char* what)
{
    if (!std::isfinite(v)) throw NonFiniteCoefficient(std::string(what) + " returned a non-finite value");
}

} // namespace

ValidationReport validate_growth(const ModelSpec& model, const ProbePlan& plan)
{
    if (plan.radii.size() < 2) throw InvalidParam("validate_growth: need at least two radius levels");
    const int d = model.dim_state();
    const double p = model.exponents().p;
    const double pp = model.exponents().p_prime;
    const double ps = model.exponents().p_sigma;
    const int L = static_cast<int>(plan.radii.size());

    // Per-level maxima of magnitudes and envelope ratios.
    std::vector<double> max_b(L, 0), max_s2(L, 0), max_gp(L, 0), max_gm(L, 0), max_fp(L, 0), max_fm(L, 0);
    double c_b = 0, c_s = 0, c_gp = 0, c_gm = 0, c_fp = 0, c_fm = 0;
    double c3 = std::numeric_limits<double>::infinity();
    bool any_coercive_probe = false;

    Eigen::VectorXd b(d);
    Eigen::MatrixXd sig(d, model.dim_noise());
    Eigen::VectorXd a0(model.action_set().dim());
    model.action_set().project(Eigen::VectorXd::Zero(model.action_set().dim()), a0);

    const MeasureView origin_view = MeasureView::dirac(Eigen::VectorXd::Zero(d), p);

    for (int lvl = 0; lvl < L; ++lvl) {
        const auto pts = draw_probe_level(model, plan, lvl);
        for (const auto& q : pts) {
            model.drift(q.t, q.x, q.view, q.a, b);
            model.volatility(q.t, q.x, q.view, q.a, sig);
            const double fval = model.running_reward(q.t, q.x, q.view, q.a);
            const double f0 = model.running_reward(q.t, q.x, q.view, a0);
            const double gval = model.terminal_reward(q.x, q.view);
            ensure_finite(b.norm(), "drift");
            ensure_finite(sig.norm(), "volatility");
            ensure_finite(fval, "running_reward");
            ensure_finite(gval, "terminal_reward");

            const double mnorm = std::pow(q.view.p_moment, 1.0 / p);
            const double env_b = 1.0 + q.x.norm() + mnorm + q.a.norm();
            const double env_s = 1.0 + std::pow(q.x.norm(), ps) + std::pow(q.view.p_moment, ps / p) +
                                 std::pow(q.a.norm(), ps);
            const double env_p = 1.0 + std::pow(q.x.norm(), p) + q.view.p_moment;
            const double env_pp = 1.0 + std::pow(q.x.norm(), pp) + q.cloud_pp_moment;
            const double env_pp_a = env_pp + std::pow(q.a.norm(), pp);

            const double nb = b.norm();
            const double s2 = sig.squaredNorm();
            max_b[lvl] = std::max(max_b[lvl], nb);
            max_s2[lvl] = std::max(max_s2[lvl], s2);
            c_b = std::max(c_b, nb / env_b);
            c_s = std::max(c_s, s2 / env_s);

            const double gpos = std::max(gval, 0.0), gneg = std::max(-gval, 0.0);
            max_gp[lvl] = std::max(max_gp[lvl], gpos);
            max_gm[lvl] = std::max(max_gm[lvl], gneg);
            c_gp = std::max(c_gp, gpos / env_p);
            c_gm = std::max(c_gm, gneg / env_pp);

            const double fpos = std::max(f0, 0.0), fneg = std::max(-fval, 0.0);
            max_fp[lvl] = std::max(max_fp[lvl], fpos);
            max_fm[lvl] = std::max(max_fm[lvl], fneg);
            c_fp = std::max(c_fp, fpos / env_p);
            c_fm = std::max(c_fm, fneg / env_pp_a);

            // Coercivity probe at (x, m) = (0, delta_0).
            if (q.a.norm() >= 0.5) {
                const double fc = model.running_reward(q.t, Eigen::VectorXd::Zero(d), origin_view, q.a);
                ensure_finite(fc, "running_reward");
                c3 = std::min(c3, std::max(0.0, -fc) / std::pow(q.a.norm(), pp));
                any_coercive_probe = true;
            }
        }
    }

    auto mk = [&](const std::string& name, double constant, const std::vector<double>& maxima, double allowed) {
        CheckResult c;
        c.name = name;
        c.constant = constant;
        const double slope = loglog_slope(plan.radii, maxima);
        c.exponent_excess = std::isfinite(slope) ? slope - allowed : -std::numeric_limits<double>::infinity();
        c.pass = !(c.exponent_excess > 0.1);
        c.detail = "fitted slope " + std::to_string(slope) + " vs allowed " + std::to_string(allowed);
        return c;
    };

    ValidationReport rep;
    rep.checks.push_back(mk("drift_growth", c_b, max_b, 1.0));
    rep.checks.push_back(mk("vol_growth", c_s, max_s2, ps));
    rep.checks.push_back(mk("g_upper", c_gp, max_gp, p));
    rep.checks.push_back(mk("g_lower", c_gm, max_gm, pp));
    rep.checks.push_back(mk("f_upper", c_fp, max_fp, p));
    rep.checks.push_back(mk("f_lower", c_fm, max_fm, pp));

    // Coercivity: either a strictly positive fitted c3, or a bounded action
    // set (compact A needs no coercivity).
    {
        CheckResult c;
        c.name = "f_coercivity";
        c.constant = (any_coercive_probe && std::isfinite(c3)) ? c3 : 0.0;
        const bool bounded = std::isfinite(model.action_set().norm_bound());
        c.pass = (c.constant > 0.0) || bounded;
        c.detail = bounded ? "action set bounded" : "fitted from -f(t,0,delta_0,a)/|a|^p'";
        rep.checks.push_back(c);
    }

    for (const auto& c : rep.checks) rep.pass = rep.pass && c.pass;
    return rep;
}

ValidationReport validate_lipschitz(const ModelSpec& model, const ProbePlan& plan)
{
    const int d = model.dim_state();
    const double p = model.exponents().p;
    const CounterRng rng(plan.seed, Stream::Probe);
    const int L = static_cast<int>(plan.radii.size());
    const int K = static_cast<int>(plan.separations.size());

    Eigen::VectorXd b1(d), b2(d);
    Eigen::MatrixXd s1(d, model.dim_noise()), s2(d, model.dim_noise());
    Eigen::VectorXd a0(model.action_set().dim());
    model.action_set().project(Eigen::VectorXd::Zero(model.action_set().dim()), a0);

    auto coeff_diff = [&](double t, const Eigen::VectorXd& x1, const MeasureView& m1, const Eigen::VectorXd& x2,
                          const MeasureView& m2) {
        model.drift(t, x1, m1, a0, b1);
        model.drift(t, x2, m2, a0, b2);
        model.volatility(t, x1, m1, a0, s1);
        model.volatility(t, x2, m2, a0, s2);
        const double v = (b1 - b2).norm() + (s1 - s2).norm();
        ensure_finite(v, "coefficient difference");
        return v;
    };

    // ratios[family][level][scale]
    std::vector<std::vector<double>> rx(L, std::vector<double>(K, 0.0));
    std::vector<std::vector<double>> rm(L, std::vector<double>(K, 0.0));

    const int cloud_size = 8;
    for (int lvl = 0; lvl < L; ++lvl) {
        const double R = plan.radii[lvl];
        for (int k = 0; k < K; ++k) {
            const double sep = R * plan.separations[k];
            for (int i = 0; i < plan.samples_per_level; ++i) {
                const auto pt = static_cast<std::uint32_t>(i);
                const auto addr = static_cast<std::uint32_t>(lvl * K + k);
                const double t = model.horizon() * rng.uniform(pt, addr, 0);

                // Base cloud at scale R, shared by both families.
                Eigen::MatrixXd cloud(cloud_size, d);
                for (int c = 0; c < cloud_size; ++c)
                    for (int j = 0; j < d; ++j)
                        cloud(c, j) =
                            R * (2.0 * rng.uniform(pt, addr, static_cast<std::uint32_t>(20 + c * d + j)) - 1.0);
                const EmpiricalLaw law(cloud);
                const MeasureView view = MeasureView::of(law, p);

                // State pairs: a random pair at separation sep, plus
                // structured pairs straddling and touching the origin
                // (discontinuities and roots live there).
                Eigen::VectorXd x(d), dir(d);
                for (int j = 0; j < d; ++j) {
                    x[j] = R * (2.0 * rng.uniform(pt, addr, static_cast<std::uint32_t>(1 + j)) - 1.0);
                    dir[j] = rng.normal(pt, addr, static_cast<std::uint32_t>(60 + j));
                }
                if (dir.norm() == 0.0) dir.setOnes();
                dir /= dir.norm();
                const Eigen::VectorXd x2v = x + sep * dir;
                std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
                pairs.emplace_back(x, x2v);
                pairs.emplace_back((-0.5 * sep * dir).eval(), (0.5 * sep * dir).eval());
                pairs.emplace_back(Eigen::VectorXd::Zero(d), (sep * dir).eval());
                for (const auto& [xa, xb] : pairs) {
                    const double dist = (xa - xb).norm();
                    if (dist <= 0.0) continue;
                    const double diff = coeff_diff(t, xa, view, xb, view);
                    rx[lvl][k] = std::max(rx[lvl][k], diff / dist);
                }

                // Measure pairs: translation (W_p equals the shift length
                // exactly) plus an independent resampled cloud.
                Eigen::VectorXd shift = sep * dir;
                Eigen::MatrixXd cloud2 = cloud;
                cloud2.rowwise() += shift.transpose();
                const EmpiricalLaw law2(cloud2);
                const MeasureView view2 = MeasureView::of(law2, p);
                {
                    const double diff = coeff_diff(t, x, view, x, view2);
                    rm[lvl][k] = std::max(rm[lvl][k], diff / sep);
                }
                {
                    Eigen::MatrixXd cloud3(cloud_size, d);
                    for (int c = 0; c < cloud_size; ++c)
                        for (int j = 0; j < d; ++j)
                            cloud3(c, j) = cloud(c, j) + sep * (2.0 * rng.uniform(pt, addr,
                                                                static_cast<std::uint32_t>(40 + c * d + j)) - 1.0);
                    const EmpiricalLaw law3(cloud3);
                    const MeasureView view3 = MeasureView::of(law3, p);
                    double w = 0.0;
                    if (d == 1) w = wasserstein_1d(law, law3, p);
                    else w = wasserstein_exact(law, law3, p);
                    if (w > 1e-14) {
                        const double diff = coeff_diff(t, x, view, x, view3);
                        rm[lvl][k] = std::max(rm[lvl][k], diff / w);
                    }
                }
            }
        }
    }

    auto family_check = [&](const std::string& name, const std::vector<std::vector<double>>& r) {
        double base = 0.0, overall = 0.0;
        for (int lvl = 0; lvl < L; ++lvl) {
            base = std::max(base, r[lvl][0]);
            for (int k = 0; k < K; ++k) overall = std::max(overall, r[lvl][k]);
        }
        CheckResult c;
        c.name = name;
        c.constant = overall;
        c.pass = overall <= 1.5 * std::max(base, 1e-12);
        c.detail = "max ratio " + std::to_string(overall) + ", coarse-scale ratio " + std::to_string(base);
        return c;
    };

    ValidationReport rep;
    const auto cx = family_check("lipschitz_state", rx);
    const auto cm = family_check("lipschitz_measure", rm);
    rep.checks.push_back(cx);
    rep.checks.push_back(cm);
    CheckResult joint;
    joint.name = "lipschitz_constant";
    joint.constant = cx.constant + cm.constant;
    joint.pass = cx.pass && cm.pass;
    joint.detail = "state + measure constants";
    rep.checks.push_back(joint);
    for (const auto& c : rep.checks) rep.pass = rep.pass && c.pass;
    return rep;
}

} // namespace mfct
