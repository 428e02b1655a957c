#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfct/model.hpp"

using namespace mfct;

namespace {

ModelSpec custom_scalar_model(DriftFn b, VolFn sig, ActionSet set, Exponents e = {1.0, 2.0, 0.0})
{
    return ModelSpec(
        1, 1, 1.0, std::move(set), e, std::move(b), std::move(sig),
        [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>) {
            return 0.0;
        },
        [](Eigen::Ref<const Eigen::VectorXd>, const MeasureView&) { return 0.0; },
        InitialLaw::dirac(Eigen::VectorXd::Zero(1)));
}

ActionSet trivial_actions()
{
    return ActionSet::finite({Eigen::VectorXd::Zero(1)});
}

} // namespace

TEST_CASE("action sets: membership, projection, bounds")
{
    Eigen::VectorXd lo(2), hi(2);
    lo << -1.0, 0.0;
    hi << 1.0, 2.0;
    const auto box = ActionSet::box(lo, hi);
    Eigen::VectorXd a(2), out(2);
    a << 3.0, -1.0;
    box.project(a, out);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 0.0);
    CHECK(box.contains(out));
    CHECK_FALSE(box.contains(a));
    CHECK(box.norm_bound() == doctest::Approx(std::sqrt(1.0 + 4.0)));

    const auto ball = ActionSet::ball(2, 1.0);
    a << 3.0, 4.0;
    ball.project(a, out);
    CHECK(out.norm() == doctest::Approx(1.0));
    CHECK(out[0] == doctest::Approx(0.6));

    Eigen::VectorXd p1(1), p2(1);
    p1 << -1.0;
    p2 << 1.0;
    const auto fin = ActionSet::finite({p1, p2});
    Eigen::VectorXd x(1), y(1);
    x << 0.2;
    fin.project(x, y);
    CHECK(y[0] == 1.0);
    x << -0.2;
    fin.project(x, y);
    CHECK(y[0] == -1.0);
    CHECK(fin.norm_bound() == 1.0);

    CHECK_THROWS_AS(ActionSet::box(hi, lo), InvalidParam);
}

TEST_CASE("exponent constraints are rejected at construction")
{
    auto b = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::VectorXd> out) { out.setZero(); };
    auto s = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::MatrixXd> out) { out.setZero(); };
    // p' <= p
    CHECK_THROWS_AS(custom_scalar_model(b, s, trivial_actions(), Exponents{2.0, 2.0, 0.0}), InvalidParam);
    // p' < 2
    CHECK_THROWS_AS(custom_scalar_model(b, s, trivial_actions(), Exponents{1.0, 1.5, 0.0}), InvalidParam);
    // p_sigma > 2
    CHECK_THROWS_AS(custom_scalar_model(b, s, trivial_actions(), Exponents{2.5, 3.0, 2.5}), InvalidParam);
    // p < p_sigma
    CHECK_THROWS_AS(custom_scalar_model(b, s, trivial_actions(), Exponents{1.0, 3.0, 1.5}), InvalidParam);
    // a valid non-default combination
    CHECK_NOTHROW(custom_scalar_model(b, s, trivial_actions(), Exponents{2.0, 3.0, 1.0}));
}

TEST_CASE("builtin ou_chaos: formula evaluation and defaults")
{
    const auto m = builtin_model("ou_chaos", {{"kappa", 1.0}, {"sigma0", 1.0}});
    Eigen::VectorXd x(1), a(1), b(1);
    x << 2.0;
    a << 0.0;
    const MeasureView view = MeasureView::dirac(Eigen::VectorXd::Zero(1), 1.0);
    m.drift(0.0, x, view, a, b);
    CHECK(b[0] == doctest::Approx(-2.0)); // kappa (mean - x) at mean 0, x 2
    Eigen::MatrixXd sig(1, 1);
    m.volatility(0.0, x, view, a, sig);
    CHECK(sig(0, 0) == 1.0);
    CHECK(m.terminal_reward(x, view) == doctest::Approx(-4.0));
    CHECK(m.running_reward(0.0, x, view, a) == 0.0);
}

TEST_CASE("builtin bang_relaxed: action set and coefficients")
{
    const auto m = builtin_model("bang_relaxed", {{"eps", 0.1}});
    CHECK(m.action_set().kind() == ActionSet::Kind::Finite);
    REQUIRE(m.action_set().points().size() == 2);
    CHECK(m.action_set().points()[0][0] == -1.0);
    CHECK(m.action_set().points()[1][0] == 1.0);
    Eigen::VectorXd x(1), a(1), b(1);
    x << 0.5;
    a << -1.0;
    const MeasureView view = MeasureView::dirac(Eigen::VectorXd::Zero(1), 1.0);
    m.drift(0.0, x, view, a, b);
    CHECK(b[0] == -1.0);
    CHECK(m.running_reward(0.0, x, view, a) == doctest::Approx(-0.25));
}

TEST_CASE("builtin parameter validation")
{
    CHECK_THROWS_AS(builtin_model("nope"), UnknownModel);
    CHECK_THROWS_AS(builtin_model("lq_meanfield", {{"r", -1.0}}), InvalidParam);
    CHECK_THROWS_AS(builtin_model("lq_meanfield", {{"bogus_param", 1.0}}), InvalidParam);
}

TEST_CASE("coefficient purity: repeated evaluations are bitwise identical")
{
    const auto m = builtin_model("lq_meanfield");
    Eigen::VectorXd x(1), a(1), b(1), b0(1);
    x << 0.731;
    a << -0.25;
    MeasureView view = MeasureView::dirac(Eigen::VectorXd::Constant(1, 0.4), 1.0);
    m.drift(0.37, x, view, a, b0);
    const double f0 = m.running_reward(0.37, x, view, a);
    for (int i = 0; i < 1000; ++i) {
        m.drift(0.37, x, view, a, b);
        CHECK(b[0] == b0[0]);
        CHECK(m.running_reward(0.37, x, view, a) == f0);
    }
}

TEST_CASE("initial law sampling is deterministic and seeded")
{
    const auto m = builtin_model("ou_chaos", {{"lambda_mean", 2.0}, {"lambda_sd", 0.5}});
    const CounterRng rng1(42, Stream::Init), rng2(42, Stream::Init), rng3(43, Stream::Init);
    Eigen::VectorXd a(1), b(1), c(1);
    m.initial_law().sample(rng1, 7, a);
    m.initial_law().sample(rng2, 7, b);
    m.initial_law().sample(rng3, 7, c);
    CHECK(a[0] == b[0]);
    CHECK(a[0] != c[0]);

    // moments: gaussian second moment = mean^2 + sd^2
    CHECK(m.initial_law().moment(2.0) == doctest::Approx(4.25).epsilon(1e-9));
}

TEST_CASE("MeasureView sample statistics agree with the law")
{
    Eigen::MatrixXd pts(4, 2);
    pts << 1, 0, -1, 0, 0, 2, 0, -2;
    const EmpiricalLaw law(pts);
    const MeasureView v = MeasureView::of(law, 1.5);
    CHECK((v.mean - law.mean()).norm() < 1e-15);
    CHECK(std::abs(v.p_moment - law.moment(1.5)) < 1e-12 * std::max(1.0, std::abs(v.p_moment)));
    CHECK(v.samples == &law);
    CHECK(v.p_moment >= 0.0);
}

TEST_CASE("validate_growth: OU passes with c1 near max(kappa, 1)")
{
    const double kappa = 1.0;
    const auto m = builtin_model("ou_chaos", {{"kappa", kappa}});
    ProbePlan plan;
    plan.seed = 11;
    const auto rep = validate_growth(m, plan);
    CHECK(rep.pass);
    const auto* drift = rep.find("drift_growth");
    REQUIRE(drift != nullptr);
    // direct evaluation of the A.4 ratio over an independent probe grid
    double c1_direct = 0.0;
    const CounterRng rng(99, Stream::Probe);
    Eigen::VectorXd x(1), a(1), b(1);
    a << 0.0;
    for (int i = 0; i < 2000; ++i) {
        const auto pi = static_cast<std::uint32_t>(i);
        const double R = std::pow(10.0, 3.0 * rng.uniform(pi, 0, 0));
        x[0] = R * (2.0 * rng.uniform(pi, 0, 1) - 1.0);
        const double mean = R * (2.0 * rng.uniform(pi, 0, 2) - 1.0);
        MeasureView v = MeasureView::dirac(Eigen::VectorXd::Constant(1, mean), 1.0);
        m.drift(0.5, x, v, a, b);
        c1_direct = std::max(c1_direct, b.norm() / (1.0 + x.norm() + v.p_moment + a.norm()));
    }
    CHECK(drift->constant == doctest::Approx(c1_direct).epsilon(0.35));
    CHECK(drift->constant > 0.5 * std::max(kappa, 1.0));
    CHECK(drift->constant < 2.0 * std::max(kappa, 1.0));
}

TEST_CASE("validate_growth: quadratic drift fails the linear-growth check")
{
    auto b = [](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::VectorXd> out) { out[0] = x[0] * x[0]; };
    auto s = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = 1.0; };
    const auto m = custom_scalar_model(b, s, trivial_actions());
    ProbePlan plan;
    plan.seed = 5;
    const auto rep = validate_growth(m, plan);
    CHECK_FALSE(rep.pass);
    const auto* drift = rep.find("drift_growth");
    REQUIRE(drift != nullptr);
    CHECK_FALSE(drift->pass);
    CHECK(drift->exponent_excess > 0.1);
}

TEST_CASE("validate_growth: LQ passes and fits c3 = r/2 on coercivity")
{
    const double r = 1.0;
    const auto m = builtin_model("lq_meanfield", {{"r", r}});
    ProbePlan plan;
    plan.seed = 3;
    const auto rep = validate_growth(m, plan);
    CHECK(rep.pass);
    const auto* coer = rep.find("f_coercivity");
    REQUIRE(coer != nullptr);
    CHECK(coer->pass);
    // -f(t, 0, delta_0, a) / |a|^2 = r/2 exactly for every probed action
    CHECK(coer->constant == doctest::Approx(r / 2.0).epsilon(1e-9));
}

TEST_CASE("validate_growth: bang_relaxed passes via its bounded action set")
{
    const auto rep = validate_growth(builtin_model("bang_relaxed"), ProbePlan{});
    CHECK(rep.pass);
    const auto* coer = rep.find("f_coercivity");
    REQUIRE(coer != nullptr);
    CHECK(coer->pass);
}

TEST_CASE("validate_growth flags non-finite coefficients")
{
    auto b = [](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::VectorXd> out) { out[0] = (std::abs(x[0]) > 50.0) ? std::nan("") : x[0]; };
    auto s = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = 1.0; };
    const auto m = custom_scalar_model(b, s, trivial_actions());
    CHECK_THROWS_AS(validate_growth(m, ProbePlan{}), NonFiniteCoefficient);
}

TEST_CASE("validate_lipschitz: OU passes with constant near kappa + |gamma|")
{
    const double kappa = 1.3;
    const auto m = builtin_model("ou_chaos", {{"kappa", kappa}});
    ProbePlan plan;
    plan.seed = 21;
    const auto rep = validate_lipschitz(m, plan);
    CHECK(rep.pass);
    const auto* joint = rep.find("lipschitz_constant");
    REQUIRE(joint != nullptr);
    // b = kappa (mean - x): state slope kappa, mean-coupling slope kappa
    CHECK(joint->constant == doctest::Approx(2.0 * kappa).epsilon(0.05));
}

TEST_CASE("validate_lipschitz: LQ passes with constant near |beta| + |gamma|")
{
    const auto m = builtin_model("lq_meanfield", {{"beta", 0.3}, {"gamma", 0.4}});
    const auto rep = validate_lipschitz(m, ProbePlan{});
    CHECK(rep.pass);
    const auto* joint = rep.find("lipschitz_constant");
    REQUIRE(joint != nullptr);
    CHECK(joint->constant == doctest::Approx(0.7).epsilon(0.05));
}

TEST_CASE("validate_lipschitz: sign drift fails near the origin")
{
    auto b = [](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::VectorXd> out) { out[0] = (x[0] >= 0.0) ? 1.0 : -1.0; };
    auto s = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = 1.0; };
    const auto rep = validate_lipschitz(custom_scalar_model(b, s, trivial_actions()), ProbePlan{});
    CHECK_FALSE(rep.pass);
}

TEST_CASE("validate_lipschitz: sqrt volatility fails at the origin")
{
    auto b = [](double, Eigen::Ref<const Eigen::VectorXd>, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::VectorXd> out) { out[0] = 0.0; };
    auto s = [](double, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView&, Eigen::Ref<const Eigen::VectorXd>,
                Eigen::Ref<Eigen::MatrixXd> out) { out(0, 0) = std::sqrt(std::abs(x[0])); };
    const auto rep = validate_lipschitz(custom_scalar_model(b, s, trivial_actions()), ProbePlan{});
    CHECK_FALSE(rep.pass);
}

TEST_CASE("builtin lq_meanfield passes validate_growth with p_prime 2")
{
    const auto m = builtin_model("lq_meanfield");
    CHECK(m.exponents().p_prime == 2.0);
    CHECK(validate_growth(m, ProbePlan{}).pass);
}
