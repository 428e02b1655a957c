#ifndef MFCT_MODEL_HPP
#define MFCT_MODEL_HPP

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/measure.hpp"
#include "mfct/rng.hpp"

namespace mfct {

// Closed action set A. Box bounds, a finite atom list, or a centered ball.
class ActionSet {
public:
    enum class Kind { Box, Finite, Ball };

    static ActionSet box(Eigen::VectorXd lower, Eigen::VectorXd upper);
    static ActionSet finite(std::vector<Eigen::VectorXd> points);
    static ActionSet ball(int dim, double radius);

    Kind kind() const { return kind_; }
    int dim() const { return dim_; }
    const Eigen::VectorXd& lower() const { return lower_; }
    const Eigen::VectorXd& upper() const { return upper_; }
    const std::vector<Eigen::VectorXd>& points() const { return points_; }
    double radius() const { return radius_; }

    bool contains(Eigen::Ref<const Eigen::VectorXd> a, double tol = 1e-12) const;

    // Nearest point of the set: clamp for boxes, radial projection for
    // balls, nearest atom (ties to the lower index) for finite sets.
    void project(Eigen::Ref<const Eigen::VectorXd> in, Eigen::Ref<Eigen::VectorXd> out) const;

    // sup_{a in A} |a|; +inf for unbounded boxes.
    double norm_bound() const;

private:
    ActionSet() = default;
    Kind kind_ = Kind::Box;
    int dim_ = 0;
    Eigen::VectorXd lower_, upper_;
    std::vector<Eigen::VectorXd> points_;
    double radius_ = 0.0;
};

// Summarized view of the measure argument m: mean and the p-th absolute
// moment, with optional access to the underlying cloud for user models
// whose coefficients need more than moments.
struct MeasureView {
    Eigen::VectorXd mean;
    double p_moment = 0.0;                  // integral of |z|^p m(dz), p = model exponent
    const EmpiricalLaw* samples = nullptr;  // optional, not owned

    static MeasureView of(const EmpiricalLaw& law, double p);
    static MeasureView dirac(Eigen::VectorXd point, double p);
};

// Initial law with finite p'-th moment; sampling is a pure function of
// (seed, particle index).
class InitialLaw {
public:
    static InitialLaw dirac(Eigen::VectorXd point);
    static InitialLaw gaussian(Eigen::VectorXd mean, Eigen::VectorXd sd);
    static InitialLaw uniform_box(Eigen::VectorXd lower, Eigen::VectorXd upper);

    int dim() const { return static_cast<int>(a_.size()); }
    void sample(const CounterRng& rng, std::uint32_t particle, Eigen::Ref<Eigen::VectorXd> out) const;
    Eigen::VectorXd mean() const;
    // Exact q-th absolute moment for d=1 laws; Monte Carlo fallback otherwise.
    double moment(double q) const;

private:
    enum class Kind { Dirac, Gaussian, UniformBox } kind_ = Kind::Dirac;
    Eigen::VectorXd a_, b_; // (point,-), (mean,sd), (lower,upper)
};

using DriftFn = std::function<void(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                                   Eigen::Ref<const Eigen::VectorXd> a, Eigen::Ref<Eigen::VectorXd> out)>;
using VolFn = std::function<void(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                                 Eigen::Ref<const Eigen::VectorXd> a, Eigen::Ref<Eigen::MatrixXd> out)>;
using RunningRewardFn = std::function<double(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                                             Eigen::Ref<const Eigen::VectorXd> a)>;
using TerminalRewardFn = std::function<double(Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m)>;

struct Exponents {
    double p = 1.0;
    double p_prime = 2.0;
    double p_sigma = 0.0;
};

// The control problem: coefficients (b, sigma, f, g), exponents, horizon,
// action set and initial law. Immutable after construction; coefficient
// evaluations must be pure.
class ModelSpec {
public:
    ModelSpec(int dim_state, int dim_noise, double horizon, ActionSet action_set, Exponents exponents,
              DriftFn drift, VolFn volatility, RunningRewardFn running_reward, TerminalRewardFn terminal_reward,
              InitialLaw initial_law, std::string name = "user", std::map<std::string, double> params = {});

    // Builtin parameter values; empty for user models.
    const std::map<std::string, double>& params() const { return params_; }

    int dim_state() const { return dim_state_; }
    int dim_noise() const { return dim_noise_; }
    double horizon() const { return horizon_; }
    const ActionSet& action_set() const { return action_set_; }
    const Exponents& exponents() const { return exponents_; }
    const InitialLaw& initial_law() const { return initial_law_; }
    const std::string& name() const { return name_; }

    void drift(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
               Eigen::Ref<const Eigen::VectorXd> a, Eigen::Ref<Eigen::VectorXd> out) const
    {
        drift_(t, x, m, a, out);
    }
    void volatility(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                    Eigen::Ref<const Eigen::VectorXd> a, Eigen::Ref<Eigen::MatrixXd> out) const
    {
        vol_(t, x, m, a, out);
    }
    double running_reward(double t, Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m,
                          Eigen::Ref<const Eigen::VectorXd> a) const
    {
        return running_(t, x, m, a);
    }
    double terminal_reward(Eigen::Ref<const Eigen::VectorXd> x, const MeasureView& m) const
    {
        return terminal_(x, m);
    }

private:
    int dim_state_, dim_noise_;
    double horizon_;
    ActionSet action_set_;
    Exponents exponents_;
    DriftFn drift_;
    VolFn vol_;
    RunningRewardFn running_;
    TerminalRewardFn terminal_;
    InitialLaw initial_law_;
    std::string name_;
    std::map<std::string, double> params_;
};

// Seeded probe geometry for the assumption validators. Radii span the
// decades over which growth exponents are fitted.
struct ProbePlan {
    std::vector<double> radii = {1.0, 10.0, 100.0, 1000.0};
    int samples_per_level = 64;
    std::uint64_t seed = 0;
    // Pair-separation scales for the Lipschitz probe, relative to the radius.
    std::vector<double> separations = {1.0, 1e-2, 1e-4};
};

struct CheckResult {
    std::string name;
    double constant = 0.0;        // smallest constant consistent with the probes
    double exponent_excess = 0.0; // fitted growth exponent minus the allowed one
    bool pass = true;
    std::string detail;
};

struct ValidationReport {
    std::vector<CheckResult> checks;
    bool pass = true;
    const CheckResult* find(const std::string& name) const;
};

// Probes the growth inequalities of the standing assumptions: linear drift
// growth, p_sigma volatility growth, reward envelopes and the action
// coercivity of the running reward. Fails a check when the fitted growth
// exponent exceeds the allowed one by more than 0.1.
ValidationReport validate_growth(const ModelSpec& model, const ProbePlan& probe);

// Probes Lipschitz continuity of (b, sigma) in (x, m): finite-difference
// ratios over seeded pairs must stabilize (no growth beyond factor 1.5
// across probe scales).
ValidationReport validate_lipschitz(const ModelSpec& model, const ProbePlan& probe);

// Named benchmark models: ou_chaos, lq_meanfield, bang_relaxed.
ModelSpec builtin_model(const std::string& name, const std::map<std::string, double>& params = {});

// Default parameter set of a builtin (after applying overrides).
std::map<std::string, double> builtin_params(const std::string& name,
                                             const std::map<std::string, double>& overrides = {});

} // namespace mfct

#endif
