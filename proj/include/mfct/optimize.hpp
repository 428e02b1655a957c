#ifndef MFCT_OPTIMIZE_HPP
#define MFCT_OPTIMIZE_HPP

#include <variant>
#include <vector>

#include "mfct/objective.hpp"
#include "mfct/sim.hpp"

namespace mfct {

struct CrossEntropyOpts {
    int population = 32;
    double elite_frac = 0.25;
    int iters = 30;
    double init_sigma = 0.5;
    double sigma_floor = 1e-3;
};

struct NelderMeadOpts {
    int iters = 200;
    double simplex_scale = 0.5;
};

struct GridOpts {
    int resolution = 11;
    double radius = 2.0;
};

struct OptimizeConfig {
    std::variant<CrossEntropyOpts, NelderMeadOpts, GridOpts> method = CrossEntropyOpts{};
    // Every candidate is evaluated on the same seeds (common random
    // numbers); the winner is re-evaluated on held-out seeds.
    std::vector<std::uint64_t> eval_seeds = {1};
    std::vector<std::uint64_t> holdout_seeds = {}; // empty: derived from eval_seeds
    double penalty_blowup = -1e12;
    std::uint64_t opt_seed = 0;
    int mkv_max_iter = 30;
    double mkv_tol = 1e-3;
    int workers = 1;
    // Finite-difference ascent applied to the search winner on the same
    // common-random-number objective; 0 disables.
    int polish_iters = 30;
};

enum class OptTarget { NSystem, MkvFixedPoint };

struct OptimizeResult {
    FeedbackPolicy policy;
    std::vector<double> value_history;        // best-so-far per iteration
    std::vector<double> mean_history;         // evaluation of the updated search mean (CEM)
    std::vector<Eigen::VectorXd> theta_history; // best-so-far parameters per iteration
    ObjectiveEstimate best;                   // held-out re-evaluation of the winner
};

// Derivative-free maximization of the chosen objective over the policy's
// parameter vector. Throws AllCandidatesBlewUp when an entire iteration is
// penalty-valued.
OptimizeResult optimize_policy(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                               const FeedbackPolicy& family, OptTarget target);

// Evaluation used by the optimizer: mean over seeds of the target objective
// (penalty on NaN-flagged runs). Exposed for cross-checks.
double evaluate_policy(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                       const FeedbackPolicy& policy, OptTarget target);

// Held-out estimate with pooled standard error.
ObjectiveEstimate evaluate_policy_estimate(const ModelSpec& model, const SimConfig& sim_config,
                                           const std::vector<std::uint64_t>& seeds, const FeedbackPolicy& policy,
                                           OptTarget target, int mkv_max_iter = 30, double mkv_tol = 1e-3);

struct OracleSolution {
    Eigen::VectorXd grid;       // steps+1 times
    Eigen::VectorXd fluct_gain; // P_t (state-deviation Riccati)
    Eigen::VectorXd mean_gain;  // Pi_t (mean Riccati)
    Eigen::VectorXd mean_path;  // optimal mean flow m*_t
    Eigen::VectorXd var_path;   // state variance V_t under the optimum
    FeedbackPolicy policy;      // linear family, exact at grid times
    double value = 0.0;         // optimal objective value
    MeasureFlow mean_flow;      // (m*_t, E|X_t|) per grid time
};

// Closed-form benchmark: solves the mean-field linear-quadratic problem by
// splitting into the mean ODE/Riccati pair and the fluctuation Riccati,
// integrated with RK4 on the grid. Requires the lq_meanfield builtin.
OracleSolution solve_lq_oracle(const ModelSpec& model, int steps);

struct EpsilonReport {
    double epsilon_hat = 0.0;
    double combined_std_error = 0.0;
};

// eps_hat = max(0, reference - candidate) with combined standard error.
EpsilonReport epsilon_report(double reference_value, double reference_se, const ObjectiveEstimate& candidate);

struct FdAscentResult {
    FeedbackPolicy policy;
    double value = 0.0;
    int iterations = 0;
};

// Finite-difference gradient ascent with an adaptive step, common random
// numbers across all evaluations. Used as the oracle's independent
// cross-check.
FdAscentResult fd_policy_ascent(const ModelSpec& model, const SimConfig& sim_config, const OptimizeConfig& opt,
                                FeedbackPolicy start, OptTarget target, int iters = 60, double fd_step = 1e-3,
                                double lr0 = 0.1);

} // namespace mfct

#endif
