#ifndef MFCT_OBJECTIVE_HPP
#define MFCT_OBJECTIVE_HPP

#include <string>

#include "mfct/sim.hpp"

namespace mfct {

struct ObjectiveEstimate {
    double value = 0.0;
    double std_error = 0.0;
    int n_samples = 0;
    double running = 0.0;
    double terminal = 0.0;
    // Particle rewards of an interacting run are correlated through the
    // empirical measure; the reported std_error is then not an
    // independent-sample confidence interval.
    bool correlated_se = false;

    std::string to_json(std::uint64_t seed = 0) const;
};

// Mean-field objective Gamma under a frozen flow: per-particle reward
// sum_k dt sum_atoms w f(t_k, X_k, flow_k, a) + g(X_T, flow_T), averaged
// over particles with its standard error.
ObjectiveEstimate estimate_gamma(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow);

// n-state averaged objective: the same quadrature with the measure argument
// set to the run's own empirical flow. The std error is flagged correlated.
ObjectiveEstimate estimate_n_objective(const ModelSpec& model, const SimOutput& output);

// Per-particle realized rewards under an arbitrary flow (the quadrature
// shared by both estimators).
Eigen::VectorXd per_particle_rewards(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow,
                                     double* running_mean = nullptr, double* terminal_mean = nullptr);

} // namespace mfct

#endif
