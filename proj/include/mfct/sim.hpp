#ifndef MFCT_SIM_HPP
#define MFCT_SIM_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <vector>

#include "mfct/control.hpp"
#include "mfct/measure.hpp"
#include "mfct/model.hpp"

namespace mfct {

// Euler-Maruyama configuration on the uniform grid t_k = k T / steps.
// Noise is addressed by (seed, particle, step): reruns and particle
// permutations are reproducible bit for bit regardless of scheduling.
// When noise_ref_steps (a multiple of steps) is set, each step consumes the
// normalized sum of the reference-grid increments it covers, so runs at
// different step counts share one Brownian path.
struct SimConfig {
    int n_particles = 1;
    int steps = 100;
    std::uint64_t seed = 0;
    int noise_ref_steps = 0; // 0: equal to steps
    double blowup_threshold = 1e8;
    // Optional relabeling: slot i draws the initial state and noise of
    // stream particle_labels[i]. Permuting labels permutes the outputs of
    // an exchangeable system exactly. Empty: identity.
    std::vector<std::uint32_t> particle_labels;
};

// Frozen measure flow (m_t): per-grid-time mean and p-th moment.
struct FlowEntry {
    Eigen::VectorXd mean;
    double p_moment = 0.0;
};

class MeasureFlow {
public:
    MeasureFlow() = default;
    MeasureFlow(std::vector<FlowEntry> entries, double p);

    int size() const { return static_cast<int>(entries_.size()); }
    double p() const { return p_; }
    const FlowEntry& entry(int k) const { return entries_.at(k); }
    // Sample-less view for coefficient evaluation.
    MeasureView view(int k) const;

    // sup_k |mean difference| + |p-moment difference|
    double distance(const MeasureFlow& other) const;

private:
    std::vector<FlowEntry> entries_;
    double p_ = 1.0;
};

// Per-(particle, step) applied control atoms; storage is a per-step action
// matrix for policy runs and a shared control list for relaxed runs.
class ControlTrace {
public:
    class AtomsRef {
    public:
        int count() const { return count_; }
        Eigen::Map<const Eigen::VectorXd> action(int j) const
        {
            return Eigen::Map<const Eigen::VectorXd>(actions_ + static_cast<std::ptrdiff_t>(j) * k_, k_);
        }
        double weight(int j) const { return weights_ ? weights_[j] : 1.0; }

    private:
        friend class ControlTrace;
        const double* actions_ = nullptr;
        const double* weights_ = nullptr; // nullptr: unit weight single atom
        int count_ = 0;
        int k_ = 0;
    };

    static ControlTrace from_actions(std::vector<Eigen::MatrixXd> per_step_actions);
    static ControlTrace from_relaxed(std::shared_ptr<const std::vector<RelaxedControl>> controls,
                                     const Eigen::VectorXd& sim_grid);

    AtomsRef at(int particle, int step) const;

private:
    std::vector<Eigen::MatrixXd> actions_;                          // [step](k x n)
    std::shared_ptr<const std::vector<RelaxedControl>> relaxed_;    // size n
    std::vector<std::vector<int>> interval_index_;                  // [particle][step]
};

struct SimDiagnostics {
    int steps_completed = 0;
    double max_abs = 0.0;
    bool nan_flag = false;
};

struct SimOutput {
    PathEnsemble paths;
    ControlTrace controls;
    Eigen::VectorXd reward_samples; // realized int f dt + g per particle
    MeasureFlow realized_flow;      // empirical mean / p-moment per grid time
    SimDiagnostics diagnostics;
};

// Interacting n-particle system: coefficients read the live empirical
// measure (including the particle itself).
SimOutput simulate_nsystem(const ModelSpec& model, const SimConfig& config, const FeedbackPolicy& policy);
SimOutput simulate_nsystem(const ModelSpec& model, const SimConfig& config,
                           std::shared_ptr<const std::vector<RelaxedControl>> controls);

// Decoupled dynamics: coefficients read the frozen flow, so particles are
// mutually independent.
SimOutput simulate_decoupled(const ModelSpec& model, const SimConfig& config, const MeasureFlow& flow,
                             const FeedbackPolicy& policy);
SimOutput simulate_decoupled(const ModelSpec& model, const SimConfig& config, const MeasureFlow& flow,
                             std::shared_ptr<const std::vector<RelaxedControl>> controls);

struct FixedPointResult {
    MeasureFlow flow;
    int iterations = 0;
    bool converged = false;
};

// Picard iteration for the McKean-Vlasov law under a feedback policy:
// simulate under the frozen flow with common random numbers, refresh the
// flow from the run, repeat until the flow is self-consistent.
FixedPointResult mkv_fixed_point(const ModelSpec& model, const SimConfig& config, const FeedbackPolicy& policy,
                                 int max_iter = 50, double tol = 1e-3);

struct CouplingResult {
    SimOutput interacting;
    SimOutput decoupled;
    double coupling_gap = 0.0; // (1/n) sum_i sup_k |Z_k^i - X_k^i|^2
};

// Trajectorial coupling: both systems run with the same noise and initial
// states; the decoupled one reads the frozen MKV flow, the interacting one
// its own empirical measure.
CouplingResult couple_from_mkv(const ModelSpec& model, const SimConfig& config, const MeasureFlow& mkv_flow,
                               const FeedbackPolicy& policy);
CouplingResult couple_from_mkv(const ModelSpec& model, const SimConfig& config, const MeasureFlow& mkv_flow,
                               std::shared_ptr<const std::vector<RelaxedControl>> controls);

// Smooth test function with gradient and Hessian, for the martingale
// diagnostic.
class TestFunction {
public:
    static TestFunction coordinate(int axis = 0);
    static TestFunction quadratic();
    static TestFunction bump(Eigen::VectorXd center, double width);

    double value(Eigen::Ref<const Eigen::VectorXd> x) const;
    void gradient(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> out) const;
    void hessian(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::MatrixXd> out) const;

private:
    enum class Kind { Coordinate, Quadratic, Bump } kind_ = Kind::Coordinate;
    int axis_ = 0;
    Eigen::VectorXd center_;
    double width_ = 1.0;
};

struct DefectEstimate {
    double defect_mean = 0.0;
    double std_error = 0.0;
};

// Monte Carlo estimate of E[(M_t - M_s) h] where
// M_t = phi(X_t) - sum_k dt int L phi(t_k, X_k, m_k, a) Lambda_k(da),
// with the generator L phi = b . grad phi + 1/2 Tr[sigma sigma^T Hess phi]
// and the measure argument read from `flow`. h is 1, or a bump of X_s when
// h_bump is supplied.
DefectEstimate martingale_defect(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow,
                                 const TestFunction& phi, double s, double t,
                                 const TestFunction* h_bump = nullptr);

// Uniform grid 0..T with the given number of steps.
Eigen::VectorXd uniform_grid(double horizon, int steps);

} // namespace mfct

#endif
