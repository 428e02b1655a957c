#ifndef MFCT_CONTROL_HPP
#define MFCT_CONTROL_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "mfct/errors.hpp"
#include "mfct/model.hpp"

namespace mfct {

// Atoms of a per-interval action distribution: column j of `actions` with
// mass weights[j].
struct AtomList {
    Eigen::MatrixXd actions; // k x m
    Eigen::VectorXd weights; // m, nonnegative, sums to 1
    int count() const { return static_cast<int>(weights.size()); }
};

// Piecewise-constant-in-time relaxed control: a finite action distribution
// per grid interval. The induced measure on [0,T] x A has Lebesgue first
// marginal by construction.
class RelaxedControl {
public:
    RelaxedControl(Eigen::VectorXd time_grid, std::vector<AtomList> intervals);

    const Eigen::VectorXd& time_grid() const { return grid_; }
    int intervals() const { return static_cast<int>(atoms_.size()); }
    const AtomList& interval(int k) const { return atoms_.at(k); }
    double horizon() const { return grid_[grid_.size() - 1]; }

    // Index of the interval containing t (right-open cells; T maps to the
    // last interval).
    int interval_of(double t) const;

    // True when every interval carries a single unit atom.
    bool is_strict() const;

    // Largest atom norm across intervals.
    double max_atom_norm() const;

    void validate_in(const ActionSet& set) const;

    void save(std::ostream& os) const;
    static RelaxedControl load(std::istream& is);

private:
    Eigen::VectorXd grid_;
    std::vector<AtomList> atoms_;
};

// Strict control from one action per interval.
RelaxedControl strict_from_path(const std::vector<Eigen::VectorXd>& actions, Eigen::VectorXd time_grid,
                                const ActionSet& set);

// Constant strict control on a grid.
RelaxedControl constant_control(Eigen::VectorXd action, Eigen::VectorXd time_grid);

// Atom-wise truncation iota_r: radial projection onto the centered ball of
// the given radius (nearest in-ball atom for finite action sets). Weights
// unchanged; |iota(a)| <= |a| always holds.
RelaxedControl truncate(const RelaxedControl& q, double radius, const ActionSet* set = nullptr);

// Strict approximation by time slicing: each interval splits into
// `refinement` cells grouped into cycles; within a cycle consecutive cells
// are assigned to atoms in fixed order with counts proportional to weights
// (largest-remainder rounding). Cycle length is the smallest divisor of the
// refinement that is at least sqrt(refinement) and gives every atom a cell,
// so that as refinement grows both the cycle duration and the weight
// rounding error vanish, and the induced measures converge weakly to q.
// Throws RefinementTooCoarse when even a whole-interval cycle would starve
// an atom.
RelaxedControl chatter(const RelaxedControl& q, int refinement);

// Effective drift and volatility under an action distribution:
// drift_bar = sum_i w_i b(., a_i) and vol_bar the symmetric PSD square root
// of sum_i w_i sigma sigma^T(., a_i). For a single atom,
// vol_bar vol_bar^T equals sigma sigma^T exactly.
void effective_coefficients(const ModelSpec& model, double t, Eigen::Ref<const Eigen::VectorXd> x,
                            const MeasureView& m, const AtomList& atoms, Eigen::Ref<Eigen::VectorXd> drift_bar,
                            Eigen::Ref<Eigen::MatrixXd> vol_bar);

// Markovian feedback: a parametric map (t, x) -> action whose evaluation is
// always projected into the action set.
class FeedbackPolicy {
public:
    enum class Family { Constant, Linear, Table };

    static FeedbackPolicy constant(const ActionSet& set, Eigen::VectorXd action);
    // Piecewise-linear-in-t gain/offset on knot times:
    // action = clamp(K(t) x + k(t)). theta packs row-major gains per knot,
    // then offsets per knot.
    static FeedbackPolicy linear(const ActionSet& set, int dim_state, Eigen::VectorXd knot_times);
    // Rectangular (t, x) lookup with the nearest-cell rule; theta packs one
    // action per cell, t-major then x cells lexicographically.
    static FeedbackPolicy table(const ActionSet& set, Eigen::VectorXd t_centers,
                                std::vector<Eigen::VectorXd> x_centers_per_dim);

    Family family() const { return family_; }
    int param_count() const { return static_cast<int>(theta_.size()); }
    const Eigen::VectorXd& params() const { return theta_; }
    void set_params(Eigen::VectorXd theta);

    void evaluate(double t, Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> out) const;

    const ActionSet& action_set() const { return set_; }

    void save(std::ostream& os) const;
    static FeedbackPolicy load(std::istream& is, const ActionSet& set);

private:
    FeedbackPolicy(Family f, ActionSet set) : family_(f), set_(std::move(set)) {}

    Family family_;
    ActionSet set_;
    Eigen::VectorXd theta_;
    int dim_state_ = 1;
    int dim_action_ = 1;
    Eigen::VectorXd knots_;                        // linear family
    Eigen::VectorXd t_centers_;                    // table family
    std::vector<Eigen::VectorXd> x_centers_;       // table family, per state dim
    mutable Eigen::VectorXd scratch_;
};

// Occupation measures of two controls compared in the bounded-Lipschitz
// (flat) metric on [0,T] x A, computed exactly as W1 with the ground metric
// min(|dt| + |da|, 2) after quantizing both controls to a common number of
// uniform atoms. Diagnostic for chattering convergence.
double control_bl_distance(const RelaxedControl& a, const RelaxedControl& b, int quantization = 256);

} // namespace mfct

#endif
