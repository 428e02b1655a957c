#ifndef MFCT_MEASURE_HPP
#define MFCT_MEASURE_HPP

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <vector>

#include "mfct/errors.hpp"

namespace mfct {

// Weighted sample cloud on R^d. Rows of `points` are atoms.
class EmpiricalLaw {
public:
    // Uniform weights 1/n.
    explicit EmpiricalLaw(Eigen::MatrixXd points);
    EmpiricalLaw(Eigen::MatrixXd points, Eigen::VectorXd weights);

    int size() const { return static_cast<int>(points_.rows()); }
    int dim() const { return static_cast<int>(points_.cols()); }
    const Eigen::MatrixXd& points() const { return points_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    bool uniform() const { return uniform_; }

    // Weighted mean. Contributions are summed in sorted order so the result
    // is invariant under atom permutations, bit for bit.
    Eigen::VectorXd mean() const;

    // Sum_i w_i |x_i|^q, same canonical summation.
    double moment(double q) const;

private:
    Eigen::MatrixXd points_;
    Eigen::VectorXd weights_;
    bool uniform_ = false;
};

// Sum_i w_i |x_i|^q  (operation form of EmpiricalLaw::moment).
double moment(const EmpiricalLaw& law, double q);

// Exact W_p on the real line via the quantile coupling. Accepts general
// weights. Throws DimensionMismatch unless both laws are one-dimensional.
double wasserstein_1d(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p);

// Exact W_p between two equal-size uniformly weighted clouds in any
// dimension, via minimum-cost perfect matching on the |x_i - y_j|^p cost
// matrix. Throws SizeMismatch / CapExceeded.
double wasserstein_exact(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p, int cap = 512);

struct EntropicResult {
    double value = 0.0;
    bool converged = false;
    int iterations = 0;
    double marginal_error = 0.0;
};

// Sinkhorn-regularized transport cost^(1/p) with an epsilon-annealing
// schedule. Upper-biased estimate of W_p; accepts arbitrary sizes and
// weights. Never throws on non-convergence: the flag reports it.
EntropicResult wasserstein_entropic(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p,
                                    double epsilon, int max_iter = 2000);

// n sampled paths on a shared time grid. frames[k] is the n x d marginal
// at time_grid[k].
class PathEnsemble {
public:
    PathEnsemble(std::vector<Eigen::MatrixXd> frames, Eigen::VectorXd time_grid);

    int size() const { return n_; }
    int dim() const { return d_; }
    int steps() const { return static_cast<int>(time_grid_.size()) - 1; }
    const Eigen::VectorXd& time_grid() const { return time_grid_; }
    const std::vector<Eigen::MatrixXd>& frames() const { return frames_; }

    EmpiricalLaw marginal(int frame_index) const;

    void save(const std::string& path) const;
    static PathEnsemble load(const std::string& path);
    void write_csv(std::ostream& os) const;

private:
    std::vector<Eigen::MatrixXd> frames_;
    Eigen::VectorXd time_grid_;
    int n_ = 0;
    int d_ = 0;
};

// Exact matching distance under the truncated sup-norm cost
// (sup over grid points <= t of |x_s - y_s|)^p. Requires a shared grid,
// equal sizes, uniform weights; t must be a grid point.
double truncated_path_distance(const PathEnsemble& a, const PathEnsemble& b, double t, double p,
                               int cap = 512);

// Minimum-cost perfect matching on a dense square cost matrix
// (shortest-augmenting-path with potentials). Returns total cost;
// `assignment[i]` is the column matched to row i. Exposed for reuse by
// diagnostics that need transport on non-Euclidean costs.
double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>* assignment = nullptr);

// Exact minimum transport cost between general nonnegative supply and
// demand vectors of equal total mass, on a dense cost matrix (successive
// shortest paths with potentials). Cost entries must be nonnegative.
double solve_transport(const Eigen::MatrixXd& cost, const Eigen::VectorXd& supply, const Eigen::VectorXd& demand);

} // namespace mfct

#endif
