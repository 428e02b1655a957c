#include "mfct/measure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

namespace mfct {

namespace {

constexpr double kWeightTol = 1e-12;

void check_finite(const Eigen::MatrixXd& m, const char* what)
{
    if (!m.allFinite()) throw Error(std::string(what) + ": non-finite entries");
}

// Order-canonical sum: sorting before accumulation makes the result
// independent of atom ordering.
double sorted_sum(std::vector<double>& buf)
{
    std::sort(buf.begin(), buf.end());
    double s = 0.0;
    for (double v : buf) s += v;
    return s;
}

} // namespace

EmpiricalLaw::EmpiricalLaw(Eigen::MatrixXd points)
    : points_(std::move(points)), uniform_(true)
{
    if (points_.rows() < 1) throw Error("EmpiricalLaw: need at least one atom");
    check_finite(points_, "EmpiricalLaw");
    weights_ = Eigen::VectorXd::Constant(points_.rows(), 1.0 / static_cast<double>(points_.rows()));
}

EmpiricalLaw::EmpiricalLaw(Eigen::MatrixXd points, Eigen::VectorXd weights)
    : points_(std::move(points)), weights_(std::move(weights))
{
    if (points_.rows() < 1) throw Error("EmpiricalLaw: need at least one atom");
    if (weights_.size() != points_.rows()) throw SizeMismatch("EmpiricalLaw: weights/points size mismatch");
    check_finite(points_, "EmpiricalLaw");
    if ((weights_.array() < 0.0).any()) throw Error("EmpiricalLaw: negative weight");
    if (std::abs(weights_.sum() - 1.0) > kWeightTol) throw Error("EmpiricalLaw: weights must sum to 1");
    uniform_ = (weights_.array() - 1.0 / points_.rows()).abs().maxCoeff() == 0.0;
}

Eigen::VectorXd EmpiricalLaw::mean() const
{
    const int n = size();
    Eigen::VectorXd out(dim());
    std::vector<double> buf(n);
    for (int j = 0; j < dim(); ++j) {
        for (int i = 0; i < n; ++i) buf[i] = weights_[i] * points_(i, j);
        out[j] = sorted_sum(buf);
    }
    return out;
}

double EmpiricalLaw::moment(double q) const
{
    const int n = size();
    std::vector<double> buf(n);
    for (int i = 0; i < n; ++i) buf[i] = weights_[i] * std::pow(points_.row(i).norm(), q);
    return sorted_sum(buf);
}

double moment(const EmpiricalLaw& law, double q)
{
    return law.moment(q);
}

double wasserstein_1d(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p)
{
    if (mu.dim() != 1 || nu.dim() != 1) throw DimensionMismatch("wasserstein_1d: laws must be one-dimensional");

    auto sorted = [](const EmpiricalLaw& law) {
        std::vector<std::pair<double, double>> a(law.size());
        for (int i = 0; i < law.size(); ++i) a[i] = {law.points()(i, 0), law.weights()[i]};
        std::sort(a.begin(), a.end());
        return a;
    };
    auto a = sorted(mu);
    auto b = sorted(nu);

    // Walk the merged quantile function.
    double cost = 0.0;
    std::size_t i = 0, j = 0;
    double ra = a[0].second, rb = b[0].second;
    while (i < a.size() && j < b.size()) {
        const double m = std::min(ra, rb);
        cost += m * std::pow(std::abs(a[i].first - b[j].first), p);
        ra -= m;
        rb -= m;
        if (ra <= kWeightTol && i + 1 < a.size()) ra = a[++i].second;
        else if (ra <= kWeightTol) ++i;
        if (rb <= kWeightTol && j + 1 < b.size()) rb = b[++j].second;
        else if (rb <= kWeightTol) ++j;
    }
    return std::pow(cost, 1.0 / p);
}

double solve_assignment(const Eigen::MatrixXd& cost, std::vector<int>* assignment)
{
    // Shortest augmenting path with dual potentials (the Jonker-Volgenant
    // family). Row/column potentials keep reduced costs nonnegative, so a
    // Dijkstra pass per row yields an optimal matching in O(n^3).
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw SizeMismatch("solve_assignment: square matrix required");
    constexpr double kInf = std::numeric_limits<double>::infinity();

    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> match(n + 1, n); // match[j] = row assigned to column j; n = unassigned
    for (int i = 0; i < n; ++i) {
        std::vector<double> dist(n + 1, kInf);
        std::vector<int> prev(n + 1, -1);
        std::vector<char> done(n + 1, 0);
        int j0 = n; // virtual column holding the current row
        match[n] = i;
        do {
            done[j0] = 1;
            const int i0 = match[j0];
            double best = kInf;
            int j1 = -1;
            for (int j = 0; j < n; ++j) {
                if (done[j]) continue;
                const double red = cost(i0, j) - u[i0] - v[j];
                if (red + (j0 == n ? 0.0 : dist[j0]) < dist[j]) {
                    dist[j] = red + (j0 == n ? 0.0 : dist[j0]);
                    prev[j] = j0;
                }
                if (dist[j] < best) {
                    best = dist[j];
                    j1 = j;
                }
            }
            // Update potentials along the shortest-path tree.
            for (int j = 0; j <= n; ++j) {
                if (!done[j]) continue;
                if (j == n) u[match[j]] += best;
                else {
                    u[match[j]] += best - dist[j];
                    v[j] -= best - dist[j];
                }
            }
            // dist entries of undone columns shrink by best later; fold in now.
            for (int j = 0; j < n; ++j)
                if (!done[j]) dist[j] -= best;
            j0 = j1;
        } while (match[j0] != n);
        // Augment along the alternating path.
        while (j0 != n) {
            const int j1 = prev[j0];
            match[j0] = match[j1];
            j0 = j1;
        }
    }

    double total = 0.0;
    if (assignment) assignment->assign(n, -1);
    for (int j = 0; j < n; ++j) {
        total += cost(match[j], j);
        if (assignment) (*assignment)[match[j]] = j;
    }
    return total;
}

double solve_transport(const Eigen::MatrixXd& cost, const Eigen::VectorXd& supply, const Eigen::VectorXd& demand)
{
    const int n = static_cast<int>(supply.size());
    const int m = static_cast<int>(demand.size());
    if (cost.rows() != n || cost.cols() != m) throw SizeMismatch("solve_transport: cost shape mismatch");
    if ((supply.array() < 0).any() || (demand.array() < 0).any())
        throw Error("solve_transport: negative mass");
    if (std::abs(supply.sum() - demand.sum()) > 1e-9 * std::max(1.0, supply.sum()))
        throw Error("solve_transport: unbalanced masses");
    if ((cost.array() < 0).any()) throw Error("solve_transport: negative costs");

    constexpr double kInf = std::numeric_limits<double>::infinity();
    constexpr double kMassTol = 1e-14;

    Eigen::VectorXd remA = supply, remB = demand;
    Eigen::MatrixXd flow = Eigen::MatrixXd::Zero(n, m);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(n), v = Eigen::VectorXd::Zero(m);

    double total = 0.0;
    while (remB.sum() > kMassTol * std::max(1.0, demand.sum())) {
        // Dijkstra over the residual bipartite graph from all rows with
        // remaining supply; reduced costs are nonnegative by induction.
        Eigen::VectorXd da = Eigen::VectorXd::Constant(n, kInf);
        Eigen::VectorXd db = Eigen::VectorXd::Constant(m, kInf);
        std::vector<int> prevB(m, -1); // row used to reach column j
        std::vector<int> prevA(n, -1); // column used to reach row i (residual arc)
        std::vector<char> doneA(n, 0), doneB(m, 0);
        for (int i = 0; i < n; ++i)
            if (remA[i] > kMassTol) da[i] = 0.0;

        int target = -1;
        while (true) {
            // pick the unfinished node with the smallest tentative distance
            double best = kInf;
            int bi = -1, bj = -1;
            for (int i = 0; i < n; ++i)
                if (!doneA[i] && da[i] < best) { best = da[i]; bi = i; bj = -1; }
            for (int j = 0; j < m; ++j)
                if (!doneB[j] && db[j] < best) { best = db[j]; bj = j; bi = -1; }
            if (bi < 0 && bj < 0) break;
            if (bj >= 0) {
                doneB[bj] = 1;
                if (remB[bj] > kMassTol && target < 0) target = bj;
                // residual arcs column -> row where flow is positive
                for (int i = 0; i < n; ++i) {
                    if (doneA[i] || flow(i, bj) <= kMassTol) continue;
                    const double red = -(cost(i, bj) - u[i] - v[bj]); // reverse arc
                    const double nd = db[bj] + red;
                    if (nd < da[i] - 1e-15) { da[i] = nd; prevA[i] = bj; }
                }
            } else {
                doneA[bi] = 1;
                for (int j = 0; j < m; ++j) {
                    if (doneB[j]) continue;
                    const double red = cost(bi, j) - u[bi] - v[j];
                    const double nd = da[bi] + red;
                    if (nd < db[j] - 1e-15) { db[j] = nd; prevB[j] = bi; }
                }
            }
        }
        if (target < 0) throw Error("solve_transport: no augmenting path (numerical)");

        // Johnson potential update keeps reduced costs nonnegative:
        // pi(node) += min(dist(node), dist(target)) for every reached node.
        const double dt = db[target];
        for (int i = 0; i < n; ++i)
            if (da[i] < kInf) u[i] -= std::min(da[i], dt);
        for (int j = 0; j < m; ++j)
            if (db[j] < kInf) v[j] += std::min(db[j], dt);

        // Bottleneck along target <- row <- column <- ... <- supply row.
        double push = remB[target];
        for (int j = target;;) {
            const int i = prevB[j];
            if (prevA[i] < 0) {
                push = std::min(push, remA[i]);
                break;
            }
            const int jp = prevA[i];
            push = std::min(push, flow(i, jp));
            j = jp;
        }
        // Apply the augmentation.
        for (int j = target;;) {
            const int i = prevB[j];
            flow(i, j) += push;
            total += push * cost(i, j);
            if (prevA[i] < 0) {
                remA[i] -= push;
                break;
            }
            const int jp = prevA[i];
            flow(i, jp) -= push;
            total -= push * cost(i, jp);
            j = jp;
        }
        remB[target] -= push;
    }
    return total;
}

double wasserstein_exact(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p, int cap)
{
    if (mu.size() != nu.size()) throw SizeMismatch("wasserstein_exact: atom counts differ");
    if (!mu.uniform() || !nu.uniform()) throw Error("wasserstein_exact: uniform weights required");
    if (mu.dim() != nu.dim()) throw DimensionMismatch("wasserstein_exact: dimensions differ");
    if (mu.size() > cap) throw CapExceeded("wasserstein_exact: size exceeds cap");

    const int n = mu.size();
    Eigen::MatrixXd cost(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            cost(i, j) = std::pow((mu.points().row(i) - nu.points().row(j)).norm(), p);
    const double total = solve_assignment(cost);
    return std::pow(total / n, 1.0 / p);
}

EntropicResult wasserstein_entropic(const EmpiricalLaw& mu, const EmpiricalLaw& nu, double p,
                                    double epsilon, int max_iter)
{
    if (epsilon <= 0.0) throw InvalidParam("wasserstein_entropic: epsilon must be positive");
    if (mu.dim() != nu.dim()) throw DimensionMismatch("wasserstein_entropic: dimensions differ");

    const int n = mu.size(), m = nu.size();
    Eigen::MatrixXd cost(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            cost(i, j) = std::pow((mu.points().row(i) - nu.points().row(j)).norm(), p);

    const Eigen::VectorXd loga = mu.weights().array().log();
    const Eigen::VectorXd logb = nu.weights().array().log();

    // Log-domain Sinkhorn with epsilon annealing: start warm, halve
    // toward the target regularization.
    const double cmax = cost.maxCoeff();
    double eps = std::max(epsilon, 0.25 * std::max(cmax, 1e-300));
    Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(m);

    EntropicResult res;
    constexpr double kMarginalTol = 1e-6;
    int used = 0;

    auto lse_rows = [&](const Eigen::MatrixXd& M) -> Eigen::VectorXd { // log sum exp per row
        const Eigen::VectorXd c = M.rowwise().maxCoeff();
        return c.array() + ((M.colwise() - c).array().exp().rowwise().sum()).log();
    };

    while (true) {
        const bool last_level = eps <= epsilon * (1.0 + 1e-12);
        const int level_budget = last_level ? (max_iter - used) : std::min(50, max_iter - used);
        for (int it = 0; it < level_budget; ++it) {
            // f_i = -eps * logsumexp_j(logb_j + (g_j - C_ij)/eps), then symmetrically for g.
            Eigen::MatrixXd A = ((-cost).rowwise() + g.transpose()) / eps;
            A = A.rowwise() + logb.transpose();
            f = -eps * lse_rows(A);
            Eigen::MatrixXd B = ((-cost).colwise() + f) / eps;
            B = B.colwise() + loga;
            g = -eps * lse_rows(B.transpose());
            ++used;

            // Row-marginal violation of the implied plan.
            Eigen::MatrixXd logpi = (((-cost).colwise() + f).rowwise() + g.transpose()) / eps;
            logpi = (logpi.colwise() + loga).rowwise() + logb.transpose();
            const Eigen::VectorXd rowsum = logpi.array().exp().matrix().rowwise().sum();
            res.marginal_error = (rowsum - mu.weights()).cwiseAbs().sum();
            if (res.marginal_error < kMarginalTol && it >= 1) break;
            if (used >= max_iter) break;
        }
        if (last_level || used >= max_iter) break;
        eps = std::max(epsilon, 0.5 * eps);
    }

    Eigen::MatrixXd logpi = (((-cost).colwise() + f).rowwise() + g.transpose()) / eps;
    logpi = (logpi.colwise() + loga).rowwise() + logb.transpose();
    const Eigen::MatrixXd pi = logpi.array().exp().matrix();
    const double transport = (pi.array() * cost.array()).sum();
    res.value = std::pow(std::max(transport, 0.0), 1.0 / p);
    res.iterations = used;
    res.converged = res.marginal_error < kMarginalTol;
    return res;
}

PathEnsemble::PathEnsemble(std::vector<Eigen::MatrixXd> frames, Eigen::VectorXd time_grid)
    : frames_(std::move(frames)), time_grid_(std::move(time_grid))
{
    if (frames_.empty()) throw Error("PathEnsemble: no frames");
    if (static_cast<int>(frames_.size()) != time_grid_.size())
        throw GridMismatch("PathEnsemble: frames/grid size mismatch");
    if (time_grid_[0] != 0.0) throw Error("PathEnsemble: grid must start at 0");
    for (int k = 1; k < time_grid_.size(); ++k)
        if (time_grid_[k] <= time_grid_[k - 1]) throw Error("PathEnsemble: grid must strictly increase");
    n_ = static_cast<int>(frames_[0].rows());
    d_ = static_cast<int>(frames_[0].cols());
    for (const auto& fr : frames_) {
        if (fr.rows() != n_ || fr.cols() != d_) throw SizeMismatch("PathEnsemble: ragged frames");
        check_finite(fr, "PathEnsemble");
    }
}

EmpiricalLaw PathEnsemble::marginal(int frame_index) const
{
    return EmpiricalLaw(frames_.at(frame_index));
}

namespace {
constexpr std::uint32_t kEnsMagic = 0x4D46454Eu; // "MFEN"
constexpr std::uint32_t kEnsVersion = 1;
} // namespace

void PathEnsemble::save(const std::string& path) const
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("PathEnsemble::save: cannot open " + path);
    auto put32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    put32(kEnsMagic);
    put32(kEnsVersion);
    put32(static_cast<std::uint32_t>(n_));
    put32(static_cast<std::uint32_t>(steps()));
    put32(static_cast<std::uint32_t>(d_));
    os.write(reinterpret_cast<const char*>(time_grid_.data()),
             static_cast<std::streamsize>(sizeof(double)) * time_grid_.size());
    for (const auto& fr : frames_) {
        // row-major atom blocks, frame by frame
        for (int i = 0; i < n_; ++i)
            for (int j = 0; j < d_; ++j) {
                const double v = fr(i, j);
                os.write(reinterpret_cast<const char*>(&v), sizeof(double));
            }
    }
    if (!os) throw Error("PathEnsemble::save: write failed for " + path);
}

PathEnsemble PathEnsemble::load(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("PathEnsemble::load: cannot open " + path);
    auto get32 = [&]() {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    if (get32() != kEnsMagic) throw Error("PathEnsemble::load: bad magic in " + path);
    if (get32() != kEnsVersion) throw Error("PathEnsemble::load: unsupported version in " + path);
    const int n = static_cast<int>(get32());
    const int steps = static_cast<int>(get32());
    const int d = static_cast<int>(get32());
    Eigen::VectorXd grid(steps + 1);
    is.read(reinterpret_cast<char*>(grid.data()), static_cast<std::streamsize>(sizeof(double)) * (steps + 1));
    std::vector<Eigen::MatrixXd> frames(steps + 1);
    for (auto& fr : frames) {
        fr.resize(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                double v;
                is.read(reinterpret_cast<char*>(&v), sizeof(double));
                fr(i, j) = v;
            }
    }
    if (!is) throw Error("PathEnsemble::load: truncated file " + path);
    return PathEnsemble(std::move(frames), std::move(grid));
}

void PathEnsemble::write_csv(std::ostream& os) const
{
    os << "t,particle";
    for (int j = 0; j < d_; ++j) os << ",x" << j;
    os << "\n";
    os.precision(17);
    for (int k = 0; k < static_cast<int>(frames_.size()); ++k)
        for (int i = 0; i < n_; ++i) {
            os << time_grid_[k] << "," << i;
            for (int j = 0; j < d_; ++j) os << "," << frames_[k](i, j);
            os << "\n";
        }
}

double truncated_path_distance(const PathEnsemble& a, const PathEnsemble& b, double t, double p, int cap)
{
    if (a.time_grid().size() != b.time_grid().size() || (a.time_grid() - b.time_grid()).cwiseAbs().maxCoeff() > 0.0)
        throw GridMismatch("truncated_path_distance: time grids differ");
    if (a.size() != b.size()) throw SizeMismatch("truncated_path_distance: ensemble sizes differ");
    if (a.size() > cap) throw CapExceeded("truncated_path_distance: size exceeds cap");

    int kmax = -1;
    for (int k = 0; k < a.time_grid().size(); ++k)
        if (a.time_grid()[k] <= t + 1e-12) kmax = k;
    if (kmax < 0 || a.time_grid()[kmax] < t - 1e-12)
        throw GridMismatch("truncated_path_distance: t is not a grid point");

    const int n = a.size();
    Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(n, n);
    for (int k = 0; k <= kmax; ++k) {
        const auto& fa = a.frames()[k];
        const auto& fb = b.frames()[k];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                cost(i, j) = std::max(cost(i, j), (fa.row(i) - fb.row(j)).norm());
    }
    cost = cost.array().pow(p);
    const double total = solve_assignment(cost);
    return std::pow(total / n, 1.0 / p);
}

} // namespace mfct
