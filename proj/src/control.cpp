#include "mfct/control.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace mfct {

namespace {
constexpr double kWeightTol = 1e-12;
}

// ---------------------------------------------------------------------------
// RelaxedControl

RelaxedControl::RelaxedControl(Eigen::VectorXd time_grid, std::vector<AtomList> intervals)
    : grid_(std::move(time_grid)), atoms_(std::move(intervals))
{
    if (grid_.size() < 2) throw InvalidParam("RelaxedControl: grid needs at least two points");
    if (grid_[0] != 0.0) throw InvalidParam("RelaxedControl: grid must start at 0");
    for (int k = 1; k < grid_.size(); ++k)
        if (grid_[k] <= grid_[k - 1]) throw InvalidParam("RelaxedControl: grid must strictly increase");
    if (static_cast<int>(atoms_.size()) != grid_.size() - 1)
        throw InvalidParam("RelaxedControl: interval count mismatch");
    int k_dim = -1;
    for (const auto& al : atoms_) {
        if (al.count() < 1) throw InvalidParam("RelaxedControl: empty interval");
        if (al.actions.cols() != al.weights.size()) throw InvalidParam("RelaxedControl: atoms/weights mismatch");
        if (k_dim < 0) k_dim = static_cast<int>(al.actions.rows());
        if (al.actions.rows() != k_dim) throw InvalidParam("RelaxedControl: ragged action dimension");
        if ((al.weights.array() < 0.0).any()) throw InvalidParam("RelaxedControl: negative weight");
        if (std::abs(al.weights.sum() - 1.0) > kWeightTol)
            throw InvalidParam("RelaxedControl: interval weights must sum to 1");
        if (!al.actions.allFinite()) throw InvalidParam("RelaxedControl: non-finite action");
    }
}

int RelaxedControl::interval_of(double t) const
{
    const int K = intervals();
    if (t <= grid_[0]) return 0;
    if (t >= grid_[K]) return K - 1;
    // first grid point strictly greater than t, then step back
    int lo = 0, hi = K;
    while (lo < hi) {
        const int mid = (lo + hi) / 2;
        if (grid_[mid + 1] > t) hi = mid;
        else lo = mid + 1;
    }
    return lo;
}

bool RelaxedControl::is_strict() const
{
    for (const auto& al : atoms_)
        if (al.count() != 1) return false;
    return true;
}

double RelaxedControl::max_atom_norm() const
{
    double m = 0.0;
    for (const auto& al : atoms_)
        for (int j = 0; j < al.count(); ++j) m = std::max(m, al.actions.col(j).norm());
    return m;
}

void RelaxedControl::validate_in(const ActionSet& set) const
{
    for (const auto& al : atoms_)
        for (int j = 0; j < al.count(); ++j)
            if (!set.contains(al.actions.col(j), 1e-9))
                throw ActionOutOfSet("RelaxedControl: atom outside the action set");
}

void RelaxedControl::save(std::ostream& os) const
{
    os.precision(17);
    os << "relaxed_control 1\n";
    os << "grid " << grid_.size();
    for (int i = 0; i < grid_.size(); ++i) os << " " << grid_[i];
    os << "\n";
    for (const auto& al : atoms_) {
        os << "interval " << al.count() << " " << al.actions.rows() << "\n";
        for (int j = 0; j < al.count(); ++j) {
            os << "  atom";
            for (int r = 0; r < al.actions.rows(); ++r) os << " " << al.actions(r, j);
            os << " w " << al.weights[j] << "\n";
        }
    }
}

RelaxedControl RelaxedControl::load(std::istream& is)
{
    std::string tag;
    int version = 0;
    is >> tag >> version;
    if (tag != "relaxed_control" || version != 1) throw Error("RelaxedControl::load: bad header");
    int gn = 0;
    is >> tag >> gn;
    if (tag != "grid" || gn < 2) throw Error("RelaxedControl::load: bad grid");
    Eigen::VectorXd grid(gn);
    for (int i = 0; i < gn; ++i) is >> grid[i];
    std::vector<AtomList> atoms;
    for (int k = 0; k < gn - 1; ++k) {
        int m = 0, kd = 0;
        is >> tag >> m >> kd;
        if (tag != "interval") throw Error("RelaxedControl::load: bad interval");
        AtomList al;
        al.actions.resize(kd, m);
        al.weights.resize(m);
        for (int j = 0; j < m; ++j) {
            is >> tag;
            if (tag != "atom") throw Error("RelaxedControl::load: bad atom");
            for (int r = 0; r < kd; ++r) is >> al.actions(r, j);
            is >> tag >> al.weights[j];
        }
        atoms.push_back(std::move(al));
    }
    if (!is) throw Error("RelaxedControl::load: truncated stream");
    return RelaxedControl(std::move(grid), std::move(atoms));
}

RelaxedControl strict_from_path(const std::vector<Eigen::VectorXd>& actions, Eigen::VectorXd time_grid,
                                const ActionSet& set)
{
    if (actions.empty()) throw InvalidParam("strict_from_path: empty action list");
    if (static_cast<int>(actions.size()) != time_grid.size() - 1)
        throw InvalidParam("strict_from_path: one action per interval required");
    std::vector<AtomList> atoms;
    atoms.reserve(actions.size());
    for (const auto& a : actions) {
        if (!set.contains(a, 1e-9)) throw ActionOutOfSet("strict_from_path: action outside the set");
        AtomList al;
        al.actions = a;
        al.weights = Eigen::VectorXd::Ones(1);
        atoms.push_back(std::move(al));
    }
    return RelaxedControl(std::move(time_grid), std::move(atoms));
}

RelaxedControl constant_control(Eigen::VectorXd action, Eigen::VectorXd time_grid)
{
    const int K = static_cast<int>(time_grid.size()) - 1;
    std::vector<AtomList> atoms(K);
    for (auto& al : atoms) {
        al.actions = action;
        al.weights = Eigen::VectorXd::Ones(1);
    }
    return RelaxedControl(std::move(time_grid), std::move(atoms));
}

RelaxedControl truncate(const RelaxedControl& q, double radius, const ActionSet* set)
{
    if (!(radius > 0.0)) throw InvalidParam("truncate: radius must be positive");
    std::vector<AtomList> out;
    out.reserve(q.intervals());
    for (int k = 0; k < q.intervals(); ++k) {
        AtomList al = q.interval(k);
        for (int j = 0; j < al.count(); ++j) {
            Eigen::VectorXd a = al.actions.col(j);
            if (a.norm() <= radius) continue;
            if (set && set->kind() == ActionSet::Kind::Finite) {
                // nearest in-ball atom of the set; nearest-to-ball atom when
                // the set has no point inside the ball
                const auto& pts = set->points();
                int best = -1;
                double bestd = 0.0;
                for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
                    if (pts[i].norm() > radius) continue;
                    const double d = (pts[i] - a).norm();
                    if (best < 0 || d < bestd) {
                        best = i;
                        bestd = d;
                    }
                }
                if (best < 0) {
                    for (int i = 0; i < static_cast<int>(pts.size()); ++i)
                        if (best < 0 || pts[i].norm() < pts[best].norm()) best = i;
                }
                al.actions.col(j) = pts[best];
            } else {
                al.actions.col(j) = a * (radius / a.norm());
            }
        }
        out.push_back(std::move(al));
    }
    return RelaxedControl(q.time_grid(), std::move(out));
}

namespace {

// Largest-remainder allocation of `cells` slots to `weights`; returns empty
// when some positive weight receives no slot.
std::vector<int> largest_remainder(const Eigen::VectorXd& weights, int cells)
{
    const int m = static_cast<int>(weights.size());
    std::vector<int> n(m, 0);
    std::vector<std::pair<double, int>> rem(m);
    int assigned = 0;
    for (int i = 0; i < m; ++i) {
        const double quota = weights[i] * cells;
        n[i] = static_cast<int>(std::floor(quota + 1e-12));
        assigned += n[i];
        rem[i] = {quota - n[i], i};
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second; // ties to the lower atom index
    });
    for (int l = 0; l < cells - assigned; ++l) n[rem[l % m].second] += 1;
    for (int i = 0; i < m; ++i)
        if (weights[i] > kWeightTol && n[i] == 0) return {};
    return n;
}

} // namespace

RelaxedControl chatter(const RelaxedControl& q, int refinement)
{
    if (refinement < 1) throw InvalidParam("chatter: refinement must be >= 1");
    const int K = q.intervals();
    const int R = refinement;

    // Per interval: pick the cycle length and cell allocation.
    struct Plan {
        int cycle_cells;
        std::vector<int> alloc;
        std::vector<int> atom_index; // nonzero-weight atoms, original indices
    };
    std::vector<Plan> plans(K);
    const double sqrtR = std::sqrt(static_cast<double>(R));
    for (int k = 0; k < K; ++k) {
        const AtomList& al = q.interval(k);
        std::vector<int> idx;
        for (int j = 0; j < al.count(); ++j)
            if (al.weights[j] > kWeightTol) idx.push_back(j);
        Eigen::VectorXd w(idx.size());
        for (std::size_t j = 0; j < idx.size(); ++j) w[j] = al.weights[idx[j]];
        w /= w.sum();

        Plan plan;
        plan.atom_index = idx;
        plan.cycle_cells = -1;
        for (int C = 1; C <= R; ++C) {
            if (R % C != 0) continue;
            if (C < static_cast<int>(idx.size())) continue;
            if (C + 1e-9 < sqrtR && C != R) continue; // cycles must shorten as R grows
            auto alloc = largest_remainder(w, C);
            if (alloc.empty()) continue;
            plan.cycle_cells = C;
            plan.alloc = std::move(alloc);
            break;
        }
        if (plan.cycle_cells < 0) {
            // last resort: a single whole-interval cycle
            auto alloc = largest_remainder(w, R);
            if (alloc.empty())
                throw RefinementTooCoarse("chatter: refinement " + std::to_string(R) +
                                          " cannot give every atom a cell in interval " + std::to_string(k));
            plan.cycle_cells = R;
            plan.alloc = std::move(alloc);
        }
        plans[k] = std::move(plan);
    }

    // Lay out the refined strict control.
    const int KR = K * R;
    Eigen::VectorXd grid(KR + 1);
    std::vector<AtomList> atoms;
    atoms.reserve(KR);
    grid[0] = 0.0;
    for (int k = 0; k < K; ++k) {
        const double t0 = q.time_grid()[k];
        const double dt = (q.time_grid()[k + 1] - t0) / R;
        const AtomList& al = q.interval(k);
        const Plan& plan = plans[k];
        const int cycles = R / plan.cycle_cells;
        int cell = 0;
        for (int c = 0; c < cycles; ++c) {
            for (std::size_t j = 0; j < plan.atom_index.size(); ++j) {
                for (int rep = 0; rep < plan.alloc[j]; ++rep) {
                    AtomList s;
                    s.actions = al.actions.col(plan.atom_index[j]);
                    s.weights = Eigen::VectorXd::Ones(1);
                    atoms.push_back(std::move(s));
                    ++cell;
                    grid[k * R + cell] = (cell == R) ? q.time_grid()[k + 1] : t0 + cell * dt;
                }
            }
        }
    }
    return RelaxedControl(std::move(grid), std::move(atoms));
}

void effective_coefficients(const ModelSpec& model, double t, Eigen::Ref<const Eigen::VectorXd> x,
                            const MeasureView& m, const AtomList& atoms, Eigen::Ref<Eigen::VectorXd> drift_bar,
                            Eigen::Ref<Eigen::MatrixXd> vol_bar)
{
    const int d = model.dim_state();
    const int dw = model.dim_noise();
    const int na = atoms.count();

    thread_local Eigen::VectorXd b;
    thread_local Eigen::MatrixXd sig, avg;
    b.resize(d);
    sig.resize(d, dw);
    avg.setZero(d, d);

    drift_bar.setZero();
    for (int j = 0; j < na; ++j) {
        const double w = atoms.weights[j];
        model.drift(t, x, m, atoms.actions.col(j), b);
        drift_bar += w * b;
        model.volatility(t, x, m, atoms.actions.col(j), sig);
        avg.noalias() += w * (sig * sig.transpose());
    }

    if (d == 1) {
        const double v = avg(0, 0);
        if (v < -1e-10) throw NotPSD("effective_coefficients: negative averaged variance");
        vol_bar(0, 0) = std::sqrt(std::max(v, 0.0));
        return;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(avg);
    Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() < -1e-10) throw NotPSD("effective_coefficients: averaged matrix is not PSD");
    ev = ev.cwiseMax(0.0).cwiseSqrt();
    vol_bar = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// FeedbackPolicy

FeedbackPolicy FeedbackPolicy::constant(const ActionSet& set, Eigen::VectorXd action)
{
    FeedbackPolicy p(Family::Constant, set);
    p.dim_action_ = set.dim();
    if (action.size() != set.dim()) throw InvalidParam("FeedbackPolicy::constant: action dimension mismatch");
    p.theta_ = std::move(action);
    p.scratch_.resize(set.dim());
    return p;
}

FeedbackPolicy FeedbackPolicy::linear(const ActionSet& set, int dim_state, Eigen::VectorXd knot_times)
{
    if (knot_times.size() < 1) throw InvalidParam("FeedbackPolicy::linear: need at least one knot");
    for (int i = 1; i < knot_times.size(); ++i)
        if (knot_times[i] <= knot_times[i - 1]) throw InvalidParam("FeedbackPolicy::linear: knots must increase");
    FeedbackPolicy p(Family::Linear, set);
    p.dim_state_ = dim_state;
    p.dim_action_ = set.dim();
    p.knots_ = std::move(knot_times);
    const int nk = static_cast<int>(p.knots_.size());
    p.theta_ = Eigen::VectorXd::Zero(nk * set.dim() * dim_state + nk * set.dim());
    p.scratch_.resize(set.dim());
    return p;
}

FeedbackPolicy FeedbackPolicy::table(const ActionSet& set, Eigen::VectorXd t_centers,
                                     std::vector<Eigen::VectorXd> x_centers_per_dim)
{
    if (t_centers.size() < 1) throw InvalidParam("FeedbackPolicy::table: need t cells");
    if (x_centers_per_dim.empty()) throw InvalidParam("FeedbackPolicy::table: need x cells");
    FeedbackPolicy p(Family::Table, set);
    p.dim_state_ = static_cast<int>(x_centers_per_dim.size());
    p.dim_action_ = set.dim();
    p.t_centers_ = std::move(t_centers);
    p.x_centers_ = std::move(x_centers_per_dim);
    long cells = p.t_centers_.size();
    for (const auto& xc : p.x_centers_) {
        if (xc.size() < 1) throw InvalidParam("FeedbackPolicy::table: empty x grid");
        cells *= xc.size();
    }
    p.theta_ = Eigen::VectorXd::Zero(cells * set.dim());
    p.scratch_.resize(set.dim());
    return p;
}

void FeedbackPolicy::set_params(Eigen::VectorXd theta)
{
    if (theta.size() != theta_.size()) throw InvalidParam("FeedbackPolicy::set_params: size mismatch");
    theta_ = std::move(theta);
}

namespace {

int nearest_index(const Eigen::VectorXd& centers, double v)
{
    int best = 0;
    double bestd = std::abs(v - centers[0]);
    for (int i = 1; i < centers.size(); ++i) {
        const double d = std::abs(v - centers[i]);
        if (d < bestd) {
            bestd = d;
            best = i;
        }
    }
    return best;
}

} // namespace

void FeedbackPolicy::evaluate(double t, Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> out) const
{
    const int k = dim_action_;
    switch (family_) {
    case Family::Constant:
        set_.project(theta_, out);
        return;
    case Family::Linear: {
        const int nk = static_cast<int>(knots_.size());
        const int d = dim_state_;
        // locate the bracketing knots and interpolate gains/offsets
        int j1 = 0;
        double w = 0.0;
        if (t <= knots_[0]) {
            j1 = 0;
        } else if (t >= knots_[nk - 1]) {
            j1 = nk - 1;
        } else {
            while (j1 + 1 < nk && knots_[j1 + 1] < t) ++j1;
            w = (t - knots_[j1]) / (knots_[j1 + 1] - knots_[j1]);
        }
        const int j2 = std::min(j1 + 1, nk - 1);
        const int gsz = k * d;
        scratch_.setZero();
        for (int r = 0; r < k; ++r) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                const double g1 = theta_[j1 * gsz + r * d + c];
                const double g2 = theta_[j2 * gsz + r * d + c];
                acc += ((1.0 - w) * g1 + w * g2) * x[c];
            }
            const double o1 = theta_[nk * gsz + j1 * k + r];
            const double o2 = theta_[nk * gsz + j2 * k + r];
            acc += (1.0 - w) * o1 + w * o2;
            scratch_[r] = acc;
        }
        set_.project(scratch_, out);
        return;
    }
    case Family::Table: {
        long idx = nearest_index(t_centers_, t);
        for (int cdim = 0; cdim < dim_state_; ++cdim)
            idx = idx * x_centers_[cdim].size() + nearest_index(x_centers_[cdim], x[cdim]);
        scratch_ = theta_.segment(idx * k, k);
        set_.project(scratch_, out);
        return;
    }
    }
}

void FeedbackPolicy::save(std::ostream& os) const
{
    os.precision(17);
    os << "feedback_policy 1\n";
    switch (family_) {
    case Family::Constant:
        os << "family constant\n";
        break;
    case Family::Linear: {
        os << "family linear\n";
        os << "dim_state " << dim_state_ << "\n";
        os << "knots " << knots_.size();
        for (int i = 0; i < knots_.size(); ++i) os << " " << knots_[i];
        os << "\n";
        break;
    }
    case Family::Table: {
        os << "family table\n";
        os << "t_centers " << t_centers_.size();
        for (int i = 0; i < t_centers_.size(); ++i) os << " " << t_centers_[i];
        os << "\n";
        os << "x_dims " << x_centers_.size() << "\n";
        for (const auto& xc : x_centers_) {
            os << "x_centers " << xc.size();
            for (int i = 0; i < xc.size(); ++i) os << " " << xc[i];
            os << "\n";
        }
        break;
    }
    }
    os << "theta " << theta_.size();
    for (int i = 0; i < theta_.size(); ++i) os << " " << theta_[i];
    os << "\n";
}

FeedbackPolicy FeedbackPolicy::load(std::istream& is, const ActionSet& set)
{
    std::string tag, fam;
    int version = 0;
    is >> tag >> version;
    if (tag != "feedback_policy" || version != 1) throw Error("FeedbackPolicy::load: bad header");
    is >> tag >> fam;
    if (tag != "family") throw Error("FeedbackPolicy::load: bad family line");

    auto read_theta = [&is](FeedbackPolicy& p) {
        std::string t;
        long n = 0;
        is >> t >> n;
        if (t != "theta") throw Error("FeedbackPolicy::load: bad theta line");
        Eigen::VectorXd theta(n);
        for (long i = 0; i < n; ++i) is >> theta[i];
        p.set_params(std::move(theta));
    };

    if (fam == "constant") {
        FeedbackPolicy p = FeedbackPolicy::constant(set, Eigen::VectorXd::Zero(set.dim()));
        read_theta(p);
        return p;
    }
    if (fam == "linear") {
        int d = 0, nk = 0;
        is >> tag >> d;
        if (tag != "dim_state") throw Error("FeedbackPolicy::load: bad dim_state");
        is >> tag >> nk;
        Eigen::VectorXd knots(nk);
        for (int i = 0; i < nk; ++i) is >> knots[i];
        FeedbackPolicy p = FeedbackPolicy::linear(set, d, std::move(knots));
        read_theta(p);
        return p;
    }
    if (fam == "table") {
        int nt = 0;
        is >> tag >> nt;
        Eigen::VectorXd tc(nt);
        for (int i = 0; i < nt; ++i) is >> tc[i];
        int nd = 0;
        is >> tag >> nd;
        std::vector<Eigen::VectorXd> xcs(nd);
        for (auto& xc : xcs) {
            int nx = 0;
            is >> tag >> nx;
            xc.resize(nx);
            for (int i = 0; i < nx; ++i) is >> xc[i];
        }
        FeedbackPolicy p = FeedbackPolicy::table(set, std::move(tc), std::move(xcs));
        read_theta(p);
        return p;
    }
    throw Error("FeedbackPolicy::load: unknown family " + fam);
}

// ---------------------------------------------------------------------------
// Bounded-Lipschitz diagnostic

double control_bl_distance(const RelaxedControl& a, const RelaxedControl& b, int quantization)
{
    if (std::abs(a.horizon() - b.horizon()) > 1e-12)
        throw GridMismatch("control_bl_distance: horizons differ");
    const double T = a.horizon();

    // Common time cells: union of both grids refined to roughly the
    // requested quantization.
    std::vector<double> edges;
    for (int i = 0; i < a.time_grid().size(); ++i) edges.push_back(a.time_grid()[i]);
    for (int i = 0; i < b.time_grid().size(); ++i) edges.push_back(b.time_grid()[i]);
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end(),
                            [](double x, double y) { return std::abs(x - y) < 1e-13; }),
                edges.end());
    std::vector<double> cells; // cell start points, closed by T at the end
    const double target = T / std::max(quantization, 1);
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
        const double len = edges[i + 1] - edges[i];
        const int sub = std::max(1, static_cast<int>(std::round(len / target)));
        for (int s = 0; s < sub; ++s) cells.push_back(edges[i] + len * s / sub);
    }
    cells.push_back(T);

    // Discretize each control: atom (t_mid, action) with mass len * w / T.
    struct Pt {
        double t;
        Eigen::VectorXd act;
        double mass;
    };
    auto quantize = [&](const RelaxedControl& q) {
        std::vector<Pt> pts;
        for (std::size_t c = 0; c + 1 < cells.size(); ++c) {
            const double mid = 0.5 * (cells[c] + cells[c + 1]);
            const double len = cells[c + 1] - cells[c];
            const AtomList& al = q.interval(q.interval_of(mid));
            for (int j = 0; j < al.count(); ++j) {
                if (al.weights[j] <= kWeightTol) continue;
                pts.push_back({mid, al.actions.col(j), len * al.weights[j] / T});
            }
        }
        return pts;
    };
    const auto pa = quantize(a);
    const auto pb = quantize(b);

    Eigen::VectorXd sa(pa.size()), sb(pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) sa[i] = pa[i].mass;
    for (std::size_t j = 0; j < pb.size(); ++j) sb[j] = pb[j].mass;
    Eigen::MatrixXd cost(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pb.size(); ++j)
            cost(i, j) = std::min(std::abs(pa[i].t - pb[j].t) + (pa[i].act - pb[j].act).norm(), 2.0);
    return solve_transport(cost, sa, sb);
}

} // namespace mfct
