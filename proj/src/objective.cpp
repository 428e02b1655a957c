#include "mfct/objective.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

namespace mfct {

std::string ObjectiveEstimate::to_json(std::uint64_t seed) const
{
    nlohmann::json j;
    j["value"] = value;
    j["std_error"] = std_error;
    j["n"] = n_samples;
    j["components"] = {{"running", running}, {"terminal", terminal}};
    j["correlated_se"] = correlated_se;
    j["seed"] = seed;
    return j.dump();
}

Eigen::VectorXd per_particle_rewards(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow,
                                     double* running_mean, double* terminal_mean)
{
    const auto& grid = output.paths.time_grid();
    if (flow.size() != grid.size()) throw GridMismatch("per_particle_rewards: flow/grid length mismatch");
    const int n = output.paths.size();
    const int steps = output.paths.steps();

    Eigen::VectorXd running = Eigen::VectorXd::Zero(n);
    for (int k = 0; k < steps; ++k) {
        const double t = grid[k];
        const double dt = grid[k + 1] - grid[k];
        const MeasureView view = flow.view(k);
        const auto& frame = output.paths.frames()[k];
        for (int i = 0; i < n; ++i) {
            const auto atoms = output.controls.at(i, k);
            double f_acc = 0.0;
            for (int j = 0; j < atoms.count(); ++j)
                f_acc += atoms.weight(j) * model.running_reward(t, frame.row(i).transpose(), view, atoms.action(j));
            running[i] += dt * f_acc;
        }
    }
    Eigen::VectorXd terminal(n);
    {
        const MeasureView view = flow.view(steps);
        const auto& frame = output.paths.frames()[steps];
        for (int i = 0; i < n; ++i) terminal[i] = model.terminal_reward(frame.row(i).transpose(), view);
    }
    if (running_mean) *running_mean = running.mean();
    if (terminal_mean) *terminal_mean = terminal.mean();
    return running + terminal;
}

namespace {

ObjectiveEstimate aggregate(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow,
                            bool correlated)
{
    ObjectiveEstimate e;
    const Eigen::VectorXd rewards = per_particle_rewards(model, output, flow, &e.running, &e.terminal);
    const int n = static_cast<int>(rewards.size());
    e.n_samples = n;
    e.value = e.running + e.terminal;
    const double mean = rewards.mean();
    const double var = (rewards.array() - mean).square().sum() / std::max(1, n - 1);
    e.std_error = std::sqrt(var / n);
    e.correlated_se = correlated;
    return e;
}

} // namespace

ObjectiveEstimate estimate_gamma(const ModelSpec& model, const SimOutput& output, const MeasureFlow& flow)
{
    return aggregate(model, output, flow, false);
}

ObjectiveEstimate estimate_n_objective(const ModelSpec& model, const SimOutput& output)
{
    return aggregate(model, output, output.realized_flow, true);
}

} // namespace mfct
