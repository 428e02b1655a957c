// Command-line front end: assumption validation, single simulations, policy
// optimization, the convergence harnesses and the chattering study. Every
// subcommand takes --config/--seed/--out; exit code 0 means the run
// completed without partial cells.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "mfct/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mfct;

namespace {

struct CommonArgs {
    std::string config_path;
    long seed = -1;
    std::string out_dir;
};

ExperimentConfig load_config(const CommonArgs& args)
{
    ExperimentConfig cfg = args.config_path.empty() ? ExperimentConfig{}
                                                    : ExperimentConfig::from_file(args.config_path);
    if (args.seed >= 0) cfg.sim.seed = static_cast<std::uint64_t>(args.seed);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args)
{
    cmd->add_option("--config", args.config_path, "experiment config file");
    cmd->add_option("--seed", args.seed, "master seed override");
    cmd->add_option("--out", args.out_dir, "output directory override");
}

json report_to_json(const ValidationReport& rep)
{
    json j;
    j["pass"] = rep.pass;
    j["checks"] = json::array();
    for (const auto& c : rep.checks)
        j["checks"].push_back({{"name", c.name},
                               {"constant", c.constant},
                               {"exponent_excess", c.exponent_excess},
                               {"pass", c.pass},
                               {"detail", c.detail}});
    return j;
}

int cmd_validate(const CommonArgs& args)
{
    const ExperimentConfig cfg = load_config(args);
    const ModelSpec model = cfg.make_model();
    ProbePlan plan;
    plan.seed = cfg.sim.seed;
    const ValidationReport growth = validate_growth(model, plan);
    const ValidationReport lipschitz = validate_lipschitz(model, plan);

    json j;
    j["model"] = model.name();
    j["growth"] = report_to_json(growth);
    j["lipschitz"] = report_to_json(lipschitz);
    fs::create_directories(cfg.out_dir);
    std::ofstream os(fs::path(cfg.out_dir) / "validation.json");
    os << j.dump(2) << "\n";

    for (const auto& rep : {std::make_pair("growth", &growth), std::make_pair("lipschitz", &lipschitz)})
        for (const auto& c : rep.second->checks)
            std::cout << rep.first << "/" << c.name << ": " << (c.pass ? "pass" : "FAIL")
                      << " (constant " << c.constant << ")\n";
    std::cout << "report: " << (fs::path(cfg.out_dir) / "validation.json").string() << "\n";
    return 0;
}

int cmd_simulate(const CommonArgs& args)
{
    const ExperimentConfig cfg = load_config(args);
    const ModelSpec model = cfg.make_model();
    const FeedbackPolicy policy = cfg.make_policy_family(model);
    const SimOutput out = simulate_nsystem(model, cfg.sim, policy);
    const ObjectiveEstimate est = estimate_n_objective(model, out);

    fs::create_directories(cfg.out_dir);
    out.paths.save((fs::path(cfg.out_dir) / "paths.ens").string());
    {
        std::ofstream csv(fs::path(cfg.out_dir) / "summary.csv");
        csv.precision(17);
        csv << "particle,terminal_state,reward\n";
        const auto& terminal = out.paths.frames().back();
        for (int i = 0; i < out.paths.size(); ++i)
            csv << i << "," << terminal(i, 0) << "," << out.reward_samples[i] << "\n";
    }
    {
        std::ofstream os(fs::path(cfg.out_dir) / "objective.json");
        os << est.to_json(cfg.sim.seed) << "\n";
    }
    std::cout << "value " << est.value << " +- " << est.std_error << (out.diagnostics.nan_flag ? " [blowup]" : "")
              << "\n";
    return out.diagnostics.nan_flag ? 1 : 0;
}

int cmd_optimize(const CommonArgs& args, const std::string& target_name)
{
    const ExperimentConfig cfg = load_config(args);
    const ModelSpec model = cfg.make_model();
    OptimizeConfig opt = cfg.opt;
    opt.eval_seeds.clear();
    for (int i = 0; i < cfg.eval_seed_count; ++i)
        opt.eval_seeds.push_back(derive_seed(cfg.sim.seed, static_cast<std::uint32_t>(i), 0x100));
    opt.opt_seed = cfg.sim.seed;
    const OptTarget target = (target_name == "mkv") ? OptTarget::MkvFixedPoint : OptTarget::NSystem;

    const OptimizeResult res = optimize_policy(model, cfg.sim, opt, cfg.make_policy_family(model), target);

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream trace(fs::path(cfg.out_dir) / "optimize_trace.jsonl");
        for (std::size_t it = 0; it < res.value_history.size(); ++it) {
            json j;
            j["iteration"] = it;
            j["best_value"] = res.value_history[it];
            if (it < res.theta_history.size()) {
                const auto& th = res.theta_history[it];
                j["theta"] = std::vector<double>(th.data(), th.data() + th.size());
            }
            trace << j.dump() << "\n";
        }
    }
    {
        std::ofstream os(fs::path(cfg.out_dir) / "policy.txt");
        res.policy.save(os);
    }
    {
        std::ofstream os(fs::path(cfg.out_dir) / "best.json");
        os << res.best.to_json(cfg.sim.seed) << "\n";
    }
    std::cout << "best " << res.best.value << " +- " << res.best.std_error << "\n";
    return 0;
}

int cmd_forward(const CommonArgs& args)
{
    const ExperimentConfig cfg = load_config(args);
    const ConvergenceRun run = run_forward_limit(cfg);
    write_convergence_outputs(run, cfg, "fwd");
    const auto med = run.median_per_n(&CellRecord::w2_terminal);
    std::cout << "median terminal W2 per n:";
    for (double v : med) std::cout << " " << v;
    std::cout << "\nstatus: " << (run.partial ? "partial" : "complete") << "\n";
    return run.partial ? 1 : 0;
}

int cmd_converse(const CommonArgs& args)
{
    const ExperimentConfig cfg = load_config(args);
    const ConvergenceRun run = run_converse_limit(cfg);
    write_convergence_outputs(run, cfg, "cnv");
    const auto med = run.median_per_n(&CellRecord::eps_hat);
    std::cout << "median eps_hat per n:";
    for (double v : med) std::cout << " " << v;
    std::cout << "\nstatus: " << (run.partial ? "partial" : "complete") << "\n";
    return run.partial ? 1 : 0;
}

int cmd_chatter(const CommonArgs& args)
{
    const ExperimentConfig cfg = load_config(args);
    const ChatterStudy study = run_chattering_study(cfg);
    write_chatter_outputs(study, cfg);
    std::cout << "relaxed " << study.gamma_relaxed << " +- " << study.gamma_relaxed_se << "\n";
    for (const auto& r : study.rows)
        std::cout << "j=" << r.j << " gap " << r.gap << " +- " << r.gap_se << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"mean-field control toolkit"};
    app.require_subcommand(1);

    CommonArgs a_validate, a_simulate, a_optimize, a_forward, a_converse, a_chatter;
    std::string opt_target = "n_system";

    add_common(app.add_subcommand("validate", "probe the model assumptions"), a_validate);
    add_common(app.add_subcommand("simulate", "run one interacting simulation"), a_simulate);
    auto* oc = app.add_subcommand("optimize", "optimize a feedback policy");
    add_common(oc, a_optimize);
    oc->add_option("--target", opt_target, "n_system or mkv");
    add_common(app.add_subcommand("converge-forward", "n-state optima vs the mean-field optimum"), a_forward);
    add_common(app.add_subcommand("converge-converse", "mean-field optimum applied to n-state systems"), a_converse);
    add_common(app.add_subcommand("chatter", "relaxed vs chattered strict controls"), a_chatter);

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("validate")) return cmd_validate(a_validate);
        if (app.got_subcommand("simulate")) return cmd_simulate(a_simulate);
        if (app.got_subcommand("optimize")) return cmd_optimize(a_optimize, opt_target);
        if (app.got_subcommand("converge-forward")) return cmd_forward(a_forward);
        if (app.got_subcommand("converge-converse")) return cmd_converse(a_converse);
        if (app.got_subcommand("chatter")) return cmd_chatter(a_chatter);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
    return 2;
}
