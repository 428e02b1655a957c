#include "mfct/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace mfct {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

Config Config::parse_string(const std::string& text)
{
    Config cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section");
            cfg.sections_[section]; // create
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (cfg.sections_[section].count(key)) throw ConfigError("config: duplicate key " + section + "." + key);
        cfg.sections_[section][key] = value;
    }
    return cfg;
}

Config Config::parse_file(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_string(ss.str());
}

bool Config::has(const std::string& section, const std::string& key) const
{
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string Config::get(const std::string& section, const std::string& key, const std::string& dflt) const
{
    auto s = sections_.find(section);
    if (s == sections_.end()) return dflt;
    auto k = s->second.find(key);
    return k == s->second.end() ? dflt : k->second;
}

double Config::get_num(const std::string& section, const std::string& key, double dflt) const
{
    if (!has(section, key)) return dflt;
    const std::string v = get(section, key, "");
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + section + "." + key + " is not a number: " + v);
    }
}

long Config::get_int(const std::string& section, const std::string& key, long dflt) const
{
    if (!has(section, key)) return dflt;
    const double x = get_num(section, key, 0.0);
    const long r = static_cast<long>(std::llround(x));
    if (std::abs(x - r) > 1e-9) throw ConfigError("config: " + section + "." + key + " must be an integer");
    return r;
}

bool Config::get_bool(const std::string& section, const std::string& key, bool dflt) const
{
    if (!has(section, key)) return dflt;
    const std::string v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: " + section + "." + key + " must be a boolean");
}

std::vector<double> Config::get_list(const std::string& section, const std::string& key) const
{
    std::vector<double> out;
    if (!has(section, key)) return out;
    std::stringstream ss(get(section, key, ""));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ExperimentConfig

namespace {

void check_section_keys(const Config& cfg, const std::string& section, const std::vector<std::string>& allowed)
{
    auto it = cfg.sections().find(section);
    if (it == cfg.sections().end()) return;
    for (const auto& [k, v] : it->second)
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw ConfigError("config: unknown key " + section + "." + k);
}

} // namespace

ExperimentConfig ExperimentConfig::from_config(const Config& cfg)
{
    for (const auto& [sec, kv] : cfg.sections()) {
        static const std::vector<std::string> known = {"model", "sim", "optimize", "schedule", "chatter", "output"};
        if (std::find(known.begin(), known.end(), sec) == known.end())
            throw ConfigError("config: unknown section [" + sec + "]");
    }
    check_section_keys(cfg, "sim", {"n_particles", "steps", "seed", "noise_ref_steps"});
    check_section_keys(cfg, "optimize",
                       {"method", "population", "elite_frac", "iters", "init_sigma", "sigma_floor", "simplex_scale",
                        "resolution", "radius", "eval_seeds", "penalty_blowup", "polish_iters", "family", "knots", "table_t_cells",
                        "table_x_cells", "table_x_radius", "mkv_max_iter", "mkv_tol"});
    check_section_keys(cfg, "schedule",
                       {"n_values", "seeds_per_n", "warm_start", "mid_fraction", "subsample_cap", "n_ref",
                        "value_seeds"});
    check_section_keys(cfg, "chatter", {"j_min", "j_max", "base_intervals", "actions", "weights"});
    check_section_keys(cfg, "output", {"dir", "workers"});

    ExperimentConfig e;
    e.model_name = cfg.get("model", "name", "lq_meanfield");
    if (auto it = cfg.sections().find("model"); it != cfg.sections().end())
        for (const auto& [k, v] : it->second)
            if (k != "name") e.model_params[k] = cfg.get_num("model", k, 0.0);
    // reject unknown model parameters right away
    (void)builtin_params(e.model_name, e.model_params);

    e.sim.n_particles = static_cast<int>(cfg.get_int("sim", "n_particles", 400));
    e.sim.steps = static_cast<int>(cfg.get_int("sim", "steps", 100));
    e.sim.seed = static_cast<std::uint64_t>(cfg.get_int("sim", "seed", 1));
    e.sim.noise_ref_steps = static_cast<int>(cfg.get_int("sim", "noise_ref_steps", 0));

    const std::string method = cfg.get("optimize", "method", "cross_entropy");
    if (method == "cross_entropy") {
        CrossEntropyOpts co;
        co.population = static_cast<int>(cfg.get_int("optimize", "population", co.population));
        co.elite_frac = cfg.get_num("optimize", "elite_frac", co.elite_frac);
        co.iters = static_cast<int>(cfg.get_int("optimize", "iters", co.iters));
        co.init_sigma = cfg.get_num("optimize", "init_sigma", co.init_sigma);
        co.sigma_floor = cfg.get_num("optimize", "sigma_floor", co.sigma_floor);
        e.opt.method = co;
    } else if (method == "nelder_mead") {
        NelderMeadOpts nm;
        nm.iters = static_cast<int>(cfg.get_int("optimize", "iters", nm.iters));
        nm.simplex_scale = cfg.get_num("optimize", "simplex_scale", nm.simplex_scale);
        e.opt.method = nm;
    } else if (method == "grid") {
        GridOpts go;
        go.resolution = static_cast<int>(cfg.get_int("optimize", "resolution", go.resolution));
        go.radius = cfg.get_num("optimize", "radius", go.radius);
        e.opt.method = go;
    } else {
        throw ConfigError("config: optimize.method must be cross_entropy, nelder_mead or grid");
    }
    e.eval_seed_count = static_cast<int>(cfg.get_int("optimize", "eval_seeds", 1));
    if (e.eval_seed_count < 1) throw ConfigError("config: optimize.eval_seeds must be >= 1");
    e.opt.penalty_blowup = cfg.get_num("optimize", "penalty_blowup", e.opt.penalty_blowup);
    e.opt.mkv_max_iter = static_cast<int>(cfg.get_int("optimize", "mkv_max_iter", e.opt.mkv_max_iter));
    e.opt.mkv_tol = cfg.get_num("optimize", "mkv_tol", e.opt.mkv_tol);
    e.opt.polish_iters = static_cast<int>(cfg.get_int("optimize", "polish_iters", e.opt.polish_iters));

    e.policy.family = cfg.get("optimize", "family", e.policy.family);
    e.policy.knots = static_cast<int>(cfg.get_int("optimize", "knots", e.policy.knots));
    e.policy.table_t_cells = static_cast<int>(cfg.get_int("optimize", "table_t_cells", e.policy.table_t_cells));
    e.policy.table_x_cells = static_cast<int>(cfg.get_int("optimize", "table_x_cells", e.policy.table_x_cells));
    e.policy.table_x_radius = cfg.get_num("optimize", "table_x_radius", e.policy.table_x_radius);

    if (cfg.has("schedule", "n_values")) {
        e.schedule.n_values.clear();
        for (double v : cfg.get_list("schedule", "n_values")) e.schedule.n_values.push_back(static_cast<int>(v));
        if (e.schedule.n_values.empty()) throw ConfigError("config: schedule.n_values is empty");
        for (std::size_t i = 1; i < e.schedule.n_values.size(); ++i)
            if (e.schedule.n_values[i] <= e.schedule.n_values[i - 1])
                throw ConfigError("config: schedule.n_values must increase");
    }
    e.schedule.seeds_per_n = static_cast<int>(cfg.get_int("schedule", "seeds_per_n", e.schedule.seeds_per_n));
    e.schedule.warm_start = cfg.get_bool("schedule", "warm_start", e.schedule.warm_start);
    e.schedule.mid_fraction = cfg.get_num("schedule", "mid_fraction", e.schedule.mid_fraction);
    e.schedule.subsample_cap = static_cast<int>(cfg.get_int("schedule", "subsample_cap", e.schedule.subsample_cap));
    e.schedule.n_ref = static_cast<int>(cfg.get_int("schedule", "n_ref", e.schedule.n_ref));
    e.schedule.value_seeds = static_cast<int>(cfg.get_int("schedule", "value_seeds", e.schedule.value_seeds));

    e.chatter_cfg.j_min = static_cast<int>(cfg.get_int("chatter", "j_min", e.chatter_cfg.j_min));
    e.chatter_cfg.j_max = static_cast<int>(cfg.get_int("chatter", "j_max", e.chatter_cfg.j_max));
    e.chatter_cfg.base_intervals = static_cast<int>(cfg.get_int("chatter", "base_intervals", e.chatter_cfg.base_intervals));
    e.chatter_cfg.actions = cfg.get_list("chatter", "actions");
    e.chatter_cfg.weights = cfg.get_list("chatter", "weights");

    e.out_dir = cfg.get("output", "dir", e.out_dir);
    e.workers = static_cast<int>(cfg.get_int("output", "workers", e.workers));
    e.opt.workers = 1; // candidate evals stay sequential; cells parallelize
    return e;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path)
{
    return from_config(Config::parse_file(path));
}

ModelSpec ExperimentConfig::make_model() const
{
    return builtin_model(model_name, model_params);
}

FeedbackPolicy ExperimentConfig::make_policy_family(const ModelSpec& model) const
{
    const auto& set = model.action_set();
    if (policy.family == "constant") return FeedbackPolicy::constant(set, Eigen::VectorXd::Zero(set.dim()));
    if (policy.family == "linear") {
        Eigen::VectorXd knots;
        if (policy.knots <= 1) {
            knots = Eigen::VectorXd::Zero(1);
        } else {
            knots = uniform_grid(model.horizon(), policy.knots - 1);
        }
        return FeedbackPolicy::linear(set, model.dim_state(), std::move(knots));
    }
    if (policy.family == "table") {
        Eigen::VectorXd tc(policy.table_t_cells);
        for (int i = 0; i < policy.table_t_cells; ++i)
            tc[i] = model.horizon() * (i + 0.5) / policy.table_t_cells;
        std::vector<Eigen::VectorXd> xcs(model.dim_state());
        for (auto& xc : xcs) {
            xc.resize(policy.table_x_cells);
            for (int i = 0; i < policy.table_x_cells; ++i)
                xc[i] = -policy.table_x_radius +
                        2.0 * policy.table_x_radius * (policy.table_x_cells == 1 ? 0.5 : static_cast<double>(i) /
                                                       (policy.table_x_cells - 1));
        }
        return FeedbackPolicy::table(set, std::move(tc), std::move(xcs));
    }
    throw ConfigError("config: optimize.family must be constant, linear or table");
}

std::uint64_t fnv1a(const std::string& text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t ExperimentConfig::content_hash() const
{
    std::ostringstream ss;
    ss.precision(17);
    ss << "model " << model_name;
    for (const auto& [k, v] : model_params) ss << " " << k << "=" << v;
    ss << "; sim " << sim.n_particles << " " << sim.steps << " " << sim.seed << " " << sim.noise_ref_steps;
    ss << "; opt ";
    std::visit(
        [&](const auto& m) {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, CrossEntropyOpts>)
                ss << "cem " << m.population << " " << m.elite_frac << " " << m.iters << " " << m.init_sigma << " "
                   << m.sigma_floor;
            else if constexpr (std::is_same_v<M, NelderMeadOpts>)
                ss << "nm " << m.iters << " " << m.simplex_scale;
            else
                ss << "grid " << m.resolution << " " << m.radius;
        },
        opt.method);
    ss << " seeds " << eval_seed_count << " pen " << opt.penalty_blowup << " mkv " << opt.mkv_max_iter << " "
       << opt.mkv_tol << " polish " << opt.polish_iters;
    ss << "; policy " << policy.family << " " << policy.knots << " " << policy.table_t_cells << " "
       << policy.table_x_cells << " " << policy.table_x_radius;
    ss << "; sched";
    for (int n : schedule.n_values) ss << " " << n;
    ss << " x" << schedule.seeds_per_n << " warm " << schedule.warm_start << " mid " << schedule.mid_fraction
       << " cap " << schedule.subsample_cap << " nref " << schedule.n_ref << " vseeds "
       << schedule.value_seeds;
    ss << "; chatter " << chatter_cfg.j_min << " " << chatter_cfg.j_max << " " << chatter_cfg.base_intervals;
    for (double a : chatter_cfg.actions) ss << " a" << a;
    for (double w : chatter_cfg.weights) ss << " w" << w;
    return fnv1a(ss.str());
}

// ---------------------------------------------------------------------------
// Records

std::string CellRecord::to_json(std::uint64_t config_hash) const
{
    json j;
    j["config_hash"] = config_hash;
    j["n"] = n;
    j["seed_index"] = seed_index;
    j["cell_seed"] = cell_seed;
    j["opt_value"] = opt_value;
    j["opt_se"] = opt_se;
    j["eps_hat"] = eps_hat;
    j["eps_se"] = eps_se;
    j["w2_terminal"] = w2_terminal;
    j["w2_mid"] = w2_mid;
    j["coupling_gap"] = coupling_gap;
    j["theta"] = theta;
    j["ok"] = ok;
    j["error"] = error;
    return j.dump();
}

CellRecord CellRecord::from_json(const std::string& text, std::uint64_t expect_hash)
{
    const json j = json::parse(text);
    if (j.at("config_hash").get<std::uint64_t>() != expect_hash)
        throw Error("cell record was produced by a different configuration");
    CellRecord r;
    r.n = j.at("n").get<int>();
    r.seed_index = j.at("seed_index").get<int>();
    r.cell_seed = j.at("cell_seed").get<std::uint64_t>();
    r.opt_value = j.at("opt_value").get<double>();
    r.opt_se = j.at("opt_se").get<double>();
    r.eps_hat = j.at("eps_hat").get<double>();
    r.eps_se = j.at("eps_se").get<double>();
    r.w2_terminal = j.at("w2_terminal").get<double>();
    r.w2_mid = j.at("w2_mid").get<double>();
    r.coupling_gap = j.at("coupling_gap").get<double>();
    r.theta = j.at("theta").get<std::vector<double>>();
    r.ok = j.at("ok").get<bool>();
    r.error = j.at("error").get<std::string>();
    return r;
}

std::vector<double> ConvergenceRun::median_per_n(double CellRecord::* field) const
{
    std::vector<double> medians;
    for (int n : n_schedule) {
        std::vector<double> vals;
        for (const auto& r : records)
            if (r.n == n && r.ok) vals.push_back(r.*field);
        if (vals.empty()) {
            medians.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        std::sort(vals.begin(), vals.end());
        const std::size_t m = vals.size();
        medians.push_back(m % 2 ? vals[m / 2] : 0.5 * (vals[m / 2 - 1] + vals[m / 2]));
    }
    return medians;
}

double loglog_slope_fit(const std::vector<double>& ns, const std::vector<double>& values)
{
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < ns.size(); ++i)
        if (std::isfinite(values[i]) && values[i] > 0.0) {
            lx.push_back(std::log(ns[i]));
            ly.push_back(std::log(values[i]));
        }
    if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    const double n = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i];
        sy += ly[i];
        sxx += lx[i] * lx[i];
        sxy += lx[i] * ly[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

double w2_subsampled(const EmpiricalLaw& a, const EmpiricalLaw& b, int cap, std::uint64_t seed)
{
    const int m = std::min({a.size(), b.size(), cap});
    const CounterRng rng(seed, Stream::Subsample);
    auto subsample = [&](const EmpiricalLaw& law, std::uint32_t salt) {
        if (law.size() == m) return law.points();
        // partial Fisher-Yates over indices
        std::vector<int> idx(law.size());
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < m; ++i) {
            const auto r = static_cast<int>(rng.uint64(salt, static_cast<std::uint32_t>(i), 0) %
                                            static_cast<std::uint64_t>(law.size() - i));
            std::swap(idx[i], idx[i + r]);
        }
        Eigen::MatrixXd pts(m, law.dim());
        for (int i = 0; i < m; ++i) pts.row(i) = law.points().row(idx[i]);
        return pts;
    };
    const EmpiricalLaw sa(subsample(a, 1));
    const EmpiricalLaw sb(subsample(b, 2));
    return wasserstein_exact(sa, sb, 2.0, cap);
}

// ---------------------------------------------------------------------------
// Reference artifacts

namespace {

Eigen::MatrixXd gaussian_cloud(double mean, double var, int n, const CounterRng& rng, std::uint32_t salt)
{
    Eigen::MatrixXd pts(n, 1);
    const double sd = std::sqrt(std::max(var, 0.0));
    for (int i = 0; i < n; ++i)
        pts(i, 0) = mean + sd * rng.normal(static_cast<std::uint32_t>(i), salt, 0);
    return pts;
}

std::vector<std::uint64_t> derived_seeds(std::uint64_t base, int count, std::uint32_t salt)
{
    std::vector<std::uint64_t> s(count);
    for (int i = 0; i < count; ++i) s[i] = derive_seed(base, static_cast<std::uint32_t>(i), salt);
    return s;
}

template <typename Fn>
void run_parallel(int count, int workers, Fn&& fn)
{
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min(workers, count); ++t)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace

ReferenceArtifacts build_reference(const ExperimentConfig& cfg)
{
    const ModelSpec model = cfg.make_model();
    const std::uint64_t key = fnv1a("reference " + std::to_string(cfg.content_hash()));
    const fs::path cache_dir = fs::path(cfg.out_dir) / "cache";
    const fs::path meta_path = cache_dir / ("ref_" + std::to_string(key) + ".json");
    const fs::path term_path = cache_dir / ("ref_" + std::to_string(key) + "_terminal.ens");
    const fs::path mid_path = cache_dir / ("ref_" + std::to_string(key) + "_mid.ens");

    const int steps = cfg.sim.steps;
    const int kmid = static_cast<int>(std::lround(steps * cfg.schedule.mid_fraction));

    if (fs::exists(meta_path) && fs::exists(term_path) && fs::exists(mid_path)) {
        std::ifstream is(meta_path);
        std::stringstream ss;
        ss << is.rdbuf();
        const json j = json::parse(ss.str());
        if (j.at("key").get<std::uint64_t>() == key) {
            ReferenceArtifacts ref{j.at("value").get<double>(),
                                   j.at("value_se").get<double>(),
                                   PathEnsemble::load(term_path.string()).frames()[0],
                                   PathEnsemble::load(mid_path.string()).frames()[0],
                                   MeasureFlow(),
                                   cfg.make_policy_family(model)};
            // flow and policy are cheap to rebuild deterministically
            if (model.name() == "lq_meanfield") {
                OracleSolution sol = solve_lq_oracle(model, steps);
                ref.flow = sol.mean_flow;
                ref.policy = sol.policy;
            } else {
                std::istringstream ps(j.at("policy").get<std::string>());
                ref.policy = FeedbackPolicy::load(ps, model.action_set());
                FixedPointResult fp = mkv_fixed_point(model, SimConfig{cfg.schedule.n_ref, steps, cfg.sim.seed, 0, 1e8},
                                                      ref.policy, cfg.opt.mkv_max_iter, cfg.opt.mkv_tol);
                ref.flow = fp.flow;
            }
            return ref;
        }
    }

    ReferenceArtifacts ref{0.0, 0.0, Eigen::MatrixXd(), Eigen::MatrixXd(), MeasureFlow(),
                           cfg.make_policy_family(model)};
    const std::uint64_t ref_seed = derive_seed(cfg.sim.seed, 0x0ef5u, 0);
    const CounterRng rng(ref_seed, Stream::Reference);

    if (model.name() == "lq_meanfield") {
        OracleSolution sol = solve_lq_oracle(model, steps);
        ref.value = sol.value;
        ref.value_se = 0.0;
        ref.flow = sol.mean_flow;
        ref.policy = sol.policy;
        ref.terminal_cloud = gaussian_cloud(sol.mean_path[steps], sol.var_path[steps], cfg.schedule.n_ref, rng, 0);
        ref.mid_cloud = gaussian_cloud(sol.mean_path[kmid], sol.var_path[kmid], cfg.schedule.n_ref, rng, 1);
    } else {
        // MKV-optimized reference: search the policy family on the
        // mean-field objective, then sample a decoupled ensemble.
        OptimizeConfig opt = cfg.opt;
        opt.eval_seeds = derived_seeds(ref_seed, cfg.eval_seed_count, 0x100);
        opt.opt_seed = ref_seed;
        SimConfig scfg = cfg.sim;
        scfg.n_particles = cfg.schedule.n_ref;
        OptimizeResult res = optimize_policy(model, scfg, opt, cfg.make_policy_family(model),
                                             OptTarget::MkvFixedPoint);
        ref.policy = res.policy;
        ref.value = res.best.value;
        ref.value_se = res.best.std_error;
        SimConfig rcfg = scfg;
        rcfg.seed = derive_seed(ref_seed, 0x200, 0);
        FixedPointResult fp = mkv_fixed_point(model, rcfg, ref.policy, cfg.opt.mkv_max_iter, cfg.opt.mkv_tol);
        ref.flow = fp.flow;
        SimOutput out = simulate_decoupled(model, rcfg, fp.flow, ref.policy);
        ref.terminal_cloud = out.paths.frames()[steps];
        ref.mid_cloud = out.paths.frames()[kmid];
    }

    fs::create_directories(cache_dir);
    {
        Eigen::VectorXd zero_grid = Eigen::VectorXd::Zero(1);
        PathEnsemble(std::vector<Eigen::MatrixXd>{ref.terminal_cloud}, zero_grid).save(term_path.string());
        PathEnsemble(std::vector<Eigen::MatrixXd>{ref.mid_cloud}, zero_grid).save(mid_path.string());
        json j;
        j["key"] = key;
        j["value"] = ref.value;
        j["value_se"] = ref.value_se;
        std::ostringstream ps;
        ref.policy.save(ps);
        j["policy"] = ps.str();
        std::ofstream os(meta_path);
        os << j.dump(2) << "\n";
    }
    return ref;
}

// ---------------------------------------------------------------------------
// Convergence harnesses

namespace {

struct CellPaths {
    fs::path dir;
    fs::path of(const std::string& kind, int n, int seed_index) const
    {
        return dir / (kind + "_n" + std::to_string(n) + "_s" + std::to_string(seed_index) + ".json");
    }
};

std::optional<CellRecord> try_load_cell(const fs::path& p, std::uint64_t hash)
{
    if (!fs::exists(p)) return std::nullopt;
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return CellRecord::from_json(ss.str(), hash);
    } catch (const std::exception&) {
        return std::nullopt; // stale or foreign cell: recompute
    }
}

void store_cell(const fs::path& p, const CellRecord& r, std::uint64_t hash)
{
    fs::create_directories(p.parent_path());
    std::ofstream os(p);
    os << r.to_json(hash) << "\n";
}

ConvergenceRun run_schedule(const ExperimentConfig& cfg, const std::string& kind, bool forward)
{
    const ModelSpec model = cfg.make_model();
    const ReferenceArtifacts ref = build_reference(cfg);
    const std::uint64_t hash = cfg.content_hash();
    const CellPaths cells{fs::path(cfg.out_dir) / "cells"};

    ConvergenceRun run;
    run.n_schedule = cfg.schedule.n_values;
    run.seeds_per_n = cfg.schedule.seeds_per_n;
    run.reference_value = ref.value;
    run.reference_se = ref.value_se;
    run.records.resize(run.n_schedule.size() * run.seeds_per_n);

    const int steps = cfg.sim.steps;
    const int kmid = static_cast<int>(std::lround(steps * cfg.schedule.mid_fraction));
    const EmpiricalLaw ref_terminal(ref.terminal_cloud);
    const EmpiricalLaw ref_mid(ref.mid_cloud);

    // Seed chains are independent; each walks the schedule with optional
    // warm starting, so chains parallelize and cells within a chain do not.
    run_parallel(run.seeds_per_n, cfg.workers, [&](int s) {
        std::vector<double> warm_theta;
        for (std::size_t ni = 0; ni < run.n_schedule.size(); ++ni) {
            const int n = run.n_schedule[ni];
            CellRecord rec;
            rec.n = n;
            rec.seed_index = s;
            rec.cell_seed = derive_seed(cfg.sim.seed, static_cast<std::uint32_t>(ni),
                                        static_cast<std::uint32_t>(s) + (forward ? 0u : 0x80000000u));

            const fs::path cell_path = cells.of(kind, n, s);
            if (auto cached = try_load_cell(cell_path, hash)) {
                rec = *cached;
            } else {
                try {
                    SimConfig scfg = cfg.sim;
                    scfg.n_particles = n;

                    // the search budget is uniform along the schedule, so
                    // smaller systems optimize less precisely (that is the
                    // operational epsilon_n); the winner's value is then
                    // measured on a pooled seed set scaled with max(n)/n so
                    // the measurement noise is uniform too
                    const int max_n = run.n_schedule.back();
                    const int scale = std::max(1, (max_n + n - 1) / n);

                    OptimizeConfig opt = cfg.opt;
                    opt.eval_seeds = derived_seeds(rec.cell_seed, cfg.eval_seed_count, 0x100);
                    opt.opt_seed = rec.cell_seed;

                    FeedbackPolicy family = cfg.make_policy_family(model);
                    if (cfg.schedule.warm_start && !warm_theta.empty())
                        family.set_params(Eigen::Map<const Eigen::VectorXd>(warm_theta.data(),
                                                                            static_cast<long>(warm_theta.size())));

                    OptimizeResult res = optimize_policy(model, scfg, opt, family, OptTarget::NSystem);
                    std::vector<std::uint64_t> vseeds;
                    for (int i = 0; i < cfg.schedule.value_seeds * scale; ++i)
                        vseeds.push_back(derive_seed(rec.cell_seed, 0x700u + static_cast<std::uint32_t>(i), 0));
                    const ObjectiveEstimate pooled = evaluate_policy_estimate(
                        model, scfg, vseeds, res.policy, OptTarget::NSystem, opt.mkv_max_iter, opt.mkv_tol);
                    rec.opt_value = pooled.value;
                    rec.opt_se = pooled.std_error;
                    rec.theta.assign(res.policy.params().data(),
                                     res.policy.params().data() + res.policy.params().size());

                    if (forward) {
                        const EpsilonReport er = epsilon_report(ref.value, ref.value_se, pooled);
                        rec.eps_hat = er.epsilon_hat;
                        rec.eps_se = er.combined_std_error;
                    } else {
                        // reference policy evaluated on the same pooled seeds
                        const ObjectiveEstimate under_ref = evaluate_policy_estimate(
                            model, scfg, vseeds, ref.policy, OptTarget::NSystem, opt.mkv_max_iter, opt.mkv_tol);
                        const EpsilonReport er = epsilon_report(rec.opt_value, rec.opt_se, under_ref);
                        rec.eps_hat = er.epsilon_hat;
                        rec.eps_se = er.combined_std_error;
                    }

                    // simulate the optimized policy and measure distances
                    SimConfig ecfg = scfg;
                    ecfg.seed = derive_seed(rec.cell_seed, 0x51u, 0);
                    SimOutput out = simulate_nsystem(model, ecfg, res.policy);
                    rec.w2_terminal = w2_subsampled(out.paths.marginal(steps), ref_terminal,
                                                    cfg.schedule.subsample_cap, derive_seed(rec.cell_seed, 0x52u, 0));
                    rec.w2_mid = w2_subsampled(out.paths.marginal(kmid), ref_mid, cfg.schedule.subsample_cap,
                                               derive_seed(rec.cell_seed, 0x53u, 0));

                    SimConfig ccfg = scfg;
                    ccfg.seed = derive_seed(rec.cell_seed, 0x54u, 0);
                    rec.coupling_gap = couple_from_mkv(model, ccfg, ref.flow, ref.policy).coupling_gap;

                    rec.ok = true;
                } catch (const std::exception& ex) {
                    rec.ok = false;
                    rec.error = ex.what();
                }
                store_cell(cell_path, rec, hash);
            }
            if (rec.ok) warm_theta = rec.theta;
            run.records[ni * run.seeds_per_n + s] = rec;
        }
    });

    for (const auto& r : run.records) run.partial = run.partial || !r.ok;

    std::vector<double> ns(run.n_schedule.begin(), run.n_schedule.end());
    if (run.n_schedule.size() >= 2) {
        const auto w2 = run.median_per_n(&CellRecord::w2_terminal);
        const double sw = loglog_slope_fit(ns, w2);
        if (std::isfinite(sw)) run.slope_w2 = sw;
        const auto gap = run.median_per_n(&CellRecord::coupling_gap);
        const double sg = loglog_slope_fit(ns, gap);
        if (std::isfinite(sg)) run.slope_coupling = sg;
    }
    return run;
}

} // namespace

ConvergenceRun run_forward_limit(const ExperimentConfig& cfg)
{
    return run_schedule(cfg, "fwd", true);
}

ConvergenceRun run_converse_limit(const ExperimentConfig& cfg)
{
    return run_schedule(cfg, "cnv", false);
}

// ---------------------------------------------------------------------------
// Chattering study

ChatterStudy run_chattering_study(const ExperimentConfig& cfg)
{
    const ModelSpec model = cfg.make_model();
    const auto& cc = cfg.chatter_cfg;
    if (cc.j_min < 0 || cc.j_max < cc.j_min) throw ConfigError("chatter: need 0 <= j_min <= j_max");

    // base relaxed control: configured atoms, or the finite action set
    // with uniform weights
    AtomList base;
    if (!cc.actions.empty()) {
        const int m = static_cast<int>(cc.actions.size());
        base.actions.resize(1, m);
        for (int j = 0; j < m; ++j) base.actions(0, j) = cc.actions[j];
        if (cc.weights.empty())
            base.weights = Eigen::VectorXd::Constant(m, 1.0 / m);
        else {
            if (static_cast<int>(cc.weights.size()) != m) throw ConfigError("chatter: actions/weights mismatch");
            base.weights = Eigen::Map<const Eigen::VectorXd>(cc.weights.data(), m);
        }
    } else {
        if (model.action_set().kind() != ActionSet::Kind::Finite)
            throw ConfigError("chatter: specify actions for non-finite action sets");
        const auto& pts = model.action_set().points();
        const int m = static_cast<int>(pts.size());
        base.actions.resize(model.action_set().dim(), m);
        for (int j = 0; j < m; ++j) base.actions.col(j) = pts[j];
        base.weights = Eigen::VectorXd::Constant(m, 1.0 / m);
    }

    const int K = cc.base_intervals;
    std::vector<AtomList> per_interval(K, base);
    const RelaxedControl q(uniform_grid(model.horizon(), K), std::move(per_interval));
    q.validate_in(model.action_set());

    // everything runs on the finest grid with one noise field
    const int steps_fine = K * (1 << cc.j_max);
    SimConfig scfg = cfg.sim;
    scfg.steps = steps_fine;

    const int n = scfg.n_particles;
    auto controls_of = [&](const RelaxedControl& c) {
        return std::make_shared<const std::vector<RelaxedControl>>(n, c);
    };

    ChatterStudy study;
    {
        SimOutput out = simulate_nsystem(model, scfg, controls_of(q));
        const ObjectiveEstimate e = estimate_n_objective(model, out);
        study.gamma_relaxed = e.value;
        study.gamma_relaxed_se = e.std_error;
    }
    for (int j = cc.j_min; j <= cc.j_max; ++j) {
        const RelaxedControl qj = chatter(q, 1 << j);
        SimOutput out = simulate_nsystem(model, scfg, controls_of(qj));
        const ObjectiveEstimate e = estimate_n_objective(model, out);
        ChatterRow row;
        row.j = j;
        row.refinement = 1 << j;
        row.gamma_strict = e.value;
        row.gamma_strict_se = e.std_error;
        row.gap = std::abs(e.value - study.gamma_relaxed);
        row.gap_se = std::sqrt(e.std_error * e.std_error + study.gamma_relaxed_se * study.gamma_relaxed_se);
        study.rows.push_back(row);
    }
    return study;
}

// ---------------------------------------------------------------------------
// Outputs

void write_convergence_outputs(const ConvergenceRun& run, const ExperimentConfig& cfg, const std::string& kind)
{
    fs::create_directories(cfg.out_dir);
    const std::uint64_t hash = cfg.content_hash();

    {
        std::ofstream csv(fs::path(cfg.out_dir) / (kind + "_records.csv"));
        csv.precision(17);
        csv << "n,seed_index,cell_seed,opt_value,opt_se,eps_hat,eps_se,w2_terminal,w2_mid,coupling_gap,ok,error\n";
        for (const auto& r : run.records)
            csv << r.n << "," << r.seed_index << "," << r.cell_seed << "," << r.opt_value << "," << r.opt_se << ","
                << r.eps_hat << "," << r.eps_se << "," << r.w2_terminal << "," << r.w2_mid << "," << r.coupling_gap
                << "," << (r.ok ? 1 : 0) << "," << r.error << "\n";
    }

    json manifest;
    manifest["kind"] = kind;
    manifest["config_hash"] = hash;
    manifest["status"] = run.partial ? "partial" : "complete";
    manifest["n_schedule"] = run.n_schedule;
    manifest["seeds_per_n"] = run.seeds_per_n;
    manifest["reference_value"] = run.reference_value;
    manifest["reference_se"] = run.reference_se;
    if (run.slope_w2) manifest["slope_w2"] = *run.slope_w2;
    if (run.slope_coupling) manifest["slope_coupling"] = *run.slope_coupling;
    {
        const auto med_w2 = run.median_per_n(&CellRecord::w2_terminal);
        const auto med_eps = run.median_per_n(&CellRecord::eps_hat);
        const auto med_gap = run.median_per_n(&CellRecord::coupling_gap);
        manifest["median_w2_terminal"] = med_w2;
        manifest["median_eps_hat"] = med_eps;
        manifest["median_coupling_gap"] = med_gap;
    }
    json checks = json::object();
    for (const auto& r : run.records) {
        const std::string name = kind + "_n" + std::to_string(r.n) + "_s" + std::to_string(r.seed_index);
        checks[name] = fnv1a(r.to_json(hash));
    }
    manifest["record_checksums"] = checks;
    std::ofstream os(fs::path(cfg.out_dir) / (kind + "_manifest.json"));
    os << manifest.dump(2) << "\n";
}

void write_chatter_outputs(const ChatterStudy& study, const ExperimentConfig& cfg)
{
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream csv(fs::path(cfg.out_dir) / "chatter_table.csv");
        csv.precision(17);
        csv << "j,refinement,gamma_strict,gamma_strict_se,gap,gap_se\n";
        for (const auto& r : study.rows)
            csv << r.j << "," << r.refinement << "," << r.gamma_strict << "," << r.gamma_strict_se << "," << r.gap
                << "," << r.gap_se << "\n";
    }
    json manifest;
    manifest["kind"] = "chatter";
    manifest["config_hash"] = cfg.content_hash();
    manifest["status"] = "complete";
    manifest["gamma_relaxed"] = study.gamma_relaxed;
    manifest["gamma_relaxed_se"] = study.gamma_relaxed_se;
    std::ofstream os(fs::path(cfg.out_dir) / "chatter_manifest.json");
    os << manifest.dump(2) << "\n";
}

} // namespace mfct
