#ifndef MFCT_EXPERIMENT_HPP
#define MFCT_EXPERIMENT_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfct/optimize.hpp"

namespace mfct {

// Strict key-value config with [section] headers and '#' comments. Unknown
// sections or keys are rejected against the experiment schema.
class Config {
public:
    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key, const std::string& dflt) const;
    double get_num(const std::string& section, const std::string& key, double dflt) const;
    long get_int(const std::string& section, const std::string& key, long dflt) const;
    bool get_bool(const std::string& section, const std::string& key, bool dflt) const;
    std::vector<double> get_list(const std::string& section, const std::string& key) const;

    const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct PolicyGeometry {
    std::string family = "linear"; // linear | constant | table
    int knots = 6;
    int table_t_cells = 1;
    int table_x_cells = 9;
    double table_x_radius = 0.3;
};

struct ScheduleConfig {
    std::vector<int> n_values = {50, 100, 200, 400};
    int seeds_per_n = 10;
    bool warm_start = true;
    double mid_fraction = 0.5;
    int subsample_cap = 512;
    int n_ref = 1600;
    // Seeds pooled into each cell's recorded value estimate (the optimized
    // policy is cheap to re-evaluate; the searches are not).
    int value_seeds = 8;
};

struct ChatterConfig {
    int j_min = 1;
    int j_max = 6;
    int base_intervals = 64;
    std::vector<double> actions;  // scalar atoms; empty: finite-set atoms
    std::vector<double> weights;  // empty: uniform
};

// One file configures everything: model, simulation, optimizer, schedule,
// chattering study and output paths.
struct ExperimentConfig {
    std::string model_name = "lq_meanfield";
    std::map<std::string, double> model_params;
    SimConfig sim;
    OptimizeConfig opt;
    int eval_seed_count = 1;
    PolicyGeometry policy;
    ScheduleConfig schedule;
    ChatterConfig chatter_cfg;
    std::string out_dir = "out";
    int workers = 1;

    static ExperimentConfig from_config(const Config& cfg);
    static ExperimentConfig from_file(const std::string& path);

    ModelSpec make_model() const;
    FeedbackPolicy make_policy_family(const ModelSpec& model) const;
    // Stable hash of everything that determines results (resume guard).
    std::uint64_t content_hash() const;
};

struct CellRecord {
    int n = 0;
    int seed_index = 0;
    std::uint64_t cell_seed = 0;
    double opt_value = 0.0;
    double opt_se = 0.0;
    double eps_hat = 0.0;
    double eps_se = 0.0;
    double w2_terminal = 0.0;
    double w2_mid = 0.0;
    double coupling_gap = 0.0;
    std::vector<double> theta;
    bool ok = false;
    std::string error;

    std::string to_json(std::uint64_t config_hash) const;
    static CellRecord from_json(const std::string& text, std::uint64_t expect_hash);
};

struct ConvergenceRun {
    std::vector<int> n_schedule;
    int seeds_per_n = 0;
    double reference_value = 0.0;
    double reference_se = 0.0;
    std::vector<CellRecord> records;
    bool partial = false;
    std::optional<double> slope_w2;       // log-log slope of median terminal W2 vs n
    std::optional<double> slope_coupling; // log-log slope of median coupling gap vs n

    std::vector<double> median_per_n(double CellRecord::* field) const;
};

// Reference statistics shared by the harnesses: optimal value and sampled
// state clouds at the terminal and mid horizons.
struct ReferenceArtifacts {
    double value = 0.0;
    double value_se = 0.0;
    Eigen::MatrixXd terminal_cloud; // n_ref x d
    Eigen::MatrixXd mid_cloud;      // n_ref x d
    MeasureFlow flow;               // reference measure flow on the sim grid
    FeedbackPolicy policy;          // reference (oracle or MKV-optimized) policy
};

// Builds (or loads from the content-addressed cache under out_dir/cache)
// the reference artifacts: the LQ oracle when the model is lq_meanfield,
// otherwise an MKV-optimized policy with a decoupled reference ensemble at
// schedule.n_ref particles.
ReferenceArtifacts build_reference(const ExperimentConfig& cfg);

// Optimize the n-state system along the schedule and measure terminal and
// mid-horizon W2 distances to the reference law plus eps-optimality gaps.
ConvergenceRun run_forward_limit(const ExperimentConfig& cfg);

// Apply the reference policy to the interacting system along the schedule;
// eps_hat compares the n-state optimized value to the reference policy's
// value at the same n, and the coupling gap is recorded per cell.
ConvergenceRun run_converse_limit(const ExperimentConfig& cfg);

struct ChatterRow {
    int j = 0;
    int refinement = 0;
    double gamma_strict = 0.0;
    double gamma_strict_se = 0.0;
    double gap = 0.0;
    double gap_se = 0.0;
};

struct ChatterStudy {
    double gamma_relaxed = 0.0;
    double gamma_relaxed_se = 0.0;
    std::vector<ChatterRow> rows;
};

// Evaluate a relaxed control and its chattered approximations chatter(q,2^j)
// for j in [j_min, j_max] with common random numbers on the finest grid.
ChatterStudy run_chattering_study(const ExperimentConfig& cfg);

// Persistence: run manifest (JSON), record table (CSV), ensembles (binary).
void write_convergence_outputs(const ConvergenceRun& run, const ExperimentConfig& cfg, const std::string& kind);
void write_chatter_outputs(const ChatterStudy& study, const ExperimentConfig& cfg);

// Least-squares slope of log(values) against log(ns); values must be
// positive where used.
double loglog_slope_fit(const std::vector<double>& ns, const std::vector<double>& values);

// Seeded equal-size subsample pair + exact W2 (the harness's distance to a
// reference cloud).
double w2_subsampled(const EmpiricalLaw& a, const EmpiricalLaw& b, int cap, std::uint64_t seed);

// FNV-1a 64-bit, used for record checksums and cache keys.
std::uint64_t fnv1a(const std::string& text);

} // namespace mfct

#endif
