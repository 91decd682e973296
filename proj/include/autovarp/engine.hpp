#pragma once

// The staged pipeline: PP -> S1 -> S2 -> MT across a cohort, with exact
// checkpoint naming, skip-if-done semantics, a hash-based continuation
// guard, the largest-S2 coasting optimization, decremental stimulus trains,
// and parameter-file emission for offline execution.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autovarp/cellmodel.hpp"
#include "autovarp/mesh.hpp"
#include "autovarp/plan.hpp"
#include "autovarp/prepace.hpp"
#include "autovarp/tissue.hpp"

namespace avp {

enum class Stage { PP, S1, S2, MT };
const char* to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct StudySpec {
    std::filesystem::path plan_path;
    std::filesystem::path cohort_dir;      // empty when case_dir set
    std::filesystem::path case_dir;        // single-subject directory
    std::filesystem::path protocols_path;  // optional external protocols file
    std::string electrodes_file;           // per-subject override file name, "" = none
    std::string configurations_file;
    Stage stage = Stage::MT;
    PrepaceMode prepace;
    int s1_cycles = 1;
    std::vector<double> ci_array = {};  // [ms], sorted ascending after validation
    int s2_cycles = 1;
    double decrement_s2 = 0;  // [ms]
    double mt_duration = 2000;
    bool overwrite = false;
    bool tissue_tuning = false;
    bool plot_restitution = false;
    int workers = 1;
    std::filesystem::path root = ".";  // outputs root (init/, sim_outputs/, ...)
};

// Enforces the spec invariants (cycle counts in 1..9, CI array sorted
// positive, decrement feasible); sorts ci_array in place.
void validate_spec(StudySpec& spec);

// --- checkpoint and activation-map file names ---
std::string lat_filename(const std::string& protocol, Propagation gen_lat,
                         const std::string& electrode);
std::string pp_checkpoint_name(const std::string& protocol, const std::string& meshname,
                               LimCyc lim_cyc, double pcl, double t);
std::string s1_checkpoint_name(const std::string& electrode, double pcl,
                               const std::string& meshname, double t);
std::string s2_checkpoint_name(const std::string& electrode, double pcl, double ci,
                               const std::string& meshname, double t);
std::string mt_checkpoint_name(const std::string& electrode, double pcl, double ci,
                               const std::string& meshname, double t);

// --- compact display labels (status tables) ---
std::string lim_cyc_label(double pcl);
std::string s1_label(double pcl, double offset);
std::string s2_label(double pcl, double ci, double offset);
std::string mt_label(double pcl, double ci, double duration);

struct CheckpointRecord {
    Stage stage = Stage::PP;
    std::string subject;
    std::string protocol;
    std::string electrode;
    double pcl = 0;
    double ci = -1;       // S2/MT only
    double timestamp = 0;  // the tstamp embedded in the file name
    std::filesystem::path path;
    bool simulated = false;  // false when recovered from disk
};

struct Task {
    std::string subject;
    std::filesystem::path subject_dir;
    std::string protocol;
    std::size_t protocol_index = 0;
    Stage stage = Stage::PP;
    double ci = -1;
    std::vector<std::size_t> deps;  // indices into the task list

    std::string id() const;
};

// Subjects in lexicographic directory order.
std::vector<std::filesystem::path> list_subjects(const StudySpec& spec);

// Deterministic task list: subjects in directory order, protocols in file
// order, stages PP->S1->S2->MT, the max-CI S2 task ahead of smaller CIs.
std::vector<Task> plan_execution(const StudySpec& spec);

struct StudyResult {
    std::vector<CheckpointRecord> records;
    int simulations_run = 0;
    std::vector<std::string> failed_subjects;
};

// Execute the study (tuning or CV measurement first, then the task DAG).
// Per-subject failures are logged and skipped; the cohort run completes.
StudyResult run_study(StudySpec spec);

// Emit one self-contained parameter file per task plus an invocation-order
// manifest; runs zero simulations.
void gen_param_files(StudySpec spec);

// The exact reproducing command line for this spec.
std::string spec_to_command(const StudySpec& spec);

// --- continuation-guard hashes ---
std::string ep_fingerprint(const Plan& merged_plan);
std::string pp_spec_hash(const Plan& merged_plan, const ProtocolDef& protocol,
                         const PrepaceMode& mode);
std::string s1_spec_hash(const std::string& pp_hash, int s1_cycles, double min_ci);
std::string s2_spec_hash(const std::string& s1_hash, double ci, int s2_cycles, double decrement);
std::string mt_spec_hash(const std::string& s2_hash, double mt_duration);

// Stage timing derived without simulation (prepacing always starts at t=0):
// end of PP, time of the final S1 stimulus, and the terminal S2 offset.
double pp_end_time(const ProtocolDef& protocol, const PrepaceMode& mode);
double final_s1_time(const ProtocolDef& protocol, const PrepaceMode& mode, int s1_cycles);
std::vector<double> s2_train_offsets(double ci, int s2_cycles, double decrement);
double s2_end_offset(double ci, int s2_cycles, double decrement);

// Directory layout helpers.
std::filesystem::path checkpoints_dir(const std::filesystem::path& subject_dir);
std::filesystem::path sim_output_dir(const StudySpec& spec, const Task& task);

}  // namespace avp
