#include "autovarp/engine.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "autovarp/sha256.hpp"

namespace avp {

using njson = nlohmann::json;

namespace {

std::string fmt1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string fmt04(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d", static_cast<int>(std::llround(v)));
    return buf;
}

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[64];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

}  // namespace

const char* to_string(Stage s) {
    switch (s) {
        case Stage::PP: return "PP";
        case Stage::S1: return "S1";
        case Stage::S2: return "S2";
        case Stage::MT: return "MT";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "PP") return Stage::PP;
    if (s == "S1") return Stage::S1;
    if (s == "S2") return Stage::S2;
    if (s == "MT") return Stage::MT;
    throw SchemaError("unknown stage '" + s + "' (expected PP, S1, S2 or MT)");
}

void validate_spec(StudySpec& spec) {
    if (spec.plan_path.empty()) throw SchemaError("--plan is required");
    if (spec.cohort_dir.empty() == spec.case_dir.empty())
        throw SchemaError("exactly one of --cohort-dir and --case-ID must be given");
    if (spec.s1_cycles < 1 || spec.s1_cycles > 9)
        throw SchemaError("--S1-cycles must be between 1 and 9");
    if (spec.s2_cycles < 1 || spec.s2_cycles > 9)
        throw SchemaError("--S2-cycles must be between 1 and 9");
    if (spec.stage >= Stage::S1 && spec.ci_array.empty())
        throw SchemaError("--CI-array is required for stages S1 and beyond");
    std::sort(spec.ci_array.begin(), spec.ci_array.end());
    for (std::size_t i = 0; i < spec.ci_array.size(); ++i) {
        if (spec.ci_array[i] <= 0) throw SchemaError("--CI-array entries must be > 0");
        if (i > 0 && spec.ci_array[i] == spec.ci_array[i - 1])
            throw SchemaError("--CI-array contains duplicate interval " +
                              fmt1(spec.ci_array[i]));
    }
    if (spec.decrement_s2 < 0) throw SchemaError("--decrement-S2 must be >= 0");
    if (!spec.ci_array.empty() &&
        spec.ci_array.front() - (spec.s2_cycles - 1) * spec.decrement_s2 <= 0)
        throw SchemaError("decremental train underflows: min CI " + fmt1(spec.ci_array.front()) +
                          " with " + std::to_string(spec.s2_cycles) + " cycles at decrement " +
                          fmt1(spec.decrement_s2));
    if (spec.mt_duration <= 0) throw SchemaError("--MT-duration must be > 0");
    if (spec.workers < 1) throw SchemaError("--workers must be >= 1");
}

// --- Appendix-style file names ---

std::string lat_filename(const std::string& protocol, Propagation gen_lat,
                         const std::string& electrode) {
    return "lim_cic-ptcl_" + protocol + "_" + to_string(gen_lat) + "_el_" + electrode +
           "-act_seq.dat";
}

std::string pp_checkpoint_name(const std::string& protocol, const std::string& meshname,
                               LimCyc lim_cyc, double pcl, double t) {
    return protocol + "_" + meshname + "_pp_" + to_string(lim_cyc) + "_bcl_" + fmt1(pcl) +
           "_tstamp_" + fmt1(t) + ".roe";
}

std::string s1_checkpoint_name(const std::string& electrode, double pcl,
                               const std::string& meshname, double t) {
    return "S1_" + electrode + "_PCL_" + fmt1(pcl) + "_ms_" + meshname + "_tstamp_" + fmt1(t) +
           ".roe";
}

std::string s2_checkpoint_name(const std::string& electrode, double pcl, double ci,
                               const std::string& meshname, double t) {
    return "S2_" + electrode + "_PCL_" + fmt1(pcl) + "_ms_CI_" + fmt1(ci) + "_ms_" + meshname +
           "_tstamp_" + fmt1(t) + ".roe";
}

std::string mt_checkpoint_name(const std::string& electrode, double pcl, double ci,
                               const std::string& meshname, double t) {
    return "MT_" + electrode + "_PCL_" + fmt1(pcl) + "_ms_CI_" + fmt1(ci) + "_ms_" + meshname +
           "_tstamp_" + fmt3(t) + ".roe";
}

std::string lim_cyc_label(double pcl) {
    return "lim_cyc-" + fmt04(pcl);
}

std::string s1_label(double pcl, double offset) {
    return "S1-" + fmt04(pcl) + "-" + std::to_string(static_cast<int>(std::llround(offset)));
}

std::string s2_label(double pcl, double ci, double offset) {
    return "S2-" + fmt04(pcl) + "-" + fmt04(ci) + "-" +
           std::to_string(static_cast<int>(std::llround(offset)));
}

std::string mt_label(double pcl, double ci, double duration) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05d", static_cast<int>(std::llround(duration)));
    return "MT-" + fmt04(pcl) + "-" + fmt04(ci) + "-" + buf;
}

// --- hashes ---

std::string ep_fingerprint(const Plan& merged_plan) {
    Plan stripped = merged_plan;
    for (auto& [name, f] : stripped.functions) f.measured_velocity = {};  // output, not input
    stripped.protocols.clear();  // protocol identity is hashed separately per stage
    return sha256_hex(serialize_plan(stripped));
}

std::string pp_spec_hash(const Plan& merged_plan, const ProtocolDef& protocol,
                         const PrepaceMode& mode) {
    return sha256_hex(ep_fingerprint(merged_plan) + "|" + protocol.name + "|" +
                      fmt3(protocol.bcl) + "|" + std::to_string(protocol.num_cycles) + "|" +
                      protocol.electrode + "|" + to_string(mode.gen_lat) + "|" +
                      to_string(mode.lim_cyc));
}

std::string s1_spec_hash(const std::string& pp_hash, int s1_cycles, double min_ci) {
    return sha256_hex(pp_hash + "|s1|" + std::to_string(s1_cycles) + "|" + fmt3(min_ci));
}

std::string s2_spec_hash(const std::string& s1_hash, double ci, int s2_cycles, double decrement) {
    return sha256_hex(s1_hash + "|s2|" + fmt3(ci) + "|" + std::to_string(s2_cycles) + "|" +
                      fmt3(decrement));
}

std::string mt_spec_hash(const std::string& s2_hash, double mt_duration) {
    return sha256_hex(s2_hash + "|mt|" + fmt3(mt_duration));
}

// --- static stage timing ---

double pp_end_time(const ProtocolDef& protocol, const PrepaceMode& mode) {
    return mode.lim_cyc == LimCyc::lat1 ? protocol.num_cycles * protocol.bcl : 0.0;
}

double final_s1_time(const ProtocolDef& protocol, const PrepaceMode& mode, int s1_cycles) {
    return pp_end_time(protocol, mode) + (s1_cycles - 1) * protocol.bcl;
}

std::vector<double> s2_train_offsets(double ci, int s2_cycles, double decrement) {
    std::vector<double> offsets;
    double t = ci;
    for (int j = 0; j < s2_cycles; ++j) {
        offsets.push_back(t);
        t += ci - (j + 1) * decrement;
    }
    return offsets;
}

double s2_end_offset(double ci, int s2_cycles, double decrement) {
    // waiting time after the train equals the last delivered interval
    const auto offsets = s2_train_offsets(ci, s2_cycles, decrement);
    return offsets.back() + (ci - (s2_cycles - 1) * decrement);
}

// --- task planning ---

std::string Task::id() const {
    std::string s = std::string(to_string(stage)) + "_" + protocol;
    if (ci >= 0) s += "_CI_" + fmt1(ci);
    return s;
}

std::vector<std::filesystem::path> list_subjects(const StudySpec& spec) {
    std::vector<std::filesystem::path> subjects;
    if (!spec.case_dir.empty()) {
        if (!std::filesystem::is_directory(spec.case_dir))
            throw IOError("subject directory '" + spec.case_dir.string() + "' does not exist");
        subjects.push_back(spec.case_dir);
        return subjects;
    }
    if (!std::filesystem::is_directory(spec.cohort_dir))
        throw IOError("cohort directory '" + spec.cohort_dir.string() + "' does not exist");
    for (const auto& entry : std::filesystem::directory_iterator(spec.cohort_dir))
        if (entry.is_directory()) subjects.push_back(entry.path());
    std::sort(subjects.begin(), subjects.end());
    if (subjects.empty())
        throw IOError("cohort directory '" + spec.cohort_dir.string() + "' has no subjects");
    return subjects;
}

namespace {

std::vector<ProtocolDef> study_protocols(const StudySpec& spec, const Plan& plan) {
    if (!spec.protocols_path.empty()) return load_protocols(spec.protocols_path, plan);
    if (plan.protocols.empty())
        throw SchemaError("no protocols defined (plan has none and no --protocols file given)");
    return plan.protocols;
}

}  // namespace

std::vector<Task> plan_execution(const StudySpec& spec) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols = study_protocols(spec, plan);
    const auto subjects = list_subjects(spec);

    std::vector<Task> tasks;
    for (const auto& subject_dir : subjects) {
        const std::string subject = subject_dir.filename().string();
        for (std::size_t pi = 0; pi < protocols.size(); ++pi) {
            Task base;
            base.subject = subject;
            base.subject_dir = subject_dir;
            base.protocol = protocols[pi].name;
            base.protocol_index = pi;

            Task pp = base;
            pp.stage = Stage::PP;
            tasks.push_back(pp);
            const std::size_t pp_idx = tasks.size() - 1;
            if (spec.stage == Stage::PP) continue;

            Task s1 = base;
            s1.stage = Stage::S1;
            s1.deps = {pp_idx};
            tasks.push_back(s1);
            const std::size_t s1_idx = tasks.size() - 1;
            if (spec.stage == Stage::S1) continue;

            // the largest-CI task materializes the coasting checkpoints the
            // smaller CIs restart from, so it runs first
            std::vector<std::size_t> s2_idx(spec.ci_array.size());
            const std::size_t max_i = spec.ci_array.size() - 1;
            {
                Task s2 = base;
                s2.stage = Stage::S2;
                s2.ci = spec.ci_array[max_i];
                s2.deps = {s1_idx};
                tasks.push_back(s2);
                s2_idx[max_i] = tasks.size() - 1;
            }
            for (std::size_t k = 0; k + 1 < spec.ci_array.size(); ++k) {
                Task s2 = base;
                s2.stage = Stage::S2;
                s2.ci = spec.ci_array[k];
                s2.deps = {s1_idx, s2_idx[max_i]};
                tasks.push_back(s2);
                s2_idx[k] = tasks.size() - 1;
            }
            if (spec.stage == Stage::S2) continue;

            for (std::size_t k = 0; k < spec.ci_array.size(); ++k) {
                Task mt = base;
                mt.stage = Stage::MT;
                mt.ci = spec.ci_array[k];
                mt.deps = {s2_idx[k]};
                tasks.push_back(mt);
            }
        }
    }
    return tasks;
}

std::filesystem::path checkpoints_dir(const std::filesystem::path& subject_dir) {
    return subject_dir / "checkpoints";
}

std::filesystem::path sim_output_dir(const StudySpec& spec, const Task& task) {
    return spec.root / "sim_outputs" / task.subject / to_string(task.stage) / task.id();
}

std::string spec_to_command(const StudySpec& spec) {
    std::string cmd = "autovarp --plan " + spec.plan_path.string();
    if (!spec.cohort_dir.empty()) cmd += " --cohort-dir " + spec.cohort_dir.string();
    if (!spec.case_dir.empty()) cmd += " --case-ID " + spec.case_dir.string();
    if (!spec.protocols_path.empty()) cmd += " --protocols " + spec.protocols_path.string();
    if (!spec.configurations_file.empty()) cmd += " --configurations " + spec.configurations_file;
    if (!spec.electrodes_file.empty()) cmd += " --electrodes " + spec.electrodes_file;
    cmd += std::string(" --stage ") + to_string(spec.stage);
    cmd += std::string(" --gen-lat ") + to_string(spec.prepace.gen_lat);
    cmd += std::string(" --lim-cyc ") + to_string(spec.prepace.lim_cyc);
    if (spec.stage >= Stage::S1) {
        cmd += " --S1-cycles " + std::to_string(spec.s1_cycles);
        cmd += " --CI-array ";
        for (std::size_t i = 0; i < spec.ci_array.size(); ++i)
            cmd += (i ? "," : "") + fmt1(spec.ci_array[i]);
    }
    if (spec.stage >= Stage::S2) {
        cmd += " --S2-cycles " + std::to_string(spec.s2_cycles);
        if (spec.decrement_s2 > 0) cmd += " --decrement-S2 " + fmt1(spec.decrement_s2);
    }
    if (spec.stage == Stage::MT && spec.mt_duration != 2000)
        cmd += " --MT-duration " + fmt1(spec.mt_duration);
    if (spec.tissue_tuning) cmd += " --tissue-tuning";
    if (spec.plot_restitution) cmd += " --plot-restitution";
    if (spec.overwrite) cmd += " --overwrite";
    return cmd;
}

// --- execution internals ---

namespace {

struct SubjectContext {
    std::string name;
    std::filesystem::path dir;
    Plan plan;  // merged with subject overrides, functions already tuned
    Mesh mesh;
    TagPartition partition;
    std::unique_ptr<TissueOperators> ops;
    std::map<std::string, NodeSet> electrodes;  // by electrode name
};

struct StudyContext {
    StudySpec spec;
    Plan plan;  // global plan, tuned
    std::vector<ProtocolDef> protocols;
    std::string command;
    std::map<std::string, std::shared_ptr<SubjectContext>> subjects;
    std::map<std::string, Eigen::MatrixXd> trajectories;  // "<func>@<pcl>"
    std::mutex mutex;
};

void write_sidecar(const std::filesystem::path& ckpt, Stage stage, const std::string& protocol,
                   const std::string& electrode, double pcl, double ci, double tstamp,
                   const std::string& hash, const std::string& command) {
    njson j;
    j["stage"] = to_string(stage);
    j["protocol"] = protocol;
    j["electrode"] = electrode;
    j["pcl"] = pcl;
    if (ci >= 0) j["ci"] = ci;
    j["timestamp"] = tstamp;
    j["spec_hash"] = hash;
    j["created"] = iso_now();
    j["command"] = command;
    std::ofstream out(ckpt.string() + ".json");
    out << j.dump(2) << "\n";
}

bool sidecar_hash_matches(const std::filesystem::path& ckpt, const std::string& hash) {
    std::ifstream in(ckpt.string() + ".json");
    if (!in) return false;
    try {
        njson j = njson::parse(in);
        return j.value("spec_hash", "") == hash;
    } catch (...) {
        return false;
    }
}

// checkpoint present with a matching fingerprint -> reusable
bool reusable(const std::filesystem::path& ckpt, const std::string& hash, bool overwrite) {
    return !overwrite && std::filesystem::exists(ckpt) && sidecar_hash_matches(ckpt, hash);
}

double median_edge_length(const Mesh& mesh) {
    std::vector<double> lengths;
    lengths.reserve(mesh.num_elements());
    for (const auto& e : mesh.elements)
        lengths.push_back((mesh.points.col(e.v[1]) - mesh.points.col(e.v[0])).norm());
    std::sort(lengths.begin(), lengths.end());
    return lengths.empty() ? 0.0 : lengths[lengths.size() / 2];
}

std::set<std::string> used_functions(const Plan& plan) {
    std::set<std::string> used;
    for (const auto& [name, cfg] : plan.configurations)
        if (cfg.func != kScarFunc) used.insert(cfg.func);
    return used;
}

// Tune (or just measure) conduction velocities against the cable and write
// the measured values back to the plan file. Updates functions in place.
void calibrate_functions(StudyContext& ctx, double resolution_mm) {
    for (const std::string& name : used_functions(ctx.plan)) {
        FunctionDef& f = ctx.plan.functions.at(name);
        if (ctx.spec.tissue_tuning) {
            auto report = tune_conductivities(f, ctx.plan.solver_setup, resolution_mm);
            f = report.tuned;
            std::cerr << "[autovarp] tuned '" << name << "' in " << report.iterations
                      << " measurement passes\n";
        } else {
            f.measured_velocity = measure_velocities(f, ctx.plan.solver_setup, resolution_mm);
        }
        write_measured_velocities(ctx.spec.plan_path, name, f.measured_velocity);
    }
}

std::shared_ptr<SubjectContext> subject_context(StudyContext& ctx,
                                                const std::filesystem::path& subject_dir) {
    const std::string name = subject_dir.filename().string();
    std::lock_guard lock(ctx.mutex);
    auto it = ctx.subjects.find(name);
    if (it != ctx.subjects.end()) return it->second;

    auto sc = std::make_shared<SubjectContext>();
    sc->name = name;
    sc->dir = subject_dir;
    sc->plan = merge_subject_overrides(ctx.plan, subject_dir,
                                       ctx.spec.electrodes_file.empty() ? "electrodes.json"
                                                                        : ctx.spec.electrodes_file,
                                       ctx.spec.configurations_file.empty()
                                           ? "configurations.json"
                                           : ctx.spec.configurations_file);
    sc->mesh = load_mesh(subject_dir);
    sc->partition = tag_partition(sc->mesh, sc->plan.configurations);
    sc->ops = std::make_unique<TissueOperators>(sc->mesh, sc->partition, sc->plan.functions,
                                                sc->plan.solver_setup);
    for (const auto& p : ctx.protocols) {
        if (!sc->electrodes.count(p.electrode))
            sc->electrodes[p.electrode] =
                resolve_electrode(sc->mesh, sc->plan.electrodes.at(p.electrode), p.electrode);
    }
    ctx.subjects[name] = sc;
    return sc;
}

// Cellular limit cycle for one function at one cycle length, cached on disk
// under init/ and in memory as a full one-cycle trajectory.
const Eigen::MatrixXd& function_trajectory(StudyContext& ctx, const std::string& func,
                                           const FunctionDef& def, double pcl) {
    const std::string key = func + "@" + fmt1(pcl);
    std::lock_guard lock(ctx.mutex);
    auto it = ctx.trajectories.find(key);
    if (it != ctx.trajectories.end()) return it->second;

    auto model = make_cell_model(def.model, def.model_par);
    const auto sv_path = ctx.spec.root / "init" / init_state_filename(func, pcl);
    CellState lc_state;
    if (std::filesystem::exists(sv_path) && !ctx.spec.overwrite) {
        lc_state = load_cell_state(sv_path);
        if (lc_state.values.size() != model->state_dim())
            throw FormatError("init state '" + sv_path.string() + "' does not match model '" +
                              model->name() + "'");
    } else {
        try {
            lc_state = cell_limit_cycle(*model, pcl, def.initialization.num_cycles,
                                        ctx.plan.solver_setup.dt)
                           .state;
        } catch (const LossOfCapture&) {
            // non-excitable membrane: its limit cycle is rest
            lc_state = CellState{model->resting_state(), 0.0};
        }
        save_cell_state(lc_state, sv_path);
    }
    auto traj = cell_cycle_trajectory(*model, lc_state, pcl, ctx.plan.solver_setup.dt);
    return ctx.trajectories.emplace(key, std::move(traj)).first->second;
}

void write_task_log(const StudySpec& spec, const Task& task, const std::string& hash,
                    double wall_seconds, const std::string& note) {
    const auto dir = sim_output_dir(spec, task);
    std::filesystem::create_directories(dir);
    std::ofstream log(dir / "log.txt", std::ios::app);
    log << iso_now() << " task=" << task.id() << " subject=" << task.subject
        << " spec_hash=" << hash << " wall_s=" << wall_seconds << " " << note << "\n";
}

void write_series(const StudySpec& spec, const Task& task, const RunResult& result) {
    if (result.snapshots.empty()) return;
    VmSeries series;
    series.t0 = result.snapshot_times.front();
    series.dt = result.snapshot_times.size() > 1
                    ? result.snapshot_times[1] - result.snapshot_times[0]
                    : 0.0;
    series.nodes = result.snapshots.front().size();
    series.frames = result.snapshots;
    const auto dir = sim_output_dir(spec, task);
    save_vm_series(series, dir / ("vm_" + fmt1(series.t0) + "_" + fmt1(series.dt) + ".igb"));
}

void append_frames(RunResult& total, const RunResult& part) {
    for (std::size_t i = 0; i < part.snapshots.size(); ++i) {
        if (!total.snapshot_times.empty() &&
            part.snapshot_times[i] <= total.snapshot_times.back() + 1e-9)
            continue;
        total.snapshots.push_back(part.snapshots[i]);
        total.snapshot_times.push_back(part.snapshot_times[i]);
    }
}

StimulusEvent protocol_stimulus(const SubjectContext& sc, const ProtocolDef& proto, double onset) {
    StimulusEvent ev;
    ev.nodes = sc.electrodes.at(proto.electrode);
    ev.onset = onset;
    ev.duration = sc.plan.solver_setup.stimulus.duration;
    ev.strength = sc.plan.solver_setup.stimulus.strength;
    return ev;
}

struct TaskOutcome {
    std::vector<CheckpointRecord> records;
    bool simulated = false;
};

TaskOutcome run_pp_task(StudyContext& ctx, SubjectContext& sc, const Task& task,
                        const ProtocolDef& proto) {
    const auto& spec = ctx.spec;
    const auto ckdir = checkpoints_dir(sc.dir);
    const std::string hash = pp_spec_hash(sc.plan, proto, spec.prepace);
    const double t_pp = pp_end_time(proto, spec.prepace);
    const auto ckpt =
        ckdir / pp_checkpoint_name(proto.name, sc.name, spec.prepace.lim_cyc, proto.bcl, t_pp);
    const auto latfile = ckdir / lat_filename(proto.name, spec.prepace.gen_lat, proto.electrode);

    CheckpointRecord rec{Stage::PP, sc.name,  proto.name, proto.electrode,
                         proto.bcl, -1.0,     t_pp,       ckpt,
                         false};
    if (reusable(ckpt, hash, spec.overwrite) && std::filesystem::exists(latfile))
        return {{rec}, false};

    const auto start = std::chrono::steady_clock::now();

    std::size_t unreached = 0;
    const Eigen::VectorXd lat = generate_lat(*sc.ops, sc.partition, sc.plan.functions,
                                             sc.electrodes.at(proto.electrode),
                                             spec.prepace.gen_lat, &unreached);
    if (unreached > 0)
        std::cerr << "[autovarp] warning: " << unreached << " active nodes unreached by '"
                  << proto.name << "' activation in subject " << sc.name << "\n";

    std::map<std::string, Eigen::MatrixXd> trajectories;
    for (const auto& g : sc.ops->groups())
        trajectories[g.name] =
            function_trajectory(ctx, g.name, sc.plan.functions.at(g.name), proto.bcl);

    TissueState state;
    if (spec.prepace.lim_cyc == LimCyc::lat0) {
        state = distribute_states(*sc.ops, lat, trajectories, proto.bcl);
    } else {
        // settle cycle(s): record them as the PP stage's voltage output
        state = distribute_states(*sc.ops, lat, trajectories, proto.bcl);
        std::vector<StimulusEvent> stimuli;
        for (int c = 0; c < proto.num_cycles; ++c)
            stimuli.push_back(protocol_stimulus(sc, proto, c * proto.bcl));
        RecordOptions rec_opts;
        rec_opts.snapshots = true;
        auto result = run_simulation(*sc.ops, std::move(state), stimuli,
                                     proto.num_cycles * proto.bcl, std::nullopt, rec_opts);
        write_series(spec, task, result);
        state = std::move(result.state);
    }

    // activation sequence file: one ms value per mesh node
    std::filesystem::create_directories(ckdir);
    {
        std::ofstream out(latfile);
        if (!out) throw IOError("cannot write '" + latfile.string() + "'");
        out.precision(10);
        for (Eigen::Index i = 0; i < lat.size(); ++i) out << lat[i] << "\n";
    }
    save_checkpoint(state, ckpt);
    write_sidecar(ckpt, Stage::PP, proto.name, proto.electrode, proto.bcl, -1, t_pp, hash,
                  ctx.command);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_task_log(spec, task, hash, wall, "pp done t=" + fmt1(t_pp));
    return {{rec}, true};
}

TaskOutcome run_s1_task(StudyContext& ctx, SubjectContext& sc, const Task& task,
                        const ProtocolDef& proto) {
    const auto& spec = ctx.spec;
    const auto ckdir = checkpoints_dir(sc.dir);
    const std::string pp_hash = pp_spec_hash(sc.plan, proto, spec.prepace);
    const double min_ci = spec.ci_array.front();
    const std::string hash = s1_spec_hash(pp_hash, spec.s1_cycles, min_ci);
    const auto ckpt = ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, sc.name, min_ci);

    CheckpointRecord rec{Stage::S1, sc.name,  proto.name, proto.electrode,
                         proto.bcl, -1.0,     min_ci,     ckpt,
                         false};
    if (reusable(ckpt, hash, spec.overwrite)) return {{rec}, false};

    const double t_pp = pp_end_time(proto, spec.prepace);
    const auto pp_ckpt =
        ckdir / pp_checkpoint_name(proto.name, sc.name, spec.prepace.lim_cyc, proto.bcl, t_pp);
    if (!std::filesystem::exists(pp_ckpt) || !sidecar_hash_matches(pp_ckpt, pp_hash))
        throw MissingUpstream(
            "S1 stage needs PP checkpoint '" + pp_ckpt.string() +
            "' produced with the same options; rerun --stage PP with the current arguments");

    const auto start = std::chrono::steady_clock::now();
    TissueState state = load_checkpoint(pp_ckpt, *sc.ops);
    const double t0 = state.time;
    std::vector<StimulusEvent> stimuli;
    for (int c = 0; c < spec.s1_cycles; ++c)
        stimuli.push_back(protocol_stimulus(sc, proto, t0 + c * proto.bcl));
    const double t_final = t0 + (spec.s1_cycles - 1) * proto.bcl;

    RecordOptions rec_opts;
    rec_opts.snapshots = true;
    auto result =
        run_simulation(*sc.ops, std::move(state), stimuli, t_final + min_ci, std::nullopt, rec_opts);
    write_series(spec, task, result);
    save_checkpoint(result.state, ckpt);
    write_sidecar(ckpt, Stage::S1, proto.name, proto.electrode, proto.bcl, -1, min_ci, hash,
                  ctx.command);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_task_log(spec, task, hash, wall, "s1 done offset=" + fmt1(min_ci));
    return {{rec}, true};
}

TaskOutcome run_s2_task(StudyContext& ctx, SubjectContext& sc, const Task& task,
                        const ProtocolDef& proto) {
    const auto& spec = ctx.spec;
    const auto ckdir = checkpoints_dir(sc.dir);
    const std::string pp_hash = pp_spec_hash(sc.plan, proto, spec.prepace);
    const double min_ci = spec.ci_array.front();
    const std::string s1_hash = s1_spec_hash(pp_hash, spec.s1_cycles, min_ci);
    const double ci = task.ci;
    const std::string hash = s2_spec_hash(s1_hash, ci, spec.s2_cycles, spec.decrement_s2);
    const bool is_max = ci == spec.ci_array.back();
    const double end_off = s2_end_offset(ci, spec.s2_cycles, spec.decrement_s2);
    const auto terminal =
        ckdir / s2_checkpoint_name(proto.electrode, proto.bcl, ci, sc.name, end_off);

    TaskOutcome outcome;
    CheckpointRecord rec{Stage::S2, sc.name,  proto.name, proto.electrode,
                         proto.bcl, ci,       end_off,    terminal,
                         false};

    // the max-CI pass must also have materialized the smaller-CI restart
    // checkpoints; recompute if any is missing
    bool coasting_done = true;
    if (is_max) {
        for (std::size_t k = 1; k + 1 < spec.ci_array.size(); ++k) {
            const auto c = ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, sc.name,
                                                      spec.ci_array[k]);
            if (!reusable(c, s1_hash, spec.overwrite)) coasting_done = false;
        }
    }
    if (reusable(terminal, hash, spec.overwrite) && coasting_done) {
        outcome.records.push_back(rec);
        if (is_max)
            for (std::size_t k = 1; k + 1 < spec.ci_array.size(); ++k)
                outcome.records.push_back({Stage::S1, sc.name, proto.name, proto.electrode,
                                           proto.bcl, -1.0, spec.ci_array[k],
                                           ckdir / s1_checkpoint_name(proto.electrode, proto.bcl,
                                                                      sc.name, spec.ci_array[k]),
                                           false});
        return outcome;
    }

    // restart point: the S1 checkpoint at this CI's own offset (min CI uses
    // the S1 stage's file; larger CIs use the files the max-CI pass coasted)
    const double restart_off = is_max ? min_ci : ci;
    const auto upstream =
        ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, sc.name, restart_off);
    if (!std::filesystem::exists(upstream) || !sidecar_hash_matches(upstream, s1_hash))
        throw MissingUpstream("S2 stage needs S1 checkpoint '" + upstream.string() +
                              "' produced with the same options; rerun --stage S1 (and the "
                              "max-CI S2 pass) with the current arguments");

    const auto start = std::chrono::steady_clock::now();
    TissueState state = load_checkpoint(upstream, *sc.ops);
    const double t_final_s1 = state.time - restart_off;

    RecordOptions rec_opts;
    rec_opts.snapshots = true;
    RunResult collected;

    if (is_max) {
        // coast without stimulating, publishing the pre-stimulus state at
        // every other coupling interval on the way
        for (std::size_t k = 1; k < spec.ci_array.size(); ++k) {
            const double c = spec.ci_array[k];
            if (c >= ci) break;
            auto part = run_simulation(*sc.ops, std::move(state), {}, t_final_s1 + c, std::nullopt,
                                       rec_opts);
            append_frames(collected, part);
            state = std::move(part.state);
            const auto coast_ckpt =
                ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, sc.name, c);
            save_checkpoint(state, coast_ckpt);
            write_sidecar(coast_ckpt, Stage::S1, proto.name, proto.electrode, proto.bcl, -1, c,
                          s1_hash, ctx.command);
            outcome.records.push_back({Stage::S1, sc.name, proto.name, proto.electrode, proto.bcl,
                                       -1.0, c, coast_ckpt, true});
        }
    }

    std::vector<StimulusEvent> train;
    for (double off : s2_train_offsets(ci, spec.s2_cycles, spec.decrement_s2))
        train.push_back(protocol_stimulus(sc, proto, t_final_s1 + off));

    auto part = run_simulation(*sc.ops, std::move(state), train, t_final_s1 + end_off,
                               std::nullopt, rec_opts);
    append_frames(collected, part);
    write_series(spec, task, collected);
    save_checkpoint(part.state, terminal);
    write_sidecar(terminal, Stage::S2, proto.name, proto.electrode, proto.bcl, ci, end_off, hash,
                  ctx.command);

    rec.simulated = true;
    outcome.records.push_back(rec);
    outcome.simulated = true;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_task_log(spec, task, hash, wall, "s2 done end_offset=" + fmt1(end_off));
    return outcome;
}

TaskOutcome run_mt_task(StudyContext& ctx, SubjectContext& sc, const Task& task,
                        const ProtocolDef& proto) {
    const auto& spec = ctx.spec;
    const auto ckdir = checkpoints_dir(sc.dir);
    const std::string pp_hash = pp_spec_hash(sc.plan, proto, spec.prepace);
    const std::string s1_hash = s1_spec_hash(pp_hash, spec.s1_cycles, spec.ci_array.front());
    const std::string s2_hash = s2_spec_hash(s1_hash, task.ci, spec.s2_cycles, spec.decrement_s2);
    const std::string hash = mt_spec_hash(s2_hash, spec.mt_duration);
    const double ci = task.ci;

    // the timestamp encodes the simulated duration, so reuse means scanning
    // for any matching MT checkpoint with the right fingerprint
    const std::string prefix =
        "MT_" + proto.electrode + "_PCL_" + fmt1(proto.bcl) + "_ms_CI_" + fmt1(ci) + "_ms_" +
        sc.name + "_tstamp_";
    if (!spec.overwrite && std::filesystem::is_directory(ckdir)) {
        std::vector<std::filesystem::path> candidates;
        for (const auto& entry : std::filesystem::directory_iterator(ckdir)) {
            const std::string fn = entry.path().filename().string();
            if (fn.rfind(prefix, 0) == 0 && fn.size() > prefix.size() + 4 &&
                fn.substr(fn.size() - 4) == ".roe" && sidecar_hash_matches(entry.path(), hash))
                candidates.push_back(entry.path());
        }
        std::sort(candidates.begin(), candidates.end());
        if (!candidates.empty()) {
            const std::string fn = candidates.front().filename().string();
            const double duration =
                std::stod(fn.substr(prefix.size(), fn.size() - prefix.size() - 4));
            return {{{Stage::MT, sc.name, proto.name, proto.electrode, proto.bcl, ci, duration,
                      candidates.front(), false}},
                    false};
        }
    }

    const double end_off = s2_end_offset(ci, spec.s2_cycles, spec.decrement_s2);
    const auto upstream =
        ckdir / s2_checkpoint_name(proto.electrode, proto.bcl, ci, sc.name, end_off);
    if (!std::filesystem::exists(upstream) || !sidecar_hash_matches(upstream, s2_hash))
        throw MissingUpstream("MT stage needs S2 checkpoint '" + upstream.string() +
                              "' produced with the same options; rerun --stage S2 with the "
                              "current arguments");

    const auto start = std::chrono::steady_clock::now();
    TissueState state = load_checkpoint(upstream, *sc.ops);
    const double t0 = state.time;

    RecordOptions rec_opts;
    rec_opts.snapshots = true;
    auto result = run_simulation(*sc.ops, std::move(state), {}, t0 + spec.mt_duration,
                                 sc.plan.solver_setup.sentinel, rec_opts);
    write_series(spec, task, result);
    const double duration = result.exit_time - t0;
    const auto ckpt = ckdir / mt_checkpoint_name(proto.electrode, proto.bcl, ci, sc.name, duration);
    save_checkpoint(result.state, ckpt);
    write_sidecar(ckpt, Stage::MT, proto.name, proto.electrode, proto.bcl, ci, duration, hash,
                  ctx.command);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_task_log(spec, task, hash, wall,
                   std::string("mt done duration=") + fmt3(duration) + " terminated_by=" +
                       (result.terminated_by == Termination::sentinel ? "sentinel" : "duration"));
    return {{{Stage::MT, sc.name, proto.name, proto.electrode, proto.bcl, ci, duration, ckpt,
              true}},
            true};
}

TaskOutcome run_task(StudyContext& ctx, const Task& task) {
    auto sc = subject_context(ctx, task.subject_dir);
    const ProtocolDef& proto = ctx.protocols.at(task.protocol_index);
    switch (task.stage) {
        case Stage::PP: return run_pp_task(ctx, *sc, task, proto);
        case Stage::S1: return run_s1_task(ctx, *sc, task, proto);
        case Stage::S2: return run_s2_task(ctx, *sc, task, proto);
        case Stage::MT: return run_mt_task(ctx, *sc, task, proto);
    }
    throw Error("unreachable stage");
}

void emit_restitution_plots(StudyContext& ctx) {
    std::set<double> bcls;
    for (const auto& p : ctx.protocols) bcls.insert(p.bcl);
    const std::vector<double> di_list = {5,   10,  20,  30,  50,  75,  100,
                                         150, 200, 300, 400, 600, 800};
    for (double bcl : bcls) {
        std::vector<RestitutionCurve> curves;
        for (const std::string& name : used_functions(ctx.plan)) {
            const FunctionDef& f = ctx.plan.functions.at(name);
            auto model = make_cell_model(f.model, f.model_par);
            try {
                auto curve = restitution_curve(*model, bcl, di_list, ctx.plan.solver_setup.dt);
                curve.tissue = name;
                curves.push_back(std::move(curve));
            } catch (const LossOfCapture&) {
                std::cerr << "[autovarp] no restitution curve for non-capturing function '" << name
                          << "'\n";
            }
        }
        if (!curves.empty())
            plot_restitution(curves, ctx.spec.root / "restitution" /
                                         ("restitution_bcl" + fmt1(bcl) + ".png"));
    }
}

}  // namespace

StudyResult run_study(StudySpec spec) {
    validate_spec(spec);
    StudyContext ctx;
    ctx.spec = spec;
    ctx.plan = load_plan(spec.plan_path);
    ctx.protocols = study_protocols(spec, ctx.plan);
    ctx.command = spec_to_command(spec);

    const auto tasks = plan_execution(spec);
    const auto subjects = list_subjects(spec);

    {
        Mesh probe = load_mesh(subjects.front());
        calibrate_functions(ctx, median_edge_length(probe));
    }
    if (spec.plot_restitution) emit_restitution_plots(ctx);

    StudyResult result;
    std::vector<int> state(tasks.size(), 0);  // 0 pending, 1 running, 2 done, 3 failed
    std::set<std::string> failed_subjects;
    std::mutex m;
    std::condition_variable cv;

    auto worker = [&]() {
        std::unique_lock lock(m);
        while (true) {
            std::size_t pick = tasks.size();
            bool any_pending = false, any_running = false;
            for (std::size_t i = 0; i < tasks.size(); ++i) {
                if (state[i] == 1) any_running = true;
                if (state[i] != 0) continue;
                if (failed_subjects.count(tasks[i].subject)) {
                    state[i] = 3;
                    continue;
                }
                any_pending = true;
                bool ready = true;
                for (auto d : tasks[i].deps)
                    if (state[d] != 2) ready = false;
                if (ready) {
                    pick = i;
                    break;
                }
            }
            if (pick == tasks.size()) {
                if (!any_pending && !any_running) return;
                cv.wait(lock);
                continue;
            }
            state[pick] = 1;
            lock.unlock();

            bool ok = true;
            TaskOutcome outcome;
            try {
                outcome = run_task(ctx, tasks[pick]);
            } catch (const std::exception& e) {
                ok = false;
                std::cerr << "[autovarp] subject " << tasks[pick].subject << " task "
                          << tasks[pick].id() << " failed: " << e.what() << "\n";
            }

            lock.lock();
            if (ok) {
                state[pick] = 2;
                for (auto& r : outcome.records) result.records.push_back(std::move(r));
                if (outcome.simulated) ++result.simulations_run;
            } else {
                state[pick] = 3;
                failed_subjects.insert(tasks[pick].subject);
            }
            cv.notify_all();
        }
    };

    if (spec.workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < spec.workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    result.failed_subjects.assign(failed_subjects.begin(), failed_subjects.end());
    return result;
}

void gen_param_files(StudySpec spec) {
    validate_spec(spec);
    Plan plan = load_plan(spec.plan_path);
    const auto protocols = study_protocols(spec, plan);
    const auto tasks = plan_execution(spec);
    const std::string command = spec_to_command(spec);

    njson manifest = njson::array();
    for (const auto& task : tasks) {
        const ProtocolDef& proto = protocols.at(task.protocol_index);
        const Plan merged = merge_subject_overrides(
            plan, task.subject_dir,
            spec.electrodes_file.empty() ? "electrodes.json" : spec.electrodes_file,
            spec.configurations_file.empty() ? "configurations.json" : spec.configurations_file);
        const Mesh mesh = load_mesh(task.subject_dir);
        const NodeSet electrode =
            resolve_electrode(mesh, merged.electrodes.at(proto.electrode), proto.electrode);

        const std::string pp_hash = pp_spec_hash(merged, proto, spec.prepace);
        const double t_pp = pp_end_time(proto, spec.prepace);
        const double t_final = final_s1_time(proto, spec.prepace, spec.s1_cycles);
        const auto ckdir = checkpoints_dir(task.subject_dir);

        njson j;
        j["task"] = task.id();
        j["subject"] = task.subject;
        j["protocol"] = proto.name;
        j["electrode"] = proto.electrode;
        j["stage"] = to_string(task.stage);
        j["pcl"] = proto.bcl;
        njson solver;
        solver["dt"] = merged.solver_setup.dt;
        solver["output_interval"] = merged.solver_setup.output_interval;
        solver["diffusion_scheme"] = to_string(merged.solver_setup.diffusion_scheme);
        solver["linear_tolerance"] = merged.solver_setup.linear_tolerance;
        j["solver_setup"] = solver;
        j["electrode_nodes"] = electrode.ids;

        auto stim_json = [&](double onset) {
            njson s;
            s["onset"] = onset;
            s["duration"] = merged.solver_setup.stimulus.duration;
            s["strength"] = merged.solver_setup.stimulus.strength;
            return s;
        };

        njson stimuli = njson::array();
        switch (task.stage) {
            case Stage::PP: {
                j["prepace"] = {{"gen_lat", to_string(spec.prepace.gen_lat)},
                                {"lim_cyc", to_string(spec.prepace.lim_cyc)}};
                if (spec.prepace.lim_cyc == LimCyc::lat1)
                    for (int c = 0; c < proto.num_cycles; ++c) stimuli.push_back(stim_json(c * proto.bcl));
                j["restart_checkpoint"] = nullptr;
                j["t_end"] = t_pp;
                j["output_checkpoints"] = {
                    (ckdir / pp_checkpoint_name(proto.name, task.subject, spec.prepace.lim_cyc,
                                                proto.bcl, t_pp))
                        .string()};
                j["spec_hash"] = pp_hash;
                break;
            }
            case Stage::S1: {
                const double min_ci = spec.ci_array.front();
                for (int c = 0; c < spec.s1_cycles; ++c) stimuli.push_back(stim_json(t_pp + c * proto.bcl));
                j["restart_checkpoint"] = (ckdir / pp_checkpoint_name(proto.name, task.subject,
                                                                      spec.prepace.lim_cyc,
                                                                      proto.bcl, t_pp))
                                              .string();
                j["t_end"] = t_final + min_ci;
                j["output_checkpoints"] = {
                    (ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, task.subject, min_ci))
                        .string()};
                j["spec_hash"] = s1_spec_hash(pp_hash, spec.s1_cycles, min_ci);
                break;
            }
            case Stage::S2: {
                const double min_ci = spec.ci_array.front();
                const bool is_max = task.ci == spec.ci_array.back();
                const double restart_off = is_max ? min_ci : task.ci;
                const double end_off = s2_end_offset(task.ci, spec.s2_cycles, spec.decrement_s2);
                for (double off : s2_train_offsets(task.ci, spec.s2_cycles, spec.decrement_s2))
                    stimuli.push_back(stim_json(t_final + off));
                j["restart_checkpoint"] =
                    (ckdir /
                     s1_checkpoint_name(proto.electrode, proto.bcl, task.subject, restart_off))
                        .string();
                j["t_end"] = t_final + end_off;
                njson outputs = njson::array();
                if (is_max)
                    for (std::size_t k = 1; k + 1 < spec.ci_array.size(); ++k)
                        outputs.push_back((ckdir / s1_checkpoint_name(proto.electrode, proto.bcl,
                                                                      task.subject,
                                                                      spec.ci_array[k]))
                                              .string());
                outputs.push_back((ckdir / s2_checkpoint_name(proto.electrode, proto.bcl, task.ci,
                                                              task.subject, end_off))
                                      .string());
                j["output_checkpoints"] = outputs;
                j["spec_hash"] = s2_spec_hash(s1_spec_hash(pp_hash, spec.s1_cycles, min_ci),
                                              task.ci, spec.s2_cycles, spec.decrement_s2);
                break;
            }
            case Stage::MT: {
                const double min_ci = spec.ci_array.front();
                const double end_off = s2_end_offset(task.ci, spec.s2_cycles, spec.decrement_s2);
                j["restart_checkpoint"] = (ckdir / s2_checkpoint_name(proto.electrode, proto.bcl,
                                                                      task.ci, task.subject,
                                                                      end_off))
                                              .string();
                j["t_end"] = t_final + end_off + spec.mt_duration;
                j["sentinel"] = {{"upstroke_threshold", merged.solver_setup.sentinel.upstroke_threshold},
                                 {"quiescence_window", merged.solver_setup.sentinel.quiescence_window},
                                 {"poll_interval", merged.solver_setup.sentinel.poll_interval}};
                j["output_checkpoints"] = njson::array();  // name carries the measured duration
                j["spec_hash"] =
                    mt_spec_hash(s2_spec_hash(s1_spec_hash(pp_hash, spec.s1_cycles, min_ci),
                                              task.ci, spec.s2_cycles, spec.decrement_s2),
                                 spec.mt_duration);
                break;
            }
        }
        j["stimuli"] = stimuli;

        const auto dir = spec.root / "param_files" / task.subject;
        std::filesystem::create_directories(dir);
        const auto file = dir / (task.id() + ".json");
        std::ofstream out(file);
        if (!out) throw IOError("cannot write '" + file.string() + "'");
        out << j.dump(2) << "\n";

        njson entry;
        entry["task"] = task.id();
        entry["subject"] = task.subject;
        entry["param_file"] = file.string();
        manifest.push_back(entry);
    }

    njson root;
    root["command"] = command;
    root["invocations"] = manifest;
    const auto manifest_path = spec.root / "param_files" / "manifest.json";
    std::ofstream out(manifest_path);
    if (!out) throw IOError("cannot write '" + manifest_path.string() + "'");
    out << root.dump(2) << "\n";
}

}  // namespace avp
