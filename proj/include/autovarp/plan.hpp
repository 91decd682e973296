#pragma once

// Experiment definition files: the plan, external protocols, and per-subject
// electrode/configuration overrides. All of them are JSON with a strict
// schema (unknown keys are rejected so that typos in study definitions fail
// loudly instead of being silently ignored).

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autovarp/errors.hpp"

namespace avp {

constexpr int kPlanVersion = 2;

struct Conductivity {
    double gil = 0, gel = 0;  // intra/extra, fiber axis [S/m]
    double git = 0, get = 0;  // sheet axis
    double gin = 0, gen = 0;  // sheet-normal axis
    double surf2vol = 0;      // [1/um]
    bool operator==(const Conductivity&) const = default;
};

struct VelocityTriple {
    std::optional<double> vf, vs, vn;  // [m/s]
    bool operator==(const VelocityTriple&) const = default;
};

struct Initialization {
    int num_cycles = 0;
    double bcl = 0;  // [ms]
    std::optional<std::string> init;
    // forCEPSS legacy fields, accepted and preserved but not interpreted.
    std::optional<std::string> apdres_file;
    std::optional<std::string> apdres_protocol;
    bool operator==(const Initialization&) const = default;
};

struct FunctionDef {
    std::string model;                          // cell model registry id
    std::map<std::string, double> model_par;    // parameter overrides
    Initialization initialization;
    Conductivity conductivity;
    VelocityTriple reference_velocity;          // prescribed CV targets
    VelocityTriple measured_velocity;           // written by tuning/measurement
    bool has_plugins_keys = false;              // legacy nulls seen on input
    bool operator==(const FunctionDef&) const = default;
};

enum class Propagation { rd, ek };

struct ProtocolDef {
    std::string name;
    Propagation propagation = Propagation::rd;
    int num_cycles = 1;
    double bcl = 0;          // S1 pacing cycle length [ms]
    std::string electrode;   // key into Plan::electrodes
    bool has_legacy_nulls = false;  // rel_timings/lat_file/restart present as null
    bool operator==(const ProtocolDef&) const = default;
};

enum class ElectrodeKind { cartesian_sphere, node_list, ucc_sphere };

struct ElectrodeDef {
    ElectrodeKind kind = ElectrodeKind::cartesian_sphere;
    // cartesian_sphere
    std::array<double, 3> center{};  // [mm]
    double radius = 0;               // [mm]
    // node_list
    std::vector<std::size_t> nodes;
    // ucc_sphere
    std::array<double, 3> p0{};  // apicobasal, transmural, rotational
    std::string cavity;          // "lv" or "rv"
    std::string searchdom;       // always "cxyz"
    bool operator==(const ElectrodeDef&) const = default;
};

// The literal func value marking electrically excluded tissue.
inline const std::string kScarFunc = "scar";

struct ConfigurationDef {
    std::vector<int> tags;
    std::string func;  // function name, or kScarFunc
    bool operator==(const ConfigurationDef&) const = default;
};

enum class DiffusionScheme { implicit_euler, crank_nicolson };

struct StimulusSetup {
    double strength = 0;  // [uA/cm^2]
    double duration = 0;  // [ms]
    bool operator==(const StimulusSetup&) const = default;
};

struct SentinelSetup {
    double upstroke_threshold = -20.0;  // [mV], upward crossing
    double quiescence_window = 150.0;   // [ms]
    double poll_interval = 1.0;         // [ms]
    bool operator==(const SentinelSetup&) const = default;
};

struct SolverSetup {
    double dt = 0;               // [ms]
    double output_interval = 0;  // [ms], integer multiple of dt
    DiffusionScheme diffusion_scheme = DiffusionScheme::implicit_euler;
    double linear_tolerance = 1e-8;
    StimulusSetup stimulus;
    SentinelSetup sentinel;
    bool operator==(const SolverSetup&) const = default;
};

struct Plan {
    int version = kPlanVersion;
    std::map<std::string, FunctionDef> functions;
    std::vector<ProtocolDef> protocols;  // definition order fixes execution order
    std::map<std::string, ElectrodeDef> electrodes;
    std::map<std::string, ConfigurationDef> configurations;
    SolverSetup solver_setup;

    const ProtocolDef* find_protocol(const std::string& name) const;
    bool operator==(const Plan&) const = default;
};

// Parse + validate a plan file. Raises ParseError on malformed JSON,
// SchemaError on structural problems (message names the offending field
// path), ReferenceError on dangling cross-references.
Plan load_plan(const std::filesystem::path& path);

// Canonical serialization: two-space indent, lexicographic key order except
// for the protocol definitions, whose order is semantically significant.
std::string serialize_plan(const Plan& plan);
void save_plan(const Plan& plan, const std::filesystem::path& path);

// Merge per-subject `electrodes` / `configurations` JSON files found in
// subject_dir into the plan. Same-named entries replace plan-level defaults,
// everything else is kept. File names are caller-supplied (empty = skip).
Plan merge_subject_overrides(const Plan& plan, const std::filesystem::path& subject_dir,
                             const std::string& electrodes_file = "electrodes.json",
                             const std::string& configurations_file = "configurations.json");

// Load an external protocols file; replaces the plan's protocols wholesale,
// preserving file order.
std::vector<ProtocolDef> load_protocols(const std::filesystem::path& path, const Plan& plan);

// Rewrite the measured conduction-velocity block of one function in place.
void write_measured_velocities(const std::filesystem::path& plan_path, const std::string& function,
                               const VelocityTriple& measured);

const char* to_string(Propagation p);
const char* to_string(ElectrodeKind k);
const char* to_string(DiffusionScheme s);

}  // namespace avp
