#pragma once

// Monodomain reaction-diffusion solver: operator assembly on labeled meshes,
// operator-splitting time stepping (explicit reaction, implicit diffusion),
// stimulus delivery, activation detection, quiescence sentinel, and exact
// binary checkpointing.
//
// Determinism contract: one thread, fixed conjugate-gradient policy, warm
// start from the current voltage, and all scheduling done on integer step
// indices so that a restarted run replays the exact floating-point sequence
// of an uninterrupted one.

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autovarp/cellmodel.hpp"
#include "autovarp/mesh.hpp"
#include "autovarp/plan.hpp"

namespace avp {

// Unit bridge: conductivities in S/m, surf2vol in 1/um, Cm in uF/cm^2 give a
// diffusion coefficient D = sigma_m / (10 * beta * Cm) in mm^2/ms.
inline constexpr double kMembraneCapacitance = 1.0;  // [uF/cm^2]

inline double harmonic_mean(double gi, double ge) {
    return gi * ge / (gi + ge);
}

struct TissueState {
    double time = 0;          // [ms]
    Eigen::MatrixXd states;   // state_dim x active nodes, Vm in row 0

    Eigen::Index num_nodes() const { return states.cols(); }
    auto vm() const { return states.row(0); }
};

struct StimulusEvent {
    NodeSet nodes;        // mesh vertex ids
    double onset = 0;     // [ms], absolute simulation time
    double duration = 0;  // [ms]
    double strength = 0;  // [uA/cm^2]
};

struct FunctionGroup {
    std::string name;
    CellModelPtr model;
    Eigen::Index first = 0, count = 0;  // contiguous active-index range
};

// Canonical ordering of non-excluded nodes: grouped by function (group names
// sorted), node ids ascending within each group. Checkpoints and voltage
// series store node data in exactly this order.
std::vector<std::uint32_t> active_node_order(const Mesh& mesh, const TagPartition& partition);

class TissueOperators {
  public:
    // Assembles the anisotropic diffusion operator (linear elements, lumped
    // mass, zero-flux boundaries, scar omitted) plus the prepared linear
    // system for the chosen scheme.
    TissueOperators(const Mesh& mesh, const TagPartition& partition,
                    const std::map<std::string, FunctionDef>& functions, const SolverSetup& solver);

    const Mesh& mesh() const { return *mesh_; }
    const SolverSetup& solver() const { return solver_; }
    const std::vector<FunctionGroup>& groups() const { return groups_; }
    Eigen::Index num_active() const { return static_cast<Eigen::Index>(active_to_mesh_.size()); }
    int state_dim() const { return state_dim_; }
    const std::vector<std::uint32_t>& active_to_mesh() const { return active_to_mesh_; }
    std::int64_t active_index(std::uint32_t mesh_node) const { return mesh_to_active_[mesh_node]; }
    const Eigen::SparseMatrix<double>& stiffness() const { return stiffness_; }
    const Eigen::VectorXd& lumped_mass() const { return lumped_mass_; }

    TissueState resting_state() const;

    // One operator-splitting step; i_stim is per active node in uA/cm^2.
    void step(TissueState& state, const Eigen::VectorXd& i_stim) const;

    Eigen::VectorXd active_stimulus_vector(const std::vector<std::uint32_t>& mesh_nodes,
                                           double strength) const;

  private:
    const Mesh* mesh_;
    SolverSetup solver_;
    std::vector<FunctionGroup> groups_;
    std::vector<std::uint32_t> active_to_mesh_;
    std::vector<std::int64_t> mesh_to_active_;
    int state_dim_ = 0;
    double theta_ = 1.0;  // 1 implicit Euler, 1/2 Crank-Nicolson
    Eigen::VectorXd lumped_mass_;
    Eigen::SparseMatrix<double> stiffness_;
    Eigen::SparseMatrix<double> system_;  // M + theta*dt*K
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                             Eigen::DiagonalPreconditioner<double>>
        cg_;
};

enum class Termination { duration, sentinel };

struct RecordOptions {
    bool lat = true;
    bool snapshots = false;
};

struct RunResult {
    TissueState state;
    double exit_time = 0;  // [ms], absolute
    Termination terminated_by = Termination::duration;
    Eigen::VectorXd lat;   // per mesh node [ms]; -1 = never activated / excluded
    std::vector<Eigen::VectorXf> snapshots;  // Vm per active node
    std::vector<double> snapshot_times;
};

// Integrate to t_end or until the sentinel detects quiescence (no upward
// threshold crossing for quiescence_window ms and no stimulus pending).
RunResult run_simulation(const TissueOperators& ops, TissueState state,
                         const std::vector<StimulusEvent>& stimuli, double t_end,
                         const std::optional<SentinelSetup>& sentinel,
                         const RecordOptions& record = {});

Eigen::VectorXd measure_lat(const RunResult& result);

// --- checkpoints (.roe) ---
// Binary little-endian: magic "AVRP", format version u32, node count u64,
// state_dim u32, time f64 [ms], node-major f64 state data. Writes are
// atomic (temp file + rename).
void save_checkpoint(const TissueState& state, const std::filesystem::path& path);
TissueState load_checkpoint(const std::filesystem::path& path);
TissueState load_checkpoint(const std::filesystem::path& path, const TissueOperators& ops);

// --- conduction-velocity measurement ---
enum class FiberAxis { fiber, sheet, normal };

// Builds a 20 mm cable at the given resolution, paces one end, and returns
// the conduction velocity from a linear LAT regression over the central 50%.
double measure_cv(const FunctionDef& function, const SolverSetup& solver, double resolution_mm,
                  FiberAxis axis);

// Smallest stimulus strength (bisected to 2%) that elicits a propagating
// response on the cable; the basis for choosing plan stimulus strengths.
double diastolic_threshold(const FunctionDef& function, const SolverSetup& solver,
                           double resolution_mm);

// Vm snapshot series container (see postproc for the on-disk format).
struct VmSeries {
    double t0 = 0;
    double dt = 0;  // output interval
    Eigen::Index nodes = 0;
    std::vector<Eigen::VectorXf> frames;
};

void save_vm_series(const VmSeries& series, const std::filesystem::path& path);
VmSeries load_vm_series(const std::filesystem::path& path);

}  // namespace avp
