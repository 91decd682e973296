#pragma once

// Initialization machinery: activation-map generation (eikonal or one RD
// beat), LAT-phased distribution of cellular limit-cycle states, the optional
// settling cycle, and conductivity tuning against target conduction
// velocities.

#include <map>
#include <string>

#include "autovarp/eikonal.hpp"
#include "autovarp/tissue.hpp"

namespace avp {

enum class LimCyc { lat0, lat1 };

struct PrepaceMode {
    Propagation gen_lat = Propagation::ek;
    LimCyc lim_cyc = LimCyc::lat1;
};

const char* to_string(LimCyc m);

// Activation map for one electrode: eikonal solve, or one reaction-diffusion
// beat from rest with recorded activation times.
Eigen::VectorXd generate_lat(const TissueOperators& ops, const TagPartition& partition,
                             const std::map<std::string, FunctionDef>& functions,
                             const NodeSet& electrode, Propagation gen_lat,
                             std::size_t* unreached = nullptr);

// Place every node one full cycle behind its own activation: node i receives
// its function's limit-cycle trajectory at phase (pcl - lat_i) mod pcl.
// Unreached nodes (lat < 0) stay at rest. Trajectories are sampled at the
// solver dt (cell_cycle_trajectory layout) and keyed by function name.
TissueState distribute_states(const TissueOperators& ops, const Eigen::VectorXd& lat,
                              const std::map<std::string, Eigen::MatrixXd>& trajectories,
                              double pcl);

// Full pre-pacing for one electrode: distribute, then (lat-1) settle with
// `settle_cycles` paced RD cycles. Returns the pre-stimulus tissue state.
TissueState prepace_state(const TissueOperators& ops, const Eigen::VectorXd& lat,
                          const std::map<std::string, Eigen::MatrixXd>& trajectories, double pcl,
                          LimCyc mode, const NodeSet& electrode, int settle_cycles = 1);

struct TuningReport {
    FunctionDef tuned;           // scaled conductivities
    VelocityTriple measured;     // final measured velocities [m/s]
    int iterations = 0;          // measurement passes
};

// Scale each axis's intra/extra pair by (v_target/v_measured)^2 until the
// cable-measured velocity matches the reference within tol.
TuningReport tune_conductivities(const FunctionDef& function, const SolverSetup& solver,
                                 double resolution_mm, double tol = 0.02, int max_iter = 10);

// Measurement-only pass (tuning disabled): document the velocities the given
// conductivities actually produce at this resolution.
VelocityTriple measure_velocities(const FunctionDef& function, const SolverSetup& solver,
                                  double resolution_mm);

}  // namespace avp
