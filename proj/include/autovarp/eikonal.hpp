#pragma once

// Anisotropic first-arrival solver on simplicial meshes (fast iterative
// method with exact edge/face local updates). Used to seed tissue states
// with a physiological activation sequence without simulating it.

#include <Eigen/Dense>
#include <map>

#include "autovarp/mesh.hpp"
#include "autovarp/plan.hpp"

namespace avp {

struct EikonalField {
    Eigen::VectorXd arrival;         // per mesh node [ms]; -1 unreached or excluded
    NodeSet source;
    std::size_t unreached_active = 0;  // active nodes the front never reached
};

// Orthotropic speeds per element come from the element's function: measured
// conduction velocities when present, reference values otherwise. Scar
// elements are impassable.
EikonalField eikonal_lat(const Mesh& mesh, const TagPartition& partition,
                         const std::map<std::string, FunctionDef>& functions,
                         const NodeSet& electrode);

// Speed triple [mm/ms] for one function, measured-over-reference preference.
Eigen::Vector3d eikonal_speeds(const FunctionDef& f);

}  // namespace avp
