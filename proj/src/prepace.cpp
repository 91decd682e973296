#include "autovarp/prepace.hpp"

#include <cmath>

namespace avp {

const char* to_string(LimCyc m) {
    return m == LimCyc::lat0 ? "lat-0" : "lat-1";
}

Eigen::VectorXd generate_lat(const TissueOperators& ops, const TagPartition& partition,
                             const std::map<std::string, FunctionDef>& functions,
                             const NodeSet& electrode, Propagation gen_lat,
                             std::size_t* unreached) {
    if (gen_lat == Propagation::ek) {
        EikonalField field = eikonal_lat(ops.mesh(), partition, functions, electrode);
        if (unreached) *unreached = field.unreached_active;
        return field.arrival;
    }

    // rd: one paced beat from rest, recorded activation times
    StimulusEvent stim;
    stim.nodes = electrode;
    stim.onset = 0;
    stim.duration = ops.solver().stimulus.duration;
    stim.strength = ops.solver().stimulus.strength;
    // long enough for the slowest plausible front to cross any desk-scale mesh
    const double span = (ops.mesh().points.rowwise().maxCoeff() -
                         ops.mesh().points.rowwise().minCoeff())
                            .norm();
    const double t_end = std::max(100.0, span / 0.05);
    auto result = run_simulation(ops, ops.resting_state(), {stim}, t_end,
                                 SentinelSetup{ops.solver().sentinel.upstroke_threshold, 150.0,
                                               ops.solver().sentinel.poll_interval},
                                 {});
    if (unreached) {
        *unreached = 0;
        for (auto id : ops.active_to_mesh())
            if (result.lat[id] < 0) ++(*unreached);
    }
    return result.lat;
}

TissueState distribute_states(const TissueOperators& ops, const Eigen::VectorXd& lat,
                              const std::map<std::string, Eigen::MatrixXd>& trajectories,
                              double pcl) {
    const double dt = ops.solver().dt;
    TissueState state = ops.resting_state();
    state.time = 0;

    for (const auto& g : ops.groups()) {
        auto it = trajectories.find(g.name);
        if (it == trajectories.end())
            throw MissingTrajectory("no limit-cycle trajectory for function '" + g.name + "'");
        const Eigen::MatrixXd& traj = it->second;
        const auto period = static_cast<long long>(traj.cols()) - 1;
        if (period <= 0 || std::llround(pcl / dt) != period)
            throw MissingTrajectory("trajectory for '" + g.name +
                                    "' does not span one pacing cycle at the solver dt");

        // Upstroke guard: phases landing mid-upstroke (between stimulus onset
        // and the voltage peak) are snapped to the nearest diastolic sample.
        Eigen::Index peak_idx = 0;
        traj.row(0).maxCoeff(&peak_idx);
        const double diastolic_vm = -70.0;
        auto is_diastolic = [&](long long idx) { return traj(0, idx) < diastolic_vm; };
        auto snap_diastolic = [&](long long idx) {
            for (long long off = 0; off <= period; ++off) {
                const long long back = (idx - off + period + 1) % (period + 1);
                if (is_diastolic(back)) return back;
                const long long fwd = (idx + off) % (period + 1);
                if (is_diastolic(fwd)) return fwd;
            }
            return idx;
        };

        const int dim = g.model->state_dim();
        for (Eigen::Index j = 0; j < g.count; ++j) {
            const Eigen::Index col = g.first + j;
            const double l = lat[ops.active_to_mesh()[static_cast<std::size_t>(col)]];
            if (l < 0) continue;  // unreached: stays at rest
            const double phase = std::fmod(pcl - std::fmod(l, pcl), pcl);
            long long idx = std::llround(phase / dt) % period;
            if (!is_diastolic(idx) && idx <= peak_idx) idx = snap_diastolic(idx);
            state.states.col(col).head(dim) = traj.col(idx);
        }
    }
    return state;
}

TissueState prepace_state(const TissueOperators& ops, const Eigen::VectorXd& lat,
                          const std::map<std::string, Eigen::MatrixXd>& trajectories, double pcl,
                          LimCyc mode, const NodeSet& electrode, int settle_cycles) {
    TissueState state = distribute_states(ops, lat, trajectories, pcl);
    if (mode == LimCyc::lat0) return state;

    std::vector<StimulusEvent> stimuli;
    for (int c = 0; c < settle_cycles; ++c) {
        StimulusEvent stim;
        stim.nodes = electrode;
        stim.onset = c * pcl;
        stim.duration = ops.solver().stimulus.duration;
        stim.strength = ops.solver().stimulus.strength;
        stimuli.push_back(stim);
    }
    auto result =
        run_simulation(ops, std::move(state), stimuli, settle_cycles * pcl, std::nullopt, {});
    return std::move(result.state);
}

TuningReport tune_conductivities(const FunctionDef& function, const SolverSetup& solver,
                                 double resolution_mm, double tol, int max_iter) {
    TuningReport report;
    report.tuned = function;

    struct Axis {
        FiberAxis axis;
        std::optional<double> target;
        double Conductivity::*gi;
        double Conductivity::*ge;
        std::optional<double> VelocityTriple::*out;
    };
    const Axis axes[3] = {
        {FiberAxis::fiber, function.reference_velocity.vf, &Conductivity::gil, &Conductivity::gel,
         &VelocityTriple::vf},
        {FiberAxis::sheet, function.reference_velocity.vs, &Conductivity::git, &Conductivity::get,
         &VelocityTriple::vs},
        {FiberAxis::normal, function.reference_velocity.vn, &Conductivity::gin, &Conductivity::gen,
         &VelocityTriple::vn},
    };

    for (const Axis& ax : axes) {
        if (!ax.target) continue;
        const double target = *ax.target;
        double measured = 0;
        bool converged = false;
        for (int it = 0; it < max_iter; ++it) {
            measured = measure_cv(report.tuned, solver, resolution_mm, ax.axis);
            ++report.iterations;
            if (std::abs(measured - target) / target <= tol) {
                converged = true;
                break;
            }
            // CV scales with the square root of conductivity in the
            // monodomain model; re-measured each pass so model error shows
            // up as slow convergence instead of a silent miss.
            const double scale = (target / measured) * (target / measured);
            report.tuned.conductivity.*ax.gi *= scale;
            report.tuned.conductivity.*ax.ge *= scale;
        }
        if (!converged)
            throw TuningDiverged("conductivity tuning for axis did not reach " +
                                 std::to_string(target) + " m/s within " +
                                 std::to_string(max_iter) + " iterations (last measured " +
                                 std::to_string(measured) + ")");
        report.measured.*ax.out = measured;
    }
    report.tuned.measured_velocity = report.measured;
    return report;
}

VelocityTriple measure_velocities(const FunctionDef& function, const SolverSetup& solver,
                                  double resolution_mm) {
    VelocityTriple v;
    if (function.reference_velocity.vf)
        v.vf = measure_cv(function, solver, resolution_mm, FiberAxis::fiber);
    if (function.reference_velocity.vs)
        v.vs = measure_cv(function, solver, resolution_mm, FiberAxis::sheet);
    if (function.reference_velocity.vn)
        v.vn = measure_cv(function, solver, resolution_mm, FiberAxis::normal);
    return v;
}

}  // namespace avp
