#pragma once

// Ionic membrane models and the single-cell protocol operations built on
// them: pacing to a limit cycle, APD restitution, ERP estimation.
//
// The registry ships a two-variable phenomenological model (fast inward
// current gated by a single recovery variable) with two calibrated parameter
// sets, `ht_tissue` and `bz_tissue`, whose refractory periods at a 600 ms
// pacing cycle length differ enough to open a vulnerability window between
// healthy and border-zone tissue. Component 0 of every state vector is the
// transmembrane voltage in mV.

#include <Eigen/Dense>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "autovarp/errors.hpp"

namespace avp {

struct CellState {
    Eigen::VectorXd values;  // state_dim entries, Vm first
    double time = 0;         // [ms]

    double vm() const { return values[0]; }
};

class CellModel {
  public:
    virtual ~CellModel() = default;

    const std::string& name() const { return name_; }
    int state_dim() const { return state_dim_; }
    double stability_bound() const { return stability_bound_; }  // max forward-Euler dt [ms]
    double default_cell_stimulus() const { return cell_stim_; }  // [uA/cm^2], 2 ms pulse

    virtual Eigen::VectorXd resting_state() const = 0;

    // Advance a batch of cells by dt. `states` is state_dim x n (one column
    // per cell), `i_stim` the per-cell stimulus current in uA/cm^2.
    virtual void step(Eigen::Ref<Eigen::MatrixXd> states, double dt,
                      const Eigen::Ref<const Eigen::VectorXd>& i_stim) const = 0;

    virtual const std::map<std::string, double>& params() const = 0;

  protected:
    CellModel(std::string name, int dim, double bound, double cell_stim)
        : name_(std::move(name)), state_dim_(dim), stability_bound_(bound), cell_stim_(cell_stim) {}

  private:
    std::string name_;
    int state_dim_;
    double stability_bound_;
    double cell_stim_;
};

using CellModelPtr = std::shared_ptr<const CellModel>;

// Registry lookup; `overrides` replaces individual named parameters.
// Known ids: mitchellSchaeffer, ht_tissue, bz_tissue, passive.
CellModelPtr make_cell_model(const std::string& id,
                             const std::map<std::string, double>& overrides = {});
bool is_known_cell_model(const std::string& id);

// One forward-Euler step of a single cell.
CellState step_cell(const CellModel& model, const CellState& state, double dt, double i_stim);

// Per-cycle measurements extracted from a paced voltage trace.
struct CycleMetrics {
    bool captured = false;
    double peak_vm = 0;   // [mV]
    double t_up = -1;     // APD90-level upward crossing [ms]
    double t_down = -1;   // downward crossing [ms]
    double apd90 = -1;    // [ms]
    double di = -1;       // to next cycle's upstroke; -1 on the last cycle
};

struct PacedTrace {
    Eigen::VectorXd vm;  // sampled every dt
    double dt = 0;
    std::vector<double> stim_onsets;
    std::vector<CycleMetrics> cycles;
};

struct LimitCycleResult {
    CellState state;                   // pre-stimulus state of the final cycle
    std::vector<CycleMetrics> cycles;  // one per delivered stimulus
    double apd90() const { return cycles.back().apd90; }
};

inline constexpr double kCellDt = 0.05;          // [ms]
inline constexpr double kCellStimDuration = 2.0;  // [ms]

// Pace num_cycles times at pcl from rest; LossOfCapture if any cycle fails
// to produce an action potential.
LimitCycleResult cell_limit_cycle(const CellModel& model, double pcl, int num_cycles,
                                  double dt = kCellDt);

struct RestitutionSample {
    double di = 0;     // prescribed diastolic interval [ms]
    double apd = -1;   // APD90 of the S2 response, -1 when not captured
    bool captured = false;
};

struct RestitutionCurve {
    std::string tissue;
    double s1_pcl = 0;
    std::vector<RestitutionSample> samples;  // sorted by DI ascending
};

// After an S1 limit cycle, deliver one S2 at coupling interval APD(s1) + DI
// for each requested DI.
RestitutionCurve restitution_curve(const CellModel& model, double s1_pcl,
                                   std::vector<double> di_list, double dt = kCellDt);

// Smallest S2 coupling interval (1 ms resolution) that still elicits a
// propagating-quality response: peak Vm > 0 mV and APD >= 30 % of the
// limit-cycle APD.
double estimate_erp(const CellModel& model, double s1_pcl, double dt = kCellDt);

// One PNG chart plus a CSV (columns tissue,DI,APD,captured) per invocation.
void plot_restitution(const std::vector<RestitutionCurve>& curves,
                      const std::filesystem::path& out_png);

// Init-state files: `init/<function>_bcl<PCL>.sv`, one state component per
// line after a `dim=<n> time=<ms>` header.
void save_cell_state(const CellState& state, const std::filesystem::path& path);
CellState load_cell_state(const std::filesystem::path& path);
std::string init_state_filename(const std::string& function, double bcl);

// Full state trajectory over one paced cycle, sampled every dt (pcl/dt + 1
// columns, first column = the given pre-stimulus state). Used to distribute
// phase-shifted states over tissue.
Eigen::MatrixXd cell_cycle_trajectory(const CellModel& model, const CellState& limit_state,
                                      double pcl, double dt = kCellDt);

// Extract per-stimulus metrics from a uniformly sampled voltage trace.
std::vector<CycleMetrics> analyze_trace(const Eigen::VectorXd& vm, double dt,
                                        const std::vector<double>& stim_onsets);

}  // namespace avp
