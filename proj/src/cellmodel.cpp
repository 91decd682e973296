#include "autovarp/cellmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "autovarp/pngio.hpp"

namespace avp {

namespace {

constexpr double kCm = 1.0;  // membrane capacitance [uF/cm^2]

// Two-variable phenomenological membrane model: a cubic fast inward current
// gated by a single recovery variable h, with the normalized voltage mapped
// onto a physiological mV range. Rest (v=0, h=1) is an exact fixed point.
class TwoVariableModel final : public CellModel {
  public:
    TwoVariableModel(std::string name, std::map<std::string, double> params)
        : CellModel(std::move(name), 2, 0.25, 30.0), p_(std::move(params)) {}

    Eigen::VectorXd resting_state() const override {
        Eigen::VectorXd s(2);
        s << p_.at("v_rest"), 1.0;
        return s;
    }

    void step(Eigen::Ref<Eigen::MatrixXd> states, double dt,
              const Eigen::Ref<const Eigen::VectorXd>& i_stim) const override {
        const double tau_in = p_.at("tau_in");
        const double tau_out = p_.at("tau_out");
        const double tau_open = p_.at("tau_open");
        const double tau_close = p_.at("tau_close");
        const double v_gate = p_.at("v_gate");
        const double v_rest = p_.at("v_rest");
        const double v_amp = p_.at("v_amp");

        auto vm = states.row(0).array();
        auto h = states.row(1).array();
        const auto v = (vm - v_rest) / v_amp;

        const auto dv = h * v.square() * (1.0 - v) / tau_in - v / tau_out;
        const auto dh = (v < v_gate)
                            .select((1.0 - h) / tau_open, -h / tau_close);

        states.row(0).array() += dt * (v_amp * dv + i_stim.transpose().array() / kCm);
        states.row(1).array() += dt * dh;
    }

    const std::map<std::string, double>& params() const override { return p_; }

  private:
    std::map<std::string, double> p_;
};

// Non-excitable leak membrane; rest is the only attractor.
class PassiveModel final : public CellModel {
  public:
    PassiveModel(std::string name, std::map<std::string, double> params)
        : CellModel(std::move(name), 1, 1.0, 30.0), p_(std::move(params)) {}

    Eigen::VectorXd resting_state() const override {
        Eigen::VectorXd s(1);
        s << p_.at("v_rest");
        return s;
    }

    void step(Eigen::Ref<Eigen::MatrixXd> states, double dt,
              const Eigen::Ref<const Eigen::VectorXd>& i_stim) const override {
        const double v_rest = p_.at("v_rest");
        const double g = p_.at("g_leak");
        auto vm = states.row(0).array();
        states.row(0).array() +=
            dt * (-(vm - v_rest) * g + i_stim.transpose().array() / kCm);
    }

    const std::map<std::string, double>& params() const override { return p_; }

  private:
    std::map<std::string, double> p_;
};

std::map<std::string, double> base_params() {
    return {{"tau_in", 0.3},   {"tau_out", 6.0},  {"tau_open", 120.0}, {"tau_close", 150.0},
            {"v_gate", 0.13},  {"v_rest", -85.0}, {"v_amp", 115.0}};
}

// Calibrated presets. tau_close fixes the action-potential duration and with
// it the refractory period: ht_tissue lands at ERP ~280 ms and bz_tissue at
// ~350 ms for a 600 ms S1 cycle length, bracketing the vulnerability window.
// tau_open sets the speed of diastolic recovery and therefore how many paced
// cycles the tissue needs to forget its initial condition.
std::map<std::string, double> ht_params() {
    auto p = base_params();
    p["tau_open"] = 300.0;
    p["tau_close"] = 138.0;
    return p;
}

std::map<std::string, double> bz_params() {
    auto p = base_params();
    p["tau_open"] = 500.0;
    p["tau_close"] = 216.0;
    return p;
}

}  // namespace

CellModelPtr make_cell_model(const std::string& id, const std::map<std::string, double>& overrides) {
    std::map<std::string, double> p;
    if (id == "mitchellSchaeffer")
        p = base_params();
    else if (id == "ht_tissue")
        p = ht_params();
    else if (id == "bz_tissue")
        p = bz_params();
    else if (id == "passive")
        p = {{"v_rest", -85.0}, {"g_leak", 0.1}};
    else
        throw ReferenceError("unknown cell model '" + id + "'");

    for (const auto& [k, v] : overrides) {
        if (!p.count(k))
            throw ReferenceError("cell model '" + id + "' has no parameter '" + k + "'");
        p[k] = v;
    }
    if (id == "passive") return std::make_shared<PassiveModel>(id, std::move(p));
    return std::make_shared<TwoVariableModel>(id, std::move(p));
}

bool is_known_cell_model(const std::string& id) {
    return id == "mitchellSchaeffer" || id == "ht_tissue" || id == "bz_tissue" || id == "passive";
}

CellState step_cell(const CellModel& model, const CellState& state, double dt, double i_stim) {
    CellState next = state;
    if (dt == 0) return next;
    if (dt < 0 || dt > model.stability_bound())
        throw NumericalBlowup("dt " + std::to_string(dt) + " exceeds stability bound " +
                              std::to_string(model.stability_bound()) + " of model '" +
                              model.name() + "'");
    Eigen::MatrixXd m = next.values;
    Eigen::VectorXd stim(1);
    stim << i_stim;
    model.step(m.reshaped(model.state_dim(), 1), dt, stim);
    next.values = m;
    next.time += dt;
    if (!next.values.allFinite())
        throw NumericalBlowup("non-finite state in model '" + model.name() + "' at t=" +
                              std::to_string(next.time));
    return next;
}

namespace {

// Pace one cell, sampling Vm every step. Returns the trace and, optionally,
// the state snapshot just before the stimulus at `snapshot_time`.
struct PaceRun {
    Eigen::VectorXd vm;
    CellState snapshot;
    CellState final_state;
};

PaceRun pace_cell(const CellModel& model, const CellState& initial, double dt,
                  const std::vector<double>& onsets, double strength, double duration,
                  double t_end, double snapshot_time = -1) {
    const auto steps = static_cast<std::size_t>(std::llround(t_end / dt));
    PaceRun run;
    run.vm.resize(steps + 1);

    Eigen::MatrixXd state = initial.values;
    Eigen::VectorXd stim(1);
    run.vm[0] = state(0, 0);
    std::size_t next_onset = 0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double t = i * dt;
        if (snapshot_time >= 0 && std::abs(t - snapshot_time) < dt / 2 &&
            run.snapshot.values.size() == 0) {
            run.snapshot.values = state.col(0);
            run.snapshot.time = initial.time + t;
        }
        while (next_onset < onsets.size() && onsets[next_onset] + duration <= t) ++next_onset;
        double i_stim = 0;
        for (std::size_t k = next_onset; k < onsets.size() && onsets[k] <= t; ++k)
            if (t < onsets[k] + duration) i_stim = strength;
        stim << i_stim;
        model.step(state, dt, stim);
        run.vm[i + 1] = state(0, 0);
    }
    if (!state.allFinite())
        throw NumericalBlowup("non-finite state in model '" + model.name() + "'");
    run.final_state.values = state.col(0);
    run.final_state.time = initial.time + steps * dt;
    return run;
}

double interp_cross(double t0, double v0, double t1, double v1, double level) {
    return t0 + (level - v0) / (v1 - v0) * (t1 - t0);
}

}  // namespace

std::vector<CycleMetrics> analyze_trace(const Eigen::VectorXd& vm, double dt,
                                        const std::vector<double>& stim_onsets) {
    std::vector<CycleMetrics> out(stim_onsets.size());
    const auto n = static_cast<std::size_t>(vm.size());
    for (std::size_t k = 0; k < stim_onsets.size(); ++k) {
        const auto i0 = static_cast<std::size_t>(std::llround(stim_onsets[k] / dt));
        const std::size_t i1 = k + 1 < stim_onsets.size()
                                   ? static_cast<std::size_t>(std::llround(stim_onsets[k + 1] / dt))
                                   : n - 1;
        if (i0 >= n) break;
        CycleMetrics& m = out[k];
        const double baseline = vm[static_cast<Eigen::Index>(i0)];

        std::size_t peak_idx = i0;
        for (std::size_t i = i0; i <= std::min(i1, n - 1); ++i)
            if (vm[static_cast<Eigen::Index>(i)] > vm[static_cast<Eigen::Index>(peak_idx)])
                peak_idx = i;
        m.peak_vm = vm[static_cast<Eigen::Index>(peak_idx)];
        m.captured = m.peak_vm > 0.0;
        if (!m.captured) continue;

        const double level = m.peak_vm - 0.9 * (m.peak_vm - baseline);
        for (std::size_t i = i0; i < peak_idx; ++i) {
            const double a = vm[static_cast<Eigen::Index>(i)], b = vm[static_cast<Eigen::Index>(i + 1)];
            if (a < level && b >= level) {
                m.t_up = interp_cross(i * dt, a, (i + 1) * dt, b, level);
                break;
            }
        }
        for (std::size_t i = peak_idx; i < std::min(i1, n - 1); ++i) {
            const double a = vm[static_cast<Eigen::Index>(i)], b = vm[static_cast<Eigen::Index>(i + 1)];
            if (a >= level && b < level) {
                m.t_down = interp_cross(i * dt, a, (i + 1) * dt, b, level);
                break;
            }
        }
        if (m.t_up >= 0 && m.t_down >= 0) m.apd90 = m.t_down - m.t_up;
    }
    for (std::size_t k = 0; k + 1 < out.size(); ++k)
        if (out[k].t_down >= 0 && out[k + 1].t_up >= 0) out[k].di = out[k + 1].t_up - out[k].t_down;
    return out;
}

LimitCycleResult cell_limit_cycle(const CellModel& model, double pcl, int num_cycles, double dt) {
    if (num_cycles < 1) throw SchemaError("num_cycles must be >= 1");
    std::vector<double> onsets(num_cycles);
    for (int i = 0; i < num_cycles; ++i) onsets[i] = i * pcl;

    CellState rest{model.resting_state(), 0.0};
    const double snapshot_time = (num_cycles - 1) * pcl;
    auto run = pace_cell(model, rest, dt, onsets, model.default_cell_stimulus(),
                         kCellStimDuration, num_cycles * pcl, snapshot_time);

    LimitCycleResult result;
    result.cycles = analyze_trace(run.vm, dt, onsets);
    for (int i = 0; i < num_cycles; ++i)
        if (!result.cycles[i].captured || result.cycles[i].apd90 < 0)
            throw LossOfCapture("model '" + model.name() + "' lost capture at cycle " +
                                std::to_string(i) + " (pcl " + std::to_string(pcl) + ")");
    result.state = run.snapshot;
    return result;
}

namespace {

// S1 from the limit-cycle state, S2 at the given coupling interval; returns
// the metrics of the S2 response.
CycleMetrics s2_response(const CellModel& model, const CellState& lc_state, double ci, double dt) {
    const std::vector<double> onsets = {0.0, ci};
    auto run = pace_cell(model, lc_state, dt, onsets, model.default_cell_stimulus(),
                         kCellStimDuration, ci + 800.0);
    auto metrics = analyze_trace(run.vm, dt, onsets);
    return metrics[1];
}

bool quality_response(const CycleMetrics& m, double lc_apd) {
    return m.captured && m.apd90 >= 0.3 * lc_apd;
}

}  // namespace

RestitutionCurve restitution_curve(const CellModel& model, double s1_pcl,
                                   std::vector<double> di_list, double dt) {
    auto lc = cell_limit_cycle(model, s1_pcl, 100, dt);
    const double lc_apd = lc.apd90();

    RestitutionCurve curve;
    curve.tissue = model.name();
    curve.s1_pcl = s1_pcl;
    std::sort(di_list.begin(), di_list.end());
    for (double di : di_list) {
        auto m = s2_response(model, lc.state, lc_apd + di, dt);
        RestitutionSample s;
        s.di = di;
        s.captured = quality_response(m, lc_apd);
        s.apd = s.captured ? m.apd90 : -1.0;
        curve.samples.push_back(s);
    }
    return curve;
}

double estimate_erp(const CellModel& model, double s1_pcl, double dt) {
    auto lc = cell_limit_cycle(model, s1_pcl, 100, dt);
    const double lc_apd = lc.apd90();

    double lo = 10.0;   // deep in the refractory plateau
    double hi = s1_pcl; // captured by construction at the limit cycle
    while (hi - lo > 1.0) {
        const double mid = std::floor((lo + hi) / 2);
        if (quality_response(s2_response(model, lc.state, mid, dt), lc_apd))
            hi = mid;
        else
            lo = mid;
    }
    return hi;
}

Eigen::MatrixXd cell_cycle_trajectory(const CellModel& model, const CellState& limit_state,
                                      double pcl, double dt) {
    const auto steps = static_cast<std::size_t>(std::llround(pcl / dt));
    Eigen::MatrixXd traj(model.state_dim(), steps + 1);
    Eigen::MatrixXd state = limit_state.values;
    Eigen::VectorXd stim(1);
    traj.col(0) = state.col(0);
    for (std::size_t i = 0; i < steps; ++i) {
        const double t = i * dt;
        stim << (t < kCellStimDuration ? model.default_cell_stimulus() : 0.0);
        model.step(state, dt, stim);
        traj.col(i + 1) = state.col(0);
    }
    return traj;
}

void save_cell_state(const CellState& state, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IOError("cannot write '" + path.string() + "'");
    out << "dim=" << state.values.size() << " time=" << state.time << "\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < state.values.size(); ++i) out << state.values[i] << "\n";
    if (!out) throw IOError("write failed for '" + path.string() + "'");
}

CellState load_cell_state(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    std::string header;
    std::getline(in, header);
    int dim = -1;
    double time = 0;
    if (std::sscanf(header.c_str(), "dim=%d time=%lf", &dim, &time) != 2 || dim <= 0)
        throw FormatError("bad init-state header in '" + path.string() + "'");
    CellState s;
    s.time = time;
    s.values.resize(dim);
    for (int i = 0; i < dim; ++i)
        if (!(in >> s.values[i]))
            throw FormatError("truncated init-state file '" + path.string() + "'");
    return s;
}

std::string init_state_filename(const std::string& function, double bcl) {
    std::ostringstream ss;
    ss << function << "_bcl" << bcl << ".sv";
    return ss.str();
}

void plot_restitution(const std::vector<RestitutionCurve>& curves,
                      const std::filesystem::path& out_png) {
    if (curves.empty()) throw SchemaError("plot_restitution needs at least one curve");

    // CSV next to the image
    auto csv_path = out_png;
    csv_path.replace_extension(".csv");
    {
        if (out_png.has_parent_path()) std::filesystem::create_directories(out_png.parent_path());
        std::ofstream csv(csv_path);
        if (!csv) throw IOError("cannot write '" + csv_path.string() + "'");
        csv << "tissue,DI,APD,captured\n";
        for (const auto& c : curves)
            for (const auto& s : c.samples)
                csv << c.tissue << "," << s.di << "," << s.apd << "," << (s.captured ? 1 : 0)
                    << "\n";
    }

    Canvas canvas(720, 520, Rgb{255, 255, 255});
    const int ml = 70, mr = 20, mt = 30, mb = 50;
    const int px0 = ml, px1 = canvas.width() - mr, py0 = canvas.height() - mb, py1 = mt;

    double di_max = 10, apd_max = 10;
    for (const auto& c : curves)
        for (const auto& s : c.samples) {
            di_max = std::max(di_max, s.di);
            if (s.captured) apd_max = std::max(apd_max, s.apd);
        }
    di_max *= 1.05;
    apd_max *= 1.15;

    auto X = [&](double di) { return px0 + static_cast<int>((px1 - px0) * di / di_max); };
    auto Y = [&](double apd) { return py0 - static_cast<int>((py0 - py1) * apd / apd_max); };

    const Rgb axis{60, 60, 60};
    canvas.line(px0, py0, px1, py0, axis);
    canvas.line(px0, py0, px0, py1, axis);
    for (int i = 0; i <= 5; ++i) {
        const double di = di_max * i / 5, apd = apd_max * i / 5;
        canvas.line(X(di), py0, X(di), py0 + 4, axis);
        canvas.text(X(di) - 10, py0 + 8, std::to_string(static_cast<int>(di)), axis);
        canvas.line(px0 - 4, Y(apd), px0, Y(apd), axis);
        canvas.text(px0 - 42, Y(apd) - 4, std::to_string(static_cast<int>(apd)), axis);
    }
    canvas.text((px0 + px1) / 2 - 20, canvas.height() - 16, "DI (ms)", axis);
    canvas.text(8, py1 - 16, "APD90 (ms)", axis);

    const std::vector<Rgb> palette = {{200, 40, 40}, {40, 80, 200}, {30, 140, 60}, {160, 60, 160}};
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
        const Rgb col = palette[ci % palette.size()];
        const auto& c = curves[ci];
        int prev_x = -1, prev_y = -1;
        for (const auto& s : c.samples) {
            if (!s.captured) {
                canvas.text(X(s.di) - 2, py0 - 10, "x", col);
                prev_x = -1;
                continue;
            }
            const int x = X(s.di), y = Y(s.apd);
            canvas.fill_rect(x - 2, y - 2, 4, 4, col);
            if (prev_x >= 0) canvas.line(prev_x, prev_y, x, y, col);
            prev_x = x;
            prev_y = y;
        }
        canvas.text(px1 - 150, py1 + 14 + 12 * static_cast<int>(ci),
                    c.tissue + " (S1 " + std::to_string(static_cast<int>(c.s1_pcl)) + ")", col);
    }
    write_png(canvas, out_png);
}

}  // namespace avp
