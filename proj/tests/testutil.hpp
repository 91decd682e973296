#pragma once

// Shared test helpers: scratch directories and an independent adaptive-step
// reference integrator for the two-variable membrane model. The reference
// implementation deliberately re-derives the right-hand side and uses an
// embedded Runge-Kutta pair so the forward-Euler production path is checked
// against an unrelated numerical route.

#include <Eigen/Dense>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "autovarp/cellmodel.hpp"

namespace testutil {

class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("avp_test_" + tag + "_" + std::to_string(counter_++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

  private:
    static inline int counter_ = 0;
    std::filesystem::path path_;
};

struct StimPulse {
    double onset, duration, strength;  // ms, ms, uA/cm^2
};

struct MsParams {
    double tau_in, tau_out, tau_open, tau_close, v_gate, v_rest, v_amp;
};

inline MsParams ms_params_of(const avp::CellModel& model) {
    const auto& p = model.params();
    return {p.at("tau_in"),  p.at("tau_out"), p.at("tau_open"), p.at("tau_close"),
            p.at("v_gate"), p.at("v_rest"),  p.at("v_amp")};
}

// right-hand side in (v, h) with v normalized to [0, 1]
inline Eigen::Vector2d ms_rhs(const MsParams& p, const Eigen::Vector2d& y, double i_stim) {
    const double v = y[0], h = y[1];
    const double dv = h * v * v * (1.0 - v) / p.tau_in - v / p.tau_out + i_stim / p.v_amp;
    const double dh = v < p.v_gate ? (1.0 - h) / p.tau_open : -h / p.tau_close;
    return {dv, dh};
}

// Adaptive Cash-Karp RK45 with dense output at a fixed sampling interval.
// Step size is capped so the gate switching at v_gate is resolved.
inline Eigen::VectorXd ms_reference_vm(const MsParams& p, const std::vector<StimPulse>& pulses,
                                       double t_end, double out_dt, double tol = 1e-8) {
    static const double A[6] = {0, 1.0 / 5, 3.0 / 10, 3.0 / 5, 1.0, 7.0 / 8};
    static const double B[6][5] = {
        {},
        {1.0 / 5},
        {3.0 / 40, 9.0 / 40},
        {3.0 / 10, -9.0 / 10, 6.0 / 5},
        {-11.0 / 54, 5.0 / 2, -70.0 / 27, 35.0 / 27},
        {1631.0 / 55296, 175.0 / 512, 575.0 / 13824, 44275.0 / 110592, 253.0 / 4096}};
    static const double C5[6] = {37.0 / 378, 0, 250.0 / 621, 125.0 / 594, 0, 512.0 / 1771};
    static const double C4[6] = {2825.0 / 27648, 0,           18575.0 / 48384,
                                 13525.0 / 55296, 277.0 / 14336, 1.0 / 4};

    auto stim_at = [&](double t) {
        double s = 0;
        for (const auto& pulse : pulses)
            if (t >= pulse.onset && t < pulse.onset + pulse.duration) s = pulse.strength;
        return s;
    };

    const auto samples = static_cast<std::size_t>(std::llround(t_end / out_dt)) + 1;
    Eigen::VectorXd vm(samples);
    Eigen::Vector2d y(0.0, 1.0);  // rest
    double t = 0, h = 0.01;
    const double h_max = 0.05;  // resolve pulses and the gate switch
    std::size_t next_sample = 0;

    auto record_until = [&](double t_now, const Eigen::Vector2d& y_now) {
        while (next_sample < samples && next_sample * out_dt <= t_now + 1e-12) {
            vm[static_cast<Eigen::Index>(next_sample)] = p.v_rest + p.v_amp * y_now[0];
            ++next_sample;
        }
    };
    record_until(0, y);

    while (t < t_end - 1e-12) {
        h = std::min({h, h_max, t_end - t});
        // never integrate across a sample point: sampled values then need no
        // interpolation and pulse edges stay sharp
        const double next_edge = next_sample * out_dt;
        if (t + h > next_edge + 1e-15) h = next_edge - t;

        Eigen::Vector2d k[6];
        k[0] = ms_rhs(p, y, stim_at(t));
        for (int s = 1; s < 6; ++s) {
            Eigen::Vector2d ys = y;
            for (int j = 0; j < s; ++j) ys += h * B[s][j] * k[j];
            k[s] = ms_rhs(p, ys, stim_at(t + A[s] * h));
        }
        Eigen::Vector2d y5 = y, y4 = y;
        for (int s = 0; s < 6; ++s) {
            y5 += h * C5[s] * k[s];
            y4 += h * C4[s] * k[s];
        }
        const double err = (y5 - y4).cwiseAbs().maxCoeff() / tol;
        if (err <= 1.0) {
            t += h;
            y = y5;
            record_until(t, y);
            h *= std::min(5.0, 0.9 * std::pow(std::max(err, 1e-12), -0.2));
        } else {
            h *= std::max(0.1, 0.9 * std::pow(err, -0.25));
        }
        if (h < 1e-9) h = 1e-9;
    }
    return vm;
}

}  // namespace testutil
