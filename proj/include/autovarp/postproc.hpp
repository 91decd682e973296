#pragma once

// Outcome classification from MT checkpoint timestamps, status tables,
// voltage frame export, and reproducibility bundles. Everything here is
// read-only over simulation outputs.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "autovarp/engine.hpp"

namespace avp {

inline constexpr const char* kToolVersion = "1.0.0";

enum class OutcomeClass { non_inducible, non_sustained, sustained };
const char* to_string(OutcomeClass c);

// Sentinel exits within quiescence_window + 5 ms mean nothing ever fired;
// anything at or beyond the threshold counts as sustained.
OutcomeClass classify_outcome(double mt_exit, double mt_threshold, double quiescence_window);

struct OutcomeRecord {
    std::string subject;
    std::string protocol;
    std::string electrode;
    double pcl = 0;
    double ci = 0;
    double mt_exit = 0;
    OutcomeClass outcome = OutcomeClass::non_inducible;
};

// All MT results found on disk for the spec's subjects, in (subject,
// protocol order, ci) order.
std::vector<OutcomeRecord> collect_outcomes(const StudySpec& spec, double mt_threshold);

// One CSV per subject under status_tables/ plus a cohort summary grid; also
// prints the tables. Pure function of the checkpoints directories.
void write_status(const StudySpec& spec, double mt_threshold);

// Stitch the PP -> S1 -> S2 -> MT voltage series of one task into a PNG
// frame sequence plus a frame-index manifest. Raises MissingData naming the
// first stage whose data is absent.
void export_frames(const StudySpec& spec, const std::string& subject, const std::string& protocol,
                   double ci);

// Frame export for every (protocol, ci) of every subject in the spec.
void export_all_frames(const StudySpec& spec);

// Self-contained reproduction archive: plan, protocols, subject inputs, the
// checkpoints a replay of the selected stage restarts from, the exact
// command, a hash manifest, and a license file.
std::filesystem::path make_bundle(const StudySpec& spec);

struct SceneConfig {
    int width = 640, height = 640;
    double vm_min = -85, vm_max = 30;
    double azimuth_deg = 0, elevation_deg = 90;  // top view by default
};

SceneConfig load_scene(const std::filesystem::path& root);

}  // namespace avp
