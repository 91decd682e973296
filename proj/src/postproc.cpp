#include "autovarp/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <json.hpp>

#include "autovarp/pngio.hpp"
#include "autovarp/sha256.hpp"
#include "autovarp/zipio.hpp"

namespace avp {

using njson = nlohmann::json;

namespace {

std::string fmt1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

const char* kDefaultLicense =
    "Creative Commons Attribution 4.0 International (CC BY 4.0)\n"
    "\n"
    "This bundle contains simulation inputs, checkpoints and metadata\n"
    "sufficient to reproduce the enclosed inducibility study. You are free\n"
    "to share and adapt this material for any purpose provided appropriate\n"
    "credit is given. See https://creativecommons.org/licenses/by/4.0/\n";

// files in `dir` that start with `prefix` and end with `suffix`, sorted
std::vector<std::filesystem::path> glob_prefix(const std::filesystem::path& dir,
                                               const std::string& prefix,
                                               const std::string& suffix) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string fn = entry.path().filename().string();
        if (fn.size() > prefix.size() + suffix.size() && fn.rfind(prefix, 0) == 0 &&
            fn.substr(fn.size() - suffix.size()) == suffix)
            out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

double trailing_number(const std::string& filename, const std::string& prefix,
                       const std::string& suffix) {
    return std::stod(filename.substr(prefix.size(), filename.size() - prefix.size() - suffix.size()));
}

struct StatusRow {
    std::string protocol, electrode;
    bool gen_lat = false;
    std::vector<double> pp_bcls;
    std::vector<double> s1_offsets;                  // with pcl alongside
    std::vector<std::pair<double, double>> s2;       // (ci, offset)
    std::vector<std::pair<double, double>> mt;       // (ci, duration)
    double pcl = 0;
};

StatusRow scan_protocol(const std::filesystem::path& ckdir, const std::string& subject,
                        const ProtocolDef& proto) {
    StatusRow row;
    row.protocol = proto.name;
    row.electrode = proto.electrode;
    row.pcl = proto.bcl;

    row.gen_lat =
        !glob_prefix(ckdir, "lim_cic-ptcl_" + proto.name + "_", "-act_seq.dat").empty();

    for (const auto& p : glob_prefix(ckdir, proto.name + "_" + subject + "_pp_", ".roe")) {
        const std::string fn = p.filename().string();
        const auto bcl_pos = fn.find("_bcl_");
        const auto ts_pos = fn.rfind("_tstamp_");
        if (bcl_pos == std::string::npos || ts_pos == std::string::npos) continue;
        row.pp_bcls.push_back(std::stod(fn.substr(bcl_pos + 5, ts_pos - bcl_pos - 5)));
    }

    const std::string s1_prefix = "S1_" + proto.electrode + "_PCL_" + fmt1(proto.bcl) + "_ms_" +
                                  subject + "_tstamp_";
    for (const auto& p : glob_prefix(ckdir, s1_prefix, ".roe"))
        row.s1_offsets.push_back(trailing_number(p.filename().string(), s1_prefix, ".roe"));
    std::sort(row.s1_offsets.begin(), row.s1_offsets.end());

    const std::string s2_prefix =
        "S2_" + proto.electrode + "_PCL_" + fmt1(proto.bcl) + "_ms_CI_";
    for (const auto& p : glob_prefix(ckdir, s2_prefix, ".roe")) {
        const std::string fn = p.filename().string();
        const auto ms_pos = fn.find("_ms_", s2_prefix.size());
        const auto ts_pos = fn.rfind("_tstamp_");
        if (ms_pos == std::string::npos || ts_pos == std::string::npos) continue;
        const double ci = std::stod(fn.substr(s2_prefix.size(), ms_pos - s2_prefix.size()));
        const double off = std::stod(fn.substr(ts_pos + 8, fn.size() - ts_pos - 8 - 4));
        row.s2.emplace_back(ci, off);
    }
    std::sort(row.s2.begin(), row.s2.end());

    const std::string mt_prefix =
        "MT_" + proto.electrode + "_PCL_" + fmt1(proto.bcl) + "_ms_CI_";
    for (const auto& p : glob_prefix(ckdir, mt_prefix, ".roe")) {
        const std::string fn = p.filename().string();
        const auto ms_pos = fn.find("_ms_", mt_prefix.size());
        const auto ts_pos = fn.rfind("_tstamp_");
        if (ms_pos == std::string::npos || ts_pos == std::string::npos) continue;
        const double ci = std::stod(fn.substr(mt_prefix.size(), ms_pos - mt_prefix.size()));
        const double dur = std::stod(fn.substr(ts_pos + 8, fn.size() - ts_pos - 8 - 4));
        row.mt.emplace_back(ci, dur);
    }
    std::sort(row.mt.begin(), row.mt.end());
    return row;
}

std::string csv_quote(const std::string& s) {
    if (s.find(',') == std::string::npos && s.find('"') == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "/" : "") + parts[i];
    return out;
}

}  // namespace

const char* to_string(OutcomeClass c) {
    switch (c) {
        case OutcomeClass::non_inducible: return "non_inducible";
        case OutcomeClass::non_sustained: return "non_sustained";
        case OutcomeClass::sustained: return "sustained";
    }
    return "?";
}

OutcomeClass classify_outcome(double mt_exit, double mt_threshold, double quiescence_window) {
    if (mt_exit >= mt_threshold) return OutcomeClass::sustained;
    if (mt_exit <= quiescence_window + 5.0) return OutcomeClass::non_inducible;
    return OutcomeClass::non_sustained;
}

std::vector<OutcomeRecord> collect_outcomes(const StudySpec& spec, double mt_threshold) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols =
        spec.protocols_path.empty() ? plan.protocols : load_protocols(spec.protocols_path, plan);
    const double qw = plan.solver_setup.sentinel.quiescence_window;

    std::vector<OutcomeRecord> out;
    for (const auto& subject_dir : list_subjects(spec)) {
        const std::string subject = subject_dir.filename().string();
        const auto ckdir = checkpoints_dir(subject_dir);
        for (const auto& proto : protocols) {
            const auto row = scan_protocol(ckdir, subject, proto);
            for (const auto& [ci, dur] : row.mt) {
                OutcomeRecord r;
                r.subject = subject;
                r.protocol = proto.name;
                r.electrode = proto.electrode;
                r.pcl = proto.bcl;
                r.ci = ci;
                r.mt_exit = dur;
                r.outcome = classify_outcome(dur, mt_threshold, qw);
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

void write_status(const StudySpec& spec, double mt_threshold) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols =
        spec.protocols_path.empty() ? plan.protocols : load_protocols(spec.protocols_path, plan);

    const auto table_dir = spec.root / "status_tables";
    std::filesystem::create_directories(table_dir);

    std::map<std::string, std::map<std::string, int>> cohort_sustained;  // subject -> proto -> n
    const int thr_int = static_cast<int>(std::llround(mt_threshold));

    for (const auto& subject_dir : list_subjects(spec)) {
        const std::string subject = subject_dir.filename().string();
        const auto ckdir = checkpoints_dir(subject_dir);

        std::ofstream csv(table_dir / (subject + ".csv"));
        if (!csv) throw IOError("cannot write status table for '" + subject + "'");
        csv << "protocol,gen-lat,lim-cycle,S1,S2,MT,sustained_tally\n";
        std::cout << "status: " << subject << "\n";

        for (const auto& proto : protocols) {
            const auto row = scan_protocol(ckdir, subject, proto);

            std::vector<std::string> pp_labels, s1_labels, s2_labels, mt_labels;
            for (double bcl : row.pp_bcls) pp_labels.push_back(lim_cyc_label(bcl));
            for (double off : row.s1_offsets) s1_labels.push_back(s1_label(row.pcl, off));
            for (const auto& [ci, off] : row.s2) s2_labels.push_back(s2_label(row.pcl, ci, off));
            int sustained = 0;
            for (const auto& [ci, dur] : row.mt) {
                mt_labels.push_back(mt_label(row.pcl, ci, dur));
                if (classify_outcome(dur, mt_threshold,
                                     plan.solver_setup.sentinel.quiescence_window) ==
                    OutcomeClass::sustained)
                    ++sustained;
            }
            cohort_sustained[subject][proto.name] = sustained;

            const std::string tally =
                row.mt.empty() ? ""
                               : "over " + std::to_string(thr_int) + " msec: " +
                                     std::to_string(sustained) + "/" +
                                     std::to_string(row.mt.size());
            const std::string proto_cell = proto.name + "," + proto.electrode;
            csv << csv_quote(proto_cell) << "," << (row.gen_lat ? "gen-lat" : "") << ","
                << join(pp_labels) << "," << join(s1_labels) << "," << join(s2_labels) << ","
                << join(mt_labels) << "," << csv_quote(tally) << "\n";

            std::cout << "  " << proto_cell << ": " << (row.gen_lat ? "gen-lat" : "-") << "  "
                      << (pp_labels.empty() ? "-" : join(pp_labels)) << "  "
                      << (s1_labels.empty() ? "-" : join(s1_labels)) << "  "
                      << (s2_labels.empty() ? "-" : join(s2_labels)) << "  "
                      << (mt_labels.empty() ? "-" : join(mt_labels))
                      << (tally.empty() ? "" : "/" + tally) << "\n";
        }
    }

    // cohort grid: rows subjects, columns protocols, 1 = sustained reentry
    std::ofstream grid(table_dir / "cohort_summary.csv");
    grid << "subject";
    for (const auto& proto : protocols) grid << "," << csv_quote(proto.name);
    grid << "\n";
    for (const auto& [subject, per_proto] : cohort_sustained) {
        grid << csv_quote(subject);
        for (const auto& proto : protocols) {
            auto it = per_proto.find(proto.name);
            grid << "," << (it != per_proto.end() && it->second > 0 ? 1 : 0);
        }
        grid << "\n";
    }
}

SceneConfig load_scene(const std::filesystem::path& root) {
    SceneConfig scene;
    const auto path = root / "scene.json";
    if (!std::filesystem::exists(path)) return scene;
    std::ifstream in(path);
    njson j = njson::parse(in, nullptr, true, true);
    scene.width = j.value("width", scene.width);
    scene.height = j.value("height", scene.height);
    scene.vm_min = j.value("vm_min", scene.vm_min);
    scene.vm_max = j.value("vm_max", scene.vm_max);
    scene.azimuth_deg = j.value("azimuth_deg", scene.azimuth_deg);
    scene.elevation_deg = j.value("elevation_deg", scene.elevation_deg);
    return scene;
}

namespace {

// mesh -> 2D projection (orthographic) for frame rendering
struct Projection {
    Eigen::Matrix2Xd xy;      // canvas coordinates per mesh node
    Eigen::VectorXd depth;    // painter order
};

Projection project_mesh(const Mesh& mesh, const SceneConfig& scene) {
    const double az = scene.azimuth_deg * M_PI / 180.0;
    const double el = scene.elevation_deg * M_PI / 180.0;
    const Eigen::Matrix3d rot =
        (Eigen::AngleAxisd(el - M_PI / 2, Eigen::Vector3d::UnitX()) *
         Eigen::AngleAxisd(az, Eigen::Vector3d::UnitZ()))
            .toRotationMatrix();
    const Eigen::Matrix3Xd r = rot * mesh.points;

    Projection proj;
    const double xmin = r.row(0).minCoeff(), xmax = r.row(0).maxCoeff();
    const double ymin = r.row(1).minCoeff(), ymax = r.row(1).maxCoeff();
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-9});
    const double margin = 20;
    const double scale = (std::min(scene.width, scene.height) - 2 * margin) / span;
    proj.xy.resize(2, r.cols());
    for (Eigen::Index i = 0; i < r.cols(); ++i) {
        proj.xy(0, i) = margin + (r(0, i) - xmin) * scale;
        proj.xy(1, i) = scene.height - margin - (r(1, i) - ymin) * scale;
    }
    proj.depth = r.row(2).transpose();
    return proj;
}

void render_frame(Canvas& canvas, const Mesh& mesh, const Projection& proj,
                  const std::vector<std::uint32_t>& active_order, const Eigen::VectorXf& vm,
                  const SceneConfig& scene, const std::string& caption) {
    canvas.fill_rect(0, 0, canvas.width(), canvas.height(), Rgb{20, 20, 24});

    Eigen::VectorXd vm_mesh =
        Eigen::VectorXd::Constant(static_cast<Eigen::Index>(mesh.num_points()),
                                  std::numeric_limits<double>::quiet_NaN());
    for (Eigen::Index i = 0; i < vm.size(); ++i) vm_mesh[active_order[static_cast<std::size_t>(i)]] = vm[i];

    std::vector<std::size_t> order(mesh.num_elements());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto depth = [&](const Element& e) {
            double d = 0;
            for (int k = 0; k < e.nv(); ++k) d += proj.depth[e.v[k]];
            return d / e.nv();
        };
        return depth(mesh.elements[a]) < depth(mesh.elements[b]);
    });

    for (std::size_t idx : order) {
        const Element& e = mesh.elements[idx];
        double sum = 0;
        int n = 0;
        for (int k = 0; k < e.nv(); ++k) {
            const double v = vm_mesh[e.v[k]];
            if (!std::isnan(v)) {
                sum += v;
                ++n;
            }
        }
        const Rgb color = n == 0 ? Rgb{70, 70, 70}
                                 : voltage_color(sum / n, scene.vm_min, scene.vm_max);
        auto X = [&](int k) { return proj.xy(0, e.v[k]); };
        auto Y = [&](int k) { return proj.xy(1, e.v[k]); };
        switch (e.kind) {
            case ElementKind::line:
                canvas.line(static_cast<int>(X(0)), static_cast<int>(Y(0)),
                            static_cast<int>(X(1)), static_cast<int>(Y(1)), color);
                break;
            case ElementKind::triangle:
                canvas.fill_triangle(X(0), Y(0), X(1), Y(1), X(2), Y(2), color);
                break;
            case ElementKind::quad:
                canvas.fill_triangle(X(0), Y(0), X(1), Y(1), X(2), Y(2), color);
                canvas.fill_triangle(X(0), Y(0), X(2), Y(2), X(3), Y(3), color);
                break;
            case ElementKind::tetra:
            case ElementKind::hexa: {
                // paint faces as triangles fanned from vertex 0
                for (int k = 1; k + 1 < e.nv(); ++k)
                    canvas.fill_triangle(X(0), Y(0), X(k), Y(k), X(k + 1), Y(k + 1), color);
                break;
            }
        }
    }
    canvas.text(8, 6, caption, Rgb{235, 235, 235});
}

}  // namespace

void export_frames(const StudySpec& spec, const std::string& subject, const std::string& protocol,
                   double ci) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols =
        spec.protocols_path.empty() ? plan.protocols : load_protocols(spec.protocols_path, plan);
    const ProtocolDef* proto = nullptr;
    for (const auto& p : protocols)
        if (p.name == protocol) proto = &p;
    if (!proto) throw ReferenceError("unknown protocol '" + protocol + "'");

    const auto subjects = list_subjects(spec);
    auto it = std::find_if(subjects.begin(), subjects.end(), [&](const auto& dir) {
        return dir.filename().string() == subject;
    });
    if (it == subjects.end()) throw IOError("subject '" + subject + "' not in the cohort");
    const auto subject_dir = *it;

    const Plan merged = merge_subject_overrides(
        plan, subject_dir,
        spec.electrodes_file.empty() ? "electrodes.json" : spec.electrodes_file,
        spec.configurations_file.empty() ? "configurations.json" : spec.configurations_file);
    const Mesh mesh = load_mesh(subject_dir);
    const TagPartition partition = tag_partition(mesh, merged.configurations);
    const auto active_order = active_node_order(mesh, partition);

    // collect the series of every stage, in pipeline order
    struct StagePiece {
        Stage stage;
        std::string task_id;
    };
    const std::vector<StagePiece> pieces = {
        {Stage::PP, "PP_" + protocol},
        {Stage::S1, "S1_" + protocol},
        {Stage::S2, "S2_" + protocol + "_CI_" + fmt1(ci)},
        {Stage::MT, "MT_" + protocol + "_CI_" + fmt1(ci)},
    };

    std::vector<std::pair<Stage, VmSeries>> series;
    for (const auto& piece : pieces) {
        const auto dir =
            spec.root / "sim_outputs" / subject / to_string(piece.stage) / piece.task_id;
        const auto files = glob_prefix(dir, "vm_", ".igb");
        if (files.empty())
            throw MissingData(std::string(to_string(piece.stage)) +
                              " voltage data missing for task '" + piece.task_id +
                              "' (expected under '" + dir.string() + "')");
        series.emplace_back(piece.stage, load_vm_series(files.front()));
    }

    const SceneConfig scene = load_scene(spec.root);
    const Projection proj = project_mesh(mesh, scene);

    const auto out_dir =
        spec.root / "movies" / subject / (protocol + "_CI_" + fmt1(ci));
    std::filesystem::create_directories(out_dir);

    njson manifest = njson::array();
    int frame_no = 0;
    Canvas canvas(scene.width, scene.height);
    for (const auto& [stage, s] : series) {
        for (std::size_t f = 0; f < s.frames.size(); ++f) {
            const double t = s.t0 + f * s.dt;
            char name[64];
            std::snprintf(name, sizeof(name), "frame_%05d.png", frame_no);
            render_frame(canvas, mesh, proj, active_order, s.frames[f], scene,
                         std::string(to_string(stage)) + "  t=" + fmt1(t) + " ms");
            write_png(canvas, out_dir / name);
            njson e;
            e["file"] = name;
            e["stage"] = to_string(stage);
            e["time_ms"] = t;
            manifest.push_back(e);
            ++frame_no;
        }
    }
    std::ofstream mf(out_dir / "frames_manifest.json");
    mf << manifest.dump(2) << "\n";
}

void export_all_frames(const StudySpec& spec) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols =
        spec.protocols_path.empty() ? plan.protocols : load_protocols(spec.protocols_path, plan);
    for (const auto& subject_dir : list_subjects(spec))
        for (const auto& proto : protocols)
            for (double ci : spec.ci_array)
                export_frames(spec, subject_dir.filename().string(), proto.name, ci);
}

std::filesystem::path make_bundle(const StudySpec& spec) {
    const Plan plan = load_plan(spec.plan_path);
    const auto protocols =
        spec.protocols_path.empty() ? plan.protocols : load_protocols(spec.protocols_path, plan);
    const auto subjects = list_subjects(spec);

    // the replayed command lives at the bundle root with a cohort/ layout
    StudySpec replay = spec;
    replay.plan_path = spec.plan_path.filename();
    replay.root = ".";
    if (!spec.protocols_path.empty()) replay.protocols_path = spec.protocols_path.filename();
    if (!spec.case_dir.empty()) {
        replay.case_dir = std::filesystem::path("cohort") / spec.case_dir.filename();
        replay.cohort_dir.clear();
    } else {
        replay.cohort_dir = "cohort";
    }
    const std::string command = spec_to_command(replay);

    std::vector<std::pair<std::string, std::filesystem::path>> files;  // archive name -> source
    files.emplace_back(replay.plan_path.string(), spec.plan_path);
    if (!spec.protocols_path.empty())
        files.emplace_back(replay.protocols_path.string(), spec.protocols_path);

    std::vector<std::string> missing;
    for (const auto& subject_dir : subjects) {
        const std::string subject = subject_dir.filename().string();
        const std::string base = "cohort/" + subject + "/";

        for (const auto& entry : std::filesystem::directory_iterator(subject_dir)) {
            if (!entry.is_regular_file()) continue;
            const auto ext = entry.path().extension().string();
            if (ext == ".pts" || ext == ".elem" || ext == ".lon" || ext == ".uvc" ||
                ext == ".json")
                files.emplace_back(base + entry.path().filename().string(), entry.path());
        }

        const Plan merged = merge_subject_overrides(
            plan, subject_dir,
            spec.electrodes_file.empty() ? "electrodes.json" : spec.electrodes_file,
            spec.configurations_file.empty() ? "configurations.json" : spec.configurations_file);
        const auto ckdir = checkpoints_dir(subject_dir);

        auto want = [&](const std::filesystem::path& ckpt) {
            if (!std::filesystem::exists(ckpt)) {
                missing.push_back(ckpt.string());
                return;
            }
            files.emplace_back(base + "checkpoints/" + ckpt.filename().string(), ckpt);
            const auto sidecar = ckpt.string() + ".json";
            if (std::filesystem::exists(sidecar))
                files.emplace_back(base + "checkpoints/" + ckpt.filename().string() + ".json",
                                   sidecar);
        };

        for (const auto& proto : protocols) {
            if (spec.stage == Stage::PP) continue;  // PP recomputes from the inputs alone
            const double t_pp = pp_end_time(proto, spec.prepace);
            want(ckdir / pp_checkpoint_name(proto.name, subject, spec.prepace.lim_cyc, proto.bcl,
                                            t_pp));
            const auto latfile =
                ckdir / lat_filename(proto.name, spec.prepace.gen_lat, proto.electrode);
            if (std::filesystem::exists(latfile))
                files.emplace_back(base + "checkpoints/" + latfile.filename().string(), latfile);
            if (spec.stage == Stage::S1) continue;
            for (double ci : spec.ci_array)
                want(ckdir / s1_checkpoint_name(proto.electrode, proto.bcl, subject, ci));
            if (spec.stage == Stage::S2) continue;
            for (double ci : spec.ci_array)
                want(ckdir / s2_checkpoint_name(proto.electrode, proto.bcl, ci, subject,
                                                s2_end_offset(ci, spec.s2_cycles,
                                                              spec.decrement_s2)));
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += "\n  " + m;
        throw IOError("cannot bundle: required checkpoints are missing (run the stage first):" +
                      list);
    }

    njson manifest;
    manifest["tool_version"] = kToolVersion;
    manifest["command"] = command;
    manifest["spec_hash"] = sha256_hex(command);
    njson hashes;
    for (const auto& [name, src] : files) hashes[name] = sha256_file(src);
    manifest["files"] = hashes;

    const auto out =
        spec.root / "bundles" /
        (std::string("autovarp_bundle_") + to_string(spec.stage) + ".zip");
    ZipWriter zip(out);
    for (const auto& [name, src] : files) zip.add_file(name, src);
    zip.add_entry("MANIFEST.json", manifest.dump(2) + "\n");
    zip.add_entry("LICENSE", kDefaultLicense);
    zip.add_entry("command.txt", command + "\n");
    zip.finish();
    return out;
}

}  // namespace avp
