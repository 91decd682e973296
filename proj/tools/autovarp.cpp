// Command-line front end: flag surface onto the study engine and the
// post-processing commands.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "autovarp/engine.hpp"
#include "autovarp/postproc.hpp"

using namespace avp;

int main(int argc, char** argv) {
    CLI::App app{"autovarp - automated S1-S2 ventricular inducibility studies"};
    app.allow_extras(false);

    std::string plan, cohort_dir, case_id, protocols, configurations, electrodes;
    std::string stage = "MT", gen_lat = "ek", lim_cyc = "lat-1", ci_array;
    int s1_cycles = 1, s2_cycles = 1, workers = 1;
    double decrement_s2 = 0, mt_duration = 2000, mt_thr = 1000;
    bool overwrite = false, tissue_tuning = false, plot_restitution = false;
    bool gen_params = false, status = false, movies = false, bundle = false;

    app.add_option("--plan", plan, "plan file defining functions, solver and defaults")
        ->required();
    auto* cohort_opt = app.add_option("--cohort-dir", cohort_dir, "cohort directory of subjects");
    auto* case_opt = app.add_option("--case-ID", case_id, "single subject directory");
    cohort_opt->excludes(case_opt);
    case_opt->excludes(cohort_opt);
    app.add_option("--protocols", protocols, "external protocols file (replaces plan protocols)");
    app.add_option("--configurations", configurations,
                   "per-subject configurations file name (same name in each subject folder)");
    app.add_option("--electrodes", electrodes,
                   "per-subject electrodes file name (same name in each subject folder)");
    app.add_option("--stage", stage, "pipeline stage to run up to")
        ->check(CLI::IsMember({"PP", "S1", "S2", "MT"}));
    app.add_option("--gen-lat", gen_lat, "activation-map generation mode")
        ->check(CLI::IsMember({"ek", "rd"}));
    app.add_option("--lim-cyc", lim_cyc, "tissue limit-cycle mode")
        ->check(CLI::IsMember({"lat-0", "lat-1"}));
    app.add_option("--S1-cycles", s1_cycles, "number of S1 stimuli (1..9)");
    app.add_option("--CI-array", ci_array, "comma separated S2 coupling intervals [ms]");
    app.add_option("--S2-cycles", s2_cycles, "number of S2 stimuli (1..9)");
    app.add_option("--decrement-S2", decrement_s2, "decrement per delivered S2 [ms]");
    app.add_option("--MT-duration", mt_duration, "maintenance observation period [ms]");
    app.add_flag("--overwrite", overwrite, "recompute even when checkpoints exist");
    app.add_flag("--tissue-tuning", tissue_tuning,
                 "tune conductivities to the reference conduction velocities");
    app.add_flag("--plot-restitution", plot_restitution, "emit restitution curves and data");
    app.add_flag("--gen-param-files", gen_params,
                 "emit per-task parameter files without running simulations");
    app.add_flag("--status", status, "print and save pipeline progress tables");
    app.add_option("--mt-thr,--mt-threshold", mt_thr,
                   "cutoff [ms] separating sustained from non-sustained outcomes");
    app.add_flag("--movies", movies, "export voltage frame series of completed tasks");
    app.add_flag("--bundle", bundle, "pack a reproduction archive for the selected stage");
    app.add_option("--workers", workers, "parallel task workers (1 = sequential)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        StudySpec spec;
        spec.plan_path = plan;
        spec.cohort_dir = cohort_dir;
        spec.case_dir = case_id;
        spec.protocols_path = protocols;
        spec.configurations_file = configurations;
        spec.electrodes_file = electrodes;
        spec.stage = stage_from_string(stage);
        spec.prepace.gen_lat = gen_lat == "ek" ? Propagation::ek : Propagation::rd;
        spec.prepace.lim_cyc = lim_cyc == "lat-0" ? LimCyc::lat0 : LimCyc::lat1;
        spec.s1_cycles = s1_cycles;
        spec.s2_cycles = s2_cycles;
        spec.decrement_s2 = decrement_s2;
        spec.mt_duration = mt_duration;
        spec.overwrite = overwrite;
        spec.tissue_tuning = tissue_tuning;
        spec.plot_restitution = plot_restitution;
        spec.workers = workers;
        if (const char* root = std::getenv("AUTOVARP_ROOT")) spec.root = root;

        if (!ci_array.empty()) {
            std::string token;
            std::istringstream ss(ci_array);
            while (std::getline(ss, token, ',')) {
                if (token.empty()) continue;
                spec.ci_array.push_back(std::stod(token));
            }
        }
        validate_spec(spec);

        const bool post_only = status || movies || bundle;
        if (gen_params) {
            gen_param_files(spec);
            std::cout << "parameter files written under "
                      << (spec.root / "param_files").string() << "\n";
        } else if (!post_only) {
            const StudyResult result = run_study(spec);
            std::cout << "completed: " << result.records.size() << " checkpoints ("
                      << result.simulations_run << " simulated, "
                      << result.records.size() - result.simulations_run << " reused)\n";
            if (!result.failed_subjects.empty()) {
                std::cout << "failed subjects:";
                for (const auto& s : result.failed_subjects) std::cout << " " << s;
                std::cout << "\n";
                return 1;
            }
        }

        if (status) write_status(spec, mt_thr);
        if (movies) export_all_frames(spec);
        if (bundle) {
            const auto path = make_bundle(spec);
            std::cout << "bundle written to " << path.string() << "\n";
        }
        return 0;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const SchemaError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ReferenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
