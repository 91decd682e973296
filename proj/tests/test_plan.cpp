#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "autovarp/plan.hpp"
#include "testutil.hpp"

using namespace avp;
using testutil::TempDir;

namespace {

const std::filesystem::path kPlanTemplate = std::filesystem::path(TEMPLATE_DIR) / "planfile.json";
const std::filesystem::path kProtocolsTemplate =
    std::filesystem::path(TEMPLATE_DIR) / "varp_protocols.json";

std::filesystem::path write_json(const TempDir& dir, const std::string& name,
                                 const std::string& body) {
    const auto path = dir.path() / name;
    std::ofstream out(path);
    out << body;
    return path;
}

}  // namespace

TEST_CASE("template plan loads with three functions and one protocol") {
    const Plan plan = load_plan(kPlanTemplate);
    CHECK(plan.functions.size() == 3);
    CHECK(plan.functions.count("ht_tissue"));
    CHECK(plan.functions.count("bz_tissue"));
    CHECK(plan.functions.count("scar"));
    REQUIRE(plan.protocols.size() == 1);
    CHECK(plan.protocols[0].name == "protocol_1");
    CHECK(plan.protocols[0].bcl == 600);
    CHECK(plan.protocols[0].electrode == "uvc-el");
    CHECK(plan.functions.at("ht_tissue").conductivity.gil == doctest::Approx(0.255));
    CHECK(plan.functions.at("ht_tissue").reference_velocity.vf == 0.6);
    CHECK_FALSE(plan.functions.at("ht_tissue").measured_velocity.vf.has_value());
}

TEST_CASE("protocol referencing an unknown electrode raises ReferenceError naming it") {
    TempDir dir("plan_dangling");
    Plan plan = load_plan(kPlanTemplate);
    plan.protocols[0].electrode = "missing";
    const auto path = dir.path() / "plan.json";
    save_plan(plan, path);
    try {
        load_plan(path);
        FAIL("expected ReferenceError");
    } catch (const ReferenceError& e) {
        CHECK(std::string(e.what()).find("missing") != std::string::npos);
    }
}

TEST_CASE("wrong section version raises SchemaError citing the mismatch") {
    TempDir dir("plan_version");
    std::ifstream in(kPlanTemplate);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto pos = body.find("\"version\": 2");
    REQUIRE(pos != std::string::npos);
    body.replace(pos, 12, "\"version\": 1");
    const auto path = write_json(dir, "plan.json", body);
    CHECK_THROWS_AS(load_plan(path), SchemaError);
    try {
        load_plan(path);
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
}

TEST_CASE("unknown keys are rejected, not ignored") {
    TempDir dir("plan_unknown");
    std::ifstream in(kPlanTemplate);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto pos = body.find("\"dt\"");
    REQUIRE(pos != std::string::npos);
    std::string mutated = body;
    mutated.replace(pos, 4, "\"dt_typo\"");
    CHECK_THROWS_AS(load_plan(write_json(dir, "plan.json", mutated)), SchemaError);
}

TEST_CASE("malformed JSON raises ParseError") {
    TempDir dir("plan_malformed");
    CHECK_THROWS_AS(load_plan(write_json(dir, "plan.json", "{ not json")), ParseError);
}

TEST_CASE("serialization round trip reproduces the plan exactly") {
    TempDir dir("plan_roundtrip");
    const Plan plan = load_plan(kPlanTemplate);
    const auto path = dir.path() / "copy.json";
    save_plan(plan, path);
    const Plan again = load_plan(path);
    CHECK(again == plan);

    // and it is stable: serializing twice gives identical bytes
    save_plan(again, dir.path() / "copy2.json");
    std::ifstream a(path), b(dir.path() / "copy2.json");
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("subject overrides replace same-named entries and keep the rest") {
    TempDir dir("plan_merge");
    const Plan plan = load_plan(kPlanTemplate);
    const auto subject = dir.path() / "subj";
    std::filesystem::create_directories(subject);

    SUBCASE("no override files: merged plan equals the input") {
        const Plan merged = merge_subject_overrides(plan, subject);
        CHECK(merged == plan);
    }

    SUBCASE("electrode redefinition wins") {
        std::ofstream out(subject / "electrodes.json");
        out << R"({"version": 2, "definitions": {"uvc-el": {
               "type": "ucc_sphere", "p0": [0.25, 1.0, -2.0], "cavity": "rv",
               "radius": 3.0, "searchdom": "cxyz"}}})";
        out.close();
        const Plan merged = merge_subject_overrides(plan, subject);
        CHECK(merged.electrodes.at("uvc-el").p0[0] == 0.25);
        CHECK(merged.electrodes.at("uvc-el").cavity == "rv");
        CHECK(merged.electrodes.size() == plan.electrodes.size());
        // untouched electrode kept
        CHECK(merged.electrodes.at("S0600-RAD") == plan.electrodes.at("S0600-RAD"));
    }

    SUBCASE("configuration override can exclude a region as scar") {
        std::ofstream out(subject / "configurations.json");
        out << R"({"version": 2, "definitions": {"right_ventricle": {"tags": [5], "func": "scar"}}})";
        out.close();
        const Plan merged = merge_subject_overrides(plan, subject);
        CHECK(merged.configurations.at("right_ventricle").func == kScarFunc);
        CHECK(merged.configurations.at("right_ventricle").tags == std::vector<int>{5});
    }

    SUBCASE("merging the same subject twice is idempotent") {
        std::ofstream out(subject / "electrodes.json");
        out << R"({"version": 2, "definitions": {"extra": {
               "type": "cartesian_sphere", "center": [1, 2, 3], "radius": 1.0}}})";
        out.close();
        const Plan once = merge_subject_overrides(plan, subject);
        const Plan twice = merge_subject_overrides(once, subject);
        CHECK(once == twice);
    }

    SUBCASE("malformed override file raises SchemaError") {
        std::ofstream out(subject / "electrodes.json");
        out << R"({"version": 2, "definitions": {"bad": {"type": "cartesian_sphere"}}})";
        out.close();
        CHECK_THROWS_AS(merge_subject_overrides(plan, subject), SchemaError);
    }
}

TEST_CASE("external protocols file replaces the plan protocols in file order") {
    const Plan plan = load_plan(kPlanTemplate);
    const auto protocols = load_protocols(kProtocolsTemplate, plan);
    REQUIRE(protocols.size() == 8);
    CHECK(protocols.front().name == "prepace-S1200-RAD");
    CHECK(protocols.front().electrode == "S1200-RAD");
    CHECK(protocols.back().name == "prepace-S1030-RAD");
    for (const auto& p : protocols) CHECK(p.bcl == 600);

    TempDir dir("plan_protocols");
    SUBCASE("empty protocols map rejected") {
        const auto path = write_json(dir, "p.json", R"({"version": 2, "prepacing": {}})");
        try {
            load_protocols(path, plan);
            FAIL("expected SchemaError");
        } catch (const SchemaError& e) {
            CHECK(std::string(e.what()).find("no protocols") != std::string::npos);
        }
    }
    SUBCASE("protocol electrode must resolve against the plan") {
        const auto path = write_json(dir, "p.json",
                                     R"({"version": 2, "prepacing": {"p": {"propagation": "rd",
                                        "num_cycles": 1, "bcl": 600, "electrodes": "nope"}}})");
        CHECK_THROWS_AS(load_protocols(path, plan), ReferenceError);
    }
}

TEST_CASE("measured velocities are rewritten in place") {
    TempDir dir("plan_measured");
    const auto path = dir.path() / "plan.json";
    save_plan(load_plan(kPlanTemplate), path);

    write_measured_velocities(path, "ht_tissue", VelocityTriple{0.58, 0.19, 0.19});
    const Plan plan = load_plan(path);
    CHECK(plan.functions.at("ht_tissue").measured_velocity.vf == doctest::Approx(0.58));
    CHECK(plan.functions.at("ht_tissue").measured_velocity.vs == doctest::Approx(0.19));
    // everything else untouched
    CHECK(plan.functions.at("ht_tissue").conductivity.gil == doctest::Approx(0.255));
    CHECK_FALSE(plan.functions.at("bz_tissue").measured_velocity.vf.has_value());

    CHECK_THROWS_AS(write_measured_velocities(path, "xx", VelocityTriple{0.5, 0.5, 0.5}),
                    UnknownFunction);
}

TEST_CASE("validation is total over malformed inputs") {
    TempDir dir("plan_total");
    const std::vector<std::string> bad = {
        R"({})",
        R"({"functions": {"version": 2, "definitions": {}}, "protocols": {"version": 2, "prepacing": {}}, "electrodes": {"version": 2, "definitions": {}}, "configurations": {"version": 2, "definitions": {}}, "solver_setup": {"dt": -1, "output_interval": 1, "diffusion_scheme": "implicit_euler", "linear_tolerance": 1e-8, "stimulus": {"strength": 1, "duration": 1}}})",
        R"({"functions": 4})",
    };
    int k = 0;
    for (const auto& body : bad) {
        const auto path = write_json(dir, "bad" + std::to_string(k++) + ".json", body);
        CHECK_THROWS_AS(load_plan(path), Error);
    }

    // overlapping tags across configurations
    Plan plan = load_plan(kPlanTemplate);
    plan.configurations["dup"] = ConfigurationDef{{1}, "ht_tissue"};
    const auto path = dir.path() / "dup.json";
    save_plan(plan, path);
    CHECK_THROWS_AS(load_plan(path), SchemaError);
}
