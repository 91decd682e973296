#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <set>

#include "autovarp/mesh.hpp"
#include "testutil.hpp"

using namespace avp;
using testutil::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& body) {
    std::ofstream out(p);
    out << body;
}

std::map<std::string, ConfigurationDef> slab_configurations() {
    return {{"healthy", {{1}, "ht_tissue"}},
            {"border", {{2, 3}, "bz_tissue"}},
            {"scar", {{4}, kScarFunc}}};
}

}  // namespace

TEST_CASE("minimal strand files load into 3 points and 2 line elements") {
    TempDir dir("mesh_minimal");
    const auto subject = dir.path() / "strand";
    std::filesystem::create_directories(subject);
    write_file(subject / "cable.pts", "3\n0 0 0\n1000 0 0\n2000 0 0\n");
    write_file(subject / "cable.elem", "2\nLn 0 1 1\nLn 1 2 1\n");
    write_file(subject / "cable.lon", "1\n1 0 0\n1 0 0\n");

    const Mesh mesh = load_mesh(subject);
    CHECK(mesh.num_points() == 3);
    CHECK(mesh.num_elements() == 2);
    CHECK(mesh.elements[0].kind == ElementKind::line);
    // coordinates arrive in mm
    CHECK(mesh.points(0, 1) == doctest::Approx(1.0));
    CHECK(mesh.name == "strand");
}

TEST_CASE("truncated point file raises FormatError") {
    TempDir dir("mesh_truncated");
    const auto subject = dir.path() / "bad";
    std::filesystem::create_directories(subject);
    write_file(subject / "m.pts", "3\n0 0 0\n1000 0 0\n");
    write_file(subject / "m.elem", "1\nLn 0 1 1\n");
    write_file(subject / "m.lon", "1\n1 0 0\n");
    CHECK_THROWS_AS(load_mesh(subject), FormatError);
}

TEST_CASE("element referencing a vertex beyond the point count is rejected") {
    TempDir dir("mesh_badvertex");
    const auto subject = dir.path() / "bad";
    std::filesystem::create_directories(subject);
    write_file(subject / "m.pts", "2\n0 0 0\n1000 0 0\n");
    write_file(subject / "m.elem", "1\nLn 0 7 1\n");
    write_file(subject / "m.lon", "1\n1 0 0\n");
    CHECK_THROWS_AS(load_mesh(subject), FormatError);
}

TEST_CASE("degenerate element raises GeometryError") {
    TempDir dir("mesh_degenerate");
    const auto subject = dir.path() / "bad";
    std::filesystem::create_directories(subject);
    write_file(subject / "m.pts", "3\n0 0 0\n0 0 0\n2000 0 0\n");
    write_file(subject / "m.elem", "1\nTr 0 1 2 1\n");
    write_file(subject / "m.lon", "1\n1 0 0\n");
    CHECK_THROWS_AS(load_mesh(subject), GeometryError);
}

TEST_CASE("generated slab carries the four region tags and survives a disk round trip") {
    TempDir dir("mesh_slab");
    SlabSpec spec;
    spec.size_mm = 20;
    spec.resolution_mm = 0.5;
    spec.scar_width_mm = 10;
    spec.scar_height_mm = 6;
    Mesh slab = make_slab(spec);
    slab.name = "1mmbz.500um.f90";
    CHECK(slab.tag_set() == std::vector<int>{1, 2, 3, 4});

    const auto subject = dir.path() / slab.name;
    save_mesh(slab, subject, slab.name);
    const Mesh loaded = load_mesh(subject);
    CHECK(loaded.num_points() == slab.num_points());
    CHECK(loaded.num_elements() == slab.num_elements());
    CHECK(loaded.tag_set() == slab.tag_set());
    CHECK((loaded.points - slab.points).cwiseAbs().maxCoeff() < 1e-6);
    for (Eigen::Index i = 0; i < loaded.fibers.cols(); ++i)
        CHECK(loaded.fibers.col(i).norm() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("uvc files load and drive ucc_sphere electrodes") {
    TempDir dir("mesh_uvc");
    Mesh sheet = make_sheet(4, 4, 1.0);
    sheet.uvc.resize(sheet.num_points());
    for (std::size_t i = 0; i < sheet.num_points(); ++i) {
        sheet.uvc[i].apicobasal = sheet.points(0, i) / 4.0;
        sheet.uvc[i].transmural = sheet.points(1, i) / 4.0;
        sheet.uvc[i].rotational = 0.0;
        sheet.uvc[i].cavity = Cavity::lv;
    }
    const auto subject = dir.path() / "uvc";
    save_mesh(sheet, subject, "uvc");
    const Mesh loaded = load_mesh(subject);
    REQUIRE(loaded.has_uvc());

    ElectrodeDef e;
    e.kind = ElectrodeKind::ucc_sphere;
    e.p0 = {0.5, 0.5, 0.0};
    e.cavity = "lv";
    e.radius = 0.5;
    e.searchdom = "cxyz";
    const NodeSet set = resolve_electrode(loaded, e, "uvc-el");
    REQUIRE(set.ids.size() == 1);
    CHECK(loaded.points(0, set.ids[0]) == doctest::Approx(2.0));
    CHECK(loaded.points(1, set.ids[0]) == doctest::Approx(2.0));

    SUBCASE("unknown cavity") {
        e.cavity = "rv";
        CHECK_THROWS_AS(resolve_electrode(loaded, e, "uvc-el"), UnknownCavity);
    }
    SUBCASE("missing uvc") {
        const Mesh bare = make_sheet(4, 4, 1.0);
        CHECK_THROWS_AS(resolve_electrode(bare, e, "uvc-el"), MissingUVC);
    }
}

TEST_CASE("cartesian sphere electrode resolution") {
    const Mesh sheet = make_sheet(10, 10, 0.5);

    ElectrodeDef e;
    e.kind = ElectrodeKind::cartesian_sphere;
    e.center = {5.0, 5.0, 0.0};
    e.radius = 0.25;  // below the edge length: captures only the grid node
    const NodeSet single = resolve_electrode(sheet, e, "pt");
    REQUIRE(single.ids.size() == 1);
    CHECK(sheet.points(0, single.ids[0]) == doctest::Approx(5.0));

    SUBCASE("radius monotonicity: smaller radius yields a subset") {
        std::mt19937 rng(7);
        std::uniform_real_distribution<double> rad(0.3, 4.0);
        for (int trial = 0; trial < 20; ++trial) {
            double r1 = rad(rng), r2 = rad(rng);
            if (r1 > r2) std::swap(r1, r2);
            e.radius = r1;
            const auto small = resolve_electrode(sheet, e, "a");
            e.radius = r2;
            const auto big = resolve_electrode(sheet, e, "b");
            CHECK(std::includes(big.ids.begin(), big.ids.end(), small.ids.begin(),
                                small.ids.end()));
        }
    }

    SUBCASE("no matching node raises EmptyElectrode") {
        e.center = {100, 100, 100};
        e.radius = 0.5;
        CHECK_THROWS_AS(resolve_electrode(sheet, e, "far"), EmptyElectrode);
    }

    SUBCASE("node_list electrodes return the listed ids") {
        ElectrodeDef nl;
        nl.kind = ElectrodeKind::node_list;
        nl.nodes = {5, 3, 3, 9};
        const auto set = resolve_electrode(sheet, nl, "list");
        CHECK(set.ids == std::vector<std::uint32_t>{3, 5, 9});
    }
}

TEST_CASE("eight peripheral electrodes resolve to disjoint node sets on the slab") {
    SlabSpec spec;  // defaults: 40 mm, 0.3 mm resolution
    spec.resolution_mm = 0.5;
    const Mesh slab = make_slab(spec);
    const Plan plan = load_plan(std::filesystem::path(TEMPLATE_DIR) / "planfile.json");

    std::set<std::uint32_t> seen;
    int count = 0;
    for (const auto& [name, e] : plan.electrodes) {
        if (e.kind != ElectrodeKind::cartesian_sphere) continue;
        const NodeSet set = resolve_electrode(slab, e, name);
        CHECK_FALSE(set.ids.empty());
        for (auto id : set.ids) {
            CHECK_FALSE(seen.count(id));
            seen.insert(id);
        }
        ++count;
    }
    CHECK(count == 8);
}

TEST_CASE("ucc_sphere ties break toward the lowest vertex id") {
    Mesh mesh = make_strand(2.0, 1.0);  // 3 points
    mesh.uvc.resize(3);
    // nodes 0 and 2 equidistant from p0 in UVC space
    mesh.uvc[0] = {0.4, 0.0, 0.0, Cavity::lv};
    mesh.uvc[1] = {0.9, 0.9, 0.0, Cavity::lv};
    mesh.uvc[2] = {0.6, 0.0, 0.0, Cavity::lv};
    ElectrodeDef e;
    e.kind = ElectrodeKind::ucc_sphere;
    e.p0 = {0.5, 0.0, 0.0};
    e.cavity = "lv";
    e.radius = 0.5;
    e.searchdom = "cxyz";
    const NodeSet set = resolve_electrode(mesh, e, "tie");
    REQUIRE(set.ids.size() == 1);
    CHECK(set.ids[0] == 0);
}

TEST_CASE("tag partition groups elements and excludes scar-interior nodes") {
    SlabSpec spec;
    spec.size_mm = 20;
    spec.resolution_mm = 0.5;
    spec.scar_width_mm = 10;
    spec.scar_height_mm = 8;
    const Mesh slab = make_slab(spec);

    const TagPartition part = tag_partition(slab, slab_configurations());
    CHECK(part.elements.count("ht_tissue"));
    CHECK(part.elements.count("bz_tissue"));
    CHECK(part.elements.count(kScarFunc));
    CHECK_FALSE(part.excluded_nodes.empty());

    // partition covers every element exactly once
    std::size_t total = 0;
    for (const auto& [f, els] : part.elements) total += els.size();
    CHECK(total == slab.num_elements());

    // excluded nodes touch only scar elements
    for (auto id : part.excluded_nodes)
        for (std::size_t ei = 0; ei < slab.num_elements(); ++ei) {
            const Element& e = slab.elements[ei];
            for (int k = 0; k < e.nv(); ++k)
                if (e.v[k] == id) CHECK(part.element_function[ei] == kScarFunc);
        }

    SUBCASE("uncovered tag is reported with its value") {
        auto cfg = slab_configurations();
        cfg.erase("border");
        try {
            tag_partition(slab, cfg);
            FAIL("expected UncoveredTag");
        } catch (const UncoveredTag& e) {
            const std::string msg = e.what();
            CHECK(msg.find("2") != std::string::npos);
            CHECK(msg.find("3") != std::string::npos);
        }
    }

    SUBCASE("homogeneous mesh: one group, nothing excluded") {
        const Mesh sheet = make_sheet(5, 5, 1.0);
        const TagPartition p =
            tag_partition(sheet, {{"all", {{1}, "ht_tissue"}}});
        CHECK(p.elements.size() == 1);
        CHECK(p.elements.at("ht_tissue").size() == sheet.num_elements());
        CHECK(p.excluded_nodes.empty());
    }
}
