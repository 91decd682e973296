#pragma once

// Anatomical meshes in the openCARP text formats (.pts/.elem/.lon, plus a
// documented .uvc extension), electrode resolution and tag partitioning.
//
// On-disk coordinates are micrometres (openCARP convention); everything in
// memory is millimetres.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autovarp/plan.hpp"

namespace avp {

enum class ElementKind : std::uint8_t { line, triangle, quad, tetra, hexa };

inline int vertex_count(ElementKind k) {
    switch (k) {
        case ElementKind::line: return 2;
        case ElementKind::triangle: return 3;
        case ElementKind::quad: return 4;
        case ElementKind::tetra: return 4;
        case ElementKind::hexa: return 8;
    }
    return 0;
}

struct Element {
    ElementKind kind = ElementKind::line;
    std::array<std::uint32_t, 8> v{};  // first vertex_count(kind) entries valid
    int tag = 0;

    int nv() const { return vertex_count(kind); }
    bool operator==(const Element&) const = default;
};

enum class Cavity : std::uint8_t { lv, rv };

struct UvcPoint {
    double apicobasal = 0;  // [0,1]
    double transmural = 0;  // [0,1]
    double rotational = 0;  // [-pi,pi]
    Cavity cavity = Cavity::lv;
};

struct Mesh {
    std::string name;               // subject folder name (meshname in file names)
    Eigen::Matrix3Xd points;        // [mm], one column per node
    std::vector<Element> elements;
    Eigen::Matrix3Xd fibers;        // unit longitudinal vector per element
    std::optional<Eigen::Matrix3Xd> sheets;  // optional second arrow per element
    std::vector<UvcPoint> uvc;      // empty if no .uvc file present

    std::size_t num_points() const { return static_cast<std::size_t>(points.cols()); }
    std::size_t num_elements() const { return elements.size(); }
    bool has_uvc() const { return !uvc.empty(); }

    std::vector<int> tag_set() const;
};

struct NodeSet {
    std::vector<std::uint32_t> ids;  // sorted, unique
    std::string provenance;          // electrode name that produced it
};

// Load `<dir>/<base>.pts|.elem|.lon` (+ optional .uvc). The basename is
// discovered from the unique .pts file in the directory; mesh name is the
// directory name.
Mesh load_mesh(const std::filesystem::path& subject_dir);

// Write the mesh in the same on-disk format (points converted back to um).
void save_mesh(const Mesh& mesh, const std::filesystem::path& subject_dir,
               const std::string& base);

// Map an electrode definition onto mesh nodes. Deterministic; UVC ties are
// broken by lowest vertex id.
NodeSet resolve_electrode(const Mesh& mesh, const ElectrodeDef& e, const std::string& name);

struct TagPartition {
    // function name -> element ids; excluded scar elements under kScarFunc.
    std::map<std::string, std::vector<std::uint32_t>> elements;
    std::vector<std::uint32_t> excluded_nodes;  // incident only to scar elements
    std::vector<std::string> element_function;  // per element, kScarFunc for scar

    bool node_excluded(std::uint32_t id) const;
};

TagPartition tag_partition(const Mesh& mesh,
                           const std::map<std::string, ConfigurationDef>& configurations);

// --- programmatic meshes (tests and the desk-scale cohort) ---

// 1D cable along +x: length [mm] at the given resolution, single tag.
Mesh make_strand(double length_mm, double resolution_mm, int tag = 1);

// Two-segment cable: tag_left for x < split_mm, tag_right beyond.
Mesh make_two_segment_strand(double length_mm, double resolution_mm, double split_mm,
                             int tag_left, int tag_right);

// Triangulated rectangle in the z=0 plane, uniform tag, fibers along +x.
Mesh make_sheet(double lx_mm, double ly_mm, double resolution_mm, int tag = 1);

// Desk-scale replica geometry: sheet with a rectangular scar crossed by a
// conducting isthmus and a border-zone rim. Tags: 1 healthy, 2/3 border
// zone, 4 scar.
struct SlabSpec {
    double size_mm = 40.0;
    double resolution_mm = 0.3;
    double scar_width_mm = 24.0;    // x extent of the scar block
    double scar_height_mm = 16.0;   // y extent
    double isthmus_width_mm = 2.0;  // conducting channel through the scar
    double bz_rim_mm = 1.0;         // border-zone rim around scar and isthmus
    double fiber_angle_deg = 90.0;  // relative to +x
};

Mesh make_slab(const SlabSpec& spec);

}  // namespace avp
