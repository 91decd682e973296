#include "autovarp/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace avp {

namespace {

constexpr double kUmPerMm = 1000.0;

std::ifstream open_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    return in;
}

std::size_t read_count_header(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line))
        throw FormatError("missing count header in '" + path.string() + "'");
    std::istringstream ss(line);
    long long n = -1;
    ss >> n;
    if (n < 0) throw FormatError("invalid count header in '" + path.string() + "'");
    return static_cast<std::size_t>(n);
}

ElementKind kind_from_token(const std::string& tok, const std::filesystem::path& path) {
    if (tok == "Ln") return ElementKind::line;
    if (tok == "Tr") return ElementKind::triangle;
    if (tok == "Qd") return ElementKind::quad;
    if (tok == "Tt") return ElementKind::tetra;
    if (tok == "Hx") return ElementKind::hexa;
    throw FormatError("unknown element kind '" + tok + "' in '" + path.string() + "'");
}

const char* kind_token(ElementKind k) {
    switch (k) {
        case ElementKind::line: return "Ln";
        case ElementKind::triangle: return "Tr";
        case ElementKind::quad: return "Qd";
        case ElementKind::tetra: return "Tt";
        case ElementKind::hexa: return "Hx";
    }
    return "?";
}

double element_measure(const Mesh& mesh, const Element& e) {
    const auto p = [&](int i) { return mesh.points.col(e.v[i]); };
    switch (e.kind) {
        case ElementKind::line: return (p(1) - p(0)).norm();
        case ElementKind::triangle: return 0.5 * (p(1) - p(0)).cross(p(2) - p(0)).norm();
        case ElementKind::quad:
            return 0.5 * ((p(1) - p(0)).cross(p(2) - p(0)).norm() +
                          (p(2) - p(0)).cross(p(3) - p(0)).norm());
        case ElementKind::tetra:
            return (p(1) - p(0)).cross(p(2) - p(0)).dot(p(3) - p(0)) / 6.0;
        case ElementKind::hexa: {
            // split into tets against vertex 0; enough for a degeneracy check
            double vol = 0;
            const int tets[6][3] = {{1, 2, 5}, {2, 6, 5}, {2, 3, 6}, {3, 7, 6}, {3, 4, 7}, {4, 5, 7}};
            for (const auto& t : tets)
                vol += std::abs((p(t[0]) - p(0)).cross(p(t[1]) - p(0)).dot(p(t[2]) - p(0))) / 6.0;
            return vol;
        }
    }
    return 0;
}

std::string find_base(const std::filesystem::path& dir) {
    std::vector<std::string> bases;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.path().extension() == ".pts") bases.push_back(entry.path().stem().string());
    if (bases.empty()) throw IOError("no .pts file in '" + dir.string() + "'");
    if (bases.size() > 1) {
        std::sort(bases.begin(), bases.end());
        throw IOError("multiple .pts files in '" + dir.string() + "' (found '" + bases[0] +
                      "' and '" + bases[1] + "')");
    }
    return bases[0];
}

double wrap_angle(double a) {
    const double pi = std::numbers::pi;
    a = std::fmod(a + pi, 2 * pi);
    if (a < 0) a += 2 * pi;
    return a - pi;
}

}  // namespace

std::vector<int> Mesh::tag_set() const {
    std::set<int> tags;
    for (const auto& e : elements) tags.insert(e.tag);
    return {tags.begin(), tags.end()};
}

Mesh load_mesh(const std::filesystem::path& subject_dir) {
    if (!std::filesystem::is_directory(subject_dir))
        throw IOError("subject directory '" + subject_dir.string() + "' does not exist");
    const std::string base = find_base(subject_dir);

    Mesh mesh;
    mesh.name = subject_dir.filename().string();

    // .pts -- coordinates in um
    {
        const auto path = subject_dir / (base + ".pts");
        auto in = open_text(path);
        const std::size_t n = read_count_header(in, path);
        mesh.points.resize(3, static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            double x, y, z;
            if (!(in >> x >> y >> z))
                throw FormatError("'" + path.string() + "': header claims " + std::to_string(n) +
                                  " points but row " + std::to_string(i) + " is missing");
            mesh.points.col(static_cast<Eigen::Index>(i)) << x / kUmPerMm, y / kUmPerMm, z / kUmPerMm;
        }
    }

    // .elem
    {
        const auto path = subject_dir / (base + ".elem");
        auto in = open_text(path);
        const std::size_t n = read_count_header(in, path);
        mesh.elements.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::string tok;
            if (!(in >> tok))
                throw FormatError("'" + path.string() + "': header claims " + std::to_string(n) +
                                  " elements but row " + std::to_string(i) + " is missing");
            Element e;
            e.kind = kind_from_token(tok, path);
            for (int k = 0; k < e.nv(); ++k) {
                long long id;
                if (!(in >> id) || id < 0)
                    throw FormatError("'" + path.string() + "': bad vertex id in element " +
                                      std::to_string(i));
                if (static_cast<std::size_t>(id) >= mesh.num_points())
                    throw FormatError("'" + path.string() + "': element " + std::to_string(i) +
                                      " references vertex " + std::to_string(id) + " but only " +
                                      std::to_string(mesh.num_points()) + " points exist");
                e.v[k] = static_cast<std::uint32_t>(id);
            }
            if (!(in >> e.tag))
                throw FormatError("'" + path.string() + "': missing tag in element " +
                                  std::to_string(i));
            mesh.elements.push_back(e);
        }
    }

    // geometry sanity
    for (std::size_t i = 0; i < mesh.num_elements(); ++i) {
        if (element_measure(mesh, mesh.elements[i]) <= 0)
            throw GeometryError("degenerate element " + std::to_string(i) + " in '" +
                                subject_dir.string() + "'");
    }

    // .lon -- one or two arrows per element
    {
        const auto path = subject_dir / (base + ".lon");
        auto in = open_text(path);
        const std::size_t arrows = read_count_header(in, path);
        if (arrows != 1 && arrows != 2)
            throw FormatError("'" + path.string() + "': arrow count must be 1 or 2");
        const auto n = static_cast<Eigen::Index>(mesh.num_elements());
        mesh.fibers.resize(3, n);
        if (arrows == 2) mesh.sheets.emplace(3, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Vector3d f;
            if (!(in >> f.x() >> f.y() >> f.z()))
                throw FormatError("'" + path.string() + "': missing fiber for element " +
                                  std::to_string(i));
            const double norm = f.norm();
            if (norm < 1e-12)
                throw FormatError("'" + path.string() + "': zero fiber vector for element " +
                                  std::to_string(i));
            mesh.fibers.col(i) = f / norm;
            if (arrows == 2) {
                Eigen::Vector3d s;
                if (!(in >> s.x() >> s.y() >> s.z()))
                    throw FormatError("'" + path.string() + "': missing sheet for element " +
                                      std::to_string(i));
                const double snorm = s.norm();
                if (snorm < 1e-12)
                    throw FormatError("'" + path.string() + "': zero sheet vector for element " +
                                      std::to_string(i));
                mesh.sheets->col(i) = s / snorm;
            }
        }
    }

    // optional .uvc: "apicobasal transmural rotational cavity" per point
    {
        const auto path = subject_dir / (base + ".uvc");
        if (std::filesystem::exists(path)) {
            auto in = open_text(path);
            const std::size_t n = read_count_header(in, path);
            if (n != mesh.num_points())
                throw FormatError("'" + path.string() + "': " + std::to_string(n) +
                                  " UVC rows for " + std::to_string(mesh.num_points()) + " points");
            mesh.uvc.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::string cav;
                UvcPoint& u = mesh.uvc[i];
                if (!(in >> u.apicobasal >> u.transmural >> u.rotational >> cav))
                    throw FormatError("'" + path.string() + "': truncated at row " +
                                      std::to_string(i));
                if (cav == "lv")
                    u.cavity = Cavity::lv;
                else if (cav == "rv")
                    u.cavity = Cavity::rv;
                else
                    throw FormatError("'" + path.string() + "': unknown cavity '" + cav + "'");
            }
        }
    }

    return mesh;
}

void save_mesh(const Mesh& mesh, const std::filesystem::path& subject_dir, const std::string& base) {
    std::filesystem::create_directories(subject_dir);
    {
        std::ofstream out(subject_dir / (base + ".pts"));
        out << mesh.num_points() << "\n";
        out.precision(10);
        for (Eigen::Index i = 0; i < mesh.points.cols(); ++i)
            out << mesh.points(0, i) * kUmPerMm << " " << mesh.points(1, i) * kUmPerMm << " "
                << mesh.points(2, i) * kUmPerMm << "\n";
    }
    {
        std::ofstream out(subject_dir / (base + ".elem"));
        out << mesh.num_elements() << "\n";
        for (const auto& e : mesh.elements) {
            out << kind_token(e.kind);
            for (int k = 0; k < e.nv(); ++k) out << " " << e.v[k];
            out << " " << e.tag << "\n";
        }
    }
    {
        std::ofstream out(subject_dir / (base + ".lon"));
        out << (mesh.sheets ? 2 : 1) << "\n";
        out.precision(10);
        for (Eigen::Index i = 0; i < mesh.fibers.cols(); ++i) {
            out << mesh.fibers(0, i) << " " << mesh.fibers(1, i) << " " << mesh.fibers(2, i);
            if (mesh.sheets)
                out << " " << (*mesh.sheets)(0, i) << " " << (*mesh.sheets)(1, i) << " "
                    << (*mesh.sheets)(2, i);
            out << "\n";
        }
    }
    if (!mesh.uvc.empty()) {
        std::ofstream out(subject_dir / (base + ".uvc"));
        out << mesh.uvc.size() << "\n";
        out.precision(10);
        for (const auto& u : mesh.uvc)
            out << u.apicobasal << " " << u.transmural << " " << u.rotational << " "
                << (u.cavity == Cavity::lv ? "lv" : "rv") << "\n";
    }
}

NodeSet resolve_electrode(const Mesh& mesh, const ElectrodeDef& e, const std::string& name) {
    NodeSet out;
    out.provenance = name;

    auto sphere_nodes = [&](const Eigen::Vector3d& center, double radius) {
        const double r2 = radius * radius;
        for (Eigen::Index i = 0; i < mesh.points.cols(); ++i)
            if ((mesh.points.col(i) - center).squaredNorm() <= r2)
                out.ids.push_back(static_cast<std::uint32_t>(i));
    };

    switch (e.kind) {
        case ElectrodeKind::cartesian_sphere: {
            sphere_nodes(Eigen::Vector3d(e.center[0], e.center[1], e.center[2]), e.radius);
            break;
        }
        case ElectrodeKind::node_list: {
            for (auto id : e.nodes) {
                if (id >= mesh.num_points())
                    throw EmptyElectrode("electrode '" + name + "' lists node " +
                                         std::to_string(id) + " beyond mesh size " +
                                         std::to_string(mesh.num_points()));
                out.ids.push_back(static_cast<std::uint32_t>(id));
            }
            break;
        }
        case ElectrodeKind::ucc_sphere: {
            if (!mesh.has_uvc())
                throw MissingUVC("electrode '" + name + "' needs UVC coordinates but mesh '" +
                                 mesh.name + "' has none");
            const Cavity want = e.cavity == "lv" ? Cavity::lv : Cavity::rv;
            bool cavity_seen = false;
            double best = std::numeric_limits<double>::infinity();
            std::uint32_t best_id = 0;
            const double pi = std::numbers::pi;
            for (std::size_t i = 0; i < mesh.uvc.size(); ++i) {
                const UvcPoint& u = mesh.uvc[i];
                if (u.cavity != want) continue;
                cavity_seen = true;
                // Euclidean in (a, t, r/pi) with periodic rotational coordinate.
                const double da = u.apicobasal - e.p0[0];
                const double dt = u.transmural - e.p0[1];
                const double dr = wrap_angle(u.rotational - e.p0[2]) / pi;
                const double d2 = da * da + dt * dt + dr * dr;
                if (d2 < best) {  // strict: ties keep the lowest vertex id
                    best = d2;
                    best_id = static_cast<std::uint32_t>(i);
                }
            }
            if (!cavity_seen)
                throw UnknownCavity("electrode '" + name + "': no '" + e.cavity +
                                    "' nodes in mesh '" + mesh.name + "'");
            sphere_nodes(mesh.points.col(best_id), e.radius);
            break;
        }
    }

    std::sort(out.ids.begin(), out.ids.end());
    out.ids.erase(std::unique(out.ids.begin(), out.ids.end()), out.ids.end());
    if (out.ids.empty())
        throw EmptyElectrode("electrode '" + name + "' matched no mesh nodes");
    return out;
}

bool TagPartition::node_excluded(std::uint32_t id) const {
    return std::binary_search(excluded_nodes.begin(), excluded_nodes.end(), id);
}

TagPartition tag_partition(const Mesh& mesh,
                           const std::map<std::string, ConfigurationDef>& configurations) {
    std::map<int, std::string> tag_to_func;
    for (const auto& [name, cfg] : configurations)
        for (int t : cfg.tags) tag_to_func[t] = cfg.func;

    std::set<int> uncovered;
    for (const auto& e : mesh.elements)
        if (!tag_to_func.count(e.tag)) uncovered.insert(e.tag);
    if (!uncovered.empty()) {
        std::string list;
        for (int t : uncovered) list += (list.empty() ? "" : ", ") + std::to_string(t);
        throw UncoveredTag("mesh tags not covered by any configuration: " + list);
    }

    TagPartition part;
    part.element_function.resize(mesh.num_elements());
    std::vector<char> touched_active(mesh.num_points(), 0);
    for (std::uint32_t i = 0; i < mesh.num_elements(); ++i) {
        const Element& e = mesh.elements[i];
        const std::string& func = tag_to_func.at(e.tag);
        part.element_function[i] = func;
        part.elements[func].push_back(i);
        if (func != kScarFunc)
            for (int k = 0; k < e.nv(); ++k) touched_active[e.v[k]] = 1;
    }
    for (std::uint32_t i = 0; i < mesh.num_points(); ++i)
        if (!touched_active[i]) part.excluded_nodes.push_back(i);
    return part;
}

// --- programmatic meshes ---

Mesh make_strand(double length_mm, double resolution_mm, int tag) {
    return make_two_segment_strand(length_mm, resolution_mm, length_mm + 1.0, tag, tag);
}

Mesh make_two_segment_strand(double length_mm, double resolution_mm, double split_mm, int tag_left,
                             int tag_right) {
    const int n_el = std::max(1, static_cast<int>(std::round(length_mm / resolution_mm)));
    const double h = length_mm / n_el;
    Mesh mesh;
    mesh.name = "strand";
    mesh.points.resize(3, n_el + 1);
    for (int i = 0; i <= n_el; ++i) mesh.points.col(i) << i * h, 0.0, 0.0;
    mesh.elements.resize(n_el);
    mesh.fibers.resize(3, n_el);
    for (int i = 0; i < n_el; ++i) {
        Element& e = mesh.elements[i];
        e.kind = ElementKind::line;
        e.v[0] = static_cast<std::uint32_t>(i);
        e.v[1] = static_cast<std::uint32_t>(i + 1);
        const double mid = (i + 0.5) * h;
        e.tag = mid < split_mm ? tag_left : tag_right;
        mesh.fibers.col(i) << 1, 0, 0;
    }
    return mesh;
}

Mesh make_sheet(double lx_mm, double ly_mm, double resolution_mm, int tag) {
    const int nx = std::max(1, static_cast<int>(std::round(lx_mm / resolution_mm)));
    const int ny = std::max(1, static_cast<int>(std::round(ly_mm / resolution_mm)));
    const double hx = lx_mm / nx, hy = ly_mm / ny;

    Mesh mesh;
    mesh.name = "sheet";
    mesh.points.resize(3, (nx + 1) * (ny + 1));
    for (int j = 0; j <= ny; ++j)
        for (int i = 0; i <= nx; ++i) mesh.points.col(j * (nx + 1) + i) << i * hx, j * hy, 0.0;

    mesh.elements.reserve(2 * static_cast<std::size_t>(nx) * ny);
    auto vid = [&](int i, int j) { return static_cast<std::uint32_t>(j * (nx + 1) + i); };
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            Element a, b;
            a.kind = b.kind = ElementKind::triangle;
            a.tag = b.tag = tag;
            if ((i + j) % 2 == 0) {  // alternate the split diagonal per cell
                a.v = {vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), 0, 0, 0, 0, 0};
                b.v = {vid(i, j), vid(i + 1, j + 1), vid(i, j + 1), 0, 0, 0, 0, 0};
            } else {
                a.v = {vid(i, j), vid(i + 1, j), vid(i, j + 1), 0, 0, 0, 0, 0};
                b.v = {vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1), 0, 0, 0, 0, 0};
            }
            mesh.elements.push_back(a);
            mesh.elements.push_back(b);
        }
    }
    mesh.fibers.resize(3, static_cast<Eigen::Index>(mesh.elements.size()));
    mesh.fibers.setZero();
    mesh.fibers.row(0).setOnes();
    return mesh;
}

Mesh make_slab(const SlabSpec& spec) {
    Mesh mesh = make_sheet(spec.size_mm, spec.size_mm, spec.resolution_mm, 1);
    mesh.name = "slab";
    const double c = spec.size_mm / 2;
    const double sw = spec.scar_width_mm / 2, sh = spec.scar_height_mm / 2;
    const double iw = spec.isthmus_width_mm / 2;
    const double rim = spec.bz_rim_mm;

    auto inside = [](double x, double lo, double hi) { return x >= lo && x <= hi; };
    for (std::size_t k = 0; k < mesh.num_elements(); ++k) {
        Element& e = mesh.elements[k];
        Eigen::Vector3d mid = (mesh.points.col(e.v[0]) + mesh.points.col(e.v[1]) +
                               mesh.points.col(e.v[2])) /
                              3.0;
        const double x = mid.x() - c, y = mid.y() - c;
        const bool in_scar_block = inside(x, -sw, sw) && inside(y, -sh, sh);
        const bool in_channel = inside(x, -sw, sw) && inside(y, -iw, iw);
        const bool in_channel_bz = inside(x, -sw, sw) && inside(y, -iw - rim, iw + rim);
        const bool in_rim = inside(x, -sw - rim, sw + rim) && inside(y, -sh - rim, sh + rim);
        if (in_channel)
            e.tag = 3;  // isthmus: conducting border-zone channel through the scar
        else if (in_scar_block && !in_channel_bz)
            e.tag = 4;  // scar core
        else if (in_scar_block)
            e.tag = 2;  // border-zone walls of the channel
        else if (in_rim)
            e.tag = 2;  // border-zone rim around the scar
        else
            e.tag = 1;  // healthy
    }

    const double a = spec.fiber_angle_deg * std::numbers::pi / 180.0;
    mesh.fibers.row(0).setConstant(std::cos(a));
    mesh.fibers.row(1).setConstant(std::sin(a));
    mesh.fibers.row(2).setZero();
    return mesh;
}

}  // namespace avp
