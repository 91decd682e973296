#include "autovarp/tissue.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

namespace avp {

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'V', 'R', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kSeriesMagic[4] = {'A', 'V', 'M', 'S'};

// Orthonormal fiber/sheet/normal frame for an element.
void element_frame(const Eigen::Vector3d& fiber, const std::optional<Eigen::Vector3d>& sheet,
                   Eigen::Vector3d& f, Eigen::Vector3d& s, Eigen::Vector3d& n) {
    f = fiber.normalized();
    if (sheet && std::abs(sheet->normalized().dot(f)) < 0.99) {
        s = (*sheet - sheet->dot(f) * f).normalized();
    } else {
        const Eigen::Vector3d helper =
            std::abs(f.z()) < 0.9 ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d::UnitX();
        s = helper.cross(f).normalized();
    }
    n = f.cross(s);
}

struct Simplex {
    int nv;
    std::array<std::uint32_t, 4> v;
};

// Split quads and hexahedra into simplices for P1 assembly.
void append_simplices(const Element& e, std::vector<Simplex>& out) {
    switch (e.kind) {
        case ElementKind::line:
            out.push_back({2, {e.v[0], e.v[1]}});
            break;
        case ElementKind::triangle:
            out.push_back({3, {e.v[0], e.v[1], e.v[2]}});
            break;
        case ElementKind::quad:
            out.push_back({3, {e.v[0], e.v[1], e.v[2]}});
            out.push_back({3, {e.v[0], e.v[2], e.v[3]}});
            break;
        case ElementKind::tetra:
            out.push_back({4, {e.v[0], e.v[1], e.v[2], e.v[3]}});
            break;
        case ElementKind::hexa: {
            const int tets[6][4] = {{0, 1, 2, 6}, {0, 2, 3, 6}, {0, 3, 7, 6},
                                    {0, 7, 4, 6}, {0, 4, 5, 6}, {0, 5, 1, 6}};
            for (const auto& t : tets)
                out.push_back({4, {e.v[t[0]], e.v[t[1]], e.v[t[2]], e.v[t[3]]}});
            break;
        }
    }
}

// P1 shape-function gradients and measure of a simplex embedded in 3D.
// Gradients are returned as rows of G (nv x 3).
double simplex_gradients(const Mesh& mesh, const Simplex& sx, Eigen::Matrix<double, 4, 3>& G) {
    const auto p = [&](int i) { return mesh.points.col(sx.v[i]); };
    if (sx.nv == 2) {
        const Eigen::Vector3d d = p(1) - p(0);
        const double len = d.norm();
        if (len <= 0) throw SingularElement("zero-length line element");
        const Eigen::Vector3d u = d / (len * len);
        G.row(0) = -u.transpose();
        G.row(1) = u.transpose();
        return len;
    }
    if (sx.nv == 3) {
        const Eigen::Vector3d e1 = p(1) - p(0), e2 = p(2) - p(0);
        const double area = 0.5 * e1.cross(e2).norm();
        if (area <= 1e-14) throw SingularElement("degenerate triangle");
        Eigen::Matrix<double, 3, 2> J;
        J.col(0) = e1;
        J.col(1) = e2;
        const Eigen::Matrix2d JtJ = J.transpose() * J;
        const Eigen::Matrix<double, 2, 3> Ginv = JtJ.inverse() * J.transpose();
        G.row(1) = Ginv.row(0);
        G.row(2) = Ginv.row(1);
        G.row(0) = -(G.row(1) + G.row(2));
        return area;
    }
    Eigen::Matrix3d J;
    J.col(0) = p(1) - p(0);
    J.col(1) = p(2) - p(0);
    J.col(2) = p(3) - p(0);
    const double det = J.determinant();
    if (std::abs(det) <= 1e-18) throw SingularElement("degenerate tetrahedron");
    const Eigen::Matrix3d Jinv = J.inverse();
    G.row(1) = Jinv.row(0);
    G.row(2) = Jinv.row(1);
    G.row(3) = Jinv.row(2);
    G.row(0) = -(G.row(1) + G.row(2) + G.row(3));
    return std::abs(det) / 6.0;
}

}  // namespace

namespace {

// function assignment per node: the lowest-index non-scar element touching
// it; interface nodes follow that element's membrane model
std::vector<std::string> node_functions(const Mesh& mesh, const TagPartition& partition) {
    std::vector<std::string> node_func(mesh.num_points());
    for (std::size_t ei = 0; ei < mesh.num_elements(); ++ei) {
        const std::string& func = partition.element_function[ei];
        if (func == kScarFunc) continue;
        const Element& e = mesh.elements[ei];
        for (int k = 0; k < e.nv(); ++k)
            if (node_func[e.v[k]].empty()) node_func[e.v[k]] = func;
    }
    return node_func;
}

}  // namespace

std::vector<std::uint32_t> active_node_order(const Mesh& mesh, const TagPartition& partition) {
    const auto node_func = node_functions(mesh, partition);
    std::map<std::string, std::vector<std::uint32_t>> group_nodes;
    for (std::uint32_t i = 0; i < mesh.num_points(); ++i)
        if (!node_func[i].empty()) group_nodes[node_func[i]].push_back(i);
    std::vector<std::uint32_t> order;
    for (const auto& [name, nodes] : group_nodes)
        order.insert(order.end(), nodes.begin(), nodes.end());
    return order;
}

TissueOperators::TissueOperators(const Mesh& mesh, const TagPartition& partition,
                                 const std::map<std::string, FunctionDef>& functions,
                                 const SolverSetup& solver)
    : mesh_(&mesh), solver_(solver) {
    const auto n_mesh = mesh.num_points();
    const auto node_func = node_functions(mesh, partition);

    // Active nodes grouped per function (groups sorted by name, nodes by id),
    // so each group is a contiguous column range of the state matrix.
    std::map<std::string, std::vector<std::uint32_t>> group_nodes;
    for (std::uint32_t i = 0; i < n_mesh; ++i)
        if (!node_func[i].empty()) group_nodes[node_func[i]].push_back(i);
    if (group_nodes.empty()) throw GeometryError("no active nodes (entire mesh is scar)");

    mesh_to_active_.assign(n_mesh, -1);
    for (const auto& [name, nodes] : group_nodes) {
        auto it = functions.find(name);
        if (it == functions.end())
            throw ReferenceError("partition references unknown function '" + name + "'");
        FunctionGroup g;
        g.name = name;
        g.model = make_cell_model(it->second.model, it->second.model_par);
        g.first = static_cast<Eigen::Index>(active_to_mesh_.size());
        g.count = static_cast<Eigen::Index>(nodes.size());
        for (auto id : nodes) {
            mesh_to_active_[id] = static_cast<std::int64_t>(active_to_mesh_.size());
            active_to_mesh_.push_back(id);
        }
        state_dim_ = std::max(state_dim_, g.model->state_dim());
        if (solver_.dt > g.model->stability_bound())
            throw SchemaError("dt " + std::to_string(solver_.dt) +
                              " exceeds stability bound of model '" + g.model->name() + "'");
        groups_.push_back(std::move(g));
    }

    const auto n = num_active();
    lumped_mass_ = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::Triplet<double>> triplets;

    Eigen::Matrix<double, 4, 3> G;
    std::vector<Simplex> simplices;
    for (std::size_t ei = 0; ei < mesh.num_elements(); ++ei) {
        const std::string& func = partition.element_function[ei];
        if (func == kScarFunc) continue;
        const Conductivity& c = functions.at(func).conductivity;

        Eigen::Vector3d f, s, nrm;
        std::optional<Eigen::Vector3d> sheet;
        if (mesh.sheets) sheet = mesh.sheets->col(static_cast<Eigen::Index>(ei));
        element_frame(mesh.fibers.col(static_cast<Eigen::Index>(ei)), sheet, f, s, nrm);

        // sigma_m = harmonic mean of intra/extra per axis; D = sigma_m/(10*beta*Cm)
        const double scale = 0.1 / (c.surf2vol * kMembraneCapacitance);
        const Eigen::Matrix3d D = scale * (harmonic_mean(c.gil, c.gel) * f * f.transpose() +
                                           harmonic_mean(c.git, c.get) * s * s.transpose() +
                                           harmonic_mean(c.gin, c.gen) * nrm * nrm.transpose());

        simplices.clear();
        append_simplices(mesh.elements[ei], simplices);
        for (const Simplex& sx : simplices) {
            const double measure = simplex_gradients(mesh, sx, G);
            for (int a = 0; a < sx.nv; ++a) {
                const auto ia = mesh_to_active_[sx.v[a]];
                lumped_mass_[ia] += measure / sx.nv;
                for (int b = 0; b < sx.nv; ++b) {
                    const auto ib = mesh_to_active_[sx.v[b]];
                    const double k = measure * G.row(a).dot(D * G.row(b).transpose());
                    triplets.emplace_back(static_cast<int>(ia), static_cast<int>(ib), k);
                }
            }
        }
    }

    stiffness_.resize(n, n);
    stiffness_.setFromTriplets(triplets.begin(), triplets.end());
    stiffness_.makeCompressed();

    theta_ = solver_.diffusion_scheme == DiffusionScheme::implicit_euler ? 1.0 : 0.5;
    Eigen::SparseMatrix<double> mass(n, n);
    std::vector<Eigen::Triplet<double>> mt;
    mt.reserve(n);
    for (Eigen::Index i = 0; i < n; ++i) mt.emplace_back(static_cast<int>(i), static_cast<int>(i), lumped_mass_[i]);
    mass.setFromTriplets(mt.begin(), mt.end());
    system_ = mass + theta_ * solver_.dt * stiffness_;
    system_.makeCompressed();
    cg_.setTolerance(solver_.linear_tolerance);
    cg_.compute(system_);
    if (cg_.info() != Eigen::Success) throw LinearSolveFailure("diffusion system factorization failed");
}

TissueState TissueOperators::resting_state() const {
    TissueState st;
    st.time = 0;
    st.states = Eigen::MatrixXd::Zero(state_dim_, num_active());
    for (const auto& g : groups_) {
        const Eigen::VectorXd rest = g.model->resting_state();
        for (Eigen::Index j = 0; j < g.count; ++j)
            st.states.col(g.first + j).head(rest.size()) = rest;
    }
    return st;
}

Eigen::VectorXd TissueOperators::active_stimulus_vector(const std::vector<std::uint32_t>& mesh_nodes,
                                                        double strength) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(num_active());
    for (auto id : mesh_nodes) {
        if (id >= mesh_to_active_.size())
            throw GeometryError("stimulus node " + std::to_string(id) + " outside mesh");
        const auto ia = mesh_to_active_[id];
        if (ia >= 0) v[ia] = strength;
    }
    return v;
}

void TissueOperators::step(TissueState& state, const Eigen::VectorXd& i_stim) const {
    // reaction: explicit per-node membrane update
    for (const auto& g : groups_) {
        const int dim = g.model->state_dim();
        g.model->step(state.states.topRows(dim).middleCols(g.first, g.count), solver_.dt,
                      i_stim.segment(g.first, g.count));
    }

    // diffusion: implicit solve on the voltage row
    const Eigen::VectorXd v = state.states.row(0).transpose();
    Eigen::VectorXd rhs;
    if (theta_ == 1.0)
        rhs = lumped_mass_.cwiseProduct(v);
    else
        rhs = lumped_mass_.cwiseProduct(v) - (1.0 - theta_) * solver_.dt * (stiffness_ * v);
    const Eigen::VectorXd vnew = cg_.solveWithGuess(rhs, v);
    if (cg_.info() != Eigen::Success)
        throw LinearSolveFailure("conjugate gradient did not converge at t=" +
                                 std::to_string(state.time));
    state.states.row(0) = vnew.transpose();
    state.time += solver_.dt;

    if (!vnew.allFinite())
        throw NumericalBlowup("non-finite voltage at t=" + std::to_string(state.time));
}

RunResult run_simulation(const TissueOperators& ops, TissueState state,
                         const std::vector<StimulusEvent>& stimuli, double t_end,
                         const std::optional<SentinelSetup>& sentinel,
                         const RecordOptions& record) {
    const double dt = ops.solver().dt;
    const long long base_step = std::llround(state.time / dt);
    const long long end_step = std::llround(t_end / dt);
    if (end_step <= base_step)
        throw SchemaError("t_end " + std::to_string(t_end) + " must lie beyond state time " +
                          std::to_string(state.time));

    struct Pulse {
        long long on, off;
        Eigen::VectorXd current;
    };
    std::vector<Pulse> pulses;
    for (const auto& s : stimuli) {
        Pulse p;
        p.on = std::llround(s.onset / dt);
        p.off = std::llround((s.onset + s.duration) / dt);
        p.current = ops.active_stimulus_vector(s.nodes.ids, s.strength);
        pulses.push_back(std::move(p));
    }

    const long long out_steps = std::max<long long>(1, std::llround(ops.solver().output_interval / dt));
    const long long poll_steps =
        sentinel ? std::max<long long>(1, std::llround(sentinel->poll_interval / dt)) : 1;
    const double threshold = ops.solver().sentinel.upstroke_threshold;

    const auto n = ops.num_active();
    Eigen::VectorXd lat_active = Eigen::VectorXd::Constant(n, -1.0);
    Eigen::VectorXd istim = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd prev_vm = state.states.row(0).transpose();

    RunResult result;
    if (record.snapshots) {
        result.snapshots.emplace_back(state.states.row(0).transpose().cast<float>());
        result.snapshot_times.push_back(state.time);
    }

    long long last_cross_step = base_step;
    bool was_stimulating = false;
    result.terminated_by = Termination::duration;

    for (long long k = base_step; k < end_step; ++k) {
        bool stimulating = false;
        for (const auto& p : pulses)
            if (p.on <= k && k < p.off) stimulating = true;
        if (stimulating) {
            istim.setZero();
            for (const auto& p : pulses)
                if (p.on <= k && k < p.off) istim += p.current;
        } else if (was_stimulating) {
            istim.setZero();
        }
        was_stimulating = stimulating;

        ops.step(state, istim);
        state.time = (k + 1) * dt;  // integer-step time keeps restarts bit-exact

        const auto vm = state.states.row(0).transpose().array();
        const auto crossed = (prev_vm.array() < threshold && vm >= threshold).eval();
        if (crossed.any()) {
            last_cross_step = k + 1;
            if (record.lat)
                lat_active =
                    (crossed && lat_active.array() < 0).select((k + 1) * dt, lat_active);
        }
        prev_vm = vm;

        if (record.snapshots && (k + 1 - base_step) % out_steps == 0) {
            result.snapshots.emplace_back(state.states.row(0).transpose().cast<float>());
            result.snapshot_times.push_back(state.time);
        }

        if (sentinel && (k + 1 - base_step) % poll_steps == 0) {
            const bool pending = std::any_of(pulses.begin(), pulses.end(),
                                             [&](const Pulse& p) { return p.off > k + 1; });
            if (!pending && (k + 1 - last_cross_step) * dt >= sentinel->quiescence_window) {
                result.terminated_by = Termination::sentinel;
                break;
            }
        }
    }

    result.exit_time = state.time;
    result.lat = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(ops.mesh().num_points()), -1.0);
    for (Eigen::Index i = 0; i < n; ++i) result.lat[ops.active_to_mesh()[static_cast<std::size_t>(i)]] = lat_active[i];
    result.state = std::move(state);
    return result;
}

Eigen::VectorXd measure_lat(const RunResult& result) {
    return result.lat;
}

// --- checkpoints ---

namespace {

template <typename T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& in, T& v, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated checkpoint '" + path.string() + "'");
}

}  // namespace

void save_checkpoint(const TissueState& state, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IOError("cannot write '" + tmp + "'");
        out.write(kCheckpointMagic, 4);
        write_raw(out, kCheckpointVersion);
        write_raw(out, static_cast<std::uint64_t>(state.states.cols()));
        write_raw(out, static_cast<std::uint32_t>(state.states.rows()));
        write_raw(out, state.time);
        out.write(reinterpret_cast<const char*>(state.states.data()),
                  static_cast<std::streamsize>(sizeof(double) * state.states.size()));
        if (!out) throw IOError("write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

TissueState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open checkpoint '" + path.string() + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("'" + path.string() + "' is not a checkpoint file");
    std::uint32_t version = 0;
    read_raw(in, version, path);
    if (version != kCheckpointVersion)
        throw VersionMismatch("checkpoint '" + path.string() + "' has format version " +
                              std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    std::uint64_t nodes = 0;
    std::uint32_t dim = 0;
    TissueState st;
    read_raw(in, nodes, path);
    read_raw(in, dim, path);
    read_raw(in, st.time, path);
    st.states.resize(dim, static_cast<Eigen::Index>(nodes));
    in.read(reinterpret_cast<char*>(st.states.data()),
            static_cast<std::streamsize>(sizeof(double) * st.states.size()));
    if (!in) throw FormatError("truncated checkpoint '" + path.string() + "'");
    return st;
}

TissueState load_checkpoint(const std::filesystem::path& path, const TissueOperators& ops) {
    TissueState st = load_checkpoint(path);
    if (st.states.cols() != ops.num_active())
        throw NodeCountMismatch("checkpoint '" + path.string() + "' holds " +
                                std::to_string(st.states.cols()) + " nodes, mesh has " +
                                std::to_string(ops.num_active()) + " active nodes");
    if (st.states.rows() != ops.state_dim())
        throw NodeCountMismatch("checkpoint '" + path.string() + "' state dimension " +
                                std::to_string(st.states.rows()) + " != " +
                                std::to_string(ops.state_dim()));
    return st;
}

// --- conduction velocity on a cable ---

namespace {

constexpr double kCableLength = 20.0;  // [mm]

FunctionDef axis_function(const FunctionDef& function, FiberAxis axis) {
    FunctionDef f = function;
    switch (axis) {
        case FiberAxis::fiber: break;
        case FiberAxis::sheet:
            f.conductivity.gil = function.conductivity.git;
            f.conductivity.gel = function.conductivity.get;
            break;
        case FiberAxis::normal:
            f.conductivity.gil = function.conductivity.gin;
            f.conductivity.gel = function.conductivity.gen;
            break;
    }
    return f;
}

struct CableRun {
    Mesh mesh;
    Eigen::VectorXd lat;
};

CableRun run_cable(const FunctionDef& function, const SolverSetup& solver, double resolution_mm,
                   double strength) {
    CableRun run;
    run.mesh = make_strand(kCableLength, resolution_mm);
    std::map<std::string, ConfigurationDef> cfg = {{"cable", {{1}, "cable_func"}}};
    std::map<std::string, FunctionDef> fns = {{"cable_func", function}};
    TissueOperators ops(run.mesh, tag_partition(run.mesh, cfg), fns, solver);

    StimulusEvent stim;
    stim.onset = 0;
    stim.duration = solver.stimulus.duration;
    stim.strength = strength;
    const double stim_extent = std::max(1.0, 2 * resolution_mm);
    for (Eigen::Index i = 0; i < run.mesh.points.cols(); ++i)
        if (run.mesh.points(0, i) <= stim_extent)
            stim.nodes.ids.push_back(static_cast<std::uint32_t>(i));
    stim.nodes.provenance = "cable-end";

    auto result = run_simulation(ops, ops.resting_state(), {stim}, 500.0, std::nullopt, {});
    run.lat = result.lat;
    return run;
}

}  // namespace

double measure_cv(const FunctionDef& function, const SolverSetup& solver, double resolution_mm,
                  FiberAxis axis) {
    const FunctionDef f = axis_function(function, axis);
    auto run = run_cable(f, solver, resolution_mm, solver.stimulus.strength);

    // linear LAT regression over the central 50% of the cable
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int count = 0;
    for (Eigen::Index i = 0; i < run.mesh.points.cols(); ++i) {
        const double x = run.mesh.points(0, i);
        if (x < 0.25 * kCableLength || x > 0.75 * kCableLength) continue;
        if (run.lat[i] < 0)
            throw NoPropagation("wave front died before " + std::to_string(x) + " mm");
        sx += x;
        sy += run.lat[i];
        sxx += x * x;
        sxy += x * run.lat[i];
        ++count;
    }
    const double denom = count * sxx - sx * sx;
    const double slope = (count * sxy - sx * sy) / denom;  // [ms/mm]
    if (!(slope > 0)) throw NoPropagation("activation times are not increasing along the cable");
    return 1.0 / slope;  // mm/ms == m/s
}

double diastolic_threshold(const FunctionDef& function, const SolverSetup& solver,
                           double resolution_mm) {
    auto propagates = [&](double strength) {
        auto run = run_cable(function, solver, resolution_mm, strength);
        Eigen::Index probe = 0;
        (run.mesh.points.row(0).array() - 0.75 * kCableLength).abs().minCoeff(&probe);
        return run.lat[probe] >= 0;
    };

    double hi = solver.stimulus.strength;
    while (!propagates(hi)) {
        hi *= 2;
        if (hi > 1e5) throw NoPropagation("no stimulus strength elicits propagation");
    }
    double lo = hi / 2;
    while (propagates(lo)) {
        hi = lo;
        lo /= 2;
        if (lo < 1e-3) break;
    }
    while (hi / lo > 1.02) {
        const double mid = std::sqrt(lo * hi);
        (propagates(mid) ? hi : lo) = mid;
    }
    return hi;
}

// --- Vm frame series ---

void save_vm_series(const VmSeries& series, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write '" + path.string() + "'");
    out.write(kSeriesMagic, 4);
    write_raw(out, kCheckpointVersion);
    write_raw(out, static_cast<std::uint64_t>(series.nodes));
    write_raw(out, static_cast<std::uint64_t>(series.frames.size()));
    write_raw(out, series.t0);
    write_raw(out, series.dt);
    for (const auto& f : series.frames)
        out.write(reinterpret_cast<const char*>(f.data()),
                  static_cast<std::streamsize>(sizeof(float) * f.size()));
    if (!out) throw IOError("write failed for '" + path.string() + "'");
}

VmSeries load_vm_series(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kSeriesMagic, 4) != 0)
        throw FormatError("'" + path.string() + "' is not a voltage series");
    std::uint32_t version = 0;
    read_raw(in, version, path);
    std::uint64_t nodes = 0, frames = 0;
    VmSeries s;
    read_raw(in, nodes, path);
    read_raw(in, frames, path);
    read_raw(in, s.t0, path);
    read_raw(in, s.dt, path);
    s.nodes = static_cast<Eigen::Index>(nodes);
    s.frames.resize(frames);
    for (auto& f : s.frames) {
        f.resize(s.nodes);
        in.read(reinterpret_cast<char*>(f.data()),
                static_cast<std::streamsize>(sizeof(float) * f.size()));
        if (!in) throw FormatError("truncated voltage series '" + path.string() + "'");
    }
    return s;
}

}  // namespace avp
