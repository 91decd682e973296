#include "autovarp/eikonal.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>

namespace avp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTolMs = 1e-9;

struct UpdateSimplex {
    int nv;                             // 2..4 vertices, last slot unused for nv<4
    std::array<std::uint32_t, 4> v;
    Eigen::Matrix3d metric;             // travel time = sqrt(d^T M d), [ms^2/mm^2]
};

// metric M = F diag(1/v^2) F^T with frame columns fiber/sheet/normal
Eigen::Matrix3d metric_for(const Eigen::Vector3d& fiber,
                           const std::optional<Eigen::Vector3d>& sheet,
                           const Eigen::Vector3d& speeds) {
    Eigen::Vector3d f = fiber.normalized(), s, n;
    if (sheet && std::abs(sheet->normalized().dot(f)) < 0.99)
        s = (*sheet - sheet->dot(f) * f).normalized();
    else {
        const Eigen::Vector3d helper =
            std::abs(f.z()) < 0.9 ? Eigen::Vector3d::UnitZ() : Eigen::Vector3d::UnitX();
        s = helper.cross(f).normalized();
    }
    n = f.cross(s);
    return f * f.transpose() / (speeds[0] * speeds[0]) +
           s * s.transpose() / (speeds[1] * speeds[1]) +
           n * n.transpose() / (speeds[2] * speeds[2]);
}

double edge_update(const Eigen::Vector3d& xi, const Eigen::Vector3d& xa, double ta,
                   const Eigen::Matrix3d& M) {
    const Eigen::Vector3d d = xi - xa;
    return ta + std::sqrt(d.dot(M * d));
}

// Update through a segment (a,b): min over the segment of the linearly
// interpolated arrival plus metric distance. Stationary points solve a
// quadratic; endpoints are the edge updates.
double segment_update(const Eigen::Vector3d& xi, const Eigen::Vector3d& xa, double ta,
                      const Eigen::Vector3d& xb, double tb, const Eigen::Matrix3d& M) {
    double best = std::min(edge_update(xi, xa, ta, M), edge_update(xi, xb, tb, M));
    const Eigen::Vector3d d0 = xi - xa;
    const Eigen::Vector3d e = xb - xa;
    const double dT = tb - ta;
    const double alpha = e.dot(M * d0);
    const double beta = e.dot(M * e);
    const double gamma = d0.dot(M * d0);

    // lambda^2 b(b - dT^2) - 2 a lambda (b - dT^2) + (a^2 - dT^2 g) = 0
    const double A = beta * (beta - dT * dT);
    const double B = -2.0 * alpha * (beta - dT * dT);
    const double C = alpha * alpha - dT * dT * gamma;
    const double disc = B * B - 4 * A * C;
    if (std::abs(A) < 1e-30 || disc < 0) return best;
    const double sq = std::sqrt(disc);
    for (double lambda : {(-B + sq) / (2 * A), (-B - sq) / (2 * A)}) {
        if (!(lambda > 0.0 && lambda < 1.0)) continue;
        const Eigen::Vector3d d = d0 - lambda * e;
        const double q = d.dot(M * d);
        if (q <= 0) continue;
        const double t = ta + lambda * dT + std::sqrt(q);
        best = std::min(best, t);
    }
    return best;
}

// Update through a triangular face (a,b,c): nested search over the two
// barycentric directions via segment updates along a sampled spine, refined
// around the best sample. Exact enough for the front tolerance and robust
// for any metric.
double face_update(const Eigen::Vector3d& xi, const Eigen::Vector3d& xa, double ta,
                   const Eigen::Vector3d& xb, double tb, const Eigen::Vector3d& xc, double tc,
                   const Eigen::Matrix3d& M) {
    double best = kInf;
    auto probe = [&](double mu) {
        const Eigen::Vector3d xm = xa + mu * (xc - xa);
        const double tm = ta + mu * (tc - ta);
        return segment_update(xi, xm, tm, xb, tb, M);
    };
    double lo = 0.0, hi = 1.0;
    for (int pass = 0; pass < 4; ++pass) {
        double arg = lo;
        double val = kInf;
        const int samples = 8;
        for (int k = 0; k <= samples; ++k) {
            const double mu = lo + (hi - lo) * k / samples;
            const double t = probe(mu);
            if (t < val) {
                val = t;
                arg = mu;
            }
        }
        best = std::min(best, val);
        const double span = (hi - lo) / samples;
        lo = std::max(0.0, arg - span);
        hi = std::min(1.0, arg + span);
    }
    return best;
}

}  // namespace

Eigen::Vector3d eikonal_speeds(const FunctionDef& f) {
    const auto pick = [](const std::optional<double>& measured, const std::optional<double>& ref) {
        return measured.value_or(ref.value_or(0.0));
    };
    return {pick(f.measured_velocity.vf, f.reference_velocity.vf),
            pick(f.measured_velocity.vs, f.reference_velocity.vs),
            pick(f.measured_velocity.vn, f.reference_velocity.vn)};
}

EikonalField eikonal_lat(const Mesh& mesh, const TagPartition& partition,
                         const std::map<std::string, FunctionDef>& functions,
                         const NodeSet& electrode) {
    const auto n = mesh.num_points();

    std::vector<UpdateSimplex> simplices;
    for (std::size_t ei = 0; ei < mesh.num_elements(); ++ei) {
        const std::string& func = partition.element_function[ei];
        if (func == kScarFunc) continue;
        const FunctionDef& f = functions.at(func);
        const Eigen::Vector3d speeds = eikonal_speeds(f);
        if ((speeds.array() <= 0).any())
            throw SchemaError("function '" + func + "' has no usable conduction velocities");
        std::optional<Eigen::Vector3d> sheet;
        if (mesh.sheets) sheet = mesh.sheets->col(static_cast<Eigen::Index>(ei));
        const Eigen::Matrix3d M =
            metric_for(mesh.fibers.col(static_cast<Eigen::Index>(ei)), sheet, speeds);

        const Element& e = mesh.elements[ei];
        auto push = [&](std::initializer_list<int> ids) {
            UpdateSimplex s;
            s.nv = static_cast<int>(ids.size());
            int k = 0;
            for (int id : ids) s.v[k++] = e.v[id];
            s.metric = M;
            simplices.push_back(s);
        };
        switch (e.kind) {
            case ElementKind::line: push({0, 1}); break;
            case ElementKind::triangle: push({0, 1, 2}); break;
            case ElementKind::quad:
                push({0, 1, 2});
                push({0, 2, 3});
                break;
            case ElementKind::tetra: push({0, 1, 2, 3}); break;
            case ElementKind::hexa: {
                const int tets[6][4] = {{0, 1, 2, 6}, {0, 2, 3, 6}, {0, 3, 7, 6},
                                        {0, 7, 4, 6}, {0, 4, 5, 6}, {0, 5, 1, 6}};
                for (const auto& t : tets) push({t[0], t[1], t[2], t[3]});
                break;
            }
        }
    }

    std::vector<std::vector<std::uint32_t>> incident(n);
    for (std::uint32_t si = 0; si < simplices.size(); ++si)
        for (int k = 0; k < simplices[si].nv; ++k) incident[simplices[si].v[k]].push_back(si);

    Eigen::VectorXd T = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), kInf);
    for (auto id : electrode.ids) T[id] = 0.0;

    auto local_update = [&](std::uint32_t i) {
        double best = T[i];
        const Eigen::Vector3d xi = mesh.points.col(i);
        for (auto si : incident[i]) {
            const UpdateSimplex& s = simplices[si];
            std::array<std::uint32_t, 4> other{};
            int m = 0;
            for (int k = 0; k < s.nv; ++k)
                if (s.v[k] != i) other[m++] = s.v[k];
            if (m == s.nv) continue;  // i absent: simplex with repeated vertices

            if (m >= 1 && std::isfinite(T[other[0]]))
                best = std::min(best, edge_update(xi, mesh.points.col(other[0]), T[other[0]], s.metric));
            if (m >= 2) {
                if (std::isfinite(T[other[1]]))
                    best = std::min(best,
                                    edge_update(xi, mesh.points.col(other[1]), T[other[1]], s.metric));
                if (std::isfinite(T[other[0]]) && std::isfinite(T[other[1]]))
                    best = std::min(best, segment_update(xi, mesh.points.col(other[0]), T[other[0]],
                                                         mesh.points.col(other[1]), T[other[1]],
                                                         s.metric));
            }
            if (m == 3) {
                if (std::isfinite(T[other[2]]))
                    best = std::min(best,
                                    edge_update(xi, mesh.points.col(other[2]), T[other[2]], s.metric));
                for (int a = 0; a < 3; ++a) {
                    const int b = (a + 1) % 3;
                    if (std::isfinite(T[other[a]]) && std::isfinite(T[other[b]]))
                        best = std::min(best,
                                        segment_update(xi, mesh.points.col(other[a]), T[other[a]],
                                                       mesh.points.col(other[b]), T[other[b]],
                                                       s.metric));
                }
                if (std::isfinite(T[other[0]]) && std::isfinite(T[other[1]]) &&
                    std::isfinite(T[other[2]]))
                    best = std::min(
                        best, face_update(xi, mesh.points.col(other[0]), T[other[0]],
                                          mesh.points.col(other[1]), T[other[1]],
                                          mesh.points.col(other[2]), T[other[2]], s.metric));
            }
        }
        return best;
    };

    // label-correcting sweep from the sources
    std::deque<std::uint32_t> queue;
    std::vector<char> queued(n, 0);
    auto enqueue_neighbors = [&](std::uint32_t i) {
        for (auto si : incident[i])
            for (int k = 0; k < simplices[si].nv; ++k) {
                const std::uint32_t j = simplices[si].v[k];
                if (j != i && !queued[j] && T[j] > T[i]) {
                    queued[j] = 1;
                    queue.push_back(j);
                }
            }
    };
    for (auto id : electrode.ids) enqueue_neighbors(id);
    while (!queue.empty()) {
        const std::uint32_t i = queue.front();
        queue.pop_front();
        queued[i] = 0;
        const double t = local_update(i);
        if (t < T[i] - kTolMs) {
            T[i] = t;
            enqueue_neighbors(i);
        }
    }

    EikonalField field;
    field.source = electrode;
    field.arrival = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), -1.0);
    for (std::uint32_t i = 0; i < n; ++i)
        if (std::isfinite(T[i])) field.arrival[i] = T[i];
    for (std::uint32_t i = 0; i < n; ++i)
        if (!partition.node_excluded(i) && field.arrival[i] < 0) ++field.unreached_active;
    return field;
}

}  // namespace avp
