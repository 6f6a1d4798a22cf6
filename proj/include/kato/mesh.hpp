#pragma once

// Embedded simplicial meshes (polylines and triangle surfaces in R^n),
// a small factory of analytic test shapes, and ASCII OFF input/output.

#include "kato/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace kato {

using CellIndex = Eigen::Matrix<index_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Triangulated (m = 2) or polyline (m = 1) submanifold of R^n.
///
/// Vertex rows of `points` are the values of the embedding. Every cell
/// carries an orthonormal frame for its tangent plane, so the push-forward
/// of a tangent vector is `frame * v` and the orthogonal projection onto
/// the tangent plane is `frame.transpose()`.
class EmbeddedMesh {
public:
    EmbeddedMesh() = default;

    /// Builds all derived geometry. Throws on degenerate cells or bad indices.
    EmbeddedMesh(MatR points, CellIndex cells) : points_(std::move(points)), cells_(std::move(cells)) {
        require(points_.rows() > 0, ErrorKind::input, "mesh needs at least one vertex");
        require(cells_.rows() > 0, ErrorKind::input, "mesh needs at least one cell");
        require(cells_.cols() == 2 || cells_.cols() == 3, ErrorKind::input,
                "cells must be edges (2 vertices) or triangles (3 vertices)");
        m_ = static_cast<int>(cells_.cols()) - 1;
        n_ = static_cast<int>(points_.cols());
        require(n_ >= m_, ErrorKind::dimension, "ambient dimension smaller than intrinsic dimension");
        build();
    }

    int ambient_dim() const noexcept { return n_; }
    int intrinsic_dim() const noexcept { return m_; }
    index_t num_vertices() const noexcept { return points_.rows(); }
    index_t num_cells() const noexcept { return cells_.rows(); }

    const MatR& points() const noexcept { return points_; }
    const CellIndex& cells() const noexcept { return cells_; }
    Eigen::VectorXd vertex(index_t v) const { return points_.row(v).transpose(); }

    const VecR& vertex_measure() const noexcept { return vertex_measure_; }
    const VecR& cell_measure() const noexcept { return cell_measure_; }
    /// Gram matrix of the edge vectors p_i - p_0 of each cell.
    const std::vector<MatR>& cell_metric() const noexcept { return cell_metric_; }
    /// n x m orthonormal basis of each cell's tangent plane.
    const std::vector<MatR>& tangent_frames() const noexcept { return frames_; }
    /// m x (m+1) map from local vertex values to the frame gradient.
    const std::vector<MatR>& cell_gradients() const noexcept { return cell_grad_; }

    const std::vector<std::vector<index_t>>& vertex_neighbors() const noexcept { return neighbors_; }
    const std::vector<std::vector<index_t>>& vertex_cells() const noexcept { return vertex_cells_; }
    const std::vector<bool>& boundary_vertices() const noexcept { return boundary_; }
    bool has_boundary() const noexcept {
        return std::any_of(boundary_.begin(), boundary_.end(), [](bool b) { return b; });
    }

    /// Each cell is owned by exactly one of its vertices; ownership is spread
    /// so that vertices own cells as evenly as possible. Used to place cell
    /// fields inside vertex-based sets such as dyadic cubes.
    const std::vector<index_t>& cell_owner() const noexcept { return cell_owner_; }

    VecR cell_centroid(index_t c) const {
        VecR x = VecR::Zero(n_);
        for (int i = 0; i <= m_; ++i) x += points_.row(cells_(c, i)).transpose();
        return x / static_cast<real>(m_ + 1);
    }

    real total_measure() const { return cell_measure_.sum(); }

    bool is_edge_connected() const {
        const index_t nv = num_vertices();
        std::vector<char> seen(static_cast<size_t>(nv), 0);
        std::vector<index_t> stack{0};
        seen[0] = 1;
        index_t count = 1;
        while (!stack.empty()) {
            index_t v = stack.back();
            stack.pop_back();
            for (index_t w : neighbors_[static_cast<size_t>(v)]) {
                if (!seen[static_cast<size_t>(w)]) {
                    seen[static_cast<size_t>(w)] = 1;
                    ++count;
                    stack.push_back(w);
                }
            }
        }
        return count == nv;
    }

private:
    void build() {
        const index_t nv = num_vertices();
        const index_t nc = num_cells();
        vertex_measure_ = VecR::Zero(nv);
        cell_measure_ = VecR::Zero(nc);
        cell_metric_.resize(static_cast<size_t>(nc));
        frames_.resize(static_cast<size_t>(nc));
        cell_grad_.resize(static_cast<size_t>(nc));
        neighbors_.assign(static_cast<size_t>(nv), {});
        vertex_cells_.assign(static_cast<size_t>(nv), {});

        const real factorial = (m_ == 1) ? 1.0 : 2.0;
        for (index_t c = 0; c < nc; ++c) {
            for (int i = 0; i <= m_; ++i) {
                const index_t v = cells_(c, i);
                require(v >= 0 && v < nv, ErrorKind::input,
                        "cell " + std::to_string(c) + " references vertex " + std::to_string(v) +
                            " outside [0, " + std::to_string(nv) + ")");
            }
            MatR edges(n_, m_);
            for (int i = 0; i < m_; ++i)
                edges.col(i) = (points_.row(cells_(c, i + 1)) - points_.row(cells_(c, 0))).transpose();
            MatR gram = edges.transpose() * edges;
            const real det = gram.determinant();
            const real scale = std::pow(edges.colwise().norm().maxCoeff(), 2 * m_);
            require(det > 1e-24 * std::max(scale, 1e-300), ErrorKind::degenerate,
                    "cell " + std::to_string(c) + " has zero volume");
            cell_metric_[static_cast<size_t>(c)] = gram;
            const real vol = std::sqrt(det) / factorial;
            cell_measure_[c] = vol;

            // Gram-Schmidt on the edge vectors gives the orthonormal frame.
            Eigen::HouseholderQR<MatR> qr(edges);
            MatR q = qr.householderQ() * MatR::Identity(n_, m_);
            // Align frame orientation with the edges for readability of frame coordinates.
            MatR r = q.transpose() * edges;
            for (int i = 0; i < m_; ++i) {
                if (r(i, i) < 0) {
                    q.col(i) = -q.col(i);
                    r.row(i) = -r.row(i);
                }
            }
            frames_[static_cast<size_t>(c)] = q;
            // Local edge coordinates: r = F^T E (upper triangular m x m).
            MatR diff(m_, m_ + 1);
            diff.setZero();
            for (int i = 0; i < m_; ++i) {
                diff(i, 0) = -1.0;
                diff(i, i + 1) = 1.0;
            }
            cell_grad_[static_cast<size_t>(c)] = r.transpose().fullPivLu().solve(diff);

            for (int i = 0; i <= m_; ++i) {
                const index_t v = cells_(c, i);
                vertex_measure_[v] += vol / static_cast<real>(m_ + 1);
                vertex_cells_[static_cast<size_t>(v)].push_back(c);
                for (int j = 0; j <= m_; ++j)
                    if (j != i) neighbors_[static_cast<size_t>(v)].push_back(cells_(c, j));
            }
        }
        for (auto& nb : neighbors_) {
            std::sort(nb.begin(), nb.end());
            nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
        }
        find_boundary();
        assign_owners();
    }

    void find_boundary() {
        const index_t nv = num_vertices();
        boundary_.assign(static_cast<size_t>(nv), false);
        if (m_ == 1) {
            for (index_t v = 0; v < nv; ++v)
                boundary_[static_cast<size_t>(v)] = vertex_cells_[static_cast<size_t>(v)].size() < 2;
            return;
        }
        std::map<std::pair<index_t, index_t>, int> edge_count;
        for (index_t c = 0; c < num_cells(); ++c) {
            for (int i = 0; i < 3; ++i) {
                index_t a = cells_(c, i), b = cells_(c, (i + 1) % 3);
                if (a > b) std::swap(a, b);
                ++edge_count[{a, b}];
            }
        }
        for (const auto& [e, k] : edge_count) {
            if (k == 1) {
                boundary_[static_cast<size_t>(e.first)] = true;
                boundary_[static_cast<size_t>(e.second)] = true;
            }
        }
    }

    void assign_owners() {
        std::vector<index_t> owned(static_cast<size_t>(num_vertices()), 0);
        cell_owner_.assign(static_cast<size_t>(num_cells()), 0);
        for (index_t c = 0; c < num_cells(); ++c) {
            index_t best = cells_(c, 0);
            for (int i = 1; i <= m_; ++i) {
                const index_t v = cells_(c, i);
                const auto ov = owned[static_cast<size_t>(v)], ob = owned[static_cast<size_t>(best)];
                if (ov < ob || (ov == ob && v < best)) best = v;
            }
            cell_owner_[static_cast<size_t>(c)] = best;
            ++owned[static_cast<size_t>(best)];
        }
    }

    MatR points_;
    CellIndex cells_;
    int m_ = 0;
    int n_ = 0;
    VecR vertex_measure_;
    VecR cell_measure_;
    std::vector<MatR> cell_metric_;
    std::vector<MatR> frames_;
    std::vector<MatR> cell_grad_;
    std::vector<std::vector<index_t>> neighbors_;
    std::vector<std::vector<index_t>> vertex_cells_;
    std::vector<bool> boundary_;
    std::vector<index_t> cell_owner_;
};

// ---------------------------------------------------------------------------
// Shape factory
// ---------------------------------------------------------------------------

namespace shape {
struct Circle { real radius; index_t points; };
struct Sphere { real radius; int refinement; };
struct Torus { real major; real minor; index_t n; index_t m; };
struct FlatPatch { real width; real height; index_t n; index_t m; };
/// Flat torus of side lengths w x h embedded isometrically in R^4.
struct FlatTorus { real width; real height; index_t n; index_t m; };
struct Helix { real radius; real pitch; real turns; index_t points; };
}  // namespace shape

using ShapeSpec = std::variant<shape::Circle, shape::Sphere, shape::Torus, shape::FlatPatch,
                               shape::FlatTorus, shape::Helix>;

namespace detail {

inline void require_positive(real x, const char* what) {
    require(x > 0.0 && std::isfinite(x), ErrorKind::input, std::string(what) + " must be positive");
}

inline EmbeddedMesh make_circle(const shape::Circle& s) {
    require_positive(s.radius, "circle radius");
    require(s.points >= 3, ErrorKind::input, "circle needs at least 3 points");
    MatR p(s.points, 2);
    CellIndex c(s.points, 2);
    for (index_t k = 0; k < s.points; ++k) {
        const real th = 2.0 * pi * static_cast<real>(k) / static_cast<real>(s.points);
        p(k, 0) = s.radius * std::cos(th);
        p(k, 1) = s.radius * std::sin(th);
        c(k, 0) = k;
        c(k, 1) = (k + 1) % s.points;
    }
    return EmbeddedMesh(std::move(p), std::move(c));
}

inline EmbeddedMesh make_helix(const shape::Helix& s) {
    require_positive(s.radius, "helix radius");
    require_positive(s.pitch, "helix pitch");
    require_positive(s.turns, "helix turns");
    require(s.points >= 2, ErrorKind::input, "helix needs at least 2 points");
    MatR p(s.points, 3);
    CellIndex c(s.points - 1, 2);
    for (index_t k = 0; k < s.points; ++k) {
        const real th = 2.0 * pi * s.turns * static_cast<real>(k) / static_cast<real>(s.points - 1);
        p(k, 0) = s.radius * std::cos(th);
        p(k, 1) = s.radius * std::sin(th);
        p(k, 2) = s.pitch * th / (2.0 * pi);
        if (k + 1 < s.points) {
            c(k, 0) = k;
            c(k, 1) = k + 1;
        }
    }
    return EmbeddedMesh(std::move(p), std::move(c));
}

inline EmbeddedMesh make_sphere(const shape::Sphere& s) {
    require_positive(s.radius, "sphere radius");
    require(s.refinement >= 0, ErrorKind::input, "sphere refinement must be nonnegative");
    const real t = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Eigen::Vector3d> v = {
        {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
        {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    std::vector<std::array<index_t, 3>> f = {
        {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
        {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
        {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
    for (auto& x : v) x.normalize();
    for (int level = 0; level < s.refinement; ++level) {
        std::map<std::pair<index_t, index_t>, index_t> midpoint;
        auto mid = [&](index_t a, index_t b) {
            auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            v.push_back((v[static_cast<size_t>(a)] + v[static_cast<size_t>(b)]).normalized());
            const index_t id = static_cast<index_t>(v.size()) - 1;
            midpoint.emplace(key, id);
            return id;
        };
        std::vector<std::array<index_t, 3>> g;
        g.reserve(f.size() * 4);
        for (const auto& tri : f) {
            const index_t a = mid(tri[0], tri[1]), b = mid(tri[1], tri[2]), c = mid(tri[2], tri[0]);
            g.push_back({tri[0], a, c});
            g.push_back({tri[1], b, a});
            g.push_back({tri[2], c, b});
            g.push_back({a, b, c});
        }
        f = std::move(g);
    }
    MatR p(static_cast<index_t>(v.size()), 3);
    for (size_t i = 0; i < v.size(); ++i) p.row(static_cast<index_t>(i)) = s.radius * v[i].transpose();
    CellIndex c(static_cast<index_t>(f.size()), 3);
    for (size_t i = 0; i < f.size(); ++i)
        for (int j = 0; j < 3; ++j) c(static_cast<index_t>(i), j) = f[i][static_cast<size_t>(j)];
    return EmbeddedMesh(std::move(p), std::move(c));
}

/// Periodic grid triangulation shared by the two torus shapes.
inline CellIndex periodic_grid_cells(index_t n, index_t m) {
    CellIndex c(2 * n * m, 3);
    index_t k = 0;
    for (index_t i = 0; i < n; ++i) {
        for (index_t j = 0; j < m; ++j) {
            const index_t a = i * m + j, b = ((i + 1) % n) * m + j;
            const index_t cc = ((i + 1) % n) * m + (j + 1) % m, d = i * m + (j + 1) % m;
            c.row(k++) << a, b, cc;
            c.row(k++) << a, cc, d;
        }
    }
    return c;
}

inline EmbeddedMesh make_torus(const shape::Torus& s) {
    require_positive(s.major, "torus major radius");
    require_positive(s.minor, "torus minor radius");
    require(s.minor < s.major, ErrorKind::input, "torus minor radius must be below the major radius");
    require(s.n >= 3 && s.m >= 3, ErrorKind::input, "torus needs at least 3 x 3 samples");
    MatR p(s.n * s.m, 3);
    for (index_t i = 0; i < s.n; ++i) {
        const real u = 2.0 * pi * static_cast<real>(i) / static_cast<real>(s.n);
        for (index_t j = 0; j < s.m; ++j) {
            const real w = 2.0 * pi * static_cast<real>(j) / static_cast<real>(s.m);
            const real rr = s.major + s.minor * std::cos(w);
            p.row(i * s.m + j) << rr * std::cos(u), rr * std::sin(u), s.minor * std::sin(w);
        }
    }
    return EmbeddedMesh(std::move(p), periodic_grid_cells(s.n, s.m));
}

inline EmbeddedMesh make_flat_torus(const shape::FlatTorus& s) {
    require_positive(s.width, "flat torus width");
    require_positive(s.height, "flat torus height");
    require(s.n >= 3 && s.m >= 3, ErrorKind::input, "flat torus needs at least 3 x 3 samples");
    const real rw = s.width / (2.0 * pi), rh = s.height / (2.0 * pi);
    MatR p(s.n * s.m, 4);
    for (index_t i = 0; i < s.n; ++i) {
        const real u = 2.0 * pi * static_cast<real>(i) / static_cast<real>(s.n);
        for (index_t j = 0; j < s.m; ++j) {
            const real w = 2.0 * pi * static_cast<real>(j) / static_cast<real>(s.m);
            p.row(i * s.m + j) << rw * std::cos(u), rw * std::sin(u), rh * std::cos(w), rh * std::sin(w);
        }
    }
    return EmbeddedMesh(std::move(p), periodic_grid_cells(s.n, s.m));
}

inline EmbeddedMesh make_flat_patch(const shape::FlatPatch& s) {
    require_positive(s.width, "patch width");
    require_positive(s.height, "patch height");
    require(s.n >= 2 && s.m >= 2, ErrorKind::input, "patch needs at least 2 x 2 vertices");
    MatR p(s.n * s.m, 3);
    for (index_t i = 0; i < s.n; ++i)
        for (index_t j = 0; j < s.m; ++j)
            p.row(i * s.m + j) << s.width * static_cast<real>(i) / static_cast<real>(s.n - 1),
                s.height * static_cast<real>(j) / static_cast<real>(s.m - 1), 0.0;
    CellIndex c(2 * (s.n - 1) * (s.m - 1), 3);
    index_t k = 0;
    for (index_t i = 0; i + 1 < s.n; ++i) {
        for (index_t j = 0; j + 1 < s.m; ++j) {
            const index_t a = i * s.m + j, b = (i + 1) * s.m + j, cc = (i + 1) * s.m + j + 1, d = i * s.m + j + 1;
            c.row(k++) << a, b, cc;
            c.row(k++) << a, cc, d;
        }
    }
    return EmbeddedMesh(std::move(p), std::move(c));
}

}  // namespace detail

inline EmbeddedMesh generate_mesh(const ShapeSpec& spec) {
    return std::visit(
        [](const auto& s) -> EmbeddedMesh {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, shape::Circle>) return detail::make_circle(s);
            else if constexpr (std::is_same_v<S, shape::Sphere>) return detail::make_sphere(s);
            else if constexpr (std::is_same_v<S, shape::Torus>) return detail::make_torus(s);
            else if constexpr (std::is_same_v<S, shape::FlatPatch>) return detail::make_flat_patch(s);
            else if constexpr (std::is_same_v<S, shape::FlatTorus>) return detail::make_flat_torus(s);
            else return detail::make_helix(s);
        },
        spec);
}

// ---------------------------------------------------------------------------
// OFF files
// ---------------------------------------------------------------------------

inline void save_off(const EmbeddedMesh& mesh, std::ostream& out) {
    out << "OFF\n";
    out << mesh.num_vertices() << ' ' << mesh.num_cells() << " 0\n";
    out << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (index_t v = 0; v < mesh.num_vertices(); ++v) {
        for (int k = 0; k < mesh.ambient_dim(); ++k) out << (k ? " " : "") << mesh.points()(v, k);
        out << '\n';
    }
    for (index_t c = 0; c < mesh.num_cells(); ++c) {
        out << mesh.intrinsic_dim() + 1;
        for (int i = 0; i <= mesh.intrinsic_dim(); ++i) out << ' ' << mesh.cells()(c, i);
        out << '\n';
    }
}

inline void save_off(const EmbeddedMesh& mesh, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::input, "cannot open " + path + " for writing");
    save_off(mesh, out);
}

/// Parses an ASCII OFF mesh whose vertex lines carry `ambient_dim` coordinates.
/// Blank lines and `#` comments are skipped; errors name the offending line.
inline EmbeddedMesh load_off(std::istream& in, int ambient_dim = 3) {
    require(ambient_dim >= 1, ErrorKind::input, "ambient_dim must be positive");
    std::string line;
    int lineno = 0;
    auto next_line = [&](std::string& out_line) {
        while (std::getline(in, out_line)) {
            ++lineno;
            const auto hash = out_line.find('#');
            if (hash != std::string::npos) out_line.erase(hash);
            if (out_line.find_first_not_of(" \t\r") != std::string::npos) return true;
        }
        return false;
    };
    auto fail = [&](const std::string& msg) { throw Error(ErrorKind::parse, "line " + std::to_string(lineno) + ": " + msg); };

    if (!next_line(line)) fail("empty file, expected OFF header");
    {
        std::istringstream hs(line);
        std::string tag;
        hs >> tag;
        if (tag != "OFF") fail("expected header 'OFF', got '" + tag + "'");
    }
    if (!next_line(line)) fail("missing counts line");
    long long nv = -1, nf = -1, ne = 0;
    {
        std::istringstream cs(line);
        if (!(cs >> nv >> nf)) fail("malformed counts line '" + line + "'");
        cs >> ne;
        if (nv <= 0 || nf <= 0) fail("vertex and face counts must be positive");
    }
    MatR pts(nv, ambient_dim);
    for (long long v = 0; v < nv; ++v) {
        if (!next_line(line)) fail("unexpected end of file in vertex block");
        std::istringstream vs(line);
        std::vector<double> coords;
        double x;
        while (vs >> x) coords.push_back(x);
        if (!vs.eof()) fail("non-numeric vertex coordinate");
        if (static_cast<int>(coords.size()) != ambient_dim)
            throw Error(ErrorKind::dimension, "line " + std::to_string(lineno) + ": vertex has " +
                                                  std::to_string(coords.size()) + " coordinates, expected " +
                                                  std::to_string(ambient_dim));
        for (int k = 0; k < ambient_dim; ++k) pts(v, k) = coords[static_cast<size_t>(k)];
    }
    std::vector<std::vector<index_t>> faces;
    int width = -1;
    for (long long f = 0; f < nf; ++f) {
        if (!next_line(line)) fail("unexpected end of file in face block");
        std::istringstream fs(line);
        long long k;
        if (!(fs >> k)) fail("malformed face line");
        if (k != 2 && k != 3) fail("faces must have 2 or 3 vertices, got " + std::to_string(k));
        if (width < 0) width = static_cast<int>(k);
        if (k != width) fail("mixed face sizes");
        std::vector<index_t> ids;
        for (long long i = 0; i < k; ++i) {
            long long id;
            if (!(fs >> id)) fail("face has fewer indices than declared");
            if (id < 0 || id >= nv)
                fail("face index " + std::to_string(id) + " out of range [0, " + std::to_string(nv) + ")");
            ids.push_back(static_cast<index_t>(id));
        }
        faces.push_back(std::move(ids));
    }
    CellIndex cells(nf, width);
    for (long long f = 0; f < nf; ++f)
        for (int i = 0; i < width; ++i) cells(f, i) = faces[static_cast<size_t>(f)][static_cast<size_t>(i)];
    return EmbeddedMesh(std::move(pts), std::move(cells));
}

inline EmbeddedMesh load_mesh(const std::string& path, int ambient_dim = 3) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::input, "cannot open mesh file " + path);
    return load_off(in, ambient_dim);
}

}  // namespace kato
