#pragma once

// Quantitative evaluation: toy-Fréchet feature distance, the standard
// monocular depth metrics, normal angular error, and cross-modal consistency
// scoring between the planes of one sample. All metrics are pure functions
// computed in double precision.

#include "modalflow/losses.hpp"
#include "modalflow/synth.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace modalflow {

struct FeatureStats {
    Eigen::VectorXd mu;
    MatD sigma;
    int64_t n = 0;
};

// One pooled feature vector per sample (mean over the provider's patch grid),
// then unbiased mean/covariance across samples.
inline FeatureStats feature_stats(const std::vector<Plane>& samples,
                                  const FeatureProvider& provider) {
    if (samples.size() < 2) throw ValidationError("feature_stats: need at least 2 samples");
    const int F = provider.feature_dim();
    const int64_t n = int64_t(samples.size());
    MatD x(n, F);
    for (int64_t i = 0; i < n; i++) {
        Mat f = provider.features(samples[size_t(i)], i);
        x.row(i) = f.colwise().mean().cast<double>();
    }
    FeatureStats st;
    st.n = n;
    st.mu = x.colwise().mean().transpose();
    MatD centered = x.rowwise() - st.mu.transpose();
    st.sigma = centered.transpose() * centered / double(n - 1);
    st.sigma = ((st.sigma + st.sigma.transpose()) * 0.5).eval();
    return st;
}

namespace detail {

// PSD square root via eigendecomposition; slightly negative eigenvalues are
// rounding, anything past the tolerance means the input was not a covariance.
inline MatD psd_sqrt(const MatD& m) {
    Eigen::SelfAdjointEigenSolver<MatD> es(m);
    if (es.info() != Eigen::Success)
        throw NumericalError("psd_sqrt: eigendecomposition did not converge");
    Eigen::VectorXd vals = es.eigenvalues();
    const double scale = std::max(1.0, std::abs(vals.maxCoeff()));
    for (Eigen::Index i = 0; i < vals.size(); i++) {
        if (vals[i] < -1e-6 * scale)
            throw NumericalError("psd_sqrt: eigenvalue " + std::to_string(vals[i]) +
                                 " below clipping tolerance");
        vals[i] = std::sqrt(std::max(0.0, vals[i]));
    }
    return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median: empty input");
    size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + long(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2) return hi;
    std::nth_element(v.begin(), v.begin() + long(mid) - 1, v.begin() + long(mid));
    return 0.5 * (v[mid - 1] + hi);
}

inline double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace detail

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross term
// computed on the symmetrized product sqrt(S_a) S_b sqrt(S_a).
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mu.size() != b.mu.size())
        throw ValidationError("frechet_distance: feature dims differ");
    MatD sa = (a.sigma + a.sigma.transpose()) * 0.5;
    MatD sb = (b.sigma + b.sigma.transpose()) * 0.5;
    MatD ra = detail::psd_sqrt(sa);
    MatD cross = ra * sb * ra;
    cross = ((cross + cross.transpose()) * 0.5).eval();
    double d = (a.mu - b.mu).squaredNorm() + sa.trace() + sb.trace() -
               2.0 * detail::psd_sqrt(cross).trace();
    return std::max(0.0, d);
}

struct DepthMetrics {
    double absrel = 0.0;
    double delta1 = 0.0;
    double rmse = 0.0;
};

// Relative-depth convention: pred is least-squares scale-shift aligned to gt
// before scoring unless align is false. delta1 uses strict < 1.25.
inline DepthMetrics depth_metrics(const Plane& pred, const Plane& gt, const Plane& valid,
                                  bool align = true) {
    if (pred.c != 1 || gt.c != 1 || valid.c != 1)
        throw ValidationError("depth_metrics: planes must be 1-channel");
    if (pred.h != gt.h || pred.w != gt.w || valid.h != gt.h || valid.w != gt.w)
        throw ValidationError("depth_metrics: shapes differ");

    std::vector<double> p, g;
    for (int y = 0; y < gt.h; y++)
        for (int x = 0; x < gt.w; x++) {
            if (valid.at(y, x, 0) <= 0.5f) continue;
            double gv = gt.at(y, x, 0);
            if (gv <= 0.0) throw ValidationError("depth_metrics: gt must be positive on the mask");
            p.push_back(pred.at(y, x, 0));
            g.push_back(gv);
        }
    if (p.empty()) throw ValidationError("depth_metrics: empty valid mask");

    double a = 1.0, b = 0.0;
    const double n = double(p.size());
    if (align) {
        double sp = 0, sg = 0, spp = 0, spg = 0;
        for (size_t i = 0; i < p.size(); i++) {
            sp += p[i];
            sg += g[i];
            spp += p[i] * p[i];
            spg += p[i] * g[i];
        }
        double denom = n * spp - sp * sp;
        if (std::abs(denom) > 1e-12 * std::max(1.0, spp)) {
            a = (n * spg - sp * sg) / denom;
            b = (sg - a * sp) / n;
        } else {
            b = (sg - sp) / n;
        }
    }

    DepthMetrics m;
    int64_t within = 0;
    for (size_t i = 0; i < p.size(); i++) {
        double pv = a * p[i] + b;
        double r = pv - g[i];
        m.absrel += std::abs(r) / g[i];
        m.rmse += r * r;
        if (pv > 0.0 && std::max(pv / g[i], g[i] / pv) < 1.25) within++;
    }
    m.absrel /= n;
    m.rmse = std::sqrt(m.rmse / n);
    m.delta1 = double(within) / n;
    return m;
}

inline DepthMetrics depth_metrics(const Plane& pred, const Plane& gt, bool align = true) {
    return depth_metrics(pred, gt, Plane(gt.h, gt.w, 1, 1.f), align);
}

struct NormalError {
    double mean_deg = 0.0;
    double median_deg = 0.0;
};

inline NormalError normal_angular_error(const Plane& pred, const Plane& gt) {
    if (pred.c != 3 || gt.c != 3) throw ValidationError("normal_angular_error: need 3 channels");
    if (pred.h != gt.h || pred.w != gt.w) throw ValidationError("normal_angular_error: shapes differ");
    auto unit = [](const Plane& pl, int y, int x, double v[3]) {
        v[0] = pl.at(y, x, 0);
        v[1] = pl.at(y, x, 1);
        v[2] = pl.at(y, x, 2);
        double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if (norm < 1e-8) {
            v[0] = v[1] = 0.0;
            v[2] = 1.0;
        } else {
            v[0] /= norm;
            v[1] /= norm;
            v[2] /= norm;
        }
    };
    std::vector<double> angles;
    angles.reserve(size_t(gt.h) * size_t(gt.w));
    for (int y = 0; y < gt.h; y++)
        for (int x = 0; x < gt.w; x++) {
            double u[3], v[3];
            unit(pred, y, x, u);
            unit(gt, y, x, v);
            double dot = std::clamp(u[0] * v[0] + u[1] * v[1] + u[2] * v[2], -1.0, 1.0);
            angles.push_back(detail::degrees(std::acos(dot)));
        }
    NormalError e;
    for (double a : angles) e.mean_deg += a;
    e.mean_deg /= double(angles.size());
    e.median_deg = detail::median(angles);
    return e;
}

// Neighboring depth jump larger than this counts as a depth discontinuity
// (native depth units; object/background gaps in the synthetic scenes are
// several times larger).
inline constexpr double kDepthEdgeThreshold = 0.1;

struct ConsistencyReport {
    double depth_normal_median_deg = 0.0;
    double boundary_agreement = 1.0;
};

// How well one sample's planes agree with each other: (i) normals re-derived
// from the depth plane vs the emitted normal plane (median angle over interior
// pixels), (ii) fraction of seg-boundary pixels within 1 pixel of a depth
// discontinuity. Planes follow default registry order.
inline ConsistencyReport cross_modal_consistency(const MultiModalSample& sample) {
    if (sample.planes.size() < 4)
        throw ValidationError("cross_modal_consistency: needs rgb, depth, normal, seg planes");
    const Plane& depth = sample.planes[1];
    const Plane& normal = sample.planes[2];
    const Plane& seg = sample.planes[3];
    if (depth.c != 1 || normal.c != 3 || seg.c != 1)
        throw ValidationError("cross_modal_consistency: plane channels out of order");

    ConsistencyReport rep;

    Plane derived = derive_normals_from_depth(depth, 1.0 / depth.w);
    std::vector<double> angles;
    for (int y = 0; y < depth.h; y++)
        for (int x = 0; x < depth.w; x++) {
            if (depth.h > 2 && (y == 0 || y == depth.h - 1)) continue;
            if (depth.w > 2 && (x == 0 || x == depth.w - 1)) continue;
            double dot = 0;
            double nu = 0, nv = 0;
            for (int ch = 0; ch < 3; ch++) {
                double uu = derived.at(y, x, ch), vv = normal.at(y, x, ch);
                dot += uu * vv;
                nu += uu * uu;
                nv += vv * vv;
            }
            double norm = std::sqrt(nu * nv);
            if (norm < 1e-12) {
                angles.push_back(0.0);
                continue;
            }
            angles.push_back(detail::degrees(std::acos(std::clamp(dot / norm, -1.0, 1.0))));
        }
    rep.depth_normal_median_deg = detail::median(angles);

    Plane seg_edge = edge_from_seg(seg);
    auto depth_edge = [&](int y, int x) {
        double d = depth.at(y, x, 0);
        if (x > 0 && std::abs(d - depth.at(y, x - 1, 0)) > kDepthEdgeThreshold) return true;
        if (x + 1 < depth.w && std::abs(d - depth.at(y, x + 1, 0)) > kDepthEdgeThreshold) return true;
        if (y > 0 && std::abs(d - depth.at(y - 1, x, 0)) > kDepthEdgeThreshold) return true;
        if (y + 1 < depth.h && std::abs(d - depth.at(y + 1, x, 0)) > kDepthEdgeThreshold) return true;
        return false;
    };
    int64_t boundary = 0, matched = 0;
    for (int y = 0; y < seg.h; y++)
        for (int x = 0; x < seg.w; x++) {
            if (seg_edge.at(y, x, 0) < 0.5f) continue;
            boundary++;
            bool hit = false;
            for (int dy = -1; dy <= 1 && !hit; dy++)
                for (int dx = -1; dx <= 1 && !hit; dx++) {
                    int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= seg.h || xx < 0 || xx >= seg.w) continue;
                    hit = depth_edge(yy, xx);
                }
            if (hit) matched++;
        }
    rep.boundary_agreement = boundary == 0 ? 1.0 : double(matched) / double(boundary);
    return rep;
}

}  // namespace modalflow
