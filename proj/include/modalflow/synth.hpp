#ifndef MODALFLOW_SYNTH_HPP
#define MODALFLOW_SYNTH_HPP

// Procedural multi-modal scenes: orthographic z-buffer renders of spheres and
// tilted slabs with Lambertian shading, plus the aligned depth / normal / seg
// planes and a fixed-stride dataset container.

#include "modalflow/modality.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

namespace modalflow {

struct MultiModalSample {
    std::vector<Plane> planes;  // registry order, native representation
    int class_id = -1;
};

struct Primitive {
    enum Kind { kSphere, kSlab } kind = kSphere;
    double cx = 0, cy = 0;      // silhouette center, viewport units
    double r = 0;               // sphere radius (world units)
    double hx = 0, hy = 0;      // slab half extents
    double z0 = 0;              // sphere center depth / slab depth at center
    double gx = 0, gy = 0;      // slab depth gradients
    double albedo[3] = {0, 0, 0};
    int label = 0;
};

struct SceneSpec {
    int class_id = -1;
    std::vector<Primitive> prims;
    double light[3] = {0, 0, 1};
    double bg_depth = 2.8;
    double bg_albedo[3] = {0.5, 0.5, 0.5};
};

namespace detail {

inline bool silhouettes_clear(const Primitive& a, const Primitive& b, double gap) {
    auto extent = [](const Primitive& p, int axis) {
        if (p.kind == Primitive::kSphere) return p.r;
        return axis == 0 ? p.hx : p.hy;
    };
    // conservative AABB test; spheres use their bounding square
    return std::abs(a.cx - b.cx) > extent(a, 0) + extent(b, 0) + gap ||
           std::abs(a.cy - b.cy) > extent(a, 1) + extent(b, 1) + gap;
}

}  // namespace detail

// Classes 0..4 place 1..5 spheres (labels 1+i); classes 5..9 place 1..5 slabs
// (labels 6+i). Silhouettes never overlap and stay inside the margin, depths
// stay inside [1.05, 2.5], and the background sits at U(2.7, 2.95).
inline SceneSpec sample_scene_spec(int class_id, Rng& rng) {
    if (class_id < 0 || class_id > 9)
        throw ValidationError("sample_scene_spec: class_id must be in [0, 9]");
    SceneSpec spec;
    spec.class_id = class_id;
    const bool spheres = class_id < 5;
    const int count = spheres ? class_id + 1 : class_id - 4;

    double lz = 0.55 + 0.4 * rng.uniform();
    double phi = 2.0 * std::numbers::pi * rng.uniform();
    double rho = std::sqrt(std::max(0.0, 1.0 - lz * lz));
    spec.light[0] = rho * std::cos(phi);
    spec.light[1] = rho * std::sin(phi);
    spec.light[2] = lz;
    spec.bg_depth = 2.7 + 0.25 * rng.uniform();
    for (double& a : spec.bg_albedo) a = 0.3 + 0.4 * rng.uniform();

    const double margin = 0.16, gap = 0.02;
    for (int i = 0; i < count; i++) {
        double shrink = 1.0;
        for (int attempt = 0;; attempt++) {
            if (attempt == 200) {
                shrink *= 0.8;
                attempt = 0;
                if (shrink < 0.2)
                    throw NumericalError("sample_scene_spec: placement failed");
            }
            Primitive p;
            p.label = spheres ? 1 + i : 6 + i;
            p.cx = margin + (1 - 2 * margin) * rng.uniform();
            p.cy = margin + (1 - 2 * margin) * rng.uniform();
            if (spheres) {
                p.kind = Primitive::kSphere;
                p.r = (0.07 + 0.06 * rng.uniform()) * shrink;
                p.z0 = 1.05 + p.r + (2.45 - 1.05 - 2 * p.r) * rng.uniform();
            } else {
                p.kind = Primitive::kSlab;
                p.hx = (0.06 + 0.08 * rng.uniform()) * shrink;
                p.hy = (0.06 + 0.08 * rng.uniform()) * shrink;
                p.gx = 2.4 * rng.uniform() - 1.2;
                p.gy = 2.4 * rng.uniform() - 1.2;
                double tilt = std::abs(p.gx) * p.hx + std::abs(p.gy) * p.hy;
                p.z0 = 1.05 + tilt + (2.5 - 1.05 - 2 * tilt) * rng.uniform();
            }
            for (double& a : p.albedo) a = 0.25 + 0.7 * rng.uniform();
            bool clear = true;
            for (const auto& q : spec.prims)
                if (!detail::silhouettes_clear(p, q, gap)) {
                    clear = false;
                    break;
                }
            if (clear) {
                spec.prims.push_back(p);
                break;
            }
        }
    }
    return spec;
}

// Orthographic render: pixel (y, x) looks along +z at world
// ((x + .5)/W, (y + .5)/H); the nearest surface wins.
inline MultiModalSample render_scene(const SceneSpec& spec, int image_size) {
    if (image_size < 4) throw ValidationError("render_scene: image_size too small");
    const int n = image_size;
    MultiModalSample s;
    s.class_id = spec.class_id;
    Plane rgb(n, n, 3), depth(n, n, 1), normal(n, n, 3), seg(n, n, 1);

    for (int y = 0; y < n; y++)
        for (int x = 0; x < n; x++) {
            double wx = (x + 0.5) / n, wy = (y + 0.5) / n;
            double z = spec.bg_depth;
            double nv[3] = {0, 0, 1};
            const double* alb = spec.bg_albedo;
            int label = 0;
            for (const auto& p : spec.prims) {
                double dx = wx - p.cx, dy = wy - p.cy;
                if (p.kind == Primitive::kSphere) {
                    double d2 = dx * dx + dy * dy;
                    if (d2 >= p.r * p.r) continue;
                    double h = std::sqrt(p.r * p.r - d2);
                    double pz = p.z0 - h;
                    if (pz >= z) continue;
                    z = pz;
                    nv[0] = -dx / p.r;
                    nv[1] = -dy / p.r;
                    nv[2] = h / p.r;
                    alb = p.albedo;
                    label = p.label;
                } else {
                    if (std::abs(dx) > p.hx || std::abs(dy) > p.hy) continue;
                    double pz = p.z0 + p.gx * dx + p.gy * dy;
                    if (pz >= z) continue;
                    z = pz;
                    double inv = 1.0 / std::sqrt(1 + p.gx * p.gx + p.gy * p.gy);
                    nv[0] = -p.gx * inv;
                    nv[1] = -p.gy * inv;
                    nv[2] = inv;
                    alb = p.albedo;
                    label = p.label;
                }
            }
            double shade = std::max(
                0.0, nv[0] * spec.light[0] + nv[1] * spec.light[1] + nv[2] * spec.light[2]);
            for (int c = 0; c < 3; c++)
                rgb.at(y, x, c) = float(std::clamp(alb[c] * shade, 0.0, 1.0));
            depth.at(y, x, 0) = float(z);
            for (int c = 0; c < 3; c++) normal.at(y, x, c) = float(nv[c]);
            seg.at(y, x, 0) = float(label);
        }

    s.planes = {std::move(rgb), std::move(depth), std::move(normal), std::move(seg)};
    return s;
}

inline MultiModalSample generate_scene(int class_id, int image_size, Rng& rng) {
    return render_scene(sample_scene_spec(class_id, rng), image_size);
}

// Central-difference normals from a depth map; `spacing` is the world distance
// between adjacent pixels in depth units. n = normalize(-dz/dx, -dz/dy, 1).
inline Plane derive_normals_from_depth(const Plane& depth, double spacing) {
    if (depth.c != 1) throw ValidationError("derive_normals_from_depth: depth must be 1-channel");
    if (spacing <= 0) throw ValidationError("derive_normals_from_depth: spacing must be positive");
    Plane out(depth.h, depth.w, 3);
    auto z = [&](int y, int x) { return double(depth.at(y, x, 0)); };
    for (int y = 0; y < depth.h; y++)
        for (int x = 0; x < depth.w; x++) {
            int xl = std::max(0, x - 1), xr = std::min(depth.w - 1, x + 1);
            int yu = std::max(0, y - 1), yd = std::min(depth.h - 1, y + 1);
            double gx = (z(y, xr) - z(y, xl)) / ((xr - xl) * spacing);
            double gy = (z(yd, x) - z(yu, x)) / ((yd - yu) * spacing);
            double inv = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
            out.at(y, x, 0) = float(-gx * inv);
            out.at(y, x, 1) = float(-gy * inv);
            out.at(y, x, 2) = float(inv);
        }
    return out;
}

// 1 where any 4-neighbor carries a different seg label, else 0.
inline Plane edge_from_seg(const Plane& seg) {
    if (seg.c != 1) throw ValidationError("edge_from_seg: seg must be 1-channel");
    Plane out(seg.h, seg.w, 1);
    for (int y = 0; y < seg.h; y++)
        for (int x = 0; x < seg.w; x++) {
            float v = seg.at(y, x, 0);
            bool edge = (x > 0 && seg.at(y, x - 1, 0) != v) ||
                        (x + 1 < seg.w && seg.at(y, x + 1, 0) != v) ||
                        (y > 0 && seg.at(y - 1, x, 0) != v) ||
                        (y + 1 < seg.h && seg.at(y + 1, x, 0) != v);
            out.at(y, x, 0) = edge ? 1.f : 0.f;
        }
    return out;
}

inline void validate_sample(const MultiModalSample& s, const ModalityRegistry& reg) {
    if (int(s.planes.size()) != reg.size())
        throw ValidationError("sample: plane count does not match registry");
    if (s.class_id < 0) throw ValidationError("sample: class_id unset");
    int h = s.planes.empty() ? 0 : s.planes[0].h;
    int w = s.planes.empty() ? 0 : s.planes[0].w;
    for (int m = 0; m < reg.size(); m++) {
        const Plane& p = s.planes[size_t(m)];
        const ModalitySpec& spec = reg.at(m);
        if (p.h != h || p.w != w)
            throw ValidationError("sample: plane sizes differ for " + spec.name);
        if (p.c != codec::native_channels(spec.codec_id))
            throw ValidationError("sample: channel count wrong for " + spec.name);
        for (float v : p.data)
            if (!std::isfinite(v)) throw ValidationError("sample: non-finite value in " + spec.name);
        if (spec.codec_id == "unit01" || spec.codec_id == "rgb01") {
            for (float v : p.data)
                if (v < 0.f || v > 1.f)
                    throw ValidationError("sample: value outside [0,1] in " + spec.name);
        } else if (spec.codec_id == "depth_minmax") {
            for (float v : p.data)
                if (v <= 0.f) throw ValidationError("sample: non-positive depth");
        } else if (spec.codec_id == "normal_unit") {
            for (int y = 0; y < p.h; y++)
                for (int x = 0; x < p.w; x++) {
                    double n2 = 0;
                    for (int c = 0; c < 3; c++) n2 += double(p.at(y, x, c)) * p.at(y, x, c);
                    if (std::abs(std::sqrt(n2) - 1.0) > 1e-4)
                        throw ValidationError("sample: normal not unit length");
                }
        } else if (spec.codec_id == "seg_palette16") {
            for (float v : p.data) {
                if (v != std::floor(v) || v < 0.f || v >= float(kSegPaletteSize))
                    throw ValidationError("sample: seg label out of range");
            }
        }
    }
}

// ---- dataset container -------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'M', 'M', 'D', 'S'};
inline constexpr uint32_t kDatasetVersion = 1;

inline void write_dataset(const std::string& path, const ModalityRegistry& reg,
                          const std::vector<MultiModalSample>& samples) {
    if (samples.empty()) throw ValidationError("write_dataset: no samples");
    for (const auto& s : samples) validate_sample(s, reg);
    const int h = samples[0].planes[0].h, w = samples[0].planes[0].w;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_dataset: cannot open " + path);
    os.write(kDatasetMagic, 4);
    write_pod<uint32_t>(os, kDatasetVersion);
    write_pod<uint64_t>(os, samples.size());
    write_pod<uint32_t>(os, uint32_t(h));
    write_pod<uint32_t>(os, uint32_t(w));
    write_string(os, reg.to_json().dump());
    int depth_idx = -1;
    for (int m = 0; m < reg.size(); m++)
        if (reg.at(m).codec_id == "depth_minmax") {
            depth_idx = m;
            break;
        }
    for (const auto& s : samples) {
        if (s.planes[0].h != h || s.planes[0].w != w)
            throw ValidationError("write_dataset: mixed sample sizes");
        write_pod<int32_t>(os, int32_t(s.class_id));
        float dmin = 0.f, dmax = 0.f;
        if (depth_idx >= 0) {
            const Plane& d = s.planes[size_t(depth_idx)];
            dmin = *std::min_element(d.data.begin(), d.data.end());
            dmax = *std::max_element(d.data.begin(), d.data.end());
        }
        write_pod<float>(os, dmin);
        write_pod<float>(os, dmax);
        for (const auto& p : s.planes) write_floats(os, p.data.data(), p.data.size());
    }
    if (!os) throw FormatError("write_dataset: write failed for " + path);
}

class DatasetReader {
public:
    explicit DatasetReader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
        if (!is_) throw FormatError("DatasetReader: cannot open " + path);
        char magic[4];
        is_.read(magic, 4);
        if (!is_ || std::memcmp(magic, kDatasetMagic, 4) != 0)
            throw FormatError("DatasetReader: bad magic in " + path);
        uint32_t version = read_pod<uint32_t>(is_);
        if (version != kDatasetVersion)
            throw FormatError("DatasetReader: unsupported version in " + path);
        count_ = read_pod<uint64_t>(is_);
        h_ = int(read_pod<uint32_t>(is_));
        w_ = int(read_pod<uint32_t>(is_));
        registry_ = ModalityRegistry::from_json(json::parse(read_string(is_)));
        if (count_ == 0 || h_ < 1 || w_ < 1 || registry_.size() < 1)
            throw FormatError("DatasetReader: implausible header in " + path);
        header_end_ = is_.tellg();
        stride_ = 4 + 4 + 4;
        for (int m = 0; m < registry_.size(); m++)
            stride_ += sizeof(float) * size_t(h_) * size_t(w_) *
                       size_t(codec::native_channels(registry_.at(m).codec_id));
        is_.seekg(0, std::ios::end);
        auto file_size = uint64_t(is_.tellg());
        if (file_size != uint64_t(header_end_) + stride_ * count_)
            throw FormatError("DatasetReader: size mismatch (truncated?) in " + path);
    }

    uint64_t size() const { return count_; }
    int height() const { return h_; }
    int width() const { return w_; }
    const ModalityRegistry& registry() const { return registry_; }

    MultiModalSample sample(uint64_t i) {
        if (i >= count_) throw ValidationError("DatasetReader: index out of range");
        is_.clear();
        is_.seekg(std::streamoff(uint64_t(header_end_) + stride_ * i));
        MultiModalSample s;
        s.class_id = int(read_pod<int32_t>(is_));
        read_pod<float>(is_);  // stored depth range, derivable from the plane
        read_pod<float>(is_);
        for (int m = 0; m < registry_.size(); m++) {
            Plane p(h_, w_, codec::native_channels(registry_.at(m).codec_id));
            read_floats(is_, p.data.data(), p.data.size());
            s.planes.push_back(std::move(p));
        }
        if (!is_) throw FormatError("DatasetReader: truncated record in " + path_);
        return s;
    }

    DepthRange depth_range(uint64_t i) {
        if (i >= count_) throw ValidationError("DatasetReader: index out of range");
        is_.clear();
        is_.seekg(std::streamoff(uint64_t(header_end_) + stride_ * i + 4));
        DepthRange r;
        r.dmin = read_pod<float>(is_);
        r.dmax = read_pod<float>(is_);
        return r;
    }

private:
    std::ifstream is_;
    std::string path_;
    uint64_t count_ = 0;
    int h_ = 0, w_ = 0;
    ModalityRegistry registry_;
    std::streampos header_end_;
    uint64_t stride_ = 0;
};

}  // namespace modalflow

#endif
