#ifndef MODALFLOW_MODALITY_HPP
#define MODALFLOW_MODALITY_HPP

// Modality set and pixel<->channel codecs. Every modality is carried through
// diffusion as channel planes with values in [-1, 1]; the codecs map native
// representations (rgb in [0,1], positive depth, unit normals, integer
// segmentation labels) into that range and back.

#include "modalflow/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace modalflow {

using json = nlohmann::json;

// Dense H x W x C image plane, row-major, channel-interleaved.
struct Plane {
    int h = 0, w = 0, c = 0;
    std::vector<float> data;

    Plane() = default;
    Plane(int h_, int w_, int c_, float fill = 0.f)
        : h(h_), w(w_), c(c_), data(size_t(h_) * w_ * c_, fill) {}

    float& at(int y, int x, int ch) { return data[(size_t(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return data[(size_t(y) * w + x) * c + ch]; }
    size_t size() const { return data.size(); }

    bool same_shape(const Plane& o) const { return h == o.h && w == o.w && c == o.c; }
};

struct ModalitySpec {
    std::string name;
    int channels = 0;       // encoded channel count
    bool is_droppable = false;
    std::string codec_id;

    bool operator==(const ModalitySpec&) const = default;
};

// Per-image affine depth range; stored as sample metadata so metric
// evaluation can invert the encoding.
struct DepthRange {
    float dmin = 0.f, dmax = 0.f;
    bool operator==(const DepthRange&) const = default;
};

// Canonical depth envelope used to decode generated samples, which carry no
// per-image range metadata.
inline constexpr DepthRange kCanonicalDepthRange{1.0f, 3.0f};

struct DecodeDiagnostics {
    int clamped_values = 0;    // channel inputs outside [-1, 1]
    int zero_norm_normals = 0; // normal decode fallbacks
};

inline constexpr int kSegPaletteSize = 16;

// Fixed 16-color palette in [-1,1]^3, chosen by greedy farthest-point
// selection over a 5x5x5 lattice. Deterministic.
inline const std::array<std::array<float, 3>, kSegPaletteSize>& seg_palette() {
    static const auto palette = [] {
        std::vector<std::array<float, 3>> grid;
        for (int i = 0; i < 5; i++)
            for (int j = 0; j < 5; j++)
                for (int k = 0; k < 5; k++)
                    grid.push_back({-1.f + 0.5f * i, -1.f + 0.5f * j, -1.f + 0.5f * k});
        std::array<std::array<float, 3>, kSegPaletteSize> out{};
        out[0] = {-1.f, -1.f, -1.f};  // label 0 (background) is the dark corner
        std::vector<size_t> chosen{0};
        for (int n = 1; n < kSegPaletteSize; n++) {
            double best = -1.0;
            size_t best_i = 0;
            for (size_t g = 0; g < grid.size(); g++) {
                double dmin = 1e30;
                for (size_t c : chosen) {
                    double d = 0;
                    for (int q = 0; q < 3; q++) {
                        double diff = grid[g][q] - grid[c][q];
                        d += diff * diff;
                    }
                    dmin = std::min(dmin, d);
                }
                if (dmin > best) {
                    best = dmin;
                    best_i = g;
                }
            }
            chosen.push_back(best_i);
            out[size_t(n)] = grid[best_i];
        }
        return out;
    }();
    return palette;
}

namespace codec {

inline int native_channels(const std::string& codec_id) {
    if (codec_id == "rgb01") return 3;
    if (codec_id == "depth_minmax") return 1;
    if (codec_id == "normal_unit") return 3;
    if (codec_id == "seg_palette16") return 1;
    if (codec_id == "unit01") return 1;
    throw ValidationError("unknown codec id: " + codec_id);
}

inline int encoded_channels(const std::string& codec_id) {
    if (codec_id == "seg_palette16") return 3;
    return native_channels(codec_id);
}

}  // namespace codec

// Encode a native plane into diffusion channels in [-1, 1]. For the depth
// codec the per-image (min, max) is written to *range when given.
inline Plane encode_to_channels(const Plane& native, const ModalitySpec& spec,
                                DepthRange* range = nullptr) {
    if (native.c != codec::native_channels(spec.codec_id))
        throw ValidationError("encode: native channel count does not match codec " + spec.codec_id);
    Plane out(native.h, native.w, spec.channels);

    if (spec.codec_id == "rgb01" || spec.codec_id == "unit01") {
        for (size_t i = 0; i < native.size(); i++) {
            float v = std::clamp(native.data[i], 0.f, 1.f);
            out.data[i] = 2.f * v - 1.f;
        }
    } else if (spec.codec_id == "depth_minmax") {
        float dmin = 1e30f, dmax = -1e30f;
        for (float v : native.data) {
            if (!(v > 0.f)) throw ValidationError("encode: depth must be positive");
            dmin = std::min(dmin, v);
            dmax = std::max(dmax, v);
        }
        float span = dmax - dmin;
        for (size_t i = 0; i < native.size(); i++)
            out.data[i] = span > 0.f ? 2.f * (native.data[i] - dmin) / span - 1.f : 0.f;
        if (range) *range = {dmin, dmax};
    } else if (spec.codec_id == "normal_unit") {
        for (int y = 0; y < native.h; y++)
            for (int x = 0; x < native.w; x++) {
                double n2 = 0;
                for (int q = 0; q < 3; q++) n2 += double(native.at(y, x, q)) * native.at(y, x, q);
                if (std::abs(std::sqrt(n2) - 1.0) > 1e-3)
                    throw ValidationError("encode: normal vectors must be unit length");
                for (int q = 0; q < 3; q++) out.at(y, x, q) = native.at(y, x, q);
            }
    } else if (spec.codec_id == "seg_palette16") {
        const auto& pal = seg_palette();
        for (int y = 0; y < native.h; y++)
            for (int x = 0; x < native.w; x++) {
                float lf = native.at(y, x, 0);
                int label = int(std::lround(lf));
                if (label < 0 || label >= kSegPaletteSize || std::abs(lf - float(label)) > 1e-4f)
                    throw ValidationError("encode: segmentation label outside palette");
                for (int q = 0; q < 3; q++) out.at(y, x, q) = pal[size_t(label)][size_t(q)];
            }
    } else {
        throw ValidationError("unknown codec id: " + spec.codec_id);
    }
    return out;
}

// Inverse of encode_to_channels. Inputs outside [-1, 1] are clamped and the
// clamp count reported through diag. Depth decodes through the sample range
// when given, the canonical envelope otherwise.
inline Plane decode_from_channels(const Plane& channels, const ModalitySpec& spec,
                                  DecodeDiagnostics* diag = nullptr,
                                  const DepthRange* range = nullptr) {
    if (channels.c != spec.channels)
        throw ValidationError("decode: channel count does not match spec");
    DecodeDiagnostics local;
    Plane clamped = channels;
    for (auto& v : clamped.data) {
        if (v < -1.f || v > 1.f) {
            v = std::clamp(v, -1.f, 1.f);
            local.clamped_values++;
        }
    }
    Plane out(channels.h, channels.w, codec::native_channels(spec.codec_id));

    if (spec.codec_id == "rgb01" || spec.codec_id == "unit01") {
        for (size_t i = 0; i < clamped.data.size(); i++)
            out.data[i] = 0.5f * (clamped.data[i] + 1.f);
    } else if (spec.codec_id == "depth_minmax") {
        DepthRange r = range ? *range : kCanonicalDepthRange;
        for (size_t i = 0; i < clamped.data.size(); i++)
            out.data[i] = r.dmin + 0.5f * (clamped.data[i] + 1.f) * (r.dmax - r.dmin);
    } else if (spec.codec_id == "normal_unit") {
        for (int y = 0; y < out.h; y++)
            for (int x = 0; x < out.w; x++) {
                double n2 = 0;
                for (int q = 0; q < 3; q++) n2 += double(clamped.at(y, x, q)) * clamped.at(y, x, q);
                double n = std::sqrt(n2);
                if (n < 1e-12) {
                    out.at(y, x, 0) = 0.f;
                    out.at(y, x, 1) = 0.f;
                    out.at(y, x, 2) = 1.f;
                    local.zero_norm_normals++;
                } else {
                    for (int q = 0; q < 3; q++) out.at(y, x, q) = float(clamped.at(y, x, q) / n);
                }
            }
    } else if (spec.codec_id == "seg_palette16") {
        const auto& pal = seg_palette();
        for (int y = 0; y < out.h; y++)
            for (int x = 0; x < out.w; x++) {
                double best = 1e30;
                int best_l = 0;
                for (int l = 0; l < kSegPaletteSize; l++) {
                    double d = 0;
                    for (int q = 0; q < 3; q++) {
                        double diff = double(clamped.at(y, x, q)) - pal[size_t(l)][size_t(q)];
                        d += diff * diff;
                    }
                    if (d < best) {
                        best = d;
                        best_l = l;
                    }
                }
                out.at(y, x, 0) = float(best_l);
            }
    } else {
        throw ValidationError("unknown codec id: " + spec.codec_id);
    }
    if (diag) *diag = local;
    return out;
}

// Ordered, append-only modality set. Token fusion concatenates channel slices
// in this order, so the order is part of every serialized artifact.
class ModalityRegistry {
public:
    ModalityRegistry() = default;
    explicit ModalityRegistry(std::vector<ModalitySpec> specs) {
        for (auto& s : specs) append(s);
    }

    void append(const ModalitySpec& spec) {
        if (spec.channels < 1) throw ValidationError("ModalitySpec: channels must be >= 1");
        if (spec.channels != codec::encoded_channels(spec.codec_id))
            throw ValidationError("ModalitySpec: channel count does not match codec " + spec.codec_id);
        if (spec.name == "rgb" && spec.is_droppable)
            throw ValidationError("ModalitySpec: rgb supervision is never droppable");
        for (const auto& s : specs_)
            if (s.name == spec.name)
                throw ValidationError("ModalityRegistry: duplicate modality name " + spec.name);
        specs_.push_back(spec);
    }

    int size() const { return int(specs_.size()); }
    const ModalitySpec& at(int i) const {
        if (i < 0 || i >= size()) throw ValidationError("ModalityRegistry: index out of range");
        return specs_[size_t(i)];
    }
    const std::vector<ModalitySpec>& specs() const { return specs_; }

    bool contains(const std::string& name) const {
        for (const auto& s : specs_)
            if (s.name == name) return true;
        return false;
    }

    int index_of(const std::string& name) const {
        for (int i = 0; i < size(); i++)
            if (specs_[size_t(i)].name == name) return i;
        throw ValidationError("ModalityRegistry: no modality named " + name);
    }

    int total_channels() const {
        int n = 0;
        for (const auto& s : specs_) n += s.channels;
        return n;
    }

    bool operator==(const ModalityRegistry&) const = default;

    json to_json() const {
        json arr = json::array();
        for (const auto& s : specs_) {
            json e = {{"name", s.name},
                      {"channels", s.channels},
                      {"droppable", s.is_droppable},
                      {"codec_id", s.codec_id}};
            arr.push_back(std::move(e));
        }
        return arr;
    }
    static ModalityRegistry from_json(const json& arr) {
        if (!arr.is_array()) throw FormatError("registry json must be an array");
        ModalityRegistry reg;
        for (const auto& e : arr)
            reg.append(ModalitySpec{e.at("name").get<std::string>(), e.at("channels").get<int>(),
                                    e.at("droppable").get<bool>(), e.at("codec_id").get<std::string>()});
        return reg;
    }
    std::string serialize() const { return to_json().dump(); }
    static ModalityRegistry deserialize(const std::string& text) {
        return from_json(json::parse(text));
    }

private:
    std::vector<ModalitySpec> specs_;
};

inline ModalityRegistry default_registry() {
    return ModalityRegistry({{"rgb", 3, false, "rgb01"},
                             {"depth", 1, true, "depth_minmax"},
                             {"normal", 3, true, "normal_unit"},
                             {"seg", 3, true, "seg_palette16"}});
}

inline ModalitySpec edge_modality_spec() {
    return ModalitySpec{"edge", 1, true, "unit01"};
}

}  // namespace modalflow

#endif
