#ifndef MODALFLOW_LOSSES_HPP
#define MODALFLOW_LOSSES_HPP

// Training objective: per-modality velocity regression gated by random
// modality drop, plus patchwise alignment of a trunk hidden state against a
// frozen feature provider.

#include "modalflow/autodiff.hpp"
#include "modalflow/modality.hpp"

#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace modalflow {

struct DropMask {
    std::vector<bool> keep;

    bool all_kept() const {
        for (bool k : keep)
            if (!k) return false;
        return true;
    }
};

// rgb (any non-droppable modality) is always kept; droppable modalities are
// kept independently with probability 1/2. One uniform draw per droppable
// modality, in registry order.
inline DropMask sample_drop_mask(const ModalityRegistry& reg, Rng& rng) {
    DropMask mask;
    mask.keep.resize(size_t(reg.size()), true);
    for (int m = 0; m < reg.size(); m++)
        if (reg.at(m).is_droppable) mask.keep[size_t(m)] = rng.uniform() < 0.5;
    return mask;
}

inline DropMask all_keep_mask(const ModalityRegistry& reg) {
    DropMask mask;
    mask.keep.resize(size_t(reg.size()), true);
    return mask;
}

template <class S>
struct VelocityLossResult {
    typename Tape<S>::Ref total;       // scalar node
    std::vector<S> per_modality;       // values; 0 for dropped modalities
};

// Sum over kept modalities of the per-modality mean squared error. Dropped
// modalities contribute no loss node at all, so their heads see zero gradient
// by construction.
template <class S>
VelocityLossResult<S> velocity_loss(Tape<S>& tape,
                                    const std::vector<typename Tape<S>::Ref>& pred,
                                    const std::vector<typename Tape<S>::Ref>& target,
                                    const DropMask& mask) {
    if (pred.size() != target.size() || pred.size() != mask.keep.size())
        throw ValidationError("velocity_loss: modality counts differ");
    if (pred.empty()) throw ValidationError("velocity_loss: no modalities");
    VelocityLossResult<S> out;
    out.per_modality.assign(pred.size(), S(0));
    typename Tape<S>::Ref total = -1;
    for (size_t m = 0; m < pred.size(); m++) {
        if (!mask.keep[m]) continue;
        auto term = tape.mse(pred[m], target[m]);
        out.per_modality[m] = tape.val(term)(0, 0);
        total = total < 0 ? term : tape.add(total, term);
    }
    if (total < 0) total = tape.constant(MatT<S>::Zero(1, 1));
    out.total = total;
    return out;
}

// Negative mean patchwise cosine between the projected hidden state and the
// provider features; in [-1, 1].
template <class S>
typename Tape<S>::Ref alignment_loss(Tape<S>& tape, typename Tape<S>::Ref projected,
                                     typename Tape<S>::Ref features) {
    if (tape.val(projected).rows() != tape.val(features).rows())
        throw ValidationError("alignment_loss: patch counts differ");
    std::vector<S> w(size_t(tape.val(projected).rows()), S(1));
    return tape.neg_mean_cosine(projected, features, std::move(w));
}

template <class S>
typename Tape<S>::Ref total_loss(Tape<S>& tape, typename Tape<S>::Ref l_v,
                                 typename Tape<S>::Ref l_reg, S lambda) {
    if (lambda < S(0)) throw ValidationError("total_loss: lambda must be >= 0");
    if (lambda == S(0)) return l_v;
    return tape.add(l_v, tape.scale(l_reg, lambda));
}

// ---- feature providers -------------------------------------------------------

// One feature row per patch location of the clean rgb image.
class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual int feature_dim() const = 0;
    virtual int grid() const = 0;
    virtual std::string id() const = 0;
    virtual Mat features(const Plane& rgb, int64_t sample_id) const = 0;
};

// Frozen randomly initialized encoder: 3x3 conv (3 -> width) with tanh, mean
// pooled per patch, then a linear map to feature_dim with tanh. Weights come
// from the seed alone, so two providers with equal seeds agree everywhere.
class RandomConvFeatures : public FeatureProvider {
public:
    RandomConvFeatures(int image_size, int patch, int feature_dim, uint64_t seed, int width = 16)
        : image_(image_size), patch_(patch), fdim_(feature_dim), width_(width), seed_(seed) {
        if (image_size < 1 || patch < 1 || image_size % patch != 0)
            throw ValidationError("RandomConvFeatures: patch must divide image size");
        if (feature_dim < 1 || width < 1)
            throw ValidationError("RandomConvFeatures: dims must be positive");
        Rng rng = Rng::stream(seed, 0x66656174636f6e76ull);
        conv_.resize(size_t(width) * 3 * 9);
        for (auto& v : conv_) v = float(rng.normal() * std::sqrt(2.0 / (3 * 9)));
        conv_bias_.assign(size_t(width), 0.f);
        proj_ = Mat(width, feature_dim);
        for (Eigen::Index i = 0; i < proj_.size(); i++)
            proj_.data()[i] = float(rng.normal() * std::sqrt(2.0 / width));
    }

    int feature_dim() const override { return fdim_; }
    int grid() const override { return image_ / patch_; }
    std::string id() const override {
        return "randconv-w" + std::to_string(width_) + "-s" + std::to_string(seed_);
    }

    Mat features(const Plane& rgb, int64_t) const override {
        if (rgb.h != image_ || rgb.w != image_ || rgb.c != 3)
            throw ValidationError("RandomConvFeatures: rgb plane shape mismatch");
        const int g = grid();
        // conv + tanh
        std::vector<float> act(size_t(width_) * image_ * image_);
        for (int oc = 0; oc < width_; oc++)
            for (int y = 0; y < image_; y++)
                for (int x = 0; x < image_; x++) {
                    float s = conv_bias_[size_t(oc)];
                    for (int ky = -1; ky <= 1; ky++)
                        for (int kx = -1; kx <= 1; kx++) {
                            int yy = y + ky, xx = x + kx;
                            if (yy < 0 || yy >= image_ || xx < 0 || xx >= image_) continue;
                            for (int ic = 0; ic < 3; ic++)
                                s += conv_[((size_t(oc) * 3 + ic) * 9) + size_t(ky + 1) * 3 +
                                           size_t(kx + 1)] *
                                     rgb.at(yy, xx, ic);
                        }
                    act[(size_t(oc) * image_ + y) * image_ + x] = std::tanh(s);
                }
        // patch mean pool -> linear -> tanh
        Mat pooled(Eigen::Index(g) * g, width_);
        const float inv = 1.f / float(patch_ * patch_);
        for (int py = 0; py < g; py++)
            for (int px = 0; px < g; px++) {
                Eigen::Index row = Eigen::Index(py) * g + px;
                for (int oc = 0; oc < width_; oc++) {
                    float s = 0.f;
                    for (int dy = 0; dy < patch_; dy++)
                        for (int dx = 0; dx < patch_; dx++)
                            s += act[(size_t(oc) * image_ + py * patch_ + dy) * image_ +
                                     px * patch_ + dx];
                    pooled(row, oc) = s * inv;
                }
            }
        return (pooled * proj_).array().tanh().matrix();
    }

private:
    int image_, patch_, fdim_, width_;
    uint64_t seed_;
    std::vector<float> conv_;
    std::vector<float> conv_bias_;
    Mat proj_;
};

// ---- precomputed feature files ----------------------------------------------

inline constexpr char kFeatureMagic[4] = {'M', 'M', 'F', 'T'};

inline void write_feature_file(const std::string& path, uint32_t sample_id, const Mat& feats) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_feature_file: cannot open " + path);
    os.write(kFeatureMagic, 4);
    write_pod<uint32_t>(os, uint32_t(feats.rows()));
    write_pod<uint32_t>(os, uint32_t(feats.cols()));
    write_pod<uint32_t>(os, sample_id);
    write_floats(os, feats.data(), size_t(feats.size()));
    if (!os) throw FormatError("write_feature_file: write failed for " + path);
}

struct FeatureRecord {
    uint32_t sample_id = 0;
    Mat feats;
};

inline FeatureRecord read_feature_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_feature_file: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw FormatError("read_feature_file: bad magic in " + path);
    uint32_t n = read_pod<uint32_t>(is);
    uint32_t f = read_pod<uint32_t>(is);
    if (n == 0 || f == 0 || n > (1u << 24) || f > (1u << 24))
        throw FormatError("read_feature_file: implausible dims in " + path);
    FeatureRecord rec;
    rec.sample_id = read_pod<uint32_t>(is);
    rec.feats = Mat(n, f);
    read_floats(is, rec.feats.data(), size_t(n) * f);
    if (!is) throw FormatError("read_feature_file: truncated " + path);
    return rec;
}

// Serves features from one precomputed file per sample id under a directory.
class FileFeatures : public FeatureProvider {
public:
    FileFeatures(std::string dir, int grid, int feature_dim)
        : dir_(std::move(dir)), grid_(grid), fdim_(feature_dim) {}

    int feature_dim() const override { return fdim_; }
    int grid() const override { return grid_; }
    std::string id() const override { return "files:" + dir_; }

    Mat features(const Plane&, int64_t sample_id) const override {
        FeatureRecord rec =
            read_feature_file(dir_ + "/" + std::to_string(sample_id) + ".mmft");
        if (rec.feats.rows() != Eigen::Index(grid_) * grid_ || rec.feats.cols() != fdim_)
            throw FormatError("FileFeatures: record shape mismatch for sample " +
                              std::to_string(sample_id));
        return rec.feats;
    }

private:
    std::string dir_;
    int grid_, fdim_;
};

}  // namespace modalflow

#endif
