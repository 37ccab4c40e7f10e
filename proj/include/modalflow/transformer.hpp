#ifndef MODALFLOW_TRANSFORMER_HPP
#define MODALFLOW_TRANSFORMER_HPP

// Joint multimodal diffusion transformer. All modalities share one token
// sequence: per spatial location the modality patches are concatenated and
// fused to the model width, and per-modality decode heads read velocities
// back out. Conditioning (fused per-modality times + task + class label)
// enters every block through zero-initialized adaLN modulation.

#include "modalflow/autodiff.hpp"
#include "modalflow/interpolant.hpp"
#include "modalflow/modality.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

namespace modalflow {

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int dim = 128;
    int layers = 4;
    int heads = 8;
    int mlp_ratio = 4;
    int num_classes = 10;
    int align_layer = 2;          // 1-based block whose output feeds alignment
    int align_feature_dim = 0;    // 0 disables the alignment projector
    int time_embed_per_modality = 64;
    bool use_task_embedding = true;
    uint64_t init_seed = 0;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    int patch_features(int channels) const { return patch_size * patch_size * channels; }

    void validate() const {
        if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
            throw ValidationError("ModelConfig: patch_size must divide image_size");
        if (dim < 4 || dim % 4 != 0) throw ValidationError("ModelConfig: dim must be a multiple of 4");
        if (heads < 1 || dim % heads != 0)
            throw ValidationError("ModelConfig: heads must divide dim");
        if (layers < 1) throw ValidationError("ModelConfig: layers must be >= 1");
        if (align_layer < 1 || align_layer > layers)
            throw ValidationError("ModelConfig: align_layer out of range");
        if (mlp_ratio < 1) throw ValidationError("ModelConfig: mlp_ratio must be >= 1");
        if (num_classes < 1) throw ValidationError("ModelConfig: num_classes must be >= 1");
        if (time_embed_per_modality < 2 || time_embed_per_modality % 2 != 0)
            throw ValidationError("ModelConfig: time_embed_per_modality must be even");
        if (align_feature_dim < 0) throw ValidationError("ModelConfig: align_feature_dim < 0");
    }

    json to_json() const {
        return json{{"image_size", image_size},
                    {"patch_size", patch_size},
                    {"dim", dim},
                    {"layers", layers},
                    {"heads", heads},
                    {"mlp_ratio", mlp_ratio},
                    {"num_classes", num_classes},
                    {"align_layer", align_layer},
                    {"align_feature_dim", align_feature_dim},
                    {"time_embed_per_modality", time_embed_per_modality},
                    {"use_task_embedding", use_task_embedding},
                    {"init_seed", init_seed}};
    }
    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.image_size = j.at("image_size").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.dim = j.at("dim").get<int>();
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
        c.align_layer = j.at("align_layer").get<int>();
        c.align_feature_dim = j.at("align_feature_dim").get<int>();
        c.time_embed_per_modality = j.at("time_embed_per_modality").get<int>();
        c.use_task_embedding = j.at("use_task_embedding").get<bool>();
        c.init_seed = j.at("init_seed").get<uint64_t>();
        c.validate();
        return c;
    }
};

// ---- tokenization ----------------------------------------------------------

// Plane (h x w x c) -> (n_patches x p*p*c). Patches scan row-major; within a
// patch, features order as (dy, dx, channel).
template <class S = float>
MatT<S> patchify(const Plane& plane, int patch) {
    if (patch < 1 || plane.h % patch != 0 || plane.w % patch != 0)
        throw ValidationError("patchify: patch must divide both image dims");
    int gh = plane.h / patch, gw = plane.w / patch;
    MatT<S> out(Eigen::Index(gh) * gw, Eigen::Index(patch) * patch * plane.c);
    for (int py = 0; py < gh; py++)
        for (int px = 0; px < gw; px++) {
            Eigen::Index row = Eigen::Index(py) * gw + px;
            Eigen::Index f = 0;
            for (int dy = 0; dy < patch; dy++)
                for (int dx = 0; dx < patch; dx++)
                    for (int ch = 0; ch < plane.c; ch++)
                        out(row, f++) = S(plane.at(py * patch + dy, px * patch + dx, ch));
        }
    return out;
}

template <class S = float>
Plane unpatchify(const MatT<S>& tokens, int h, int w, int c, int patch) {
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw ValidationError("unpatchify: patch must divide both image dims");
    int gh = h / patch, gw = w / patch;
    if (tokens.rows() != Eigen::Index(gh) * gw ||
        tokens.cols() != Eigen::Index(patch) * patch * c)
        throw ValidationError("unpatchify: token shape does not match target");
    Plane out(h, w, c);
    for (int py = 0; py < gh; py++)
        for (int px = 0; px < gw; px++) {
            Eigen::Index row = Eigen::Index(py) * gw + px;
            Eigen::Index f = 0;
            for (int dy = 0; dy < patch; dy++)
                for (int dx = 0; dx < patch; dx++)
                    for (int ch = 0; ch < c; ch++)
                        out.at(py * patch + dy, px * patch + dx, ch) = float(tokens(row, f++));
        }
    return out;
}

// Fixed 2D sin/cos position table for an n x n grid; first half of the width
// encodes y, second half x.
template <class S = float>
MatT<S> sincos_pos_embed_2d(int grid, int dim) {
    if (dim % 4 != 0) throw ValidationError("sincos_pos_embed_2d: dim must be a multiple of 4");
    int quarter = dim / 4;
    std::vector<double> omega(static_cast<size_t>(quarter), 0.0);
    for (int i = 0; i < quarter; i++) omega[size_t(i)] = 1.0 / std::pow(10000.0, double(i) / quarter);
    MatT<S> out(Eigen::Index(grid) * grid, dim);
    for (int y = 0; y < grid; y++)
        for (int x = 0; x < grid; x++) {
            Eigen::Index row = Eigen::Index(y) * grid + x;
            for (int i = 0; i < quarter; i++) {
                out(row, i) = S(std::sin(y * omega[size_t(i)]));
                out(row, quarter + i) = S(std::cos(y * omega[size_t(i)]));
                out(row, 2 * quarter + i) = S(std::sin(x * omega[size_t(i)]));
                out(row, 3 * quarter + i) = S(std::cos(x * omega[size_t(i)]));
            }
        }
    return out;
}

// Sinusoidal features of the per-modality time vector: B x M times ->
// B x (M * per_mod), DiT-style with times scaled onto [0, 1000].
template <class S = float>
MatT<S> time_features(const MatD& times, int per_mod) {
    if (per_mod < 2 || per_mod % 2 != 0)
        throw ValidationError("time_features: per_mod must be even");
    int half = per_mod / 2;
    MatT<S> out(times.rows(), times.cols() * per_mod);
    for (Eigen::Index b = 0; b < times.rows(); b++)
        for (Eigen::Index m = 0; m < times.cols(); m++) {
            double t = times(b, m) * 1000.0;
            for (int i = 0; i < half; i++) {
                double freq = std::exp(-std::log(10000.0) * double(i) / half);
                out(b, m * per_mod + i) = S(std::cos(t * freq));
                out(b, m * per_mod + half + i) = S(std::sin(t * freq));
            }
        }
    return out;
}

// ---- parameter store -------------------------------------------------------

template <class S>
class ParamStore {
public:
    int add(const std::string& name, MatT<S> m) {
        if (index_.count(name)) throw ValidationError("ParamStore: duplicate name " + name);
        index_[name] = int(mats_.size());
        names_.push_back(name);
        mats_.push_back(std::move(m));
        return int(mats_.size()) - 1;
    }
    int index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("ParamStore: no parameter named " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    MatT<S>& mat(int i) { return mats_[size_t(i)]; }
    const MatT<S>& mat(int i) const { return mats_[size_t(i)]; }
    MatT<S>& mat(const std::string& name) { return mats_[size_t(index(name))]; }
    const MatT<S>& mat(const std::string& name) const { return mats_[size_t(index(name))]; }
    const std::string& name(int i) const { return names_[size_t(i)]; }
    int count() const { return int(mats_.size()); }
    int64_t num_scalars() const {
        int64_t n = 0;
        for (const auto& m : mats_) n += m.size();
        return n;
    }

private:
    std::vector<MatT<S>> mats_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, int> index_;
};

// ---- model -----------------------------------------------------------------

template <class S>
struct ModelInput {
    std::vector<MatT<S>> tokens;  // per modality, (B*N) x (p*p*C_m)
    MatD times;                   // B x M
    std::vector<int> task_ids;    // B
    std::vector<int> labels;      // B, kNullLabel for unconditional
};

template <class S>
struct ForwardResult {
    std::vector<typename Tape<S>::Ref> velocity_tokens;  // per modality
    typename Tape<S>::Ref hidden = -1;      // (B*N) x D at the align layer
    typename Tape<S>::Ref align_proj = -1;  // (B*N) x align_feature_dim
    typename Tape<S>::Ref cond = -1;        // B x D conditioning vector
};

template <class S>
class MMTransformer {
public:
    using T = Tape<S>;
    using Ref = typename T::Ref;
    using M = MatT<S>;

    MMTransformer(ModelConfig cfg, ModalityRegistry reg)
        : cfg_(std::move(cfg)), reg_(std::move(reg)) {
        cfg_.validate();
        if (reg_.size() < 1) throw ValidationError("MMTransformer: empty modality registry");
        Rng rng = Rng::stream(cfg_.init_seed, 0x7261776d6f646c75ull);
        build_params(rng);
        pos_ = sincos_pos_embed_2d<S>(cfg_.grid(), cfg_.dim);
    }

    const ModelConfig& config() const { return cfg_; }
    const ModalityRegistry& registry() const { return reg_; }
    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }
    int num_tasks() const { return TaskSpec::num_tasks_for(reg_.size()); }

    // Copy every parameter onto the tape; index-aligned with the store.
    std::vector<Ref> stage(T& tape) const {
        std::vector<Ref> refs(size_t(params_.count()));
        for (int i = 0; i < params_.count(); i++) refs[size_t(i)] = tape.param(params_.mat(i));
        return refs;
    }

    void validate_input(const ModelInput<S>& in) const {
        const int mcount = reg_.size();
        if (int(in.tokens.size()) != mcount)
            throw ValidationError("forward: one token matrix per modality required");
        if (in.tokens[0].rows() % cfg_.tokens() != 0)
            throw ValidationError("forward: token rows not a multiple of sequence length");
        const Eigen::Index bn = in.tokens[0].rows();
        const Eigen::Index batch = bn / cfg_.tokens();
        for (int m = 0; m < mcount; m++) {
            if (in.tokens[size_t(m)].rows() != bn)
                throw ValidationError("forward: token row counts differ across modalities");
            if (in.tokens[size_t(m)].cols() != cfg_.patch_features(reg_.at(m).channels))
                throw ValidationError("forward: token width does not match modality channels");
        }
        if (in.times.rows() != batch || in.times.cols() != mcount)
            throw ValidationError("forward: times must be batch x modalities");
        for (Eigen::Index i = 0; i < in.times.size(); i++)
            if (!(in.times.data()[i] >= 0.0 && in.times.data()[i] <= 1.0))
                throw ValidationError("forward: times must lie in [0, 1]");
        if (Eigen::Index(in.task_ids.size()) != batch ||
            Eigen::Index(in.labels.size()) != batch)
            throw ValidationError("forward: task/label count must match batch");
        for (int id : in.task_ids)
            if (id < 0 || id >= num_tasks()) throw ValidationError("forward: task id out of range");
        for (int l : in.labels)
            if (l != kNullLabel && (l < 0 || l >= cfg_.num_classes))
                throw ValidationError("forward: class label out of range");
    }

    ForwardResult<S> forward(T& tape, const std::vector<Ref>& p, const ModelInput<S>& in,
                             bool with_alignment = false) const {
        validate_input(in);
        if (int(p.size()) != params_.count())
            throw ValidationError("forward: staged parameter count mismatch");
        const int mcount = reg_.size();
        const int N = cfg_.tokens();
        const int B = int(in.tokens[0].rows()) / N;
        const int D = cfg_.dim;

        auto pr = [&](const std::string& name) { return p[size_t(params_.index(name))]; };

        // token fusion: concat modality patches per location, 2-layer mlp to D
        std::vector<Ref> parts;
        parts.reserve(size_t(mcount));
        for (int m = 0; m < mcount; m++) parts.push_back(tape.constant(in.tokens[size_t(m)]));
        Ref fused = tape.concat_cols(parts);
        Ref x = tape.linear(fused, pr("fuse.w1"), pr("fuse.b1"));
        x = tape.silu(x);
        x = tape.linear(x, pr("fuse.w2"), pr("fuse.b2"));

        // fixed positions, tiled across the batch
        M pos_tiled(Eigen::Index(B) * N, D);
        for (int b = 0; b < B; b++) pos_tiled.middleRows(Eigen::Index(b) * N, N) = pos_;
        x = tape.add(x, tape.constant(std::move(pos_tiled)));

        // conditioning vector c = mlp(time features) (+ task) (+ label)
        Ref tfeat = tape.constant(time_features<S>(in.times, cfg_.time_embed_per_modality));
        Ref tf = tape.linear(tfeat, pr("time.w1"), pr("time.b1"));
        tf = tape.silu(tf);
        tf = tape.linear(tf, pr("time.w2"), pr("time.b2"));
        Ref cond = tf;
        if (cfg_.use_task_embedding)
            cond = tape.add(cond, tape.embedding_rows(pr("task.table"), in.task_ids));
        std::vector<int> label_rows(static_cast<size_t>(B), 0);
        for (int b = 0; b < B; b++) {
            int l = in.labels[size_t(b)];
            label_rows[size_t(b)] = l == kNullLabel ? cfg_.num_classes : l;
        }
        cond = tape.add(cond, tape.embedding_rows(pr("label.table"), label_rows));
        Ref cond_act = tape.silu(cond);

        ForwardResult<S> out;
        out.cond = cond;

        for (int l = 0; l < cfg_.layers; l++) {
            const std::string bp = "blocks." + std::to_string(l) + ".";
            Ref mod = tape.linear(cond_act, pr(bp + "mod.w"), pr(bp + "mod.b"));  // B x 6D
            auto chunk = [&](int i) {
                return tape.expand_groups(tape.slice_cols(mod, i * D, D), N);
            };
            Ref shift_msa = chunk(0), scale_msa = chunk(1), gate_msa = chunk(2);
            Ref shift_mlp = chunk(3), scale_mlp = chunk(4), gate_mlp = chunk(5);

            Ref h = tape.layernorm(x);
            h = tape.add(tape.mul(h, tape.add_scalar(scale_msa, S(1))), shift_msa);
            Ref q = tape.linear(h, pr(bp + "attn.wq"), pr(bp + "attn.bq"));
            Ref k = tape.linear(h, pr(bp + "attn.wk"), pr(bp + "attn.bk"));
            Ref v = tape.linear(h, pr(bp + "attn.wv"), pr(bp + "attn.bv"));
            Ref att = tape.attention(q, k, v, cfg_.heads, N);
            att = tape.linear(att, pr(bp + "attn.wo"), pr(bp + "attn.bo"));
            x = tape.add(x, tape.mul(gate_msa, att));

            Ref h2 = tape.layernorm(x);
            h2 = tape.add(tape.mul(h2, tape.add_scalar(scale_mlp, S(1))), shift_mlp);
            Ref mh = tape.linear(h2, pr(bp + "mlp.w1"), pr(bp + "mlp.b1"));
            mh = tape.gelu(mh);
            mh = tape.linear(mh, pr(bp + "mlp.w2"), pr(bp + "mlp.b2"));
            x = tape.add(x, tape.mul(gate_mlp, mh));

            if (l + 1 == cfg_.align_layer) out.hidden = x;
        }

        if (with_alignment && cfg_.align_feature_dim > 0) {
            Ref a = tape.linear(out.hidden, pr("align.w1"), pr("align.b1"));
            a = tape.silu(a);
            out.align_proj = tape.linear(a, pr("align.w2"), pr("align.b2"));
        }

        // per-modality decode heads with their own modulated norm
        out.velocity_tokens.resize(size_t(mcount));
        for (int m = 0; m < mcount; m++) {
            const std::string hp = "heads." + std::to_string(m) + ".";
            Ref mod = tape.linear(cond_act, pr(hp + "mod.w"), pr(hp + "mod.b"));  // B x 2D
            Ref shift = tape.expand_groups(tape.slice_cols(mod, 0, D), N);
            Ref scale = tape.expand_groups(tape.slice_cols(mod, D, D), N);
            Ref h = tape.layernorm(x);
            h = tape.add(tape.mul(h, tape.add_scalar(scale, S(1))), shift);
            out.velocity_tokens[size_t(m)] =
                tape.linear(h, pr(hp + "out.w"), pr(hp + "out.b"));
        }
        return out;
    }

    // Deterministic re-randomization of every parameter, including the
    // normally zero-initialized ones; gradient checks use this so gradients
    // actually flow everywhere.
    void randomize_all(uint64_t seed, double scale = 0.05) {
        Rng rng = Rng::stream(seed, 0x72616e64616c6cull);
        for (int i = 0; i < params_.count(); i++) {
            M& m = params_.mat(i);
            for (Eigen::Index j = 0; j < m.size(); j++) m.data()[j] = S(scale * rng.normal());
        }
    }

private:
    ModelConfig cfg_;
    ModalityRegistry reg_;
    ParamStore<S> params_;
    M pos_;

    M dense_init(Rng& rng, int rows, int cols) {
        double std = std::sqrt(2.0 / (rows + cols));
        M m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); i++) m.data()[i] = S(std * rng.normal());
        return m;
    }
    M table_init(Rng& rng, int rows, int cols) {
        M m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); i++) m.data()[i] = S(0.02 * rng.normal());
        return m;
    }

    void build_params(Rng& rng) {
        const int D = cfg_.dim;
        int fuse_in = 0;
        for (int m = 0; m < reg_.size(); m++) fuse_in += cfg_.patch_features(reg_.at(m).channels);

        params_.add("fuse.w1", dense_init(rng, fuse_in, D));
        params_.add("fuse.b1", M::Zero(1, D));
        params_.add("fuse.w2", dense_init(rng, D, D));
        params_.add("fuse.b2", M::Zero(1, D));

        const int tin = reg_.size() * cfg_.time_embed_per_modality;
        params_.add("time.w1", dense_init(rng, tin, D));
        params_.add("time.b1", M::Zero(1, D));
        params_.add("time.w2", dense_init(rng, D, D));
        params_.add("time.b2", M::Zero(1, D));

        params_.add("task.table", table_init(rng, num_tasks(), D));
        params_.add("label.table", table_init(rng, cfg_.num_classes + 1, D));

        for (int l = 0; l < cfg_.layers; l++) {
            const std::string bp = "blocks." + std::to_string(l) + ".";
            params_.add(bp + "mod.w", M::Zero(D, 6 * D));
            params_.add(bp + "mod.b", M::Zero(1, 6 * D));
            params_.add(bp + "attn.wq", dense_init(rng, D, D));
            params_.add(bp + "attn.bq", M::Zero(1, D));
            params_.add(bp + "attn.wk", dense_init(rng, D, D));
            params_.add(bp + "attn.bk", M::Zero(1, D));
            params_.add(bp + "attn.wv", dense_init(rng, D, D));
            params_.add(bp + "attn.bv", M::Zero(1, D));
            params_.add(bp + "attn.wo", dense_init(rng, D, D));
            params_.add(bp + "attn.bo", M::Zero(1, D));
            params_.add(bp + "mlp.w1", dense_init(rng, D, cfg_.mlp_ratio * D));
            params_.add(bp + "mlp.b1", M::Zero(1, cfg_.mlp_ratio * D));
            params_.add(bp + "mlp.w2", dense_init(rng, cfg_.mlp_ratio * D, D));
            params_.add(bp + "mlp.b2", M::Zero(1, D));
        }

        if (cfg_.align_feature_dim > 0) {
            params_.add("align.w1", dense_init(rng, D, D));
            params_.add("align.b1", M::Zero(1, D));
            params_.add("align.w2", dense_init(rng, D, cfg_.align_feature_dim));
            params_.add("align.b2", M::Zero(1, cfg_.align_feature_dim));
        }

        for (int m = 0; m < reg_.size(); m++) {
            const std::string hp = "heads." + std::to_string(m) + ".";
            const int fdim = cfg_.patch_features(reg_.at(m).channels);
            params_.add(hp + "mod.w", M::Zero(D, 2 * D));
            params_.add(hp + "mod.b", M::Zero(1, 2 * D));
            params_.add(hp + "out.w", M::Zero(D, fdim));
            params_.add(hp + "out.b", M::Zero(1, fdim));
        }
    }
};

}  // namespace modalflow

#endif
