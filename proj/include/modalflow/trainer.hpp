#ifndef MODALFLOW_TRAINER_HPP
#define MODALFLOW_TRAINER_HPP

// Optimization loop: task-mixture batches, per-modality noising, velocity +
// alignment losses, Adam, EMA shadow, checkpointing, and modality adaptation.

#include "modalflow/losses.hpp"
#include "modalflow/sampler.hpp"
#include "modalflow/synth.hpp"
#include "modalflow/transformer.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace modalflow {

struct TrainConfig {
    int batch_size = 32;
    int total_steps = 30000;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double ema_decay = 0.999;
    double align_lambda = 0.5;
    double label_dropout = 0.1;
    // mixture: generate, understand, then the rest split across condition-on-m
    double p_generate = 0.5;
    double p_understand = 0.125;
    bool disable_drop_aug = false;
    bool disable_task_embedding = false;
    bool generation_only = false;
    uint64_t seed = 0;
    int checkpoint_every = 5000;
    uint64_t align_seed = 104729;
    int align_width = 16;

    void validate() const {
        if (batch_size < 1) throw ValidationError("TrainConfig: batch_size must be >= 1");
        if (total_steps < 0) throw ValidationError("TrainConfig: total_steps must be >= 0");
        if (lr <= 0) throw ValidationError("TrainConfig: lr must be positive");
        if (ema_decay <= 0 || ema_decay >= 1)
            throw ValidationError("TrainConfig: ema_decay must be in (0,1)");
        if (align_lambda < 0) throw ValidationError("TrainConfig: align_lambda must be >= 0");
        if (label_dropout < 0 || label_dropout > 1)
            throw ValidationError("TrainConfig: label_dropout must be in [0,1]");
        if (p_generate < 0 || p_understand < 0 || p_generate + p_understand > 1.0 + 1e-12)
            throw ValidationError("TrainConfig: mixture weights must be a distribution");
    }

    json to_json() const {
        return json{{"batch_size", batch_size},
                    {"total_steps", total_steps},
                    {"lr", lr},
                    {"beta1", beta1},
                    {"beta2", beta2},
                    {"adam_eps", adam_eps},
                    {"ema_decay", ema_decay},
                    {"align_lambda", align_lambda},
                    {"label_dropout", label_dropout},
                    {"p_generate", p_generate},
                    {"p_understand", p_understand},
                    {"disable_drop_aug", disable_drop_aug},
                    {"disable_task_embedding", disable_task_embedding},
                    {"generation_only", generation_only},
                    {"seed", seed},
                    {"checkpoint_every", checkpoint_every},
                    {"align_seed", align_seed},
                    {"align_width", align_width}};
    }
    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.batch_size = j.at("batch_size").get<int>();
        c.total_steps = j.at("total_steps").get<int>();
        c.lr = j.at("lr").get<double>();
        c.beta1 = j.at("beta1").get<double>();
        c.beta2 = j.at("beta2").get<double>();
        c.adam_eps = j.at("adam_eps").get<double>();
        c.ema_decay = j.at("ema_decay").get<double>();
        c.align_lambda = j.at("align_lambda").get<double>();
        c.label_dropout = j.at("label_dropout").get<double>();
        c.p_generate = j.at("p_generate").get<double>();
        c.p_understand = j.at("p_understand").get<double>();
        c.disable_drop_aug = j.at("disable_drop_aug").get<bool>();
        c.disable_task_embedding = j.at("disable_task_embedding").get<bool>();
        c.generation_only = j.at("generation_only").get<bool>();
        c.seed = j.at("seed").get<uint64_t>();
        c.checkpoint_every = j.at("checkpoint_every").get<int>();
        c.align_seed = j.at("align_seed").get<uint64_t>();
        c.align_width = j.at("align_width").get<int>();
        c.validate();
        return c;
    }
};

struct LossReport {
    int64_t step = 0;
    int task_id = 0;
    std::vector<double> per_modality;
    double align = 0.0;
    double total = 0.0;
};

// Encoded token matrices for a whole dataset, plus what training needs to
// assemble batches quickly.
class TokenCache {
public:
    TokenCache(DatasetReader& ds, const ModelConfig& cfg, const ModalityRegistry& reg) {
        if (ds.height() != cfg.image_size || ds.width() != cfg.image_size)
            throw ValidationError("TokenCache: dataset size does not match model config");
        if (ds.registry().serialize() != reg.serialize())
            throw ValidationError("TokenCache: dataset registry does not match");
        n_ = int64_t(ds.size());
        tokens_per_sample_ = cfg.tokens();
        labels_.resize(size_t(n_));
        ranges_.resize(size_t(n_));
        rgb_.reserve(size_t(n_));
        tokens_.resize(size_t(reg.size()));
        for (int m = 0; m < reg.size(); m++)
            tokens_[size_t(m)] = Mat(n_ * tokens_per_sample_,
                                     cfg.patch_features(reg.at(m).channels));
        for (int64_t i = 0; i < n_; i++) {
            auto s = ds.sample(uint64_t(i));
            labels_[size_t(i)] = s.class_id;
            rgb_.push_back(s.planes[0]);
            for (int m = 0; m < reg.size(); m++) {
                DepthRange range;
                Plane ch = encode_to_channels(s.planes[size_t(m)], reg.at(m), &range);
                if (reg.at(m).codec_id == "depth_minmax") ranges_[size_t(i)] = range;
                tokens_[size_t(m)].middleRows(i * tokens_per_sample_, tokens_per_sample_) =
                    patchify<float>(ch, cfg.patch_size);
            }
        }
    }

    int64_t size() const { return n_; }
    int tokens_per_sample() const { return tokens_per_sample_; }
    int label(int64_t i) const { return labels_[size_t(i)]; }
    DepthRange depth_range(int64_t i) const { return ranges_[size_t(i)]; }
    const Plane& rgb_native(int64_t i) const { return rgb_[size_t(i)]; }

    Mat gather(int m, const std::vector<int64_t>& idx) const {
        const Mat& src = tokens_[size_t(m)];
        Mat out(Eigen::Index(idx.size()) * tokens_per_sample_, src.cols());
        for (size_t b = 0; b < idx.size(); b++)
            out.middleRows(Eigen::Index(b) * tokens_per_sample_, tokens_per_sample_) =
                src.middleRows(idx[b] * tokens_per_sample_, tokens_per_sample_);
        return out;
    }

private:
    int64_t n_ = 0;
    int tokens_per_sample_ = 0;
    std::vector<Mat> tokens_;
    std::vector<int> labels_;
    std::vector<DepthRange> ranges_;
    std::vector<Plane> rgb_;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

class Trainer {
public:
    Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, const ModalityRegistry& reg)
        : reg_(reg), tcfg_(tcfg) {
        tcfg_.validate();
        ModelConfig mc = mcfg;
        if (tcfg_.align_lambda > 0 && mc.align_feature_dim < 1)
            throw ValidationError("Trainer: alignment requires align_feature_dim >= 1");
        if (tcfg_.disable_task_embedding) mc.use_task_embedding = false;
        model_ = std::make_unique<MMTransformer<float>>(mc, reg_);
        rng_ = Rng::stream(tcfg_.seed, 0x747261696e6c6full);
        init_optimizer_state();
    }

    MMTransformer<float>& model() { return *model_; }
    const MMTransformer<float>& model() const { return *model_; }
    const ModalityRegistry& registry() const { return reg_; }
    const TrainConfig& train_config() const { return tcfg_; }
    int64_t step() const { return step_; }
    Rng& rng() { return rng_; }

    // A model whose parameters are the EMA shadow; used for all sampling.
    MMTransformer<float> ema_model() const {
        MMTransformer<float> m(model_->config(), reg_);
        for (int i = 0; i < m.params().count(); i++) m.params().mat(i) = ema_[size_t(i)];
        return m;
    }

    TaskSpec draw_task(Rng& rng) const {
        const int M = reg_.size();
        if (tcfg_.generation_only || M < 2) return TaskSpec::generate(kNullLabel);
        double u = rng.uniform();
        if (u < tcfg_.p_generate) return TaskSpec::generate(kNullLabel);
        u -= tcfg_.p_generate;
        if (u < tcfg_.p_understand) return TaskSpec::understand();
        u -= tcfg_.p_understand;
        double p_cond = (1.0 - tcfg_.p_generate - tcfg_.p_understand) / double(M - 1);
        int m = 1 + std::min(M - 2, int(u / p_cond));
        return TaskSpec::condition_on(m, kNullLabel, 1.8);
    }

    LossReport train_step(const TokenCache& data) {
        if (data.size() < 1) throw ValidationError("train_step: empty dataset");
        ensure_feature_cache(data);
        const int B = tcfg_.batch_size;
        const int M = reg_.size();
        const int N = data.tokens_per_sample();

        TaskSpec task = draw_task(rng_);
        std::vector<int64_t> idx(size_t(B), 0);
        for (auto& i : idx) i = rng_.randint(int(data.size()));

        std::vector<int> labels(size_t(B), kNullLabel);
        for (int b = 0; b < B; b++) {
            if (task.kind == TaskKind::understand)
                labels[size_t(b)] = kNullLabel;  // inference-aligned
            else
                labels[size_t(b)] =
                    rng_.uniform() < tcfg_.label_dropout ? kNullLabel : data.label(idx[size_t(b)]);
        }

        MatD times(B, M);
        for (int b = 0; b < B; b++) {
            TimeVector tv = sample_time_vector(task, M, rng_);
            for (int m = 0; m < M; m++) times(b, m) = tv[m];
        }

        DropMask mask = tcfg_.disable_drop_aug ? all_keep_mask(reg_) : sample_drop_mask(reg_, rng_);
        // the clamped modality is an input on condition/understand steps, not a target
        if (task.kind != TaskKind::generate) mask.keep[size_t(task.condition_modality)] = false;

        // encode batch, noise each modality at its per-sample time
        TapeF tape;
        auto param_refs = model_->stage(tape);
        ModelInput<float> in;
        in.times = times;
        in.task_ids.assign(size_t(B), task.task_id());
        in.labels = labels;
        std::vector<TapeF::Ref> targets;
        for (int m = 0; m < M; m++) {
            Mat x0 = data.gather(m, idx);
            Mat eps(x0.rows(), x0.cols());
            for (Eigen::Index i = 0; i < eps.size(); i++) eps.data()[i] = float(rng_.normal());
            Mat xt(x0.rows(), x0.cols());
            for (int b = 0; b < B; b++) {
                float t = float(times(b, m));
                xt.middleRows(Eigen::Index(b) * N, N) =
                    t * x0.middleRows(Eigen::Index(b) * N, N) +
                    (1.f - t) * eps.middleRows(Eigen::Index(b) * N, N);
            }
            in.tokens.push_back(std::move(xt));
            targets.push_back(tape.constant(x0 - eps));
        }

        const bool with_align =
            tcfg_.align_lambda > 0 && task.kind == TaskKind::generate;
        auto out = model_->forward(tape, param_refs, in, with_align);

        auto vel = velocity_loss(tape, out.velocity_tokens, targets, mask);
        LossReport report;
        report.step = step_;
        report.task_id = task.task_id();
        report.per_modality.assign(vel.per_modality.begin(), vel.per_modality.end());

        TapeF::Ref loss = vel.total;
        if (with_align) {
            Mat feats(Eigen::Index(B) * N, align_->feature_dim());
            for (int b = 0; b < B; b++)
                feats.middleRows(Eigen::Index(b) * N, N) =
                    feature_cache_.middleRows(idx[size_t(b)] * N, N);
            auto l_reg = alignment_loss(tape, out.align_proj, tape.constant(std::move(feats)));
            report.align = double(tape.val(l_reg)(0, 0));
            loss = total_loss(tape, loss, l_reg, float(tcfg_.align_lambda));
        }
        report.total = double(tape.val(loss)(0, 0));
        if (!std::isfinite(report.total)) abort_non_finite(report);

        tape.backward(loss);
        adam_update(tape, param_refs);
        update_ema();
        step_++;
        return report;
    }

    // ---- checkpointing -------------------------------------------------------

    void save_checkpoint(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw FormatError("save_checkpoint: cannot open " + path);
        os.write(kCheckpointMagic, 4);
        write_pod<uint32_t>(os, kCheckpointVersion);
        write_string(os, model_->config().to_json().dump());
        write_string(os, tcfg_.to_json().dump());
        write_string(os, reg_.serialize());
        write_pod<int64_t>(os, step_);
        write_pod<int64_t>(os, adam_t_);
        write_string(os, rng_.save_state());
        const auto& ps = model_->params();
        write_pod<uint64_t>(os, uint64_t(ps.count()));
        for (int i = 0; i < ps.count(); i++) {
            write_string(os, ps.name(i));
            write_mat(os, ps.mat(i));
            write_mat(os, ema_[size_t(i)]);
            write_mat(os, adam_m_[size_t(i)]);
            write_mat(os, adam_v_[size_t(i)]);
        }
        if (!os) throw FormatError("save_checkpoint: write failed for " + path);
    }

    static Trainer load_checkpoint(const std::string& path,
                                   const ModalityRegistry* expected_registry = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("load_checkpoint: cannot open " + path);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
            throw FormatError("load_checkpoint: bad magic in " + path);
        if (read_pod<uint32_t>(is) != kCheckpointVersion)
            throw FormatError("load_checkpoint: unsupported version in " + path);
        ModelConfig mcfg = ModelConfig::from_json(json::parse(read_string(is)));
        TrainConfig tcfg = TrainConfig::from_json(json::parse(read_string(is)));
        std::string reg_json = read_string(is);
        ModalityRegistry reg = ModalityRegistry::deserialize(reg_json);
        if (expected_registry && expected_registry->serialize() != reg_json)
            throw FormatError("load_checkpoint: registry mismatch");

        Trainer t(mcfg, tcfg, reg);
        t.step_ = read_pod<int64_t>(is);
        t.adam_t_ = read_pod<int64_t>(is);
        t.rng_.load_state(read_string(is));
        uint64_t count = read_pod<uint64_t>(is);
        auto& ps = t.model_->params();
        if (count != uint64_t(ps.count()))
            throw FormatError("load_checkpoint: parameter count mismatch");
        for (uint64_t i = 0; i < count; i++) {
            std::string name = read_string(is);
            if (name != ps.name(int(i)))
                throw FormatError("load_checkpoint: parameter order mismatch at " + name);
            Mat p = read_mat(is);
            if (p.rows() != ps.mat(int(i)).rows() || p.cols() != ps.mat(int(i)).cols())
                throw FormatError("load_checkpoint: shape mismatch at " + name);
            ps.mat(int(i)) = std::move(p);
            t.ema_[i] = read_mat(is);
            t.adam_m_[i] = read_mat(is);
            t.adam_v_[i] = read_mat(is);
        }
        if (!is) throw FormatError("load_checkpoint: truncated " + path);
        return t;
    }

    // ---- modality adaptation ---------------------------------------------------

    // Swaps the codec/name of an existing slot; channel widths must agree so
    // every parameter keeps its shape and value.
    void adapt_replace(int slot, const ModalitySpec& spec) {
        if (slot < 0 || slot >= reg_.size())
            throw ValidationError("adapt_replace: slot out of range");
        if (spec.channels != reg_.at(slot).channels)
            throw ValidationError("adapt_replace: channel count must match the old slot");
        ModalityRegistry next;
        for (int m = 0; m < reg_.size(); m++) next.append(m == slot ? spec : reg_.at(m));
        reg_ = next;
        rebind_registry();
    }

    // Grows the registry by one modality: existing parameters are copied, the
    // widened fusion rows / time rows / task row and the new head start fresh.
    void adapt_append(const ModalitySpec& spec) {
        ModalityRegistry next;
        for (int m = 0; m < reg_.size(); m++) next.append(reg_.at(m));
        next.append(spec);

        ModelConfig mcfg = model_->config();
        mcfg.init_seed = splitmix64(mcfg.init_seed + 0x61646170746dull);
        auto grown = std::make_unique<MMTransformer<float>>(mcfg, next);

        const auto& old_ps = model_->params();
        auto& new_ps = grown->params();
        for (int i = 0; i < new_ps.count(); i++) {
            const std::string& name = new_ps.name(i);
            if (!old_ps.contains(name)) continue;  // fresh head params
            const Mat& src = old_ps.mat(name);
            Mat& dst = new_ps.mat(i);
            if (src.rows() == dst.rows() && src.cols() == dst.cols()) {
                dst = src;
            } else if (src.cols() == dst.cols() && src.rows() < dst.rows()) {
                // widened input: old rows first (registry order), fresh tail
                dst.topRows(src.rows()) = src;
            } else {
                throw ValidationError("adapt_append: unexpected shape change at " + name);
            }
        }
        model_ = std::move(grown);
        reg_ = next;
        init_optimizer_state();
        feature_cache_ = Mat();
    }

private:
    void init_optimizer_state() {
        const auto& ps = model_->params();
        ema_.clear();
        adam_m_.clear();
        adam_v_.clear();
        for (int i = 0; i < ps.count(); i++) {
            ema_.push_back(ps.mat(i));
            adam_m_.push_back(Mat::Zero(ps.mat(i).rows(), ps.mat(i).cols()));
            adam_v_.push_back(Mat::Zero(ps.mat(i).rows(), ps.mat(i).cols()));
        }
        adam_t_ = 0;
    }

    void rebind_registry() {
        // rebuild the model object against the renamed registry, keeping values
        auto rebuilt = std::make_unique<MMTransformer<float>>(model_->config(), reg_);
        for (int i = 0; i < rebuilt->params().count(); i++)
            rebuilt->params().mat(i) = model_->params().mat(i);
        model_ = std::move(rebuilt);
    }

    void ensure_feature_cache(const TokenCache& data) {
        if (tcfg_.align_lambda <= 0) return;
        if (!align_) {
            const auto& mc = model_->config();
            align_ = std::make_unique<RandomConvFeatures>(
                mc.image_size, mc.patch_size, mc.align_feature_dim, tcfg_.align_seed,
                tcfg_.align_width);
        }
        const int N = data.tokens_per_sample();
        if (feature_cache_.rows() == data.size() * N) return;
        feature_cache_ = Mat(data.size() * N, align_->feature_dim());
        for (int64_t i = 0; i < data.size(); i++)
            feature_cache_.middleRows(i * N, N) = align_->features(data.rgb_native(i), i);
    }

    void adam_update(TapeF& tape, const std::vector<TapeF::Ref>& param_refs) {
        adam_t_++;
        const float b1 = float(tcfg_.beta1), b2 = float(tcfg_.beta2);
        const float c1 = 1.f - float(std::pow(tcfg_.beta1, double(adam_t_)));
        const float c2 = 1.f - float(std::pow(tcfg_.beta2, double(adam_t_)));
        const float lr = float(tcfg_.lr), eps = float(tcfg_.adam_eps);
        auto& ps = model_->params();
        for (int i = 0; i < ps.count(); i++) {
            if (!tape.grad_touched(param_refs[size_t(i)])) continue;
            const Mat& g = tape.grad(param_refs[size_t(i)]);
            Mat& m = adam_m_[size_t(i)];
            Mat& v = adam_v_[size_t(i)];
            m = b1 * m + (1.f - b1) * g;
            v = (b2 * v.array() + (1.f - b2) * g.array().square()).matrix();
            Mat mh = m / c1;
            Mat vh = v / c2;
            ps.mat(i).array() -= lr * mh.array() / (vh.array().sqrt() + eps);
        }
    }

    void update_ema() {
        const float d = float(tcfg_.ema_decay);
        const auto& ps = model_->params();
        for (int i = 0; i < ps.count(); i++)
            ema_[size_t(i)] = d * ema_[size_t(i)] + (1.f - d) * ps.mat(i);
    }

    [[noreturn]] void abort_non_finite(const LossReport& r) const {
        std::string msg = "train_step: non-finite loss at step " + std::to_string(r.step) +
                          " task " + std::to_string(r.task_id) + " per-modality [";
        for (size_t m = 0; m < r.per_modality.size(); m++)
            msg += (m ? ", " : "") + std::to_string(r.per_modality[m]);
        msg += "] align " + std::to_string(r.align);
        throw NumericalError(msg);
    }

    ModalityRegistry reg_;
    TrainConfig tcfg_;
    std::unique_ptr<MMTransformer<float>> model_;
    std::vector<Mat> ema_, adam_m_, adam_v_;
    int64_t step_ = 0;
    int64_t adam_t_ = 0;
    Rng rng_{0};
    std::unique_ptr<RandomConvFeatures> align_;
    Mat feature_cache_;
};

}  // namespace modalflow

#endif
