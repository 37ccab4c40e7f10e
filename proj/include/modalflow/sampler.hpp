#ifndef MODALFLOW_SAMPLER_HPP
#define MODALFLOW_SAMPLER_HPP

// Inference: Euler ODE / Euler-Maruyama SDE integration of the learned
// velocity field from t=0 to t_end, with per-modality time schedules, fixed
// condition clamping, and classifier-free guidance.

#include "modalflow/interpolant.hpp"
#include "modalflow/synth.hpp"
#include "modalflow/transformer.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace modalflow {

struct SamplerConfig {
    enum Method { kOdeEuler, kSdeEulerMaruyama };
    Method method = kOdeEuler;
    int nfe = 250;
    double guidance_weight = 1.0;
    double t_end = 1.0 - 1e-4;
    // multiplies w_t = 1 - t; 0 degenerates the SDE to the ODE
    double diffusion_scale = 1.0;
    uint64_t seed = 0;

    void validate() const {
        if (nfe < 1) throw ValidationError("SamplerConfig: nfe must be >= 1");
        if (guidance_weight < 0) throw ValidationError("SamplerConfig: guidance_weight < 0");
        if (t_end <= 0 || t_end >= 1.0) throw ValidationError("SamplerConfig: t_end must be in (0,1)");
        if (diffusion_scale < 0) throw ValidationError("SamplerConfig: diffusion_scale < 0");
    }
};

struct ConditionClamp {
    int modality = -1;
    Plane x0_channels;   // encoded channel plane of the condition
    double t_cond = 0.995;
    Mat eps_tokens;      // drawn once; empty -> drawn at the start of sampling

    void validate(const ModalityRegistry& reg) const {
        if (modality < 0 || modality >= reg.size())
            throw ValidationError("ConditionClamp: modality out of range");
        if (t_cond < kConditionTimeLo || t_cond > 1.0)
            throw ValidationError("ConditionClamp: t_cond outside [0.99, 1]");
        if (x0_channels.c != reg.at(modality).channels)
            throw ValidationError("ConditionClamp: channel count mismatch");
    }
};

inline Mat apply_cfg(const Mat& v_cond, const Mat& v_uncond, double w) {
    if (v_cond.rows() != v_uncond.rows() || v_cond.cols() != v_uncond.cols())
        throw ValidationError("apply_cfg: shape mismatch");
    if (w == 1.0) return v_cond;
    if (w == 0.0) return v_uncond;
    return v_uncond + float(w) * (v_cond - v_uncond);
}

template <class F>
Mat euler_step(const Mat& x, double t, double dt, F&& field) {
    return x + float(dt) * field(x, t);
}

// Token-space state: one (B*N) x (p^2*C_m) matrix per modality.
struct TokenState {
    std::vector<Mat> tokens;
    int batch = 0;
};

struct SampledBatch {
    std::vector<MultiModalSample> samples;     // decoded native planes
    std::vector<std::vector<Plane>> channels;  // encoded channel planes
};

class Sampler {
public:
    Sampler(MMTransformer<float>& model, const ModalityRegistry& reg)
        : model_(model), reg_(reg), cfg_(model.config()) {}

    // One forward pass for each guidance branch; per-modality velocities.
    std::vector<Mat> velocity(const TokenState& st, const MatD& times, int task_id,
                              const std::vector<int>& labels, double w) const {
        auto eval = [&](const std::vector<int>& lab) {
            TapeF tape;
            auto refs = model_.stage(tape);
            ModelInput<float> in;
            in.tokens = st.tokens;
            in.times = times;
            in.task_ids.assign(size_t(st.batch), task_id);
            in.labels = lab;
            auto out = model_.forward(tape, refs, in);
            std::vector<Mat> v;
            v.reserve(out.velocity_tokens.size());
            for (auto ref : out.velocity_tokens) v.push_back(tape.val(ref));
            return v;
        };
        std::vector<Mat> v_c = eval(labels);
        if (w == 1.0) return v_c;
        std::vector<int> null_labels(size_t(st.batch), kNullLabel);
        std::vector<Mat> v_u = eval(null_labels);
        for (size_t m = 0; m < v_c.size(); m++) v_c[m] = apply_cfg(v_c[m], v_u[m], w);
        return v_c;
    }

    // x <- x + dt*v per non-clamped modality, then clamp overwrite.
    void step_ode(TokenState& st, const MatD& times, double dt, int task_id,
                  const std::vector<int>& labels, double w, int clamp_modality,
                  const Mat* clamp_value) const {
        if (dt <= 0) throw ValidationError("step_ode: dt must be positive");
        auto v = velocity(st, times, task_id, labels, w);
        for (int m = 0; m < int(st.tokens.size()); m++) {
            if (m == clamp_modality) continue;
            st.tokens[size_t(m)] += float(dt) * v[size_t(m)];
        }
        overwrite_clamp(st, clamp_modality, clamp_value);
    }

    // Euler-Maruyama on dX = [v + (w_t/2) s] dt + sqrt(w_t dt) dW, w_t = 1-t.
    void step_sde(TokenState& st, const MatD& times, double dt, int task_id,
                  const std::vector<int>& labels, double w, int clamp_modality,
                  const Mat* clamp_value, double diffusion_scale, Rng& rng) const {
        if (dt <= 0) throw ValidationError("step_sde: dt must be positive");
        auto v = velocity(st, times, task_id, labels, w);
        for (int m = 0; m < int(st.tokens.size()); m++) {
            if (m == clamp_modality) continue;
            Mat& x = st.tokens[size_t(m)];
            const Mat& vm = v[size_t(m)];
            double t = times(0, m);
            double w_t = diffusion_scale * (1.0 - t);
            if (w_t == 0.0) {
                x += float(dt) * vm;
                continue;
            }
            if (t >= kScoreSingularTime)
                throw NumericalError("step_sde: score singular at t near 1");
            Mat s = score_from_velocity(x, vm, float(t));
            Mat noise(x.rows(), x.cols());
            for (Eigen::Index i = 0; i < noise.size(); i++)
                noise.data()[i] = float(rng.normal());
            x += float(dt) * (vm + float(0.5 * w_t) * s) +
                 float(std::sqrt(w_t * dt)) * noise;
        }
        overwrite_clamp(st, clamp_modality, clamp_value);
    }

    // Full run: noise at t=0 for generated modalities, fixed blend for the
    // clamped one, nfe uniform steps to t_end, decode through the registry.
    SampledBatch sample(const TaskSpec& task, const SamplerConfig& scfg,
                        const std::vector<int>& labels,
                        const std::vector<ConditionClamp>* clamps, Rng& rng,
                        const DepthRange& depth_range = kCanonicalDepthRange,
                        const std::function<void(int, const TokenState&)>& observer = {}) const {
        scfg.validate();
        task.validate(reg_.size());
        const bool clamped_task =
            task.kind == TaskKind::condition || task.kind == TaskKind::understand;
        if (clamped_task != (clamps != nullptr && !clamps->empty()))
            throw ValidationError("sample: clamp must be present iff the task conditions");
        const int B = int(labels.size());
        if (B < 1) throw ValidationError("sample: empty batch");
        if (clamps && int(clamps->size()) != B)
            throw ValidationError("sample: clamp count must match batch");

        const int N = cfg_.tokens();
        const int M = reg_.size();
        TokenState st;
        st.batch = B;
        st.tokens.resize(size_t(M));
        for (int m = 0; m < M; m++) {
            Mat x(Eigen::Index(B) * N, cfg_.patch_features(reg_.at(m).channels));
            for (Eigen::Index i = 0; i < x.size(); i++) x.data()[i] = float(rng.normal());
            st.tokens[size_t(m)] = std::move(x);
        }

        int clamp_mod = -1;
        double t_cond = 0.0;
        Mat clamp_value;
        if (clamped_task) {
            clamp_mod = task.condition_modality;
            t_cond = (*clamps)[0].t_cond;
            const int cols = cfg_.patch_features(reg_.at(clamp_mod).channels);
            clamp_value = Mat(Eigen::Index(B) * N, cols);
            for (int b = 0; b < B; b++) {
                const ConditionClamp& c = (*clamps)[size_t(b)];
                c.validate(reg_);
                if (c.modality != clamp_mod)
                    throw ValidationError("sample: clamp modality disagrees with task");
                if (c.t_cond != t_cond)
                    throw ValidationError("sample: clamp times must agree across the batch");
                Mat x0 = patchify<float>(c.x0_channels, cfg_.patch_size);
                Mat eps = c.eps_tokens;
                if (eps.size() == 0) {
                    eps = Mat(x0.rows(), x0.cols());
                    for (Eigen::Index i = 0; i < eps.size(); i++)
                        eps.data()[i] = float(rng.normal());
                } else if (eps.rows() != x0.rows() || eps.cols() != x0.cols()) {
                    throw ValidationError("sample: eps_tokens shape mismatch");
                }
                clamp_value.middleRows(Eigen::Index(b) * N, N) =
                    blend(x0, eps, float(t_cond));
            }
        }
        overwrite_clamp(st, clamp_mod, clamped_task ? &clamp_value : nullptr);

        const double dt = scfg.t_end / scfg.nfe;
        MatD times(B, M);
        for (int step = 0; step < scfg.nfe; step++) {
            double t = step * dt;
            for (int b = 0; b < B; b++)
                for (int m = 0; m < M; m++) times(b, m) = m == clamp_mod ? t_cond : t;
            if (scfg.method == SamplerConfig::kOdeEuler)
                step_ode(st, times, dt, task.task_id(), labels, scfg.guidance_weight,
                         clamp_mod, clamped_task ? &clamp_value : nullptr);
            else
                step_sde(st, times, dt, task.task_id(), labels, scfg.guidance_weight,
                         clamp_mod, clamped_task ? &clamp_value : nullptr,
                         scfg.diffusion_scale, rng);
            if (observer) observer(step, st);
        }

        SampledBatch out;
        out.samples.resize(size_t(B));
        out.channels.resize(size_t(B));
        for (int b = 0; b < B; b++) {
            out.samples[size_t(b)].class_id =
                labels[size_t(b)] == kNullLabel ? 0 : labels[size_t(b)];
            for (int m = 0; m < M; m++) {
                const ModalitySpec& spec = reg_.at(m);
                Mat rows = st.tokens[size_t(m)].middleRows(Eigen::Index(b) * N, N);
                Plane ch = unpatchify<float>(rows, cfg_.image_size, cfg_.image_size,
                                             spec.channels, cfg_.patch_size);
                out.channels[size_t(b)].push_back(ch);
                DecodeDiagnostics diag;
                out.samples[size_t(b)].planes.push_back(
                    decode_from_channels(ch, spec, &diag, &depth_range));
            }
        }
        return out;
    }

private:
    void overwrite_clamp(TokenState& st, int clamp_modality, const Mat* clamp_value) const {
        if (clamp_modality < 0) return;
        if (!clamp_value) throw ValidationError("sampler: clamp value missing");
        st.tokens[size_t(clamp_modality)] = *clamp_value;
    }

    MMTransformer<float>& model_;
    const ModalityRegistry& reg_;
    ModelConfig cfg_;
};

// Encodes a native condition plane for clamping.
inline ConditionClamp make_clamp(const ModalityRegistry& reg, int modality,
                                 const Plane& native, double t_cond,
                                 DepthRange* depth_range_out = nullptr) {
    ConditionClamp c;
    c.modality = modality;
    c.t_cond = t_cond;
    DepthRange range = kCanonicalDepthRange;
    c.x0_channels = encode_to_channels(native, reg.at(modality), &range);
    if (depth_range_out) *depth_range_out = range;
    c.validate(reg);
    return c;
}

}  // namespace modalflow

#endif
