#ifndef MODALFLOW_INTERPOLANT_HPP
#define MODALFLOW_INTERPOLANT_HPP

// Flow-matching path math: linear blend between noise (t=0) and clean data
// (t=1), the velocity regression target, conversions among state / velocity /
// noise / data / score, and per-modality time sampling for each task regime.

#include "modalflow/common.hpp"

#include <concepts>
#include <optional>
#include <vector>

namespace modalflow {

namespace detail {
inline void check_time_unit(double t, const char* who) {
    if (!(t >= 0.0 && t <= 1.0))
        throw ValidationError(std::string(who) + ": t must lie in [0, 1]");
}
template <class S>
void check_same_shape(const MatT<S>& a, const MatT<S>& b, const char* who) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError(std::string(who) + ": shape mismatch");
}
}  // namespace detail

// x^t = t * x0 + (1 - t) * eps
template <class S>
MatT<S> blend(const MatT<S>& x0, const MatT<S>& eps, double t) {
    detail::check_same_shape(x0, eps, "blend");
    detail::check_time_unit(t, "blend");
    if (t == 1.0) return x0;
    if (t == 0.0) return eps;
    return (S(t) * x0 + S(1.0 - t) * eps).eval();
}
template <std::floating_point S>
S blend(S x0, S eps, double t) {
    detail::check_time_unit(t, "blend");
    if (t == 1.0) return x0;
    if (t == 0.0) return eps;
    return S(t) * x0 + S(1.0 - t) * eps;
}

// v* = x0 - eps
template <class S>
MatT<S> velocity_target(const MatT<S>& x0, const MatT<S>& eps) {
    detail::check_same_shape(x0, eps, "velocity_target");
    return (x0 - eps).eval();
}
template <std::floating_point S>
S velocity_target(S x0, S eps) {
    return x0 - eps;
}

// eps = x_t - t * v
template <class S>
MatT<S> recover_noise(const MatT<S>& xt, const MatT<S>& v, double t) {
    detail::check_same_shape(xt, v, "recover_noise");
    detail::check_time_unit(t, "recover_noise");
    return (xt - S(t) * v).eval();
}
template <std::floating_point S>
S recover_noise(S xt, S v, double t) {
    detail::check_time_unit(t, "recover_noise");
    return xt - S(t) * v;
}

// x0 = x_t + (1 - t) * v
template <class S>
MatT<S> recover_data(const MatT<S>& xt, const MatT<S>& v, double t) {
    detail::check_same_shape(xt, v, "recover_data");
    detail::check_time_unit(t, "recover_data");
    return (xt + S(1.0 - t) * v).eval();
}
template <std::floating_point S>
S recover_data(S xt, S v, double t) {
    detail::check_time_unit(t, "recover_data");
    return xt + S(1.0 - t) * v;
}

inline constexpr double kScoreSingularTime = 1.0 - 1e-6;

// s = -(x_t - t * v) / (1 - t), the Gaussian score implied by the velocity
// estimate. Undefined at the data endpoint.
template <class S>
MatT<S> score_from_velocity(const MatT<S>& xt, const MatT<S>& v, double t) {
    detail::check_same_shape(xt, v, "score_from_velocity");
    if (!(t >= 0.0) || t >= kScoreSingularTime)
        throw ValidationError("score_from_velocity: t too close to the data endpoint");
    return (-(xt - S(t) * v) / S(1.0 - t)).eval();
}
template <std::floating_point S>
S score_from_velocity(S xt, S v, double t) {
    if (!(t >= 0.0) || t >= kScoreSingularTime)
        throw ValidationError("score_from_velocity: t too close to the data endpoint");
    return -(xt - S(t) * v) / S(1.0 - t);
}

// ---- task regimes ---------------------------------------------------------

enum class TaskKind { generate, condition, understand };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::generate: return "generate";
        case TaskKind::condition: return "condition";
        case TaskKind::understand: return "understand";
    }
    return "?";
}

inline constexpr int kNullLabel = -1;
inline constexpr double kConditionTimeLo = 0.99;

// A task regime: what is being generated and what (if anything) is clamped
// as the condition. `condition_modality` is an index into the registry order;
// understanding always conditions on modality 0 (rgb).
struct TaskSpec {
    TaskKind kind = TaskKind::generate;
    int condition_modality = -1;
    int class_label = kNullLabel;
    double guidance_weight = 1.0;

    void validate(int num_modalities) const {
        if (guidance_weight < 0.0)
            throw ValidationError("TaskSpec: guidance_weight must be nonnegative");
        switch (kind) {
            case TaskKind::generate:
                if (condition_modality != -1)
                    throw ValidationError("TaskSpec: generate task takes no condition modality");
                break;
            case TaskKind::condition:
                if (condition_modality < 0 || condition_modality >= num_modalities)
                    throw ValidationError("TaskSpec: condition task needs a valid condition modality");
                break;
            case TaskKind::understand:
                if (condition_modality != 0)
                    throw ValidationError("TaskSpec: understand conditions on rgb (modality 0)");
                break;
        }
    }

    static TaskSpec generate(int class_label, double w = 1.0) {
        return TaskSpec{TaskKind::generate, -1, class_label, w};
    }
    static TaskSpec condition_on(int modality, int class_label, double w = 1.0) {
        return TaskSpec{TaskKind::condition, modality, class_label, w};
    }
    static TaskSpec understand(double w = 1.0) {
        return TaskSpec{TaskKind::understand, 0, kNullLabel, w};
    }

    // Stable task ids: 0 = generate, 1 + condition modality index otherwise.
    // Understanding is condition-on-rgb, id 1. Appending a modality appends a
    // task id; existing ids never shift.
    int task_id() const {
        if (kind == TaskKind::generate) return 0;
        return 1 + condition_modality;
    }
    static int num_tasks_for(int num_modalities) { return 1 + num_modalities; }
};

// Per-modality diffusion times, aligned with registry order.
struct TimeVector {
    std::vector<double> t;

    int size() const { return int(t.size()); }
    double operator[](int m) const { return t[size_t(m)]; }
    double& operator[](int m) { return t[size_t(m)]; }

    static TimeVector constant(int m, double value) {
        TimeVector tv;
        tv.t.assign(size_t(m), value);
        return tv;
    }

    void validate(const TaskSpec& task) const {
        for (double v : t)
            if (!(v >= 0.0 && v <= 1.0))
                throw ValidationError("TimeVector: component outside [0, 1]");
        if (task.kind == TaskKind::generate) {
            for (double v : t)
                if (v != t[0]) throw ValidationError("TimeVector: generate task requires equal components");
        } else {
            double tc = t[size_t(task.condition_modality)];
            if (!(tc >= kConditionTimeLo && tc <= 1.0))
                throw ValidationError("TimeVector: condition modality time outside [0.99, 1]");
        }
    }
};

// Generate: one shared uniform draw. Condition/understand: the condition
// modality draws uniformly in [0.99, 1]; all remaining modalities share one
// uniform draw in [0, 1]. Draw order is fixed (condition first) so streams
// replay deterministically.
inline TimeVector sample_time_vector(const TaskSpec& task, int num_modalities, Rng& rng) {
    task.validate(num_modalities);
    TimeVector tv = TimeVector::constant(num_modalities, 0.0);
    if (task.kind == TaskKind::generate) {
        double u = rng.uniform();
        for (int m = 0; m < num_modalities; m++) tv[m] = u;
        return tv;
    }
    double tc = rng.uniform(kConditionTimeLo, 1.0);
    double shared = rng.uniform();
    for (int m = 0; m < num_modalities; m++) tv[m] = shared;
    tv[task.condition_modality] = tc;
    return tv;
}

}  // namespace modalflow

#endif
