// Operator surface: dataset creation, training, the three inference regimes,
// translation, adaptation, and evaluation. Thin shell over the library; every
// command is deterministic given (config, seed, inputs) and leaves a
// manifest.txt under --out.

#include "modalflow/evalkit.hpp"
#include "modalflow/image_io.hpp"
#include "modalflow/manifest.hpp"
#include "modalflow/sampler.hpp"
#include "modalflow/synth.hpp"
#include "modalflow/trainer.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace modalflow;

namespace {

volatile std::sig_atomic_t g_interrupted = 0;
void on_sigint(int) { g_interrupted = 1; }

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open config file " + path);
    return json::parse(is);
}

// user config files may be partial: merge over the defaults, then parse
ModelConfig resolve_model_config(const json& user, const ModelConfig& defaults) {
    json merged = defaults.to_json();
    merged.update(user);
    return ModelConfig::from_json(merged);
}

TrainConfig resolve_train_config(const json& user, const TrainConfig& defaults) {
    json merged = defaults.to_json();
    merged.update(user);
    return TrainConfig::from_json(merged);
}

int modality_index(const ModalityRegistry& reg, const std::string& name) {
    for (int m = 0; m < reg.size(); m++)
        if (reg.at(m).name == name) return m;
    throw ValidationError("checkpoint registry has no modality named '" + name + "'");
}

Plane grid_from_batch(const SampledBatch& batch, const ModalityRegistry& reg) {
    std::vector<std::vector<Plane>> rows;
    for (const auto& s : batch.samples) {
        std::vector<Plane> row;
        for (int m = 0; m < reg.size(); m++) row.push_back(visualize(s.planes[size_t(m)], reg.at(m)));
        rows.push_back(std::move(row));
    }
    return assemble_grid(rows);
}

void dump_batch_planes(const SampledBatch& batch, const ModalityRegistry& reg,
                       const std::string& dir, RunManifest& man) {
    for (size_t i = 0; i < batch.samples.size(); i++)
        for (int m = 0; m < reg.size(); m++) {
            std::string name = "sample" + std::to_string(i) + "_" + reg.at(m).name + ".mmpl";
            write_plane(join_path(dir, name), batch.samples[i].planes[size_t(m)]);
            man.outputs.push_back(name);
        }
}

void finish_manifest(const std::string& dir, RunManifest& man) {
    man.finished_utc = utc_now();
    write_manifest(join_path(dir, "manifest.txt"), man);
}

SamplerConfig::Method parse_method(const std::string& s) {
    if (s == "ode") return SamplerConfig::kOdeEuler;
    if (s == "sde") return SamplerConfig::kSdeEulerMaruyama;
    throw ValidationError("--method must be ode or sde");
}

// shared state for commands that sample from a checkpoint
struct LoadedModel {
    Trainer trainer;
    MMTransformer<float> ema;
    std::string sha;

    explicit LoadedModel(const std::string& ckpt)
        : trainer(Trainer::load_checkpoint(ckpt)),
          ema(trainer.ema_model()),
          sha(sha256_file_hex(ckpt)) {}
    const ModalityRegistry& registry() const { return trainer.registry(); }
};

// ---- make-data -------------------------------------------------------------

int cmd_make_data(const std::string& out, int num_samples, uint64_t seed, int image,
                  int num_classes, bool append_edge) {
    fs::create_directories(out);
    RunManifest man;
    man.command = "make-data";
    man.seed = seed;
    man.started_utc = utc_now();
    man.config = {{"num_samples", num_samples},
                  {"image", image},
                  {"num_classes", num_classes},
                  {"append_edge", append_edge}};

    ModalityRegistry reg = default_registry();
    if (append_edge) reg.append({"edge", 1, true, "unit01"});
    Rng rng{seed};
    std::vector<MultiModalSample> samples;
    std::vector<int> histogram(size_t(num_classes), 0);
    samples.reserve(size_t(num_samples));
    for (int i = 0; i < num_samples; i++) {
        int cls = i % num_classes;
        MultiModalSample s = generate_scene(cls, image, rng);
        if (append_edge) s.planes.push_back(edge_from_seg(s.planes[3]));
        samples.push_back(std::move(s));
        histogram[size_t(cls)]++;
        if ((i + 1) % 512 == 0) std::printf("rendered %d/%d\n", i + 1, num_samples);
    }

    // spot-check cross-modal consistency on every 20th sample before shipping
    for (int i = 0; i < num_samples; i += 20) {
        auto rep = cross_modal_consistency(samples[size_t(i)]);
        if (rep.depth_normal_median_deg >= 10.0 || rep.boundary_agreement <= 0.8) {
            std::fprintf(stderr,
                         "make-data: sample %d failed consistency (median %.2f deg, "
                         "agreement %.3f)\n",
                         i, rep.depth_normal_median_deg, rep.boundary_agreement);
            return 1;
        }
    }

    std::string data_path = join_path(out, "data.mmds");
    write_dataset(data_path, reg, samples);
    man.outputs.push_back("data.mmds");
    man.extra["class_histogram"] = histogram;
    finish_manifest(out, man);
    std::printf("wrote %s (%d samples)\n", data_path.c_str(), num_samples);
    return 0;
}

// ---- train -----------------------------------------------------------------

int run_training(Trainer& trainer, TokenCache& cache, int64_t until_step,
                 const std::string& out, int checkpoint_every, int log_every,
                 std::ofstream& log) {
    std::string ckpt_path = join_path(out, "checkpoint.mmck");
    while (trainer.step() < until_step && !g_interrupted) {
        LossReport r = trainer.train_step(cache);
        log << r.step << " " << r.task_id;
        for (double v : r.per_modality) log << " " << v;
        log << " " << r.align << " " << r.total << "\n";
        if (r.step % log_every == 0 || r.step == until_step) {
            std::printf("step %lld/%lld task %d total %.4f align %.4f\n",
                        (long long)r.step, (long long)until_step, r.task_id, r.total, r.align);
            std::fflush(stdout);
            log.flush();
        }
        if (checkpoint_every > 0 && r.step % checkpoint_every == 0)
            trainer.save_checkpoint(ckpt_path);
    }
    trainer.save_checkpoint(ckpt_path);
    return g_interrupted ? 130 : 0;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& config_path,
              const std::string& resume, json model_over, json train_over, int log_every) {
    fs::create_directories(out);
    DatasetReader ds(data);
    const ModalityRegistry& reg = ds.registry();

    json user_model = json::object(), user_train = json::object();
    if (!config_path.empty()) {
        json cfg = load_json_file(config_path);
        if (cfg.contains("model")) user_model = cfg["model"];
        if (cfg.contains("train")) user_train = cfg["train"];
    }
    user_model.update(model_over);
    user_train.update(train_over);
    if (user_model.contains("layers") && !user_model.contains("align_layer"))
        user_model["align_layer"] = std::min(2, user_model["layers"].get<int>());

    RunManifest man;
    man.command = "train";
    man.started_utc = utc_now();
    man.inputs.push_back(data);

    std::unique_ptr<Trainer> trainer;
    if (!resume.empty()) {
        trainer = std::make_unique<Trainer>(Trainer::load_checkpoint(resume));
        man.inputs.push_back(resume);
        man.checkpoint_sha256 = sha256_file_hex(resume);
        if (!user_model.empty())
            std::fprintf(stderr, "train: --resume ignores model config overrides\n");
    } else {
        ModelConfig mdef;
        mdef.image_size = ds.height();
        mdef.align_feature_dim = 16;
        TrainConfig tdef;
        TrainConfig tcfg = resolve_train_config(user_train, tdef);
        mdef.init_seed = tcfg.seed;
        ModelConfig mcfg = resolve_model_config(user_model, mdef);
        trainer = std::make_unique<Trainer>(mcfg, tcfg, reg);
    }
    // resumed runs may still extend/trim the step budget on the command line
    int64_t until_step = train_over.contains("total_steps")
                             ? train_over["total_steps"].get<int64_t>()
                             : trainer->train_config().total_steps;

    man.seed = trainer->train_config().seed;
    man.config = {{"model", trainer->model().config().to_json()},
                  {"train", trainer->train_config().to_json()}};

    TokenCache cache(ds, trainer->model().config(), trainer->registry());

    std::ofstream log(join_path(out, "train.log"), std::ios::app);
    if (!log) throw FormatError("train: cannot open log in " + out);
    std::signal(SIGINT, on_sigint);
    int rc = run_training(*trainer, cache, until_step, out,
                          trainer->train_config().checkpoint_every, log_every, log);

    man.outputs.push_back("checkpoint.mmck");
    man.outputs.push_back("train.log");
    man.extra["final_step"] = trainer->step();
    man.extra["interrupted"] = g_interrupted != 0;
    finish_manifest(out, man);
    std::printf("%s at step %lld -> %s\n", g_interrupted ? "interrupted" : "finished",
                (long long)trainer->step(), join_path(out, "checkpoint.mmck").c_str());
    return rc;
}

// ---- sample ----------------------------------------------------------------

int cmd_sample(const std::string& ckpt, const std::string& out, int cls, int n, int nfe,
               const std::string& method, uint64_t seed, double w, bool dump_planes) {
    fs::create_directories(out);
    LoadedModel lm(ckpt);
    Sampler sampler(lm.ema, lm.registry());

    SamplerConfig scfg;
    scfg.method = parse_method(method);
    scfg.nfe = nfe;
    scfg.guidance_weight = w;
    scfg.seed = seed;

    std::vector<int> labels(size_t(n), cls < 0 ? kNullLabel : cls);
    Rng rng{seed};
    SampledBatch batch = sampler.sample(TaskSpec::generate(labels[0], w), scfg, labels,
                                        nullptr, rng);

    RunManifest man;
    man.command = "sample";
    man.seed = seed;
    man.started_utc = utc_now();
    man.inputs.push_back(ckpt);
    man.checkpoint_sha256 = lm.sha;
    man.config = {{"class", cls}, {"n", n},           {"nfe", nfe},
                  {"method", method}, {"guidance", w}};

    write_ppm(join_path(out, "grid.ppm"), grid_from_batch(batch, lm.registry()));
    man.outputs.push_back("grid.ppm");
    if (dump_planes) dump_batch_planes(batch, lm.registry(), out, man);
    finish_manifest(out, man);
    std::printf("wrote %s (%d rows x %d modalities)\n", join_path(out, "grid.ppm").c_str(), n,
                lm.registry().size());
    return 0;
}

// ---- condgen ---------------------------------------------------------------

int cmd_condgen(const std::string& ckpt, const std::string& out, const std::string& condition,
                const std::string& input, int cls, int n, int nfe, uint64_t seed, double w,
                bool dump_planes) {
    fs::create_directories(out);
    LoadedModel lm(ckpt);
    const ModalityRegistry& reg = lm.registry();
    int m = modality_index(reg, condition);
    if (m == 0) throw ValidationError("condgen conditions on a non-rgb modality; use understand");

    Plane native = read_plane(input);
    DepthRange range = kCanonicalDepthRange;
    ConditionClamp clamp = make_clamp(reg, m, native, kConditionTimeLo + 0.005, &range);
    std::vector<ConditionClamp> clamps(size_t(n), clamp);

    Sampler sampler(lm.ema, reg);
    SamplerConfig scfg;
    scfg.nfe = nfe;
    scfg.guidance_weight = w;
    scfg.seed = seed;

    std::vector<int> labels(size_t(n), cls < 0 ? kNullLabel : cls);
    Rng rng{seed};
    SampledBatch batch = sampler.sample(TaskSpec::condition_on(m, labels[0], w), scfg, labels,
                                        &clamps, rng, range);

    RunManifest man;
    man.command = "condgen";
    man.seed = seed;
    man.started_utc = utc_now();
    man.inputs = {ckpt, input};
    man.checkpoint_sha256 = lm.sha;
    man.config = {{"condition", condition}, {"class", cls}, {"n", n},
                  {"nfe", nfe},             {"guidance", w}};

    write_ppm(join_path(out, "grid.ppm"), grid_from_batch(batch, reg));
    man.outputs.push_back("grid.ppm");
    if (dump_planes) dump_batch_planes(batch, reg, out, man);
    finish_manifest(out, man);
    std::printf("wrote %s conditioned on %s\n", join_path(out, "grid.ppm").c_str(),
                condition.c_str());
    return 0;
}

// ---- understand ------------------------------------------------------------

SampledBatch run_understand(LoadedModel& lm, const Plane& rgb, int nfe, uint64_t seed) {
    const ModalityRegistry& reg = lm.registry();
    ConditionClamp clamp = make_clamp(reg, 0, rgb, kConditionTimeLo + 0.005);
    std::vector<ConditionClamp> clamps{clamp};
    Sampler sampler(lm.ema, reg);
    SamplerConfig scfg;
    scfg.nfe = nfe;
    scfg.seed = seed;
    std::vector<int> labels{kNullLabel};
    Rng rng{seed};
    return sampler.sample(TaskSpec::understand(), scfg, labels, &clamps, rng);
}

Plane load_rgb_input(const std::string& input) {
    if (input.size() >= 4 && input.substr(input.size() - 4) == ".ppm") return read_ppm(input);
    return read_plane(input);
}

int cmd_understand(const std::string& ckpt, const std::string& out, const std::string& input,
                   int nfe, uint64_t seed, const std::string& gt_path, int gt_index) {
    fs::create_directories(out);
    LoadedModel lm(ckpt);
    const ModalityRegistry& reg = lm.registry();

    Plane rgb = load_rgb_input(input);
    SampledBatch batch = run_understand(lm, rgb, nfe, seed);
    const MultiModalSample& pred = batch.samples[0];

    RunManifest man;
    man.command = "understand";
    man.seed = seed;
    man.started_utc = utc_now();
    man.inputs = {ckpt, input};
    man.checkpoint_sha256 = lm.sha;
    man.config = {{"nfe", nfe}};

    for (int m = 1; m < reg.size(); m++) {
        std::string name = reg.at(m).name + ".mmpl";
        write_plane(join_path(out, name), pred.planes[size_t(m)]);
        man.outputs.push_back(name);
    }
    write_ppm(join_path(out, "grid.ppm"), grid_from_batch(batch, reg));
    man.outputs.push_back("grid.ppm");

    if (!gt_path.empty()) {
        DatasetReader ds(gt_path);
        auto gt = ds.sample(uint64_t(gt_index));
        json metrics;
        std::ofstream mt(join_path(out, "metrics.txt"));
        auto dm = depth_metrics(pred.planes[1], gt.planes[1], true);
        mt << "depth_absrel: " << dm.absrel << "\n"
           << "depth_delta1: " << dm.delta1 << "\n"
           << "depth_rmse: " << dm.rmse << "\n";
        metrics["depth"] = {{"absrel", dm.absrel}, {"delta1", dm.delta1}, {"rmse", dm.rmse}};
        auto ne = normal_angular_error(pred.planes[2], gt.planes[2]);
        mt << "normal_mean_deg: " << ne.mean_deg << "\n"
           << "normal_median_deg: " << ne.median_deg << "\n";
        metrics["normal"] = {{"mean_deg", ne.mean_deg}, {"median_deg", ne.median_deg}};
        const Plane& ps = pred.planes[3];
        const Plane& gs = gt.planes[3];
        int64_t same = 0;
        for (size_t i = 0; i < gs.data.size(); i++)
            if (std::lround(ps.data[i]) == std::lround(gs.data[i])) same++;
        double seg_acc = double(same) / double(gs.data.size());
        mt << "seg_accuracy: " << seg_acc << "\n";
        metrics["seg_accuracy"] = seg_acc;
        std::ofstream mj(join_path(out, "metrics.json"));
        mj << metrics.dump(2) << "\n";
        man.inputs.push_back(gt_path);
        man.outputs.push_back("metrics.txt");
        man.outputs.push_back("metrics.json");
        man.extra["gt_index"] = gt_index;
    }
    finish_manifest(out, man);
    std::printf("wrote understanding outputs to %s\n", out.c_str());
    return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out,
             int num_samples, int understand_samples, int nfe, uint64_t seed, double w) {
    fs::create_directories(out);
    LoadedModel lm(ckpt);
    const ModalityRegistry& reg = lm.registry();
    DatasetReader ds(data);
    const int image = lm.trainer.model().config().image_size;
    const int patch = lm.trainer.model().config().patch_size;
    const int num_classes = lm.trainer.model().config().num_classes;

    RunManifest man;
    man.command = "eval";
    man.seed = seed;
    man.started_utc = utc_now();
    man.inputs = {ckpt, data};
    man.checkpoint_sha256 = lm.sha;
    man.config = {{"num_samples", num_samples},
                  {"understand_samples", understand_samples},
                  {"nfe", nfe},
                  {"guidance", w}};

    // feature space for the toy-Fréchet: same family as the alignment
    // features, deliberately different seed
    RandomConvFeatures provider(image, patch, 32, 271828);

    Sampler sampler(lm.ema, reg);
    SamplerConfig scfg;
    scfg.nfe = nfe;
    scfg.guidance_weight = w;
    scfg.seed = seed;

    std::vector<Plane> gen_rgb;
    std::vector<MultiModalSample> generated;
    Rng rng{seed};
    const int batch_rows = 32;
    for (int done = 0; done < num_samples; done += batch_rows) {
        int b = std::min(batch_rows, num_samples - done);
        std::vector<int> labels(size_t(b), 0);
        for (int i = 0; i < b; i++) labels[size_t(i)] = (done + i) % num_classes;
        SampledBatch batch =
            sampler.sample(TaskSpec::generate(kNullLabel, w), scfg, labels, nullptr, rng);
        for (auto& s : batch.samples) {
            gen_rgb.push_back(s.planes[0]);
            generated.push_back(std::move(s));
        }
        std::printf("generated %d/%d\n", std::min(done + b, num_samples), num_samples);
        std::fflush(stdout);
    }

    std::vector<Plane> real_rgb;
    int real_count = int(std::min<uint64_t>(ds.size(), 1024));
    for (int i = 0; i < real_count; i++) real_rgb.push_back(ds.sample(uint64_t(i)).planes[0]);
    double fre = frechet_distance(feature_stats(gen_rgb, provider),
                                  feature_stats(real_rgb, provider));

    std::vector<double> cons_med, cons_agree;
    for (const auto& s : generated) {
        auto rep = cross_modal_consistency(s);
        cons_med.push_back(rep.depth_normal_median_deg);
        cons_agree.push_back(rep.boundary_agreement);
    }

    double absrel = 0, delta1 = 0, rmse = 0, seg_acc = 0, norm_mean = 0;
    int u = std::min<int>(understand_samples, int(ds.size()));
    for (int i = 0; i < u; i++) {
        auto gt = ds.sample(uint64_t(i));
        SampledBatch b = run_understand(lm, gt.planes[0], nfe, seed + 1000 + uint64_t(i));
        const MultiModalSample& pred = b.samples[0];
        auto dm = depth_metrics(pred.planes[1], gt.planes[1], true);
        absrel += dm.absrel;
        delta1 += dm.delta1;
        rmse += dm.rmse;
        norm_mean += normal_angular_error(pred.planes[2], gt.planes[2]).mean_deg;
        const Plane& ps = pred.planes[3];
        int64_t same = 0;
        for (size_t k = 0; k < ps.data.size(); k++)
            if (std::lround(ps.data[k]) == std::lround(gt.planes[3].data[k])) same++;
        seg_acc += double(same) / double(ps.data.size());
        if ((i + 1) % 16 == 0) {
            std::printf("understood %d/%d\n", i + 1, u);
            std::fflush(stdout);
        }
    }
    if (u > 0) {
        absrel /= u;
        delta1 /= u;
        rmse /= u;
        seg_acc /= u;
        norm_mean /= u;
    }

    json metrics = {
        {"toy_frechet_rgb", fre},
        {"consistency_depth_normal_median_deg", detail::median(cons_med)},
        {"consistency_boundary_agreement_median", detail::median(cons_agree)},
        {"understand",
         {{"depth_absrel", absrel},
          {"depth_delta1", delta1},
          {"depth_rmse", rmse},
          {"seg_accuracy", seg_acc},
          {"normal_mean_deg", norm_mean},
          {"samples", u}}}};

    std::ofstream mt(join_path(out, "metrics.txt"));
    mt << "# toy-Fréchet uses a frozen random-feature space: values are only\n"
       << "# comparable between runs of this artifact, never to published FID.\n"
       << "toy_frechet_rgb: " << fre << "\n"
       << "consistency_depth_normal_median_deg: " << detail::median(cons_med) << "\n"
       << "consistency_boundary_agreement_median: " << detail::median(cons_agree) << "\n"
       << "understand_depth_absrel: " << absrel << "\n"
       << "understand_depth_delta1: " << delta1 << "\n"
       << "understand_depth_rmse: " << rmse << "\n"
       << "understand_seg_accuracy: " << seg_acc << "\n"
       << "understand_normal_mean_deg: " << norm_mean << "\n";
    std::ofstream mj(join_path(out, "metrics.json"));
    mj << metrics.dump(2) << "\n";
    man.outputs = {"metrics.txt", "metrics.json"};
    finish_manifest(out, man);
    std::printf("eval written to %s\n", out.c_str());
    return 0;
}

// ---- translate ---------------------------------------------------------------

int cmd_translate(const std::string& ckpt, const std::string& out, const std::string& input,
                  const std::string& via, int n, int nfe, uint64_t seed, double w) {
    fs::create_directories(out);
    LoadedModel lm(ckpt);
    const ModalityRegistry& reg = lm.registry();
    int m = modality_index(reg, via);
    if (m == 0) throw ValidationError("--via must name a non-rgb modality");

    Plane rgb = load_rgb_input(input);
    SampledBatch understood = run_understand(lm, rgb, nfe, seed);
    Plane via_native = understood.samples[0].planes[size_t(m)];
    write_plane(join_path(out, "via_" + via + ".mmpl"), via_native);

    DepthRange range = kCanonicalDepthRange;
    ConditionClamp clamp = make_clamp(reg, m, via_native, kConditionTimeLo + 0.005, &range);
    std::vector<ConditionClamp> clamps(size_t(n), clamp);
    Sampler sampler(lm.ema, reg);
    SamplerConfig scfg;
    scfg.nfe = nfe;
    scfg.guidance_weight = w;
    scfg.seed = seed + 1;
    std::vector<int> labels(size_t(n), kNullLabel);
    Rng rng{seed + 1};
    SampledBatch outputs = sampler.sample(TaskSpec::condition_on(m, kNullLabel, w), scfg,
                                          labels, &clamps, rng, range);

    // rows: input rgb | intermediate modality | translated rgb
    std::vector<std::vector<Plane>> rows;
    Plane via_viz = visualize(via_native, reg.at(m));
    for (int i = 0; i < n; i++) {
        rows.push_back({visualize(rgb, reg.at(0)), via_viz,
                        visualize(outputs.samples[size_t(i)].planes[0], reg.at(0))});
        write_plane(join_path(out, "out_rgb" + std::to_string(i) + ".mmpl"),
                    outputs.samples[size_t(i)].planes[0]);
    }
    write_ppm(join_path(out, "grid.ppm"), assemble_grid(rows));

    RunManifest man;
    man.command = "translate";
    man.seed = seed;
    man.started_utc = utc_now();
    man.inputs = {ckpt, input};
    man.checkpoint_sha256 = lm.sha;
    man.config = {{"via", via}, {"n", n}, {"nfe", nfe}, {"guidance", w}};
    man.outputs = {"grid.ppm", "via_" + via + ".mmpl"};
    for (int i = 0; i < n; i++) man.outputs.push_back("out_rgb" + std::to_string(i) + ".mmpl");
    finish_manifest(out, man);
    std::printf("translated via %s -> %s\n", via.c_str(), join_path(out, "grid.ppm").c_str());
    return 0;
}

// ---- adapt -------------------------------------------------------------------

int cmd_adapt(const std::string& ckpt, const std::string& data, const std::string& out,
              const std::string& mode, int steps, int log_every) {
    fs::create_directories(out);
    DatasetReader ds(data);
    const ModalityRegistry& new_reg = ds.registry();

    Trainer trainer = Trainer::load_checkpoint(ckpt);
    std::string sha = sha256_file_hex(ckpt);
    const ModalityRegistry& old_reg = trainer.registry();

    if (mode == "append") {
        if (new_reg.size() != old_reg.size() + 1)
            throw ValidationError("adapt append: dataset must add exactly one modality");
        for (int m = 0; m < old_reg.size(); m++)
            if (!(new_reg.at(m) == old_reg.at(m)))
                throw ValidationError("adapt append: existing modalities must match");
        trainer.adapt_append(new_reg.at(old_reg.size()));
    } else if (mode == "replace") {
        if (new_reg.size() != old_reg.size())
            throw ValidationError("adapt replace: dataset must keep the modality count");
        int slot = -1;
        for (int m = 0; m < old_reg.size(); m++) {
            if (new_reg.at(m) == old_reg.at(m)) continue;
            if (slot >= 0) throw ValidationError("adapt replace: more than one slot differs");
            slot = m;
        }
        if (slot < 0) throw ValidationError("adapt replace: dataset registry is unchanged");
        trainer.adapt_replace(slot, new_reg.at(slot));
    } else {
        throw ValidationError("--mode must be replace or append");
    }

    TokenCache cache(ds, trainer.model().config(), trainer.registry());
    std::ofstream log(join_path(out, "train.log"), std::ios::app);
    std::signal(SIGINT, on_sigint);
    int64_t until = trainer.step() + steps;
    int rc = run_training(trainer, cache, until, out, 0, log_every, log);

    RunManifest man;
    man.command = "adapt";
    man.seed = trainer.train_config().seed;
    man.started_utc = utc_now();
    man.inputs = {ckpt, data};
    man.checkpoint_sha256 = sha;
    man.config = {{"mode", mode}, {"steps", steps}};
    man.outputs = {"checkpoint.mmck", "train.log"};
    man.extra["final_step"] = trainer.step();
    finish_manifest(out, man);
    std::printf("adapted (%s) -> %s\n", mode.c_str(), join_path(out, "checkpoint.mmck").c_str());
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal flow-matching toolkit"};
    app.require_subcommand(1);

    // make-data
    auto* mk = app.add_subcommand("make-data", "render a synthetic dataset container");
    std::string mk_out;
    int mk_n = 4096, mk_image = 32, mk_classes = 10;
    bool mk_val = false, mk_edge = false;
    uint64_t mk_seed = 1;
    mk->add_option("--out", mk_out, "output directory")->required();
    auto* mk_n_opt = mk->add_option("--num-samples", mk_n, "sample count");
    mk->add_flag("--val", mk_val, "validation-sized container (512 samples)");
    mk->add_option("--seed", mk_seed, "rng seed");
    mk->add_option("--image", mk_image, "image size");
    mk->add_option("--classes", mk_classes, "number of classes");
    mk->add_flag("--append-edge", mk_edge, "add a seg-derived edge modality");

    // train
    auto* tr = app.add_subcommand("train", "train from a dataset");
    std::string tr_data, tr_out, tr_config, tr_resume;
    int tr_log_every = 100;
    json tr_model_over = json::object(), tr_train_over = json::object();
    tr->add_option("--data", tr_data, "dataset path")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--config", tr_config, "json config file");
    tr->add_option("--resume", tr_resume, "checkpoint to resume");
    tr->add_option("--log-every", tr_log_every, "progress cadence");
    int tr_steps = -1, tr_batch = -1, tr_dim = -1, tr_layers = -1, tr_heads = -1;
    double tr_lr = -1, tr_lambda = -1;
    int64_t tr_seed = -1;
    bool tr_no_drop = false, tr_no_task = false, tr_gen_only = false;
    tr->add_option("--steps", tr_steps, "total steps");
    tr->add_option("--batch", tr_batch, "batch size");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--lambda", tr_lambda, "alignment weight");
    tr->add_option("--seed", tr_seed, "training seed");
    tr->add_option("--dim", tr_dim, "model width");
    tr->add_option("--layers", tr_layers, "transformer depth");
    tr->add_option("--heads", tr_heads, "attention heads");
    tr->add_flag("--disable-drop-aug", tr_no_drop, "ablation: keep all modalities");
    tr->add_flag("--disable-task-embedding", tr_no_task, "ablation: zero task embedding");
    tr->add_flag("--generation-only", tr_gen_only, "ablation: train generate task only");

    // sample
    auto* sm = app.add_subcommand("sample", "generate an n x modality grid");
    std::string sm_ckpt, sm_out, sm_method = "ode";
    int sm_class = -1, sm_n = 8, sm_nfe = 250;
    uint64_t sm_seed = 0;
    double sm_w = 1.0;
    bool sm_dump = false;
    sm->add_option("--checkpoint", sm_ckpt)->required();
    sm->add_option("--out", sm_out)->required();
    sm->add_option("--class", sm_class, "class label, -1 for unconditional");
    sm->add_option("--n", sm_n, "rows");
    sm->add_option("--nfe", sm_nfe, "integrator steps");
    sm->add_option("--method", sm_method, "ode|sde");
    sm->add_option("--seed", sm_seed);
    sm->add_option("--w", sm_w, "guidance weight");
    sm->add_flag("--dump-planes", sm_dump, "write raw .mmpl planes");

    // condgen
    auto* cg = app.add_subcommand("condgen", "generate conditioned on one modality");
    std::string cg_ckpt, cg_out, cg_cond, cg_input;
    int cg_class = -1, cg_n = 4, cg_nfe = 250;
    uint64_t cg_seed = 0;
    double cg_w = 1.8;
    bool cg_dump = false;
    cg->add_option("--checkpoint", cg_ckpt)->required();
    cg->add_option("--out", cg_out)->required();
    cg->add_option("--condition", cg_cond, "depth|normal|seg")->required();
    cg->add_option("--input", cg_input, "native plane file (.mmpl)")->required();
    cg->add_option("--class", cg_class);
    cg->add_option("--n", cg_n);
    cg->add_option("--nfe", cg_nfe);
    cg->add_option("--seed", cg_seed);
    cg->add_option("--w", cg_w, "guidance weight");
    cg->add_flag("--dump-planes", cg_dump);

    // understand
    auto* un = app.add_subcommand("understand", "predict all modalities from rgb");
    std::string un_ckpt, un_out, un_input, un_gt;
    int un_nfe = 250, un_index = 0;
    uint64_t un_seed = 0;
    un->add_option("--checkpoint", un_ckpt)->required();
    un->add_option("--out", un_out)->required();
    un->add_option("--input", un_input, "rgb image (.ppm or .mmpl)")->required();
    un->add_option("--nfe", un_nfe);
    un->add_option("--seed", un_seed);
    un->add_option("--gt", un_gt, "dataset with ground truth");
    un->add_option("--index", un_index, "ground-truth sample index");

    // eval
    auto* ev = app.add_subcommand("eval", "metric report for a checkpoint");
    std::string ev_ckpt, ev_data, ev_out;
    int ev_n = 256, ev_u = 64, ev_nfe = 128;
    uint64_t ev_seed = 0;
    double ev_w = 1.0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "validation dataset")->required();
    ev->add_option("--out", ev_out)->required();
    ev->add_option("--num-samples", ev_n, "generated sample count");
    ev->add_option("--understand-samples", ev_u, "validation items to understand");
    ev->add_option("--nfe", ev_nfe);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--w", ev_w, "guidance weight");

    // translate
    auto* tl = app.add_subcommand("translate", "rgb -> modality -> rgb re-generation");
    std::string tl_ckpt, tl_out, tl_input, tl_via;
    int tl_n = 1, tl_nfe = 250;
    uint64_t tl_seed = 0;
    double tl_w = 1.8;
    tl->add_option("--checkpoint", tl_ckpt)->required();
    tl->add_option("--out", tl_out)->required();
    tl->add_option("--input", tl_input, "rgb image (.ppm or .mmpl)")->required();
    tl->add_option("--via", tl_via, "depth|normal|seg")->required();
    tl->add_option("--n", tl_n, "outputs to draw");
    tl->add_option("--nfe", tl_nfe);
    tl->add_option("--seed", tl_seed);
    tl->add_option("--w", tl_w, "guidance weight");

    // adapt
    auto* ad = app.add_subcommand("adapt", "replace or append a modality, then fine-tune");
    std::string ad_ckpt, ad_data, ad_out, ad_mode;
    int ad_steps = 2000, ad_log_every = 100;
    ad->add_option("--checkpoint", ad_ckpt)->required();
    ad->add_option("--data", ad_data, "dataset with the new modality")->required();
    ad->add_option("--out", ad_out)->required();
    ad->add_option("--mode", ad_mode, "replace|append")->required();
    ad->add_option("--steps", ad_steps, "fine-tune steps");
    ad->add_option("--log-every", ad_log_every);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*mk) {
            if (mk_val && mk_n_opt->count() == 0) mk_n = 512;
            return cmd_make_data(mk_out, mk_n, mk_seed, mk_image, mk_classes, mk_edge);
        }
        if (*tr) {
            if (tr_steps >= 0) tr_train_over["total_steps"] = tr_steps;
            if (tr_batch > 0) tr_train_over["batch_size"] = tr_batch;
            if (tr_lr > 0) tr_train_over["lr"] = tr_lr;
            if (tr_lambda >= 0) tr_train_over["align_lambda"] = tr_lambda;
            if (tr_seed >= 0) tr_train_over["seed"] = uint64_t(tr_seed);
            if (tr_no_drop) tr_train_over["disable_drop_aug"] = true;
            if (tr_no_task) tr_train_over["disable_task_embedding"] = true;
            if (tr_gen_only) tr_train_over["generation_only"] = true;
            if (tr_dim > 0) tr_model_over["dim"] = tr_dim;
            if (tr_layers > 0) tr_model_over["layers"] = tr_layers;
            if (tr_heads > 0) tr_model_over["heads"] = tr_heads;
            return cmd_train(tr_data, tr_out, tr_config, tr_resume, tr_model_over,
                             tr_train_over, tr_log_every);
        }
        if (*sm)
            return cmd_sample(sm_ckpt, sm_out, sm_class, sm_n, sm_nfe, sm_method, sm_seed, sm_w,
                              sm_dump);
        if (*cg)
            return cmd_condgen(cg_ckpt, cg_out, cg_cond, cg_input, cg_class, cg_n, cg_nfe,
                               cg_seed, cg_w, cg_dump);
        if (*un)
            return cmd_understand(un_ckpt, un_out, un_input, un_nfe, un_seed, un_gt, un_index);
        if (*ev)
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_n, ev_u, ev_nfe, ev_seed, ev_w);
        if (*tl)
            return cmd_translate(tl_ckpt, tl_out, tl_input, tl_via, tl_n, tl_nfe, tl_seed, tl_w);
        if (*ad) return cmd_adapt(ad_ckpt, ad_data, ad_out, ad_mode, ad_steps, ad_log_every);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "modalflow: %s\n", e.what());
        return 1;
    }
    return 2;
}
