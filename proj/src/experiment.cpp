#include "cmtraj/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "cmtraj/errors.hpp"

namespace cmtraj {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json metric_config_json(const MetricConfig& m) {
  return {{"brier_form", to_string(m.penalty)},
          {"miss_threshold", m.miss_threshold},
          {"collision_threshold", m.collision_threshold}};
}

MetricConfig metric_config_from_json(const json& j) {
  MetricConfig m;
  m.penalty = brier_penalty_from_string(j.value("brier_form", to_string(m.penalty)));
  m.miss_threshold = j.value("miss_threshold", m.miss_threshold);
  m.collision_threshold = j.value("collision_threshold", m.collision_threshold);
  return m;
}

json model_shape_json(const ModelShape& m) {
  return {{"model_dim", m.model_dim},
          {"heads", m.heads},
          {"layers", m.layers},
          {"fourier_dim", m.fourier_dim},
          {"mlp_ratio", m.mlp_ratio}};
}

ModelShape model_shape_from_json(const json& j) {
  ModelShape m;
  m.model_dim = j.value("model_dim", m.model_dim);
  m.heads = j.value("heads", m.heads);
  m.layers = j.value("layers", m.layers);
  m.fourier_dim = j.value("fourier_dim", m.fourier_dim);
  m.mlp_ratio = j.value("mlp_ratio", m.mlp_ratio);
  return m;
}

std::string epoch_csv_header() { return "config_hash,epoch,N,mean_loss,val_ade,val_fde,teacher_fraction,seconds"; }

std::string epoch_csv_row(const std::string& hash, const EpochLog& l) {
  std::ostringstream os;
  os << std::setprecision(8) << hash << ',' << l.epoch << ',' << l.N << ',' << l.mean_loss << ',' << l.val_ade << ','
     << l.val_fde << ',' << l.teacher_fraction << ',' << l.seconds;
  return os.str();
}

// Parts of the config that affect training; variants equal here share a model.
std::string training_key(const RunConfig& c) {
  json j = c.resolved().to_json();
  j.erase("tag");
  j.erase("sampler");
  j.erase("metrics");
  j.erase("plot_scenes");
  j.erase("ablation_seeds");
  j.erase("checkpoint_every");
  return hex64(fnv1a(j.dump()));
}

std::string data_key(const RunConfig& c) {
  json j{{"data_seed", c.data_seed},
         {"train", c.train_scenes},
         {"val", c.val_scenes},
         {"test", c.test_scenes},
         {"scene", c.data.to_json().value("scene", json::object())}};
  return j.dump();
}

std::string codec_key(const RunConfig& c) {
  const RunConfig r = c.resolved();
  return data_key(r) + codec_fit_to_json(r.codec).dump() + r.codec_path + c.data.to_json().value("context", json()).dump();
}

template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (...) {
    std::throw_with_nested(StageError(name, "stage '" + name + "' failed"));
  }
}

}  // namespace

// ---- configuration -----------------------------------------------------------

json codec_fit_to_json(const CodecFitConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"w_rec", c.weights.rec},
          {"w_reg", c.weights.reg},
          {"w_var", c.weights.var},
          {"pairwise_reg", c.weights.pairwise_reg},
          {"init", c.init == CodecInit::kPca ? "pca" : "random"},
          {"auto_scale", c.auto_scale},
          {"latent_rms", c.latent_rms},
          {"refit_decoder", c.refit_decoder},
          {"seed", c.seed}};
}

CodecFitConfig codec_fit_from_json(const json& j) {
  CodecFitConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weights.rec = j.value("w_rec", c.weights.rec);
  c.weights.reg = j.value("w_reg", c.weights.reg);
  c.weights.var = j.value("w_var", c.weights.var);
  c.weights.pairwise_reg = j.value("pairwise_reg", c.weights.pairwise_reg);
  const std::string init = j.value("init", std::string("pca"));
  if (init != "pca" && init != "random") throw ConfigError("codec.init must be 'pca' or 'random', got '" + init + "'");
  c.init = init == "pca" ? CodecInit::kPca : CodecInit::kRandom;
  c.auto_scale = j.value("auto_scale", c.auto_scale);
  c.latent_rms = j.value("latent_rms", c.latent_rms);
  c.refit_decoder = j.value("refit_decoder", c.refit_decoder);
  c.seed = j.value("seed", c.seed);
  if (c.latent_dim < 1 || c.epochs < 0 || c.batch_size < 1 || !(c.learning_rate > 0) || !(c.latent_rms > 0)) {
    throw ConfigError("codec: latent_dim and batch_size must be >= 1, epochs >= 0, learning_rate and latent_rms > 0");
  }
  return c;
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  r.train.seed = seed;
  r.train.teacher.max_epochs = r.train.epochs;
  r.codec.seed = seed;
  r.sampler.seed = seed;
  r.sampler.sigma_min = r.train.noise.sigma_min;
  r.sampler.sigma_max = r.train.noise.sigma_max;
  r.sampler.rho = r.train.noise.rho;
  return r;
}

void RunConfig::validate() const {
  if (train_scenes < 1 || test_scenes < 1 || val_scenes < 0) {
    throw ConfigError("train_scenes and test_scenes must be >= 1 and val_scenes >= 0");
  }
  if (plot_scenes < 0 || checkpoint_every < 0) throw ConfigError("plot_scenes and checkpoint_every must be >= 0");
  if (ablation_seeds.empty()) throw ConfigError("ablation_seeds must not be empty");
  if (tag.empty() || tag.find_first_of("/\\") != std::string::npos) throw ConfigError("tag must be a plain name");
  data.scene.validate();
  const RunConfig r = resolved();
  r.train.validate();
  r.sampler.validate();
  if (!codec_path.empty() && !fs::exists(codec_path)) throw ConfigError("codec file not found: " + codec_path);
  DenoiserConfig m = denoiser_dims(data, codec.latent_dim);
  m.model_dim = model.model_dim;
  m.heads = model.heads;
  m.layers = model.layers;
  m.fourier_dim = model.fourier_dim;
  m.mlp_ratio = model.mlp_ratio;
  m.validate();
}

json RunConfig::to_json() const {
  return {{"tag", tag},
          {"seed", seed},
          {"data_seed", data_seed},
          {"train_scenes", train_scenes},
          {"val_scenes", val_scenes},
          {"test_scenes", test_scenes},
          {"plot_scenes", plot_scenes},
          {"checkpoint_every", checkpoint_every},
          {"codec_path", codec_path},
          {"data", data.to_json()},
          {"codec", codec_fit_to_json(codec)},
          {"model", model_shape_json(model)},
          {"train", train.to_json()},
          {"sampler", sampler.to_json()},
          {"metrics", metric_config_json(metrics)},
          {"ablation_seeds", ablation_seeds}};
}

RunConfig RunConfig::from_json(const json& j) {
  static const std::vector<std::string> known{"tag",          "seed",       "data_seed", "train_scenes", "val_scenes",
                                              "test_scenes",  "plot_scenes", "checkpoint_every", "codec_path", "data",
                                              "codec",        "model",      "train",     "sampler",      "metrics",
                                              "ablation_seeds", "config_hash"};
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  try {
    RunConfig c;
    c.tag = j.value("tag", c.tag);
    c.seed = j.value("seed", c.seed);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.train_scenes = j.value("train_scenes", c.train_scenes);
    c.val_scenes = j.value("val_scenes", c.val_scenes);
    c.test_scenes = j.value("test_scenes", c.test_scenes);
    c.plot_scenes = j.value("plot_scenes", c.plot_scenes);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.codec_path = j.value("codec_path", c.codec_path);
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("codec")) c.codec = codec_fit_from_json(j.at("codec"));
    if (j.contains("model")) c.model = model_shape_from_json(j.at("model"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j.at("sampler"));
    if (j.contains("metrics")) c.metrics = metric_config_from_json(j.at("metrics"));
    c.ablation_seeds = j.value("ablation_seeds", c.ablation_seeds);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

std::string RunConfig::hash() const { return hex64(fnv1a(resolved().to_json().dump())); }

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig c = RunConfig::from_json(read_json_file(path));
  c.validate();
  return c;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json_file(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

fs::path default_out_root() {
  const char* env = std::getenv("CMTRAJ_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// ---- stages ------------------------------------------------------------------

Datasets generate_datasets(const RunConfig& config) {
  Datasets d;
  d.train = generate_split(config.data_seed, Split::kTrain, config.train_scenes, config.data.scene);
  if (config.val_scenes > 0) d.val = generate_split(config.data_seed, Split::kVal, config.val_scenes, config.data.scene);
  d.test = generate_split(config.data_seed, Split::kTest, config.test_scenes, config.data.scene);
  return d;
}

LatentCodec fit_run_codec(const RunConfig& config, const std::vector<Scene>& train) {
  const RunConfig r = config.resolved();
  if (!r.codec_path.empty()) {
    if (!fs::exists(r.codec_path)) throw ConfigError("codec file not found: " + r.codec_path);
    json j = read_json_file(r.codec_path);
    LatentCodec c = LatentCodec::from_json(j.contains("codec") ? j.at("codec") : j);
    const int expect = 2 * r.data.scene.future_steps;
    if (c.traj_dim() != expect) {
      throw ConfigError("codec trajectory width " + std::to_string(c.traj_dim()) + " does not match " +
                        std::to_string(expect));
    }
    return c;
  }
  return fit_codec(local_futures(train, r.data.context), r.codec);
}

DenoiserConfig model_config(const RunConfig& config, const LatentCodec& codec) {
  DenoiserConfig m = denoiser_dims(config.data, codec.latent_dim());
  m.model_dim = config.model.model_dim;
  m.heads = config.model.heads;
  m.layers = config.model.layers;
  m.fourier_dim = config.model.fourier_dim;
  m.mlp_ratio = config.model.mlp_ratio;
  m.sigma_min = config.train.noise.sigma_min;
  m.validate();
  return m;
}

TrainedRun train_run(const RunConfig& config, const LatentCodec& codec, const std::vector<PreparedScene>& train,
                     const std::vector<PreparedScene>& val, const LogSink& log) {
  const RunConfig r = config.resolved();
  Trainer trainer(r.train, model_config(r, codec), codec);
  const std::string hash = r.hash();
  TrainedRun out{trainer.fit(train, val,
                             [&](const EpochLog& l, const Denoiser&, const Denoiser&) {
                               if (log) log(epoch_csv_row(hash, l));
                             }),
                 codec, r};
  return out;
}

// ---- pipeline ----------------------------------------------------------------

PipelineResult run_pipeline(const RunConfig& config, const fs::path& dir, const LogSink& log) {
  stage("config", [&] { config.validate(); });
  const RunConfig r = config.resolved();
  const std::string hash = r.hash();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };

  // Build in a sibling directory and move it into place only on success.
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  try {
    json snapshot = r.to_json();
    snapshot["config_hash"] = hash;
    write_json_file(tmp / "config.json", snapshot);

    const Datasets data = stage("data", [&] { return generate_datasets(r); });
    write_scenes_file((tmp / "test_scenes.jsonl").string(), data.test);
    say("data: " + std::to_string(data.train.size()) + " train, " + std::to_string(data.val.size()) + " val, " +
        std::to_string(data.test.size()) + " test scenes");

    const LatentCodec codec = stage("codec", [&] { return fit_run_codec(r, data.train); });
    json cj{{"config_hash", hash}, {"codec", codec.to_json()}};
    write_json_file(tmp / "codec.json", cj);
    say("codec: latent " + std::to_string(codec.latent_dim()) + ", round-trip error " +
        std::to_string(round_trip_error(codec, local_futures(data.test, r.data.context))) + " m");

    const auto ptrain = stage("data", [&] { return prepare_scenes(data.train, codec, r.data); });
    const auto pval = stage("data", [&] { return prepare_scenes(data.val, codec, r.data); });
    const auto ptest = stage("data", [&] { return prepare_scenes(data.test, codec, r.data); });

    std::ofstream train_log(tmp / "train_log.csv");
    train_log << epoch_csv_header() << '\n';
    const json meta{{"config_hash", hash}, {"tag", r.tag}};
    TrainResult trained = stage("train", [&] {
      Trainer trainer(r.train, model_config(r, codec), codec);
      return trainer.fit(ptrain, pval, [&](const EpochLog& l, const Denoiser& s, const Denoiser& t) {
        const std::string row = epoch_csv_row(hash, l);
        train_log << row << '\n' << std::flush;
        say("epoch " + std::to_string(l.epoch) + "/" + std::to_string(r.train.epochs) + " N=" + std::to_string(l.N) +
            " loss=" + std::to_string(l.mean_loss));
        if (r.checkpoint_every > 0 && l.epoch % r.checkpoint_every == 0 && l.epoch < r.train.epochs) {
          json m = meta;
          m["epoch"] = l.epoch;
          write_json_file(tmp / ("checkpoint_epoch" + std::to_string(l.epoch) + ".json"), checkpoint_json(s, t, codec, m));
        }
      });
    });
    train_log.close();
    json m = meta;
    m["epoch"] = r.train.epochs;
    const std::string ckpt_hash = hex64(checkpoint_hash(trained.student, trained.teacher));
    write_json_file(tmp / "checkpoint.json", checkpoint_json(trained.student, trained.teacher, codec, m));

    const PredictionSet preds = stage("sample", [&] { return sample_predictions(trained.student, codec, ptest, r.sampler); });
    {
      std::ofstream out(tmp / "predictions.jsonl");
      write_predictions_jsonl(out, preds);
    }
    const MetricReport report = stage("evaluate", [&] { return evaluate_predictions(preds, data.test, r.metrics); });
    json mj = report.to_json();
    mj["config_hash"] = hash;
    mj["checkpoint_hash"] = ckpt_hash;
    write_json_file(tmp / "metrics.json", mj);
    write_text_file(tmp / "metrics.csv", "config_hash," + MetricReport::csv_header() + "\n" + hash + "," +
                                             report.csv_row() + "\n");
    say("test: ADE_" + std::to_string(report.k) + "=" + std::to_string(report.ade_k) + " FDE_" +
        std::to_string(report.k) + "=" + std::to_string(report.fde_k));

    stage("plots", [&] {
      const int n = std::min<int>(r.plot_scenes, static_cast<int>(preds.scenes.size()));
      for (int i = 0; i < n; ++i) {
        const auto& p = preds.scenes[static_cast<std::size_t>(i)];
        write_text_file(tmp / ("scene_" + std::to_string(p.scene_id) + ".svg"),
                        scene_svg(data.test[static_cast<std::size_t>(i)], p,
                                  "scene " + std::to_string(p.scene_id) + " | config " + hash));
      }
    });

    // Every artifact is listed with the config hash that produced it.
    json manifest{{"config_hash", hash}, {"checkpoint_hash", ckpt_hash}, {"files", json::array()}};
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(tmp)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    manifest["files"] = names;
    write_json_file(tmp / "manifest.json", manifest);

    fs::remove_all(dir);
    if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
    fs::rename(tmp, dir);
    return {report, hash, ckpt_hash, dir};
  } catch (...) {
    std::error_code ec;
    fs::remove_all(tmp, ec);
    throw;
  }
}

// ---- ablations ---------------------------------------------------------------

std::vector<std::string> ablation_axes() { return {"shots", "fusion", "schedule", "q", "nfe", "priors"}; }

std::vector<Variant> ablation_variants(const RunConfig& base, const std::string& axis) {
  std::vector<Variant> out;
  auto add = [&](const std::string& name, auto&& edit) {
    RunConfig c = base;
    edit(c);
    c.tag = base.tag + "-" + axis + "-" + name;
    out.push_back({axis, name, c});
  };
  if (axis == "shots") {
    for (int k : {1, 6}) add("K=" + std::to_string(k), [&](RunConfig& c) { c.train.modes = k; });
  } else if (axis == "fusion") {
    for (Fusion f : {Fusion::kNone, Fusion::kFull, Fusion::kRandom2, Fusion::kProgressive, Fusion::kMidEnd}) {
      add(to_string(f), [&](RunConfig& c) { c.train.fusion = f; });
    }
  } else if (axis == "schedule") {
    for (TeacherMode m : {TeacherMode::kIct, TeacherMode::kEct}) {
      add(to_string(m), [&](RunConfig& c) { c.train.teacher.mode = m; });
    }
  } else if (axis == "q") {
    for (int q : {2, 4, 6, 8}) add("q=" + std::to_string(q), [&](RunConfig& c) { c.train.teacher.q = q; });
  } else if (axis == "nfe") {
    for (int n : {1, 2, 4}) add("NFE=" + std::to_string(n), [&](RunConfig& c) { c.sampler.nfe = n; });
  } else if (axis == "priors") {
    for (bool on : {true, false}) add(on ? "on" : "off", [&](RunConfig& c) { c.data.prior.enabled = on; });
  } else {
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw UsageError("unknown ablation axis '" + axis + "' (expected one of: " + known + ")");
  }
  return out;
}

std::vector<AblationRow> run_variants(const std::vector<Variant>& variants, const fs::path& dir, const LogSink& log) {
  for (const auto& v : variants) v.config.validate();
  fs::create_directories(dir);
  std::map<std::string, Datasets> data_cache;
  std::map<std::string, LatentCodec> codec_cache;
  struct Trained {
    Denoiser student;
    std::string log_csv;
    std::string checkpoint_hash;
  };
  std::map<std::string, Trained> model_cache;
  std::vector<AblationRow> rows;

  std::vector<std::uint64_t> seeds;
  for (const auto& v : variants) {
    for (auto s : v.config.ablation_seeds) {
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
  }
  // Seed-major order so partial results already cover every variant.
  for (std::uint64_t seed : seeds) {
    for (const auto& v : variants) {
      const auto& vs = v.config.ablation_seeds;
      if (std::find(vs.begin(), vs.end(), seed) == vs.end()) continue;
      RunConfig c = v.config;
      c.seed = seed;
      c = c.resolved();
      const std::string hash = c.hash();

      const std::string dk = data_key(c);
      if (!data_cache.count(dk)) data_cache.emplace(dk, stage("data", [&] { return generate_datasets(c); }));
      const Datasets& data = data_cache.at(dk);
      const std::string ck = codec_key(c);
      if (!codec_cache.count(ck)) codec_cache.emplace(ck, stage("codec", [&] { return fit_run_codec(c, data.train); }));
      const LatentCodec& codec = codec_cache.at(ck);
      const auto ptest = stage("data", [&] { return prepare_scenes(data.test, codec, c.data); });

      const std::string tk = training_key(c);
      if (!model_cache.count(tk)) {
        if (log) log(v.axis + " " + v.name + " seed " + std::to_string(seed) + ": training");
        const auto ptrain = stage("data", [&] { return prepare_scenes(data.train, codec, c.data); });
        const auto pval = stage("data", [&] { return prepare_scenes(data.val, codec, c.data); });
        std::string csv = epoch_csv_header() + "\n";
        TrainedRun t = stage("train", [&] { return train_run(c, codec, ptrain, pval, [&](const std::string& l) { csv += l + "\n"; }); });
        const std::string ck_hash = hex64(checkpoint_hash(t.result.student, t.result.teacher));
        model_cache.emplace(tk, Trained{std::move(t.result.student), csv, ck_hash});
      } else if (log) {
        log(v.axis + " " + v.name + " seed " + std::to_string(seed) + ": reusing trained model");
      }
      const Trained& trained = model_cache.at(tk);
      const Denoiser& model = trained.student;
      const std::int64_t calls_before = model.calls();
      const auto start = std::chrono::steady_clock::now();
      const PredictionSet preds = stage("sample", [&] { return sample_predictions(model, codec, ptest, c.sampler); });
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const MetricReport rep = stage("evaluate", [&] { return evaluate_predictions(preds, data.test, c.metrics); });

      const fs::path run_dir = dir / (c.tag + "-s" + std::to_string(seed) + "-" + hash);
      fs::create_directories(run_dir);
      json snap = c.to_json();
      snap["config_hash"] = hash;
      write_json_file(run_dir / "config.json", snap);
      write_text_file(run_dir / "train_log.csv", trained.log_csv);
      json mj = rep.to_json();
      mj["config_hash"] = hash;
      mj["checkpoint_hash"] = trained.checkpoint_hash;
      write_json_file(run_dir / "metrics.json", mj);

      rows.push_back({v.axis, v.name, seed, hash, rep, seconds, trained.checkpoint_hash, preds.evaluations,
                      model.calls() - calls_before});
      if (log) {
        std::ostringstream os;
        os << "  ADE_" << rep.k << "=" << rep.ade_k << " FDE_" << rep.k << "=" << rep.fde_k;
        log(os.str());
      }
    }
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis, const fs::path& dir,
                                      const LogSink& log) {
  return run_variants(ablation_variants(base, axis), dir, log);
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "axis,variant,seed,config_hash,checkpoint_hash," << MetricReport::csv_header()
     << ",evaluations,calls,sample_seconds\n";
  os << std::setprecision(8);
  for (const auto& r : rows) {
    os << r.axis << ',' << r.variant << ',' << r.seed << ',' << r.config_hash << ',' << r.checkpoint_hash << ','
       << r.report.csv_row() << ',' << r.evaluations << ',' << r.calls << ',' << r.sample_seconds << '\n';
  }
  return os.str();
}

std::string ablation_summary_csv(const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  std::ostringstream os;
  os << std::setprecision(8);
  os << "axis,variant,seeds,config_hashes,ade_1,ade_k,fde_1,fde_k,brier_fde_k,miss_rate_k,collision_rate,nfe,"
        "sample_seconds\n";
  for (const auto& name : order) {
    const auto& g = groups.at(name);
    double a1 = 0, ak = 0, f1 = 0, fk = 0, br = 0, mr = 0, cr = 0, sec = 0;
    std::string hashes;
    for (const auto* r : g) {
      a1 += r->report.ade_1;
      ak += r->report.ade_k;
      f1 += r->report.fde_1;
      fk += r->report.fde_k;
      br += r->report.brier_fde_k;
      mr += r->report.miss_rate_k;
      cr += r->report.collision_rate;
      sec += r->sample_seconds;
      hashes += (hashes.empty() ? "" : ";") + r->config_hash;
    }
    const double n = static_cast<double>(g.size());
    os << g.front()->axis << ',' << name << ',' << g.size() << ',' << hashes << ',' << a1 / n << ',' << ak / n << ','
       << f1 / n << ',' << fk / n << ',' << br / n << ',' << mr / n << ',' << cr / n << ',' << g.front()->report.nfe
       << ',' << sec / n << '\n';
  }
  return os.str();
}

// ---- plots -------------------------------------------------------------------

std::string scene_svg(const Scene& scene, const ScenePrediction& pred, const std::string& caption) {
  static const char* kModeColors[] = {"#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
                                      "#f032e6", "#bfef45", "#469990", "#9a6324"};
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  auto grow = [&](Vec2 p) {
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  };
  for (const auto& a : scene.agents) {
    for (auto p : a.history) grow(p);
    for (auto p : a.future) grow(p);
  }
  for (const auto& mode : pred.modes) {
    for (const auto& t : mode) {
      for (auto p : t) grow(p);
    }
  }
  const double pad = 5.0;
  x0 -= pad;
  y0 -= pad;
  x1 += pad;
  y1 += pad;
  const double size = 600.0;
  const double s = size / std::max(x1 - x0, y1 - y0);
  auto px = [&](Vec2 p) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << (p.x - x0) * s << ',' << size - (p.y - y0) * s;
    return os.str();
  };
  auto inside = [&](Vec2 p) { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; };
  auto path = [&](const Trajectory& t, const std::string& style) {
    std::string pts;
    for (auto p : t) pts += px(p) + ' ';
    return "  <polyline points=\"" + pts + "\" fill=\"none\" " + style + "/>\n";
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 40
     << "\" viewBox=\"0 0 " << size << ' ' << size + 40 << "\">\n";
  os << "  <title>" << caption << "</title>\n";
  os << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (const auto& line : scene.map) {
    Trajectory t;
    for (const auto& p : line.points) {
      const Vec2 v{p[0], p[1]};
      if (inside(v)) t.push_back(v);
    }
    if (t.size() > 1) os << path(t, "stroke=\"#cccccc\" stroke-width=\"1\"");
  }
  for (int m = 0; m < pred.num_modes(); ++m) {
    const std::string color = kModeColors[m % 10];
    for (int a = 0; a < pred.num_agents(); ++a) {
      const auto& t = pred.modes[static_cast<std::size_t>(m)][static_cast<std::size_t>(a)];
      Trajectory full{scene.agents[static_cast<std::size_t>(a)].history.back()};
      full.insert(full.end(), t.begin(), t.end());
      os << path(full, "stroke=\"" + color + "\" stroke-width=\"1.5\" stroke-opacity=\"0.85\"");
    }
  }
  for (const auto& a : scene.agents) {
    Trajectory gt{a.history.back()};
    gt.insert(gt.end(), a.future.begin(), a.future.end());
    os << path(gt, "stroke=\"#000000\" stroke-width=\"2\" stroke-dasharray=\"5,3\"");
    os << path(a.history, "stroke=\"#555555\" stroke-width=\"3\"");
    const std::string c = px(a.history.back());
    const auto comma = c.find(',');
    os << "  <circle cx=\"" << c.substr(0, comma) << "\" cy=\"" << c.substr(comma + 1)
       << "\" r=\"4\" fill=\"#555555\"/>\n";
  }
  os << "  <text x=\"8\" y=\"" << size + 16 << "\" font-family=\"sans-serif\" font-size=\"12\">" << caption
     << "</text>\n";
  os << "  <text x=\"8\" y=\"" << size + 32 << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#555555\">"
     << "grey: history, dashed: ground truth, colours: predicted modes</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace cmtraj
