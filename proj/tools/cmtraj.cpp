// Command-line front end: data, codec, schedule, train, sample, evaluate, ablate, pipeline.

#include <CLI11.hpp>

#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cmtraj/errors.hpp"
#include "cmtraj/experiment.hpp"

namespace fs = std::filesystem;
using namespace cmtraj;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kNumerical = 3, kUsage = 64 };

struct Common {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load(const Common& c, CLI::App* sub) {
  RunConfig r = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (sub->count("--seed")) r.seed = c.seed;
  r.validate();
  return r.resolved();
}

fs::path out_dir(const Common& c, const RunConfig& r, const std::string& kind) {
  if (!c.out.empty()) return c.out;
  return default_out_root() / (kind + "-" + r.tag + "-" + r.hash());
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::vector<Scene> scenes_or_split(const std::string& path, const RunConfig& r) {
  if (!path.empty()) return read_scenes_file(path);
  return generate_split(r.data_seed, Split::kTest, r.test_scenes, r.data.scene);
}

void write_csv(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_file(path, text);
}

int report(const std::string& stage, const std::exception& e, int code) {
  std::cerr << "cmtraj: " << stage << " failed: " << e.what() << '\n';
  return code;
}

// Unwraps a StageError chain to name the stage and pick the exit code.
int handle(const std::string& command) {
  std::string stage = command;
  try {
    throw;
  } catch (const StageError& e) {
    stage = e.stage();
    try {
      std::rethrow_if_nested(e);
    } catch (const ConfigError& inner) {
      return report(stage, inner, kConfig);
    } catch (const NumericalError& inner) {
      return report(stage, inner, kNumerical);
    } catch (const std::exception& inner) {
      return report(stage, inner, kOther);
    }
    return report(stage, e, kOther);
  } catch (const UsageError& e) {
    return report(stage, e, kUsage);
  } catch (const ConfigError& e) {
    return report(stage, e, kConfig);
  } catch (const NumericalError& e) {
    return report(stage, e, kNumerical);
  } catch (const std::exception& e) {
    return report(stage, e, kOther);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consistency-model multi-agent trajectory prediction"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* s, bool need_checkpoint = false) {
    s->add_option("--config", c.config, "run config JSON");
    s->add_option("--seed", c.seed, "override the run seed");
    s->add_option("--out", c.out, "output path (default under $CMTRAJ_OUT_ROOT or ./runs)");
    auto* ck = s->add_option("--checkpoint", c.checkpoint, "checkpoint JSON");
    if (need_checkpoint) ck->required();
  };

  auto* data = app.add_subcommand("data", "scene generation");
  data->require_subcommand(1);
  auto* data_gen = data->add_subcommand("generate", "write scenes as JSON-lines");
  common(data_gen);
  int count = -1;
  std::string split_name = "train";
  data_gen->add_option("--count", count, "number of scenes (default from config)");
  data_gen->add_option("--split", split_name, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* codec = app.add_subcommand("codec", "latent codec");
  codec->require_subcommand(1);
  auto* codec_fit = codec->add_subcommand("fit", "fit the codec on the training split");
  common(codec_fit);
  auto* codec_eval = codec->add_subcommand("eval", "evaluate a codec on the test split");
  common(codec_eval);
  std::string codec_file;
  codec_eval->add_option("--codec", codec_file, "codec JSON")->required();

  auto* sched = app.add_subcommand("schedule", "noise schedule");
  sched->require_subcommand(1);
  auto* inspect = sched->add_subcommand("inspect", "dump sigma grid, pmf and teacher ratio ranges as CSV");
  common(inspect);

  auto* train = app.add_subcommand("train", "train a denoiser");
  common(train);

  auto* sample = app.add_subcommand("sample", "sample predictions from a checkpoint");
  common(sample, true);
  std::string scenes_file;
  int nfe = 0;
  sample->add_option("--scenes", scenes_file, "scene JSON-lines (default: test split from config)");
  sample->add_option("--nfe", nfe, "override sampler NFE");

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against scenes");
  common(evaluate);
  std::string preds_file;
  evaluate->add_option("--predictions", preds_file, "predictions JSON-lines")->required();
  evaluate->add_option("--scenes", scenes_file, "scene JSON-lines (default: test split from config)");

  auto* ablate = app.add_subcommand("ablate", "train and compare variants along one axis");
  common(ablate);
  std::string axis;
  ablate->add_option("--axis", axis, "shots | fusion | schedule | q | nfe | priors")->required();

  auto* pipeline = app.add_subcommand("pipeline", "data, codec, train, sample, evaluate and plots");
  common(pipeline);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  std::string command = "config";
  try {
    if (*data_gen) {
      const RunConfig r = load(c, data_gen);
      command = "data";
      const Split split = split_name == "train" ? Split::kTrain : split_name == "val" ? Split::kVal : Split::kTest;
      const int n = count >= 0 ? count : split == Split::kTrain ? r.train_scenes
                                       : split == Split::kVal   ? r.val_scenes
                                                                : r.test_scenes;
      const fs::path out = c.out.empty() ? out_dir(c, r, "data") / (split_name + "_scenes.jsonl") : fs::path(c.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      // The config hash travels in the file name when none is given.
      write_scenes_file(out.string(), generate_split(r.data_seed, split, n, r.data.scene));
      std::cout << out.string() << '\n';
    } else if (*codec_fit) {
      const RunConfig r = load(c, codec_fit);
      command = "codec";
      const auto scenes = generate_split(r.data_seed, Split::kTrain, r.train_scenes, r.data.scene);
      CodecLosses losses;
      const LatentCodec fitted = fit_codec(local_futures(scenes, r.data.context), r.codec, &losses);
      const fs::path out = c.out.empty() ? out_dir(c, r, "codec") / "codec.json" : fs::path(c.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      write_json_file(out, {{"config_hash", r.hash()}, {"codec", fitted.to_json()}});
      std::cout << json{{"rec", losses.rec}, {"reg", losses.reg}, {"var", losses.var}, {"total", losses.total},
                        {"path", out.string()}}.dump()
                << '\n';
    } else if (*codec_eval) {
      const RunConfig r = load(c, codec_eval);
      command = "codec";
      if (!fs::exists(codec_file)) throw ConfigError("codec file not found: " + codec_file);
      const json j = read_json_file(codec_file);
      const LatentCodec lc = LatentCodec::from_json(j.contains("codec") ? j.at("codec") : j);
      const auto scenes = generate_split(r.data_seed, Split::kTest, r.test_scenes, r.data.scene);
      const Matrix fut = local_futures(scenes, r.data.context);
      if (fut.cols() != lc.traj_dim()) throw ConfigError("codec width does not match the scene config");
      const CodecLosses l = evaluate_codec(lc, fut, r.codec.weights);
      const json res{{"config_hash", r.hash()}, {"round_trip_error_m", round_trip_error(lc, fut)},
                     {"rec", l.rec},           {"reg", l.reg},
                     {"var", l.var},           {"total", l.total}};
      if (!c.out.empty()) write_json_file(c.out, res);
      std::cout << res.dump() << '\n';
    } else if (*inspect) {
      const RunConfig r = load(c, inspect);
      command = "schedule";
      const fs::path dir = out_dir(c, r, "schedule");
      fs::create_directories(dir);
      const auto& ns = r.train.noise;
      std::ostringstream grid, pmf, table;
      grid << std::setprecision(17) << "config_hash,N,index,sigma\n";
      pmf << std::setprecision(17) << "config_hash,N,index,sigma,probability,unnormalized\n";
      for (int stage = 1; stage <= 3; ++stage) {
        const int N = ns.base_N << (stage - 1);
        const auto s = build_sigmas(N, ns.sigma_min, ns.sigma_max, ns.rho);
        const auto p = build_pmf(s, ns.mu, ns.spread);
        const auto raw = lognormal_mass(s, ns.mu, ns.spread);
        for (int i = 0; i <= N; ++i) grid << r.hash() << ',' << N << ',' << i << ',' << s[i] << '\n';
        for (int i = 1; i <= N; ++i) {
          pmf << r.hash() << ',' << N << ',' << i << ',' << s[i] << ',' << p.pmf[static_cast<std::size_t>(i)] << ','
              << raw[static_cast<std::size_t>(i)] << '\n';
        }
      }
      table << std::fixed << std::setprecision(4) << "config_hash,q,stage,N,ratio_lo,ratio_hi\n";
      for (int q : {2, 4, 6, 8}) {
        for (int stage = 1; stage <= 3; ++stage) {
          const auto rr = ratio_range(q, stage, r.train.teacher.k, r.train.teacher.b);
          table << r.hash() << ',' << q << ',' << stage << ',' << (ns.base_N << (stage - 1)) << ',' << rr.lo << ','
                << rr.hi << '\n';
        }
      }
      write_csv(dir / "sigma_grid.csv", grid.str());
      write_csv(dir / "pmf.csv", pmf.str());
      write_csv(dir / "ratio_table.csv", table.str());
      std::cout << table.str();
    } else if (*train) {
      const RunConfig r = load(c, train);
      const fs::path dir = out_dir(c, r, "train");
      const std::string hash = r.hash();
      command = "data";
      const Datasets d = generate_datasets(r);
      command = "codec";
      const LatentCodec lc = fit_run_codec(r, d.train);
      command = "data";
      const auto ptrain = prepare_scenes(d.train, lc, r.data);
      const auto pval = prepare_scenes(d.val, lc, r.data);
      command = "train";
      fs::create_directories(dir);
      json snap = r.to_json();
      snap["config_hash"] = hash;
      write_json_file(dir / "config.json", snap);
      std::ofstream log(dir / "train_log.csv");
      log << "config_hash,epoch,N,mean_loss,val_ade,val_fde,teacher_fraction,seconds\n";
      const TrainedRun t = train_run(r, lc, ptrain, pval, [&](const std::string& row) {
        log << row << '\n' << std::flush;
        log_line(row);
      });
      write_json_file(dir / "checkpoint.json",
                      checkpoint_json(t.result.student, t.result.teacher, lc, {{"config_hash", hash}, {"tag", r.tag}}));
      std::cout << (dir / "checkpoint.json").string() << '\n';
    } else if (*sample) {
      const RunConfig r0 = load(c, sample);
      command = "sample";
      if (!fs::exists(c.checkpoint)) throw ConfigError("checkpoint not found: " + c.checkpoint);
      const Checkpoint ck = checkpoint_from_json(read_json_file(c.checkpoint));
      RunConfig r = r0;
      if (nfe > 0) r.sampler.nfe = nfe;
      r.validate();
      const auto scenes = scenes_or_split(scenes_file, r);
      const auto prepared = prepare_scenes(scenes, ck.codec, r.data);
      const PredictionSet preds = sample_predictions(ck.student, ck.codec, prepared, r.sampler);
      const fs::path out = c.out.empty() ? out_dir(c, r, "sample") / "predictions.jsonl" : fs::path(c.out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      {
        std::ofstream os(out);
        write_predictions_jsonl(os, preds);
      }
      fs::path meta = out;
      meta.replace_extension(".meta.json");
      write_json_file(meta, {{"config_hash", r.hash()},
                             {"checkpoint", ck.meta},
                             {"nfe", preds.nfe},
                             {"evaluations", preds.evaluations},
                             {"evaluations_per_scene_mode", preds.evaluations / std::max<std::int64_t>(1, static_cast<std::int64_t>(preds.scenes.size()) * r.sampler.modes)},
                             {"wall_seconds", preds.wall_seconds}});
      std::cout << out.string() << '\n';
    } else if (*evaluate) {
      const RunConfig r = load(c, evaluate);
      command = "evaluate";
      std::ifstream in(preds_file);
      if (!in) throw ConfigError("cannot open predictions " + preds_file);
      const PredictionSet preds = read_predictions_jsonl(in);
      const auto scenes = scenes_or_split(scenes_file, r);
      const MetricReport rep = evaluate_predictions(preds, scenes, r.metrics);
      json j = rep.to_json();
      j["config_hash"] = r.hash();
      if (!c.out.empty()) {
        const fs::path out = c.out;
        fs::create_directories(out);
        write_json_file(out / "metrics.json", j);
        write_text_file(out / "metrics.csv",
                        "config_hash," + MetricReport::csv_header() + "\n" + r.hash() + "," + rep.csv_row() + "\n");
      }
      std::cout << j.dump() << '\n';
    } else if (*ablate) {
      const RunConfig r = load(c, ablate);
      command = "ablate";
      const auto variants = ablation_variants(r, axis);
      const fs::path dir = c.out.empty() ? default_out_root() / ("ablate-" + axis + "-" + r.tag + "-" + r.hash()) : fs::path(c.out);
      const auto rows = run_variants(variants, dir, log_line);
      write_text_file(dir / ("ablation_" + axis + ".csv"), ablation_csv(rows));
      const std::string summary = ablation_summary_csv(rows);
      write_text_file(dir / ("ablation_" + axis + "_summary.csv"), summary);
      std::cout << summary;
    } else if (*pipeline) {
      const RunConfig r = load(c, pipeline);
      command = "pipeline";
      const auto res = run_pipeline(r, out_dir(c, r, "pipeline"), log_line);
      std::cout << res.dir.string() << '\n' << res.report.to_json().dump() << '\n';
    }
  } catch (...) {
    return handle(command);
  }
  return kOk;
}
