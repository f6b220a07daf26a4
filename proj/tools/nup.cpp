// Command-line entry point: synth-masks, pretrain, export-weights, evaluate, probe.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "nup/checkpoint.hpp"
#include "nup/config.hpp"
#include "nup/errors.hpp"
#include "nup/evaluation.hpp"
#include "nup/finetune_probe.hpp"
#include "nup/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nup;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "Override a config field, e.g. --set train.lambda_cyc=5")
      ->type_name("KEY=VALUE")
      ->allow_extra_args(false);
  sub->add_option("--seed", c.seed, "Seed (overrides NUP_SEED and the config file)");
}

config::RunConfig resolve(const Common& c, std::vector<std::string> flag_overrides) {
  config::Sources s;
  if (!c.config_file.empty()) s.file = c.config_file;
  if (const char* env = std::getenv("NUP_SEED")) s.env_seed = env;
  s.overrides = c.overrides;
  // dedicated flags are the most specific source
  for (auto& o : flag_overrides) s.overrides.push_back(std::move(o));
  if (c.seed) s.overrides.push_back("seed=" + std::to_string(*c.seed));
  auto cfg = config::resolve(s);
  std::cout << "resolved config:\n" << config::to_json(cfg).dump(2) << std::endl;
  return cfg;
}

void write_beside(const fs::path& file, const config::RunConfig& cfg) {
  const auto base = file.string();
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream(base + ".config.json") << config::to_json(cfg).dump(2) << "\n";
  std::ofstream(base + ".seed.txt") << cfg.seed << "\n";
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// -- subcommands ------------------------------------------------------------------

int synth_masks(const config::RunConfig& cfg, const fs::path& out, int probe_count, const fs::path& probe_generator) {
  data::DeskDatasetSpec spec;
  spec.masks = cfg.dataset.masks;
  spec.histology = cfg.dataset.histology;
  spec.seed = cfg.seed;
  spec.synth = cfg.synth;
  spec.synth.image_size = cfg.dataset.source_size;
  const auto manifest = data::write_desk_dataset(out, spec);
  std::cout << "wrote " << spec.masks << " masks and " << spec.histology << " histology images, manifest "
            << manifest.string() << "\n";
  if (probe_count > 0) {
    gen::CoModulatedGenerator G{nullptr};
    if (!probe_generator.empty()) {
      const auto ckpt = ckpt::read_archive(probe_generator);
      const auto stored = config::from_archive_meta(ckpt.meta);
      G = train::make_generator(stored ? stored->model : cfg.model, 0);
      ckpt::load_module(ckpt, "G", *G);
    }
    const auto pm = probe::write_probe_set(out / "probe", {probe_count, cfg.data.crop_size, cfg.seed},
                                           G.is_empty() ? nullptr : G.get());
    std::cout << "wrote probe set " << pm.string() << "\n";
  }
  config::write_resolved(out, cfg);
  return 0;
}

int pretrain(const config::RunConfig& cfg, const fs::path& manifest, const fs::path& out, const std::string& resume) {
  const auto dataset = data::Dataset::load(data::read_manifest(manifest));
  train::Trainer trainer(cfg.model, cfg.train);
  trainer.set_config_snapshot(config::to_json(cfg));
  trainer.set_diagnostics_dir(out);
  fs::create_directories(out);
  config::write_resolved(out, cfg);

  data::UnpairedBatcher batcher(dataset, cfg.train.batch_size, cfg.data, cfg.seed);
  if (!resume.empty()) {
    const auto archive = ckpt::read_archive(resume);
    if (const auto stored = config::from_archive_meta(archive.meta);
        stored && config::to_json(*stored)["model"] != config::to_json(cfg)["model"])
      throw ConfigError("model: configuration differs from the checkpoint being resumed");
    trainer.load(archive);
    // replay the batch stream so the resumed run sees the same data
    for (std::int64_t i = 0; i < trainer.iteration(); ++i) batcher.next();
    std::cout << "resumed at iteration " << trainer.iteration() << " (stage " << trainer.stage() + 1 << ")\n";
  }
  std::ofstream log(out / "log.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  trainer.run(batcher, log, out, [&](const train::StepInfo& s) {
    if (trainer.iteration() % 50 == 0)
      std::cerr << "iter " << trainer.iteration() << " stage " << trainer.stage() + 1 << " total " << s.losses.total
                << " l_cyc " << s.losses.l_cyc << " p " << s.ada_p << "\n";
  });
  std::cout << "finished at iteration " << trainer.iteration() << ", checkpoints in " << out.string() << "\n";
  return 0;
}

int export_weights(const config::RunConfig& cfg, const fs::path& ckpt_path, const std::string& scope,
                   const fs::path& out) {
  ckpt::export_weights(ckpt_path, ckpt::parse_scope(scope), out);
  write_beside(out, cfg);
  std::cout << "exported scope " << scope << " to " << out.string() << "\n";
  return 0;
}

int evaluate(const config::RunConfig& cfg, const fs::path& pred, const fs::path& gt, const std::string& names,
             const fs::path& out) {
  const auto list = metrics::parse_metric_list(names);
  const auto pairs = metrics::read_labeling_dirs(pred, gt);
  auto report = metrics::metric_report(pairs.preds, pairs.gts, list);
  write_json(out, report);
  write_beside(out, cfg);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_probe(const config::RunConfig& cfg, const fs::path& weights, const std::string& task, const fs::path& manifest,
              const fs::path& out) {
  const auto exported = ckpt::read_archive(weights);
  // the export carries the pretraining config; its segmenter shape must be reused
  auto seg_cfg = cfg.model.segmenter;
  if (const auto stored = config::from_archive_meta(exported.meta)) seg_cfg = stored->model.segmenter;
  const auto dataset = data::Dataset::load(data::read_manifest(manifest));
  json report;
  if (task == "linear") {
    report = probe::linear_probe(exported, seg_cfg, probe::labeled_images(dataset), cfg.linear).to_json();
  } else {
    report = probe::detection_finetune(exported, seg_cfg, dataset, cfg.detect).to_json();
  }
  report["weights"] = weights.string();
  write_json(out, report);
  write_beside(out, cfg);
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nuclei pretraining toolkit: synthetic masks, unpaired pretraining, export and downstream checks"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Common common;
  fs::path out, manifest, ckpt_path, pred, gt, weights;
  std::string scope, metric_names = "aji,f1,mpq,dice,hausdorff", task, resume;
  std::optional<int> count, histology;
  int probe_count = 0;
  fs::path probe_generator;
  std::optional<double> lambda_cyc;

  auto* s_synth = app.add_subcommand("synth-masks", "Write synthetic masks, annotations and stand-in histology");
  add_common(s_synth, common);
  s_synth->add_option("--out", out, "Output directory")->required();
  s_synth->add_option("--count", count, "Number of mask images (dataset.masks)");
  s_synth->add_option("--histology", histology, "Number of stand-in histology images (dataset.histology)");
  s_synth->add_option("--probe", probe_count, "Also write a labeled probe set of this size under <out>/probe");
  s_synth->add_option("--probe-generator", probe_generator, "Checkpoint whose G renders the probe images")
      ->check(CLI::ExistingFile);

  auto* s_pre = app.add_subcommand("pretrain", "Joint two-stage pretraining of G and S");
  add_common(s_pre, common);
  s_pre->add_option("--data", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  s_pre->add_option("--out", out, "Output directory for logs and checkpoints")->required();
  s_pre->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  s_pre->add_option("--lambda-cyc", lambda_cyc, "Cycle-consistency weight (train.lambda_cyc)");

  auto* s_exp = app.add_subcommand("export-weights", "Export parts of S from a checkpoint");
  add_common(s_exp, common);
  s_exp->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  s_exp->add_option("--scope", scope, "encoder | fpn | all")->required()->check(
      CLI::IsMember({"encoder", "fpn", "all", "all_available"}));
  s_exp->add_option("--out", out, "Exported weight file")->required();

  auto* s_eval = app.add_subcommand("evaluate", "Score predicted instance labelings against ground truth");
  add_common(s_eval, common);
  s_eval->add_option("--pred", pred, "Directory of predictions (.json annotations or 16-bit .png label maps)")
      ->required();
  s_eval->add_option("--gt", gt, "Directory of ground truth, same file stems")->required();
  s_eval->add_option("--metrics", metric_names, "Comma-separated subset of aji,f1,mpq,dice,hausdorff");
  s_eval->add_option("--out", out, "Report file")->required();

  auto* s_probe = app.add_subcommand("probe", "Linear probe or detection fine-tune from exported weights");
  add_common(s_probe, common);
  s_probe->add_option("--weights", weights, "Exported weight file")->required()->check(CLI::ExistingFile);
  s_probe->add_option("--task", task, "linear | detect")->required()->check(CLI::IsMember({"linear", "detect"}));
  s_probe->add_option("--data", manifest, "Manifest with labeled images in domain_x")->required()->check(
      CLI::ExistingFile);
  s_probe->add_option("--out", out, "Report file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // name stray tokens first; CLI11 reports missing required options before extras
    std::vector<std::string> stray = app.remaining();
    for (const auto* sub : app.get_subcommands({}))
      for (const auto& r : sub->remaining()) stray.push_back(r);
    if (!stray.empty()) {
      std::cerr << "unrecognized argument: " << stray.front() << "\n" << app.help();
      return 2;
    }
    app.exit(e);
    return 2;
  }

  try {
    torch::set_num_threads(1);
    if (*s_synth) {
      std::vector<std::string> fl;
      if (count) fl.push_back("dataset.masks=" + std::to_string(*count));
      if (histology) fl.push_back("dataset.histology=" + std::to_string(*histology));
      return synth_masks(resolve(common, fl), out, probe_count, probe_generator);
    }
    if (*s_pre) {
      std::vector<std::string> fl;
      if (lambda_cyc) fl.push_back("train.lambda_cyc=" + json(*lambda_cyc).dump());
      const auto cfg = resolve(common, fl);
      torch::set_num_threads(cfg.train.threads);
      return pretrain(cfg, manifest, out, resume);
    }
    if (*s_exp) return export_weights(resolve(common, {}), ckpt_path, scope, out);
    if (*s_eval) return evaluate(resolve(common, {}), pred, gt, metric_names, out);
    if (*s_probe) return run_probe(resolve(common, {}), weights, task, manifest, out);
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
