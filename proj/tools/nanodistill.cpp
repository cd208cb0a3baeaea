// Command-line front end. Exit codes: 0 ok, 1 other failure, 2 usage or
// config, 3 backend, 4 memory budget.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "nanodistill/pipeline.hpp"

namespace nd = nanodistill;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kBackend = 3, kBudget = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> backend;
  std::optional<std::size_t> budget;
  std::optional<std::string> run_dir;
  std::optional<std::string> teacher, student, dataset;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "pipeline config (JSON)");
  app->add_option("--seed", c.seed, "global seed");
  app->add_option("--backend", c.backend, "data backend")->check(CLI::IsMember({"mock", "remote", "local"}));
  app->add_option("--budget-bytes", c.budget, "memory budget for the quantized model")->check(CLI::PositiveNumber);
  app->add_option("--run-dir", c.run_dir, "output directory (default: <output_dir>/<timestamp>-s<seed>)");
  app->add_option("--teacher", c.teacher, "teacher checkpoint");
  app->add_option("--student", c.student, "student checkpoint");
  app->add_option("--dataset", c.dataset, "Alpaca JSONL dataset");
  app->add_flag("-q,--quiet", c.quiet, "no progress output");
}

nd::PipelineConfig resolve(const Common& c) {
  nd::PipelineConfig cfg = c.config.empty() ? nd::PipelineConfig{} : nd::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.backend) cfg.backend = *c.backend;
  if (c.budget) cfg.memory_budget = *c.budget;
  if (c.teacher) cfg.paths.teacher = *c.teacher;
  if (c.student) cfg.paths.student = *c.student;
  if (c.dataset) cfg.paths.dataset = *c.dataset;
  cfg.validate();
  return cfg;
}

fs::path run_dir(const Common& c, const nd::PipelineConfig& cfg) {
  if (c.run_dir) {
    fs::create_directories(*c.run_dir);
    return *c.run_dir;
  }
  return nd::make_run_dir(cfg.paths.output_dir, cfg.seed);
}

nd::Progress progress(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& s) { std::cerr << s << std::endl; };
}

fs::path require_dataset(const nd::PipelineConfig& cfg) {
  if (!cfg.paths.dataset) throw nd::ConfigError("a dataset is required (--dataset or paths.dataset)");
  return *cfg.paths.dataset;
}

// Checkpoints from the config, pretrained (and saved under dir/models) when absent.
nd::Backbones backbones(const nd::PipelineConfig& cfg, const fs::path& dir, const Common& c) {
  nd::LossLog log;
  if (!cfg.paths.teacher || !cfg.paths.student) log = nd::LossLog(dir / "losses.jsonl");
  nd::Backbones bb = nd::prepare_backbones(cfg, &log, progress(c));
  fs::create_directories(dir / "models");
  if (!cfg.paths.teacher) nd::save_checkpoint(bb.teacher, dir / "models" / "teacher.ckpt");
  if (!cfg.paths.student) nd::save_checkpoint(bb.student, dir / "models" / "student.ckpt");
  return bb;
}

void snapshot(const nd::PipelineConfig& cfg, const fs::path& dir) {
  nd::io::write_text(dir / "config.json", nd::to_json(cfg).dump(2) + "\n");
}

void print_size(const nd::SizeReport& s) {
  std::printf("size: %zu bytes quantized, %zu bytes at 16-bit, ratio %.3fx", s.quantized_bytes, s.full_precision_bytes,
              s.ratio());
  if (s.budget) std::printf(", budget %zu bytes", *s.budget);
  std::printf("\n");
  if (!s.warning.empty()) std::printf("warning: %s\n", s.warning.c_str());
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Common& c, const std::optional<std::string>& out, const std::optional<std::string>& seed_spec,
                 bool resume) {
  nd::PipelineConfig cfg = resolve(c);
  if (seed_spec) {
    if (!fs::exists(*seed_spec)) throw nd::ConfigError("seed spec file not found: " + *seed_spec);
    cfg.seed_spec = nd::load_seed_spec(*seed_spec);
  }
  fs::path target;
  if (out) {
    target = *out;
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
  } else {
    const fs::path dir = run_dir(c, cfg);
    fs::create_directories(dir / "data");
    snapshot(cfg, dir);
    target = dir / "data" / "dataset.jsonl";
  }
  std::optional<nd::NanoModel> teacher;
  if (cfg.backend == "local") {
    if (!cfg.paths.teacher) throw nd::ConfigError("the local backend needs a teacher checkpoint (--teacher)");
    teacher = nd::load_checkpoint(*cfg.paths.teacher);
  }
  const nd::DatasetSummary s = nd::gen_data(cfg, target, resume, teacher ? &*teacher : nullptr);
  std::printf("wrote %zu records to %s (generated %zu, discarded %zu, dropped %zu, requests %zu)\n", s.accepted,
              target.string().c_str(), s.generated, s.discarded, s.dropped, s.requests);
  std::printf("report: %s\n", nd::report_path(target).string().c_str());
  return kOk;
}

int cmd_pretrain(const Common& c) {
  const nd::PipelineConfig cfg = resolve(c);
  const fs::path dir = run_dir(c, cfg);
  snapshot(cfg, dir);
  backbones(cfg, dir, c);
  std::printf("backbones in %s\n", (dir / "models").string().c_str());
  return kOk;
}

int cmd_hpo(const Common& c, std::optional<std::size_t> trials, const std::vector<std::string>& optimizers,
            bool resume) {
  nd::PipelineConfig cfg = resolve(c);
  if (trials) cfg.hpo.trials = *trials;
  if (!optimizers.empty()) {
    cfg.hpo.optimizers.clear();
    for (const auto& o : optimizers) cfg.hpo.optimizers.push_back(nd::optimizer_from_string(o));
  }
  cfg.validate();
  const fs::path dataset = require_dataset(cfg);
  const fs::path dir = run_dir(c, cfg);
  fs::create_directories(dir / "hpo");
  snapshot(cfg, dir);
  const nd::Backbones bb = backbones(cfg, dir, c);
  const nd::DistillData data = nd::prepare_distill_data(cfg, dataset, bb.teacher, bb.student, cfg.seed);
  std::vector<std::vector<std::string>> rows;
  for (nd::OptimizerKind opt : cfg.hpo.optimizers) {
    const std::string name = nd::to_string(opt);
    const nd::HpoResult r =
        nd::run_hpo(cfg, bb.student, data, opt, dir / "hpo" / ("trials_" + name + ".jsonl"), resume, nullptr, progress(c));
    nd::save_best_params(r.best, dir / "hpo" / ("best_" + name + ".json"));
    rows.push_back(nd::table6_row(cfg.seed_spec.task, r.best));
  }
  const std::string table = nd::render_table(nd::table6_header(), rows);
  nd::io::write_text(dir / "hpo" / "table6.txt", table);
  std::printf("%s", table.c_str());
  std::printf("best params in %s\n", (dir / "hpo").string().c_str());
  return kOk;
}

int cmd_distill(const Common& c, const std::string& params_path, const std::optional<std::string>& out) {
  const nd::PipelineConfig cfg = resolve(c);
  const fs::path dataset = require_dataset(cfg);
  const nd::BestParams best = nd::load_best_params(params_path);
  const fs::path dir = run_dir(c, cfg);
  fs::create_directories(dir / "metrics");
  snapshot(cfg, dir);
  const nd::Backbones bb = backbones(cfg, dir, c);
  const nd::DistillData data = nd::prepare_distill_data(cfg, dataset, bb.teacher, bb.student, cfg.seed);
  const nd::DistillTrial trial = best.decode();
  const std::string name = nd::to_string(best.optimizer);
  const nd::DistillOutcome d = nd::distill_student(
      bb.student, data, trial, nd::Rng::mix_seed(cfg.seed, nd::stream::kDistill + static_cast<std::uint64_t>(best.optimizer)));
  const fs::path ckpt = out ? fs::path(*out) : dir / "models" / ("student_" + name + ".ckpt");
  nd::save_checkpoint(d.merged, ckpt);
  nd::io::write_text(dir / "metrics" / ("distill_" + name + ".json"), nd::metrics_json(d.metrics, trial).dump(2) + "\n");
  std::printf("validation loss %.6f -> %.6f over %zu steps\n", d.metrics.initial_validation_loss,
              d.metrics.validation_loss, d.metrics.steps);
  std::printf("wrote %s\n", ckpt.string().c_str());
  return kOk;
}

int cmd_quantize(const Common& c, const std::string& ckpt, const std::optional<std::string>& out) {
  const nd::PipelineConfig cfg = resolve(c);
  const fs::path dataset = require_dataset(cfg);
  const nd::NanoModel model = nd::load_checkpoint(ckpt);
  nd::require_budget(cfg, model);
  const std::size_t max_seq = model.config().max_seq;
  const auto examples = nd::examples_from_records(nd::load_alpaca(dataset), max_seq);
  auto [qm, size] = nd::quantize_for_budget(cfg, model, examples, nd::Rng::mix_seed(cfg.seed, nd::stream::kCalibration));
  const fs::path target = out ? fs::path(*out) : fs::path(ckpt).replace_extension(".q4g");
  qm.save(target);
  nd::io::write_text(fs::path(target).concat(".size.json"), nd::to_json(size).dump(2) + "\n");
  print_size(size);
  std::printf("wrote %s\n", target.string().c_str());
  return kOk;
}

// label=path pairs; a bare path is labelled by its stem.
std::vector<std::pair<std::string, fs::path>> parse_models(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) out.emplace_back(fs::path(s).stem().string(), s);
    else out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

int cmd_eval(const Common& c, const std::vector<std::string>& specs, std::optional<std::size_t> items) {
  nd::PipelineConfig cfg = resolve(c);
  if (items) cfg.eval.items = *items;
  const auto named = parse_models(specs);
  std::vector<nd::QuantModel> models;
  for (const auto& [label, path] : named) {
    if (!fs::exists(path)) throw nd::ConfigError("checkpoint not found: " + path.string());
    models.push_back(nd::QuantModel::load(path));
  }
  std::vector<nd::LabelledModel> labelled;
  for (std::size_t i = 0; i < models.size(); ++i) labelled.push_back({named[i].first, &models[i].model()});
  const auto results = nd::evaluate_models(labelled, cfg.eval.tasks, cfg.eval.items, cfg.seed);
  const fs::path dir = run_dir(c, cfg);
  snapshot(cfg, dir);
  auto records = nd::accuracy_records(results);
  std::string text = nd::render_accuracy_table(results);
  if (results.size() >= 2) {
    for (auto& r : nd::win_records(nd::compare_methods(results))) records.push_back(r);
  }
  if (results.size() == 2) {
    text += "\nAccDrop (" + results[0].method + " -> " + results[1].method + ")\n";
    std::vector<std::vector<std::string>> rows;
    for (std::size_t t = 0; t < results[0].tasks.size(); ++t) {
      const nd::AccDrop d = nd::make_drop(results[0].accuracy[t], results[1].accuracy[t]);
      rows.push_back({results[0].tasks[t], nd::format_acc(d.pre), nd::format_acc(d.post), nd::format_acc(d.drop)});
      records.push_back({{"kind", "acc_drop"}, {"task", results[0].tasks[t]}, {"pre_model", results[0].method},
                         {"post_model", results[1].method}, {"pre", d.pre}, {"post", d.post}, {"drop", d.drop}});
    }
    text += nd::render_table({"Task", "Pre", "Post", "AccDrop"}, rows);
  }
  fs::create_directories(dir / "eval");
  nd::io::write_text(dir / "eval" / "tables.txt", text);
  nd::write_jsonl(dir / "eval" / "records.jsonl", records);
  std::printf("%s", text.c_str());
  std::printf("records in %s\n", (dir / "eval" / "records.jsonl").string().c_str());
  return kOk;
}

int cmd_pipeline(const Common& c, std::optional<std::size_t> trials) {
  nd::PipelineConfig cfg = resolve(c);
  if (trials) cfg.hpo.trials = *trials;
  cfg.validate();
  const fs::path dir = run_dir(c, cfg);
  const nd::PipelineSummary s = nd::run_pipeline(cfg, dir, progress(c));
  std::printf("%s", s.tables.c_str());
  for (const auto& r : s.runs) {
    std::printf("%s: alpha %.4f, ", nd::to_string(r.optimizer).c_str(), r.best.decode().distill.alpha);
    print_size(r.size);
  }
  std::printf("run %s in %s\n", s.run_id.c_str(), dir.string().c_str());
  return kOk;
}

int cmd_experiment(const Common& c, std::optional<std::size_t> seeds) {
  nd::PipelineConfig cfg = resolve(c);
  if (seeds) cfg.experiment.seeds = *seeds;
  cfg.validate();
  const fs::path dir = run_dir(c, cfg);
  snapshot(cfg, dir);
  const nd::Backbones bb = backbones(cfg, dir, c);
  fs::path dataset;
  if (cfg.paths.dataset) {
    dataset = *cfg.paths.dataset;
  } else {
    dataset = dir / "data" / "dataset.jsonl";
    fs::create_directories(dataset.parent_path());
    nd::gen_data(cfg, dataset, false, &bb.teacher);
  }
  const nd::ExperimentSummary s = nd::run_experiment(cfg, bb, dataset, dir / "experiment", progress(c));
  std::printf("%s", s.table.c_str());
  std::printf("records in %s\n", (dir / "experiment").string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nanodistill: distill, tune and quantize a small decoder"};
  app.require_subcommand(1);
  Common common;
  std::optional<std::string> out, seed_spec, params_out, quant_out;
  std::string params_path, ckpt;
  std::vector<std::string> models, optimizers;
  std::optional<std::size_t> trials, items, seeds;
  bool resume = false;

  auto* gen = app.add_subcommand("gen-data", "synthesize the Alpaca dataset with self-instruct");
  add_common(gen, common);
  gen->add_option("--output", out, "dataset path (default: <run-dir>/data/dataset.jsonl)");
  gen->add_option("--seed-spec", seed_spec, "seed spec JSON");
  gen->add_flag("--resume", resume, "continue from the journal next to the output");

  auto* pre = app.add_subcommand("pretrain", "pretrain the teacher and student backbones");
  add_common(pre, common);

  auto* hpo = app.add_subcommand("hpo", "search distillation hyperparameters");
  add_common(hpo, common);
  hpo->add_option("--trials", trials, "trial budget")->check(CLI::PositiveNumber);
  hpo->add_option("--optimizer", optimizers, "optimizers to tune")->check(CLI::IsMember({"adam", "muon"}));
  hpo->add_flag("--resume", resume, "continue the trial journals in the run dir");

  auto* dis = app.add_subcommand("distill", "LoRA-distill the student and merge (S')");
  add_common(dis, common);
  dis->add_option("--params", params_path, "best params JSON from hpo")->required()->check(CLI::ExistingFile);
  dis->add_option("--output", params_out, "merged checkpoint path");

  auto* qnt = app.add_subcommand("quantize", "GPTQ-quantize a checkpoint (S'')");
  add_common(qnt, common);
  qnt->add_option("--checkpoint", ckpt, "checkpoint to quantize")->required()->check(CLI::ExistingFile);
  qnt->add_option("--output", quant_out, "quantized checkpoint path");

  auto* ev = app.add_subcommand("eval", "multiple-choice accuracy on the synthetic tasks");
  add_common(ev, common);
  ev->add_option("--model", models, "label=checkpoint (repeatable)")->required();
  ev->add_option("--items", items, "items per task")->check(CLI::PositiveNumber);

  auto* pipe = app.add_subcommand("pipeline", "run every stage end to end");
  add_common(pipe, common);
  pipe->add_option("--trials", trials, "trial budget")->check(CLI::PositiveNumber);

  auto* exp = app.add_subcommand("experiment", "Muon vs Adam quantization robustness over seeds");
  add_common(exp, common);
  exp->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out, seed_spec, resume);
    if (pre->parsed()) return cmd_pretrain(common);
    if (hpo->parsed()) return cmd_hpo(common, trials, optimizers, resume);
    if (dis->parsed()) return cmd_distill(common, params_path, params_out);
    if (qnt->parsed()) return cmd_quantize(common, ckpt, quant_out);
    if (ev->parsed()) return cmd_eval(common, models, items);
    if (pipe->parsed()) return cmd_pipeline(common, trials);
    if (exp->parsed()) return cmd_experiment(common, seeds);
  } catch (const nd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kUsage;
  } catch (const nd::BudgetExceeded& e) {
    std::cerr << "memory budget: " << e.what() << std::endl;
    return kBudget;
  } catch (const nd::BackendError& e) {
    std::cerr << "backend error: " << e.what() << std::endl;
    return kBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kFailure;
  }
  return kUsage;
}
