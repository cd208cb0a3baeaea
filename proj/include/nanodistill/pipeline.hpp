#pragma once

// Stage functions behind the CLI: data generation, teacher/student backbones,
// HPO, distillation, quantization, evaluation, the end-to-end run and the
// optimizer robustness experiment. Every stage is a function of the config,
// the seed and its input artifacts.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/dataget.hpp"
#include "nanodistill/distill.hpp"
#include "nanodistill/error.hpp"
#include "nanodistill/evalbench.hpp"
#include "nanodistill/gptq.hpp"
#include "nanodistill/hpo.hpp"
#include "nanodistill/lora.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/optim.hpp"
#include "nanodistill/tasks.hpp"
#include "nanodistill/util.hpp"

namespace nanodistill {

namespace fs = std::filesystem;

inline constexpr int kConfigVersion = 1;

// ---------------------------------------------------------------- config

struct BackboneSpec {
  ModelConfig model;
  PretrainConfig pretrain;
  std::size_t corpus_items = 4000;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::string backend = "mock";  // mock | remote | local

  struct Paths {
    std::optional<fs::path> teacher;
    std::optional<fs::path> student;
    std::optional<fs::path> dataset;
    std::optional<fs::path> seed_spec;
    fs::path output_dir = "runs";
  } paths;

  SeedSpec seed_spec = SeedSpec::desk();
  MockOptions mock;
  RemoteConfig remote;
  GenerationParams local;

  BackboneSpec teacher = default_teacher();
  BackboneSpec student = default_student();

  LoraConfig lora;
  DistillConfig distill;
  double validation_fraction = 0.1;

  struct Hpo {
    std::size_t trials = 16;
    std::vector<OptimizerKind> optimizers = {OptimizerKind::adam, OptimizerKind::muon};
  } hpo;

  QuantPlan quant;
  std::size_t calibration_sequences = 128;
  std::optional<std::size_t> memory_budget;

  struct Eval {
    std::vector<TaskKind> tasks = {kAllTasks.begin(), kAllTasks.end()};
    std::size_t items = 200;
  } eval;

  struct Experiment {
    std::size_t seeds = 5;
    std::vector<TaskKind> tasks = {TaskKind::copy, TaskKind::reverse};
    std::size_t items = 200;
  } experiment;

  static BackboneSpec default_teacher() {
    BackboneSpec b;
    b.model.d_model = 96;
    b.model.n_layers = 2;
    b.model.n_heads = 4;
    b.model.d_ff = 256;
    b.model.max_seq = 32;
    b.pretrain.steps = 1500;
    return b;
  }
  static BackboneSpec default_student() {
    BackboneSpec b;
    b.model.d_model = 72;
    b.model.n_layers = 2;
    b.model.n_heads = 4;
    b.model.d_ff = 144;
    b.model.max_seq = 32;
    b.pretrain.steps = 400;
    b.corpus_items = 2000;
    return b;
  }

  void validate() const {
    const auto wrap = [](const char* what, const std::function<void()>& f) {
      try {
        f();
      } catch (const ConfigError&) {
        throw;
      } catch (const Error& e) {
        throw ConfigError(std::string(what) + ": " + e.what());
      }
    };
    if (backend != "mock" && backend != "remote" && backend != "local")
      throw ConfigError("backend must be one of mock, remote, local (got '" + backend + "')");
    wrap("seed_spec", [&] { seed_spec.validate(); });
    wrap("teacher.model", [&] { teacher.model.validate(); });
    wrap("student.model", [&] { student.model.validate(); });
    wrap("lora", [&] { lora.validate(); });
    wrap("distill", [&] { distill.validate(); });
    wrap("quant", [&] { quant.validate(); });
    if (backend == "remote") wrap("remote", [&] { remote.validate(); });
    if (teacher.model.vocab_size != student.model.vocab_size)
      throw ConfigError("teacher and student vocabularies differ");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw ConfigError("validation_fraction must be in (0, 1)");
    if (hpo.trials < 1) throw ConfigError("hpo.trials must be >= 1");
    if (hpo.optimizers.empty()) throw ConfigError("hpo.optimizers must not be empty");
    if (calibration_sequences < 1) throw ConfigError("quant.calibration_sequences must be >= 1");
    if (memory_budget && *memory_budget == 0) throw ConfigError("memory_budget_bytes must be > 0 when set");
    if (eval.tasks.empty() || eval.items < 1) throw ConfigError("eval needs at least one task and one item");
    if (experiment.seeds < 1 || experiment.tasks.empty() || experiment.items < 1)
      throw ConfigError("experiment needs seeds, tasks and items >= 1");
    if (teacher.corpus_items < 1 || student.corpus_items < 1) throw ConfigError("corpus_items must be >= 1");
    for (const auto* p : {&paths.teacher, &paths.student, &paths.dataset, &paths.seed_spec})
      if (*p && !fs::exists(**p)) throw ConfigError("path does not exist: " + (*p)->string());
  }
};

namespace detail {

// Reads one JSON object, rejecting keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return nullptr;
    return &j_.at(key);
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_model(const nlohmann::json& j, const std::string& where, ModelConfig& m) {
  ObjectReader r(j, where);
  r.get("d_model", m.d_model);
  r.get("n_layers", m.n_layers);
  r.get("n_heads", m.n_heads);
  r.get("d_ff", m.d_ff);
  r.get("max_seq", m.max_seq);
  r.finish();
}

inline void read_pretrain(const nlohmann::json& j, const std::string& where, PretrainConfig& p) {
  ObjectReader r(j, where);
  r.get("steps", p.steps);
  r.get("batch_size", p.batch_size);
  r.get("learning_rate", p.learning_rate);
  r.get("weight_decay", p.weight_decay);
  r.get("warmup_fraction", p.warmup_fraction);
  r.get("final_lr_fraction", p.final_lr_fraction);
  r.finish();
}

inline void read_backbone(const nlohmann::json& j, const std::string& where, BackboneSpec& b) {
  ObjectReader r(j, where);
  if (const auto* m = r.child("model")) read_model(*m, r.path("model"), b.model);
  if (const auto* p = r.child("pretrain")) read_pretrain(*p, r.path("pretrain"), b.pretrain);
  r.get("corpus_items", b.corpus_items);
  r.finish();
}

inline std::vector<TaskKind> read_tasks(const std::vector<std::string>& names, const std::string& where) {
  std::vector<TaskKind> out;
  for (const auto& n : names) {
    try {
      out.push_back(task_from_string(n));
    } catch (const InvalidArgument& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

inline OptimizerKind read_optimizer(const std::string& s, const std::string& where) {
  try {
    return optimizer_from_string(s);
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline nlohmann::json model_json(const ModelConfig& m) {
  return {{"d_model", m.d_model}, {"n_layers", m.n_layers}, {"n_heads", m.n_heads},
          {"d_ff", m.d_ff},       {"max_seq", m.max_seq}};
}

inline nlohmann::json pretrain_json(const PretrainConfig& p) {
  return {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate},
          {"weight_decay", p.weight_decay},
          {"warmup_fraction", p.warmup_fraction},
          {"final_lr_fraction", p.final_lr_fraction}};
}

inline nlohmann::json opt_path(const std::optional<fs::path>& p) {
  return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr);
}

}  // namespace detail

// Relative paths inside the file resolve against `base_dir`.
inline PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  detail::ObjectReader r(j, "config");
  int version = 0;
  r.get("version", version);
  if (version != kConfigVersion)
    throw ConfigError("config: version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kConfigVersion) + ")");
  PipelineConfig c;
  r.get("seed", c.seed);
  r.get("backend", c.backend);
  const auto resolve = [&](std::optional<fs::path>& p) {
    if (p && p->is_relative() && !base_dir.empty()) p = base_dir / *p;
  };
  if (const auto* p = r.child("paths")) {
    detail::ObjectReader pr(*p, "config.paths");
    std::optional<std::string> t, s, d, ss;
    std::string out = c.paths.output_dir.string();
    pr.get("teacher", t);
    pr.get("student", s);
    pr.get("dataset", d);
    pr.get("seed_spec", ss);
    pr.get("output_dir", out);
    pr.finish();
    if (t) c.paths.teacher = *t;
    if (s) c.paths.student = *s;
    if (d) c.paths.dataset = *d;
    if (ss) c.paths.seed_spec = *ss;
    c.paths.output_dir = out;
    resolve(c.paths.teacher);
    resolve(c.paths.student);
    resolve(c.paths.dataset);
    resolve(c.paths.seed_spec);
  }
  if (const auto* s = r.child("seed_spec")) {
    try {
      c.seed_spec = seed_spec_from_json(*s);
    } catch (const Error& e) {
      throw ConfigError(std::string("config.seed_spec: ") + e.what());
    }
  }
  if (const auto* m = r.child("mock")) {
    detail::ObjectReader mr(*m, "config.mock");
    mr.get("malformed_rate", c.mock.malformed_rate);
    mr.get("unparseable_rate", c.mock.unparseable_rate);
    mr.finish();
  }
  if (const auto* m = r.child("remote")) {
    detail::ObjectReader rr(*m, "config.remote");
    rr.get("base_url", c.remote.base_url);
    rr.get("path", c.remote.path);
    rr.get("model", c.remote.model);
    rr.get("api_key_env", c.remote.api_key_env);
    rr.get("temperature", c.remote.temperature);
    rr.get("top_p", c.remote.top_p);
    rr.get("max_tokens", c.remote.max_tokens);
    rr.get("timeout_seconds", c.remote.timeout_seconds);
    rr.get("max_retries", c.remote.max_retries);
    rr.get("backoff_initial_ms", c.remote.backoff_initial_ms);
    rr.get("backoff_max_ms", c.remote.backoff_max_ms);
    rr.finish();
  }
  if (const auto* m = r.child("local")) {
    detail::ObjectReader lr(*m, "config.local");
    lr.get("temperature", c.local.temperature);
    lr.get("top_p", c.local.top_p);
    lr.get("max_new_tokens", c.local.max_new_tokens);
    lr.finish();
  }
  if (const auto* t = r.child("teacher")) detail::read_backbone(*t, "config.teacher", c.teacher);
  if (const auto* s = r.child("student")) detail::read_backbone(*s, "config.student", c.student);
  if (const auto* l = r.child("lora")) {
    detail::ObjectReader lr(*l, "config.lora");
    lr.get("rank", c.lora.rank);
    lr.get("scale", c.lora.scale);
    lr.get("targets", c.lora.targets);
    lr.finish();
  }
  if (const auto* d = r.child("distill")) {
    detail::ObjectReader dr(*d, "config.distill");
    std::string opt = to_string(c.distill.optimizer);
    dr.get("alpha", c.distill.alpha);
    dr.get("temperature", c.distill.temperature);
    dr.get("learning_rate", c.distill.learning_rate);
    dr.get("weight_decay", c.distill.weight_decay);
    dr.get("optimizer", opt);
    dr.get("epochs", c.distill.epochs);
    dr.get("batch_size", c.distill.batch_size);
    dr.get("validation_fraction", c.validation_fraction);
    dr.finish();
    c.distill.optimizer = detail::read_optimizer(opt, "config.distill.optimizer");
  }
  if (const auto* h = r.child("hpo")) {
    detail::ObjectReader hr(*h, "config.hpo");
    std::vector<std::string> opts;
    hr.get("trials", c.hpo.trials);
    hr.get("optimizers", opts);
    hr.finish();
    if (!opts.empty()) {
      c.hpo.optimizers.clear();
      for (const auto& o : opts) c.hpo.optimizers.push_back(detail::read_optimizer(o, "config.hpo.optimizers"));
    }
  }
  if (const auto* q = r.child("quant")) {
    detail::ObjectReader qr(*q, "config.quant");
    qr.get("weight_bits", c.quant.weight_bits);
    qr.get("activation_bits", c.quant.activation_bits);
    qr.get("group_size", c.quant.group_size);
    qr.get("include", c.quant.include);
    qr.get("exclude", c.quant.exclude);
    qr.get("damp_fraction", c.quant.damp_fraction);
    qr.get("calibration_sequences", c.calibration_sequences);
    qr.finish();
  }
  r.get("memory_budget_bytes", c.memory_budget);
  if (const auto* e = r.child("eval")) {
    detail::ObjectReader er(*e, "config.eval");
    std::vector<std::string> tasks;
    er.get("tasks", tasks);
    er.get("items", c.eval.items);
    er.finish();
    if (!tasks.empty()) c.eval.tasks = detail::read_tasks(tasks, "config.eval.tasks");
  }
  if (const auto* e = r.child("experiment")) {
    detail::ObjectReader er(*e, "config.experiment");
    std::vector<std::string> tasks;
    er.get("seeds", c.experiment.seeds);
    er.get("tasks", tasks);
    er.get("items", c.experiment.items);
    er.finish();
    if (!tasks.empty()) c.experiment.tasks = detail::read_tasks(tasks, "config.experiment.tasks");
  }
  r.finish();
  if (c.paths.seed_spec) {
    if (!fs::exists(*c.paths.seed_spec)) throw ConfigError("seed spec file not found: " + c.paths.seed_spec->string());
    try {
      c.seed_spec = load_seed_spec(*c.paths.seed_spec);
    } catch (const Error& e) {
      throw ConfigError("seed spec " + c.paths.seed_spec->string() + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  std::vector<std::string> opts, eval_tasks, exp_tasks;
  for (auto o : c.hpo.optimizers) opts.push_back(to_string(o));
  for (auto t : c.eval.tasks) eval_tasks.push_back(to_string(t));
  for (auto t : c.experiment.tasks) exp_tasks.push_back(to_string(t));
  const auto backbone = [](const BackboneSpec& b) {
    return nlohmann::json{{"model", detail::model_json(b.model)},
                          {"pretrain", detail::pretrain_json(b.pretrain)},
                          {"corpus_items", b.corpus_items}};
  };
  return {
      {"version", kConfigVersion},
      {"seed", c.seed},
      {"backend", c.backend},
      {"paths",
       {{"teacher", detail::opt_path(c.paths.teacher)},
        {"student", detail::opt_path(c.paths.student)},
        {"dataset", detail::opt_path(c.paths.dataset)},
        {"seed_spec", detail::opt_path(c.paths.seed_spec)},
        {"output_dir", c.paths.output_dir.string()}}},
      {"seed_spec", to_json(c.seed_spec)},
      {"mock", {{"malformed_rate", c.mock.malformed_rate}, {"unparseable_rate", c.mock.unparseable_rate}}},
      {"remote",
       {{"base_url", c.remote.base_url},
        {"path", c.remote.path},
        {"model", c.remote.model},
        {"api_key_env", c.remote.api_key_env},
        {"temperature", c.remote.temperature},
        {"top_p", c.remote.top_p},
        {"max_tokens", c.remote.max_tokens},
        {"timeout_seconds", c.remote.timeout_seconds},
        {"max_retries", c.remote.max_retries},
        {"backoff_initial_ms", c.remote.backoff_initial_ms},
        {"backoff_max_ms", c.remote.backoff_max_ms}}},
      {"local",
       {{"temperature", c.local.temperature}, {"top_p", c.local.top_p}, {"max_new_tokens", c.local.max_new_tokens}}},
      {"teacher", backbone(c.teacher)},
      {"student", backbone(c.student)},
      {"lora", {{"rank", c.lora.rank}, {"scale", c.lora.scale}, {"targets", c.lora.targets}}},
      {"distill",
       {{"alpha", c.distill.alpha},
        {"temperature", c.distill.temperature},
        {"learning_rate", c.distill.learning_rate},
        {"weight_decay", c.distill.weight_decay},
        {"optimizer", to_string(c.distill.optimizer)},
        {"epochs", c.distill.epochs},
        {"batch_size", c.distill.batch_size},
        {"validation_fraction", c.validation_fraction}}},
      {"hpo", {{"trials", c.hpo.trials}, {"optimizers", opts}}},
      {"quant",
       {{"weight_bits", c.quant.weight_bits},
        {"activation_bits", c.quant.activation_bits},
        {"group_size", c.quant.group_size},
        {"include", c.quant.include},
        {"exclude", c.quant.exclude},
        {"damp_fraction", c.quant.damp_fraction},
        {"calibration_sequences", c.calibration_sequences}}},
      {"memory_budget_bytes", c.memory_budget ? nlohmann::json(*c.memory_budget) : nlohmann::json(nullptr)},
      {"eval", {{"tasks", eval_tasks}, {"items", c.eval.items}}},
      {"experiment", {{"seeds", c.experiment.seeds}, {"tasks", exp_tasks}, {"items", c.experiment.items}}},
  };
}

inline PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------- logging

using Progress = std::function<void(const std::string&)>;

// Every loss value the run produces, in order. Two runs with the same seed
// write byte-identical files.
class LossLog {
 public:
  LossLog() = default;
  explicit LossLog(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream(path_, std::ios::trunc);
  }

  void record(const std::string& stage, std::size_t step, double loss) {
    records_.push_back({{"stage", stage}, {"step", step}, {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(nullptr)}});
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      out << records_.back().dump() << '\n';
    }
  }
  void record_curve(const std::string& stage, const std::vector<double>& losses) {
    for (std::size_t i = 0; i < losses.size(); ++i) record(stage, i, losses[i]);
  }
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  fs::path path_;
  std::vector<nlohmann::json> records_;
};

// Seed streams, one per stage, so stages stay independent of each other.
namespace stream {
inline constexpr std::uint64_t kTeacher = 0x7ea0;
inline constexpr std::uint64_t kStudent = 0x57d0;
inline constexpr std::uint64_t kCorpus = 0xc0a0;
inline constexpr std::uint64_t kStudy = 0x4b00;
inline constexpr std::uint64_t kDistill = 0xd150;
inline constexpr std::uint64_t kCalibration = 0xca10;
inline constexpr std::uint64_t kEval = 0xe7a1;
inline constexpr std::uint64_t kExperiment = 0xe4e0;
}  // namespace stream

// ---------------------------------------------------------------- backbones

// Multi-task next-token corpus over the synthetic tasks.
inline std::vector<Sequence> task_corpus(std::size_t items, std::uint64_t seed, std::size_t max_seq) {
  std::vector<Sequence> out;
  out.reserve(items);
  Rng rng(seed);
  std::vector<std::string> tags;
  for (TaskKind k : kAllTasks)
    for (const auto& t : task_subtopics(k)) tags.push_back(t);
  for (std::size_t i = 0; i < items; ++i) {
    const TaskItem item = make_item(tags[i % tags.size()], rng);
    out.push_back(encode_pair(item.prompt(), item.answer, max_seq));
  }
  return out;
}

inline NanoModel pretrain_backbone(const BackboneSpec& spec, std::uint64_t seed, const std::string& stage,
                                   LossLog* log = nullptr) {
  Rng rng(seed);
  NanoModel m = NanoModel::initialized(spec.model, rng);
  const auto corpus = task_corpus(spec.corpus_items, Rng::mix_seed(seed, stream::kCorpus), spec.model.max_seq);
  const auto losses = pretrain(m, corpus, spec.pretrain, rng);
  if (log) log->record_curve(stage, losses);
  return m;
}

struct Backbones {
  NanoModel teacher;
  NanoModel student;
};

// Loads configured checkpoints, pretraining whichever is missing.
inline Backbones prepare_backbones(const PipelineConfig& cfg, LossLog* log = nullptr, const Progress& progress = {}) {
  const auto get = [&](const std::optional<fs::path>& path, const BackboneSpec& spec, std::uint64_t s,
                       const std::string& stage) {
    if (path) {
      if (progress) progress("loading " + stage + " from " + path->string());
      return load_checkpoint(*path);
    }
    if (progress) progress("pretraining " + stage + strprintf(" (%zu steps)", spec.pretrain.steps));
    return pretrain_backbone(spec, Rng::mix_seed(cfg.seed, s), "pretrain." + stage, log);
  };
  Backbones b{get(cfg.paths.teacher, cfg.teacher, stream::kTeacher, "teacher"),
              get(cfg.paths.student, cfg.student, stream::kStudent, "student")};
  if (b.teacher.config().vocab_size != b.student.config().vocab_size)
    throw ConfigError("teacher and student vocabularies differ");
  return b;
}

inline Backbones load_backbones_from(const fs::path& models_dir) {
  return {load_checkpoint(models_dir / "teacher.ckpt"), load_checkpoint(models_dir / "student.ckpt")};
}

// ---------------------------------------------------------------- data

inline std::unique_ptr<CompletionBackend> make_backend(const PipelineConfig& cfg, const NanoModel* local_teacher) {
  if (cfg.backend == "mock") return std::make_unique<MockBackend>(cfg.seed, cfg.mock);
  if (cfg.backend == "remote") return std::make_unique<RemoteBackend>(cfg.remote);
  if (cfg.backend == "local") {
    if (!local_teacher) throw ConfigError("local backend needs a teacher model");
    return std::make_unique<LocalTeacherBackend>(*local_teacher, cfg.local, cfg.seed);
  }
  throw ConfigError("unknown backend '" + cfg.backend + "'");
}

inline DatasetSummary gen_data(const PipelineConfig& cfg, const fs::path& out, bool resume,
                               const NanoModel* local_teacher = nullptr) {
  auto backend = make_backend(cfg, local_teacher);
  return run_self_instruct(*backend, cfg.seed_spec, out, {.resume = resume});
}

inline std::vector<Example> examples_from_records(const std::vector<AlpacaRecord>& records, std::size_t max_seq) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string prompt = r.input.empty() ? r.instruction : r.instruction + "\n" + r.input;
    out.push_back({i, encode_pair(prompt, r.output, max_seq)});
  }
  return out;
}

struct DistillData {
  std::vector<Example> examples;
  DataSplit split;
  LogitStore teacher_logits;
};

// Examples share the shorter of the two contexts so teacher and student see
// the same tokens.
inline DistillData prepare_distill_data(const PipelineConfig& cfg, const fs::path& dataset, const NanoModel& teacher,
                                        const NanoModel& student, std::uint64_t split_seed) {
  const std::size_t max_seq = std::min(teacher.config().max_seq, student.config().max_seq);
  DistillData d;
  d.examples = examples_from_records(load_alpaca(dataset), max_seq);
  if (d.examples.size() < 2) throw InvalidArgument("dataset " + dataset.string() + " has fewer than two records");
  d.split = split_dataset(d.examples, split_seed, cfg.validation_fraction);
  d.teacher_logits = cache_teacher_logits(teacher, d.examples);
  return d;
}

// ---------------------------------------------------------------- HPO

// The distillation space with the rank grid cut to ranks the student can hold
// (rank < the smaller side of every adapted weight).
inline SearchSpace distill_space_for(const ModelConfig& m) {
  const SearchSpace full = SearchSpace::distill();
  const Dimension& rank = full.dim(full.index_of("lora_rank"));
  const double narrowest = static_cast<double>(std::min(m.d_model, m.d_ff));
  double high = rank.high;
  while (high >= narrowest) high -= rank.step;
  if (high <= rank.low)
    throw ConfigError(strprintf("student width %g leaves no room for LoRA ranks above %g", narrowest, rank.low));
  if (high == rank.high) return full;
  SearchSpace s;
  for (const auto& d : full.dims()) {
    if (d.kind == DimKind::int_grid) s.int_grid(d.name, d.low, d.name == rank.name ? high : d.high, d.step);
    else if (d.kind == DimKind::log_uniform) s.log_uniform(d.name, d.low, d.high);
    else s.continuous(d.name, d.low, d.high);
  }
  return s;
}

struct BestParams {
  OptimizerKind optimizer = OptimizerKind::muon;
  ParamVector params;
  std::size_t trial = 0;
  double validation_loss = 0.0;
  std::vector<std::string> targets;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;

  DistillTrial decode(const SearchSpace& space = SearchSpace::distill()) const {
    DistillTrial t = decode_distill_params(space, params, optimizer, targets, batch_size);
    t.distill.epochs = epochs;
    return t;
  }
};

inline nlohmann::json to_json(const BestParams& b, const SearchSpace& space = SearchSpace::distill()) {
  nlohmann::json params = nlohmann::json::object();
  for (std::size_t i = 0; i < space.size(); ++i) params[space.dim(i).name] = b.params[i];
  return {{"version", kConfigVersion}, {"optimizer", to_string(b.optimizer)}, {"params", params},
          {"trial", b.trial},          {"validation_loss", b.validation_loss}, {"targets", b.targets},
          {"batch_size", b.batch_size}, {"epochs", b.epochs}};
}

inline BestParams best_params_from_json(const nlohmann::json& j, const SearchSpace& space = SearchSpace::distill()) {
  try {
    if (j.at("version").get<int>() != kConfigVersion) throw VersionMismatch(j.at("version").get<unsigned>(), kConfigVersion);
    BestParams b;
    b.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    for (std::size_t i = 0; i < space.size(); ++i) b.params.push_back(j.at("params").at(space.dim(i).name).get<double>());
    b.trial = j.value("trial", std::size_t{0});
    b.validation_loss = j.value("validation_loss", 0.0);
    b.targets = j.at("targets").get<std::vector<std::string>>();
    b.batch_size = j.value("batch_size", std::size_t{8});
    b.epochs = j.value("epochs", std::size_t{1});
    if (!space.contains(b.params)) throw FormatError("best params outside the search space");
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("best params: ") + e.what());
  }
}

inline void save_best_params(const BestParams& b, const fs::path& path) { io::write_text(path, to_json(b).dump(2) + "\n"); }

inline BestParams load_best_params(const fs::path& path) {
  try {
    return best_params_from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

struct HpoResult {
  BestParams best;
  std::vector<TrialRecord> history;
};

inline HpoResult run_hpo(const PipelineConfig& cfg, const NanoModel& student, const DistillData& data,
                         OptimizerKind optimizer, std::optional<fs::path> journal, bool resume,
                         LossLog* log = nullptr, const Progress& progress = {}) {
  Study study{distill_space_for(student.config()), Rng::mix_seed(cfg.seed, stream::kStudy + static_cast<std::uint64_t>(optimizer)),
              cfg.hpo.trials};
  if (journal) {
    if (resume && fs::exists(*journal))
      study.history = load_trials(study.space, *journal);
    else
      io::write_text(*journal, "");
    study.journal = journal;
  }
  DistillContext ctx{&student, &data.teacher_logits, &data.split, optimizer, cfg.lora.targets, cfg.distill.batch_size};
  const Objective objective = [&](const ParamVector& p, std::uint64_t s) {
    DistillTrial t = decode_distill_params(study.space, p, optimizer, ctx.targets, ctx.batch_size);
    t.distill.epochs = cfg.distill.epochs;
    Rng rng(s);
    AdaptedModel adapted = attach(student, t.lora, rng);
    const double v = train_distill(adapted, data.teacher_logits, data.split, t.distill, rng).validation_loss;
    if (progress)
      progress(strprintf("  %s trial %zu: val loss %.6f", to_string(optimizer).c_str(), study.history.size(), v));
    return v;
  };
  const TrialRecord best = run_study(objective, study);
  if (log)
    for (const auto& t : study.history) log->record("hpo." + to_string(optimizer), t.index, t.loss);
  HpoResult r;
  r.best = {optimizer, best.params, best.index, best.loss, cfg.lora.targets, cfg.distill.batch_size, cfg.distill.epochs};
  r.history = study.history;
  return r;
}

inline const std::vector<std::string>& table6_header() {
  static const std::vector<std::string> h = {"Task",      "Optimizer", "Rank", "LoRA Scale", "LearningRate",
                                             "Distill α", "Distill T", "W Decay", "EvalLoss"};
  return h;
}

inline std::vector<std::string> table6_row(const std::string& task, const BestParams& b) {
  const DistillTrial t = b.decode();
  return {task,
          b.optimizer == OptimizerKind::adam ? "Adam" : "Muon",
          std::to_string(t.lora.rank),
          strprintf("%.4f", t.lora.scale),
          strprintf("%.3e", t.distill.learning_rate),
          strprintf("%.4f", t.distill.alpha),
          strprintf("%.4f", t.distill.temperature),
          strprintf("%.4f", t.distill.weight_decay),
          strprintf("%.4f", b.validation_loss)};
}

// ---------------------------------------------------------------- distill

struct DistillOutcome {
  NanoModel merged;  // S'
  TrainMetrics metrics;
};

inline DistillOutcome distill_student(const NanoModel& student, const DistillData& data, const DistillTrial& trial,
                                      std::uint64_t seed) {
  Rng rng(seed);
  AdaptedModel adapted = attach(student, trial.lora, rng);
  TrainMetrics m = train_distill(adapted, data.teacher_logits, data.split, trial.distill, rng);
  return {merge(adapted), std::move(m)};
}

inline nlohmann::json metrics_json(const TrainMetrics& m, const DistillTrial& t) {
  return {{"train_loss", m.train_loss},
          {"initial_validation_loss", m.initial_validation_loss},
          {"validation_loss", m.validation_loss},
          {"steps", m.steps},
          {"clamped_logs", m.counters.clamped},
          {"optimizer", to_string(t.distill.optimizer)},
          {"alpha", t.distill.alpha},
          {"temperature", t.distill.temperature},
          {"learning_rate", t.distill.learning_rate},
          {"weight_decay", t.distill.weight_decay},
          {"lora_rank", t.lora.rank},
          {"lora_scale", t.lora.scale}};
}

// ---------------------------------------------------------------- quantize

inline TokenBatch calibration_batch(const std::vector<Example>& examples, std::size_t n, std::uint64_t seed) {
  if (examples.empty()) throw InvalidArgument("calibration: no examples");
  std::vector<std::size_t> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  TokenBatch b;
  for (std::size_t i : idx) b.sequences.push_back(examples[i].seq);
  return b;
}

struct SizeReport {
  std::size_t full_precision_bytes = 0;  // 16-bit equivalent
  std::size_t quantized_bytes = 0;
  std::optional<std::size_t> budget;
  std::string warning;

  double ratio() const { return static_cast<double>(full_precision_bytes) / static_cast<double>(quantized_bytes); }
};

inline nlohmann::json to_json(const SizeReport& s) {
  return {{"full_precision_bytes", s.full_precision_bytes},
          {"quantized_bytes", s.quantized_bytes},
          {"ratio", s.ratio()},
          {"budget_bytes", s.budget ? nlohmann::json(*s.budget) : nlohmann::json(nullptr)},
          {"warning", s.warning}};
}

inline void require_budget(const PipelineConfig& cfg, const NanoModel& model) {
  const std::size_t est = estimate_memory(model, cfg.quant);
  if (!check_budget(est, cfg.memory_budget).pass)
    throw BudgetExceeded(strprintf("estimated size %zu bytes exceeds the memory budget of %zu bytes", est,
                                   *cfg.memory_budget));
}

// GPTQ with the configured plan; throws BudgetExceeded before anything is
// written when the packed size exceeds the budget.
inline std::pair<QuantModel, SizeReport> quantize_for_budget(const PipelineConfig& cfg, const NanoModel& model,
                                                              const std::vector<Example>& calibration_pool,
                                                              std::uint64_t seed) {
  require_budget(cfg, model);
  SizeReport size{estimate_memory(model), estimate_memory(model, cfg.quant), cfg.memory_budget, {}};
  size.warning = check_budget(size.quantized_bytes, cfg.memory_budget).warning;
  const TokenBatch calib = calibration_batch(calibration_pool, cfg.calibration_sequences, seed);
  QuantModel qm = quantize_model(model, calib, cfg.quant);
  size.quantized_bytes = estimate_memory(qm);
  if (!check_budget(size.quantized_bytes, cfg.memory_budget).pass)
    throw BudgetExceeded(strprintf("quantized size %zu bytes exceeds the memory budget of %zu bytes",
                                   size.quantized_bytes, *cfg.memory_budget));
  return {std::move(qm), size};
}

// ---------------------------------------------------------------- eval

struct LabelledModel {
  std::string label;
  const NanoModel* model;
};

inline std::map<TaskKind, std::vector<TaskItem>> eval_items(const std::vector<TaskKind>& tasks, std::size_t n,
                                                            std::uint64_t seed) {
  std::map<TaskKind, std::vector<TaskItem>> out;
  for (TaskKind k : tasks) out.emplace(k, make_task(k, n, Rng::mix_seed(seed, stream::kEval)));
  return out;
}

inline std::vector<MethodResult> evaluate_models(const std::vector<LabelledModel>& models,
                                                 const std::vector<TaskKind>& tasks, std::size_t n, std::uint64_t seed) {
  const auto items = eval_items(tasks, n, seed);
  std::vector<MethodResult> out;
  for (const auto& m : models) {
    MethodResult r{m.label, {}, {}};
    for (TaskKind k : tasks) {
      r.tasks.push_back(to_string(k));
      r.accuracy.push_back(mcq_accuracy(*m.model, items.at(k)));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<nlohmann::json> accuracy_records(const std::vector<MethodResult>& results) {
  std::vector<nlohmann::json> out;
  for (const auto& r : results)
    for (std::size_t t = 0; t < r.tasks.size(); ++t)
      out.push_back({{"kind", "accuracy"}, {"model", r.method}, {"task", r.tasks[t]}, {"accuracy", r.accuracy[t]}});
  return out;
}

// ---------------------------------------------------------------- run dir

inline std::string run_id(std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return std::string(buf) + "-s" + std::to_string(seed);
}

inline fs::path make_run_dir(const fs::path& root, std::uint64_t seed) {
  const std::string base = run_id(seed);
  fs::path dir = root / base;
  for (int n = 2; fs::exists(dir); ++n) dir = root / (base + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- pipeline

struct OptimizerArtifacts {
  OptimizerKind optimizer;
  BestParams best;
  fs::path best_params;
  fs::path merged;     // S'
  fs::path quantized;  // S''
  TrainMetrics metrics;
  SizeReport size;
};

struct PipelineSummary {
  std::string run_id;
  fs::path run_dir;
  std::vector<OptimizerArtifacts> runs;
  std::vector<MethodResult> accuracy;
  std::vector<RobustnessRow> drops;
  WinCounts wins;
  std::string tables;
};

inline std::string method_label(OptimizerKind k) { return k == OptimizerKind::adam ? "Adam-Optimized" : "Muon-Optimized"; }

// Every stage end to end, writing everything under run_dir:
//   config.json  losses.jsonl  summary.json
//   data/        dataset.jsonl (+ report, journal)
//   models/      teacher.ckpt student.ckpt student_<opt>.ckpt student_<opt>.q4g gptq_alone.q4g
//   hpo/         trials_<opt>.jsonl best_<opt>.json table6.txt
//   metrics/     distill_<opt>.json size_<opt>.json
//   eval/        records.jsonl tables.txt
inline PipelineSummary run_pipeline(const PipelineConfig& cfg, const fs::path& run_dir, const Progress& progress = {}) {
  cfg.validate();
  const auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  PipelineSummary sum;
  sum.run_dir = run_dir;
  sum.run_id = run_dir.filename().string();
  for (const char* sub : {"data", "models", "hpo", "metrics", "eval"}) fs::create_directories(run_dir / sub);
  io::write_text(run_dir / "config.json", to_json(cfg).dump(2) + "\n");
  LossLog log(run_dir / "losses.jsonl");

  Backbones bb = prepare_backbones(cfg, &log, progress);
  if (!cfg.paths.teacher) save_checkpoint(bb.teacher, run_dir / "models" / "teacher.ckpt");
  if (!cfg.paths.student) save_checkpoint(bb.student, run_dir / "models" / "student.ckpt");
  require_budget(cfg, bb.student);

  fs::path dataset = cfg.paths.dataset.value_or(run_dir / "data" / "dataset.jsonl");
  if (!cfg.paths.dataset) {
    say("generating data with the " + cfg.backend + " backend");
    const DatasetSummary ds = gen_data(cfg, dataset, false, &bb.teacher);
    say(strprintf("  %zu records (%zu generated, %zu discarded, %zu dropped)", ds.accepted, ds.generated,
                  ds.discarded, ds.dropped));
  }
  say("caching teacher logits");
  const DistillData data = prepare_distill_data(cfg, dataset, bb.teacher, bb.student, cfg.seed);

  std::vector<std::vector<std::string>> t6;
  for (OptimizerKind opt : cfg.hpo.optimizers) {
    const std::string name = to_string(opt);
    say("hpo: " + std::to_string(cfg.hpo.trials) + " trials with " + name);
    OptimizerArtifacts a{opt, {}, run_dir / "hpo" / ("best_" + name + ".json"),
                         run_dir / "models" / ("student_" + name + ".ckpt"),
                         run_dir / "models" / ("student_" + name + ".q4g"), {}, {}};
    a.best = run_hpo(cfg, bb.student, data, opt, run_dir / "hpo" / ("trials_" + name + ".jsonl"), false, &log,
                     progress)
                 .best;
    save_best_params(a.best, a.best_params);
    t6.push_back(table6_row(cfg.seed_spec.task, a.best));

    say("distilling with the best " + name + " parameters");
    const DistillTrial trial = load_best_params(a.best_params).decode();
    DistillOutcome d = distill_student(bb.student, data, trial,
                                       Rng::mix_seed(cfg.seed, stream::kDistill + static_cast<std::uint64_t>(opt)));
    log.record_curve("distill." + name, d.metrics.train_loss);
    log.record("distill." + name + ".validation", 0, d.metrics.validation_loss);
    a.metrics = d.metrics;
    save_checkpoint(d.merged, a.merged);
    io::write_text(run_dir / "metrics" / ("distill_" + name + ".json"), metrics_json(d.metrics, trial).dump(2) + "\n");

    say("quantizing S' (" + name + ")");
    auto [qm, size] = quantize_for_budget(cfg, d.merged, data.examples, Rng::mix_seed(cfg.seed, stream::kCalibration));
    qm.save(a.quantized);
    a.size = size;
    io::write_text(run_dir / "metrics" / ("size_" + name + ".json"), to_json(size).dump(2) + "\n");
    sum.runs.push_back(std::move(a));
  }
  io::write_text(run_dir / "hpo" / "table6.txt", render_table(table6_header(), t6));

  say("quantizing the base student (GPTQ alone)");
  auto [gptq_alone, gsize] = quantize_for_budget(cfg, bb.student, data.examples,
                                                 Rng::mix_seed(cfg.seed, stream::kCalibration));
  gptq_alone.save(run_dir / "models" / "gptq_alone.q4g");

  say("evaluating");
  std::vector<QuantModel> quantized;
  std::vector<NanoModel> merged;
  for (const auto& a : sum.runs) {
    merged.push_back(load_checkpoint(a.merged));
    quantized.push_back(QuantModel::load(a.quantized));
  }
  std::vector<LabelledModel> compared{{"Student", &bb.student}, {"GPTQ Alone", &gptq_alone.model()}};
  for (std::size_t i = 0; i < sum.runs.size(); ++i) compared.push_back({method_label(sum.runs[i].optimizer), &quantized[i].model()});
  std::vector<LabelledModel> lora;
  for (std::size_t i = 0; i < sum.runs.size(); ++i) lora.push_back({"LoRA-" + to_string(sum.runs[i].optimizer), &merged[i]});
  std::vector<LabelledModel> all = compared;
  all.insert(all.end(), lora.begin(), lora.end());
  const auto results = evaluate_models(all, cfg.eval.tasks, cfg.eval.items, cfg.seed);
  sum.accuracy.assign(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(compared.size()));
  std::vector<MethodResult> contenders(results.begin() + 1, results.begin() + static_cast<std::ptrdiff_t>(compared.size()));
  sum.wins = compare_methods(contenders);

  const auto find = [&](const std::string& label) -> const MethodResult* {
    for (const auto& r : results)
      if (r.method == label) return &r;
    return nullptr;
  };
  for (std::size_t t = 0; t < cfg.eval.tasks.size(); ++t) {
    RobustnessRow row{to_string(cfg.eval.tasks[t]), {}, {}};
    for (const auto& a : sum.runs) {
      const auto* pre = find("LoRA-" + to_string(a.optimizer));
      const auto* post = find(method_label(a.optimizer));
      (a.optimizer == OptimizerKind::adam ? row.adam : row.muon).push_back(make_drop(pre->accuracy[t], post->accuracy[t]));
    }
    sum.drops.push_back(row);
  }

  std::string tables = "Accuracy (quantized pipelines vs GPTQ alone)\n" + render_accuracy_table(sum.accuracy, 1);
  const bool both = std::any_of(sum.runs.begin(), sum.runs.end(), [](auto& a) { return a.optimizer == OptimizerKind::adam; }) &&
                    std::any_of(sum.runs.begin(), sum.runs.end(), [](auto& a) { return a.optimizer == OptimizerKind::muon; });
  if (both) tables += "\nPre/post quantization accuracy\n" + render_table4(sum.drops);
  tables += "\nQuasi-optimal hyperparameters\n" + render_table(table6_header(), t6);
  sum.tables = tables;
  io::write_text(run_dir / "eval" / "tables.txt", tables);
  auto records = accuracy_records(results);
  for (auto& r : win_records(sum.wins)) records.push_back(r);
  if (both)
    for (auto& r : robustness_records(sum.drops)) records.push_back(r);
  write_jsonl(run_dir / "eval" / "records.jsonl", records);

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& a : sum.runs) {
    const DistillTrial t = a.best.decode();
    runs.push_back({{"optimizer", to_string(a.optimizer)},
                    {"alpha", t.distill.alpha},
                    {"best_params", fs::relative(a.best_params, run_dir).string()},
                    {"merged", fs::relative(a.merged, run_dir).string()},
                    {"quantized", fs::relative(a.quantized, run_dir).string()},
                    {"validation_loss", a.metrics.validation_loss},
                    {"size", to_json(a.size)}});
  }
  io::write_text(run_dir / "summary.json",
                 nlohmann::json{{"run_id", sum.run_id},
                                {"seed", cfg.seed},
                                {"dataset", dataset.string()},
                                {"runs", runs},
                                {"gptq_alone", {{"quantized", "models/gptq_alone.q4g"}, {"size", to_json(gsize)}}},
                                {"eval", "eval/records.jsonl"},
                                {"losses", "losses.jsonl"}}
                         .dump(2) +
                     "\n");
  return sum;
}

// ---------------------------------------------------------------- experiment

struct ExperimentSummary {
  std::vector<RobustnessRow> rows;
  std::string table;
  std::vector<std::uint64_t> seeds;
};

// For each seed: distill S' with both optimizers under the configured
// hyperparameters, quantize, and score pre/post on the experiment tasks.
inline ExperimentSummary run_experiment(const PipelineConfig& cfg, const Backbones& bb, const fs::path& dataset,
                                        const fs::path& out_dir, const Progress& progress = {}) {
  cfg.validate();
  fs::create_directories(out_dir);
  ExperimentSummary sum;
  for (TaskKind k : cfg.experiment.tasks) sum.rows.push_back({to_string(k), {}, {}});
  const auto items = eval_items(cfg.experiment.tasks, cfg.experiment.items, cfg.seed);
  LossLog log(out_dir / "losses.jsonl");
  for (std::size_t s = 0; s < cfg.experiment.seeds; ++s) {
    const std::uint64_t seed = Rng::mix_seed(cfg.seed, stream::kExperiment + s);
    sum.seeds.push_back(seed);
    const DistillData data = prepare_distill_data(cfg, dataset, bb.teacher, bb.student, seed);
    for (OptimizerKind opt : {OptimizerKind::adam, OptimizerKind::muon}) {
      DistillTrial trial{cfg.lora, cfg.distill};
      trial.distill.optimizer = opt;
      DistillOutcome d = distill_student(bb.student, data, trial, Rng::mix_seed(seed, stream::kDistill));
      log.record_curve(strprintf("seed%zu.%s", s, to_string(opt).c_str()), d.metrics.train_loss);
      auto [qm, size] = quantize_for_budget(cfg, d.merged, data.examples, Rng::mix_seed(seed, stream::kCalibration));
      for (std::size_t t = 0; t < cfg.experiment.tasks.size(); ++t) {
        const auto& its = items.at(cfg.experiment.tasks[t]);
        const AccDrop drop = make_drop(mcq_accuracy(d.merged, its), mcq_accuracy(qm.model(), its));
        (opt == OptimizerKind::adam ? sum.rows[t].adam : sum.rows[t].muon).push_back(drop);
        if (progress)
          progress(strprintf("  seed %zu %s %s: pre %.4f post %.4f drop %+.4f", s, to_string(opt).c_str(),
                             sum.rows[t].task.c_str(), drop.pre, drop.post, drop.drop));
      }
    }
  }
  sum.table = render_table4(sum.rows);
  std::string verdict;
  for (const auto& r : sum.rows) {
    std::vector<double> a, m;
    for (const auto& d : r.adam) a.push_back(d.drop);
    for (const auto& d : r.muon) m.push_back(d.drop);
    const double ma = mean_sd(a).mean, mm = mean_sd(m).mean;
    verdict += r.task + ": mean drop adam " + format_acc(ma) + ", muon " + format_acc(mm) + " -> " +
               (mm < ma ? "muon degrades less" : mm > ma ? "adam degrades less" : "tie") + "\n";
  }
  sum.table += "\n" + verdict;
  io::write_text(out_dir / "table4.txt", sum.table);
  write_jsonl(out_dir / "records.jsonl", robustness_records(sum.rows));
  return sum;
}

}  // namespace nanodistill
