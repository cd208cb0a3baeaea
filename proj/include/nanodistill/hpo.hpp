#pragma once

// Sequential hyperparameter search: quasi-random startup, then a tree-structured
// Parzen estimator (TPE). Trials are persisted one JSON object per line.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nanodistill/distill.hpp"
#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/lora.hpp"

namespace nanodistill {

enum class DimKind { continuous, log_uniform, int_grid };

struct Dimension {
  std::string name;
  DimKind kind = DimKind::continuous;
  double low = 0.0;
  double high = 1.0;
  double step = 1.0;  // int_grid only

  std::size_t grid_size() const { return static_cast<std::size_t>(std::llround((high - low) / step)) + 1; }
  double grid_value(std::size_t i) const { return low + static_cast<double>(i) * step; }
  std::size_t grid_index(double v) const {
    const double i = std::nearbyint((v - low) / step);
    return static_cast<std::size_t>(std::clamp(i, 0.0, static_cast<double>(grid_size() - 1)));
  }

  // Internal coordinate for density modelling (log for log-uniform).
  double to_internal(double v) const { return kind == DimKind::log_uniform ? std::log(v) : v; }
  double from_internal(double u) const { return kind == DimKind::log_uniform ? std::exp(u) : u; }
  double internal_low() const { return to_internal(low); }
  double internal_high() const { return to_internal(high); }

  // Maps u in [0, 1) onto the dimension.
  double from_unit(double u) const {
    switch (kind) {
      case DimKind::continuous:
        return low + u * (high - low);
      case DimKind::log_uniform:
        return std::exp(std::log(low) + u * (std::log(high) - std::log(low)));
      case DimKind::int_grid:
        return grid_value(std::min(grid_size() - 1, static_cast<std::size_t>(u * static_cast<double>(grid_size()))));
    }
    return low;
  }

  bool contains(double v) const {
    if (!(v >= low && v <= high)) return false;
    if (kind == DimKind::int_grid) return std::abs(grid_value(grid_index(v)) - v) <= 1e-9 * std::max(1.0, std::abs(v));
    return true;
  }
};

using ParamVector = std::vector<double>;

class SearchSpace {
 public:
  SearchSpace& continuous(std::string name, double low, double high) {
    return add({std::move(name), DimKind::continuous, low, high, 0.0});
  }
  SearchSpace& log_uniform(std::string name, double low, double high) {
    if (!(low > 0.0)) throw InvalidArgument("log-uniform dimension needs low > 0");
    return add({std::move(name), DimKind::log_uniform, low, high, 0.0});
  }
  SearchSpace& int_grid(std::string name, double low, double high, double step) {
    if (!(step > 0.0)) throw InvalidArgument("grid step must be > 0");
    return add({std::move(name), DimKind::int_grid, low, high, step});
  }

  const std::vector<Dimension>& dims() const { return dims_; }
  std::size_t size() const { return dims_.size(); }
  const Dimension& dim(std::size_t i) const { return dims_[i]; }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < dims_.size(); ++i)
      if (dims_[i].name == name) return i;
    throw InvalidArgument("search space has no dimension '" + name + "'");
  }
  double get(const ParamVector& p, const std::string& name) const { return p.at(index_of(name)); }

  bool contains(const ParamVector& p) const {
    if (p.size() != dims_.size()) return false;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (!dims_[i].contains(p[i])) return false;
    return true;
  }

  // The distillation space: LoRA scale and rank, learning rate, temperature,
  // loss weight and weight decay.
  static SearchSpace distill() {
    SearchSpace s;
    s.continuous("lora_scale", 0.5, 2.0)
        .int_grid("lora_rank", 8, 64, 8)
        .log_uniform("learning_rate", 1e-5, 1e-3)
        .continuous("temperature", 0.5, 8.0)
        .continuous("alpha", 0.0, 1.0)
        .continuous("weight_decay", 0.0, 2.0);
    return s;
  }

 private:
  SearchSpace& add(Dimension d) {
    if (!(d.low < d.high)) throw InvalidArgument("dimension " + d.name + ": low must be < high");
    for (const auto& e : dims_)
      if (e.name == d.name) throw InvalidArgument("duplicate dimension " + d.name);
    dims_.push_back(std::move(d));
    return *this;
  }
  std::vector<Dimension> dims_;
};

enum class TrialStatus { complete, failed };

struct TrialRecord {
  std::size_t index = 0;
  ParamVector params;
  double loss = std::numeric_limits<double>::infinity();
  TrialStatus status = TrialStatus::failed;
  std::uint64_t seed = 0;
  std::string error;
};

struct TpeOptions {
  double gamma = 0.25;
  std::size_t startup_trials = 4;
  std::size_t candidates = 24;
};

struct Study {
  SearchSpace space;
  std::uint64_t seed = 0;
  std::size_t budget = 16;
  TpeOptions tpe;
  std::vector<TrialRecord> history;
  std::optional<std::filesystem::path> journal;  // JSONL, appended per trial

  std::uint64_t trial_seed(std::size_t index) const { return Rng::mix_seed(seed, 0x7a1 + index); }

  std::size_t completed() const {
    return static_cast<std::size_t>(std::count_if(history.begin(), history.end(),
                                                  [](const TrialRecord& t) { return t.status == TrialStatus::complete; }));
  }

  // Lowest completed loss; ties go to the earlier trial.
  const TrialRecord* best() const {
    const TrialRecord* b = nullptr;
    for (const auto& t : history)
      if (t.status == TrialStatus::complete && (!b || t.loss < b->loss)) b = &t;
    return b;
  }

  // Best completed loss after each trial (infinity until the first success).
  std::vector<double> best_so_far() const {
    std::vector<double> out;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& t : history) {
      if (t.status == TrialStatus::complete) b = std::min(b, t.loss);
      out.push_back(b);
    }
    return out;
  }
};

namespace detail {

inline double radical_inverse(std::size_t index, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (index > 0) {
    r += f * static_cast<double>(index % base);
    index /= base;
    f *= inv;
  }
  return r;
}

inline unsigned nth_prime(std::size_t n) {
  unsigned candidate = 1;
  std::size_t found = 0;
  while (found <= n) {
    ++candidate;
    bool prime = true;
    for (unsigned d = 2; d * d <= candidate; ++d)
      if (candidate % d == 0) {
        prime = false;
        break;
      }
    found += prime;
  }
  return candidate;
}

// Halton point `index` (skipping the origin) under a seeded random shift.
inline ParamVector quasi_random(const SearchSpace& space, std::size_t index, std::uint64_t seed) {
  Rng shift_rng(Rng::mix_seed(seed, 0xA17));
  ParamVector p(space.size());
  for (std::size_t d = 0; d < space.size(); ++d) {
    const double shift = shift_rng.uniform();
    double u = radical_inverse(index + 1, nth_prime(d)) + shift;
    u -= std::floor(u);
    p[d] = space.dim(d).from_unit(u);
  }
  return p;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// One-dimensional Parzen mixture over [low, high]: truncated Gaussians at the
// observations plus a broad prior component at the centre.
class ParzenContinuous {
 public:
  ParzenContinuous(std::vector<double> points, double low, double high) : low_(low), high_(high) {
    const double range = high - low;
    mus_ = std::move(points);
    std::sort(mus_.begin(), mus_.end());
    const std::size_t n = mus_.size();
    sigmas_.resize(n);
    const double min_sigma = range / std::min(100.0, 1.0 + static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double left = i > 0 ? mus_[i] - mus_[i - 1] : mus_[i] - low;
      const double right = i + 1 < n ? mus_[i + 1] - mus_[i] : high - mus_[i];
      sigmas_[i] = std::clamp(std::max(left, right), min_sigma, range);
    }
    mus_.push_back(0.5 * (low + high));
    sigmas_.push_back(range);
  }

  double sample(Rng& rng) const {
    const std::size_t k = rng.below(mus_.size());
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double x = mus_[k] + sigmas_[k] * rng.normal();
      if (x >= low_ && x <= high_) return x;
    }
    return std::clamp(mus_[k], low_, high_);
  }

  double log_density(double x) const {
    double s = 0.0;
    for (std::size_t k = 0; k < mus_.size(); ++k) {
      const double z = (x - mus_[k]) / sigmas_[k];
      const double mass = normal_cdf((high_ - mus_[k]) / sigmas_[k]) - normal_cdf((low_ - mus_[k]) / sigmas_[k]);
      s += std::exp(-0.5 * z * z) / (sigmas_[k] * std::sqrt(2 * std::numbers::pi) * std::max(mass, 1e-300));
    }
    return std::log(s / static_cast<double>(mus_.size()));
  }

 private:
  double low_, high_;
  std::vector<double> mus_, sigmas_;
};

// Grid dimension treated as categorical with a uniform unit-weight prior.
class ParzenCategorical {
 public:
  ParzenCategorical(const std::vector<std::size_t>& observed, std::size_t categories)
      : weights_(categories, 1.0 / static_cast<double>(categories)) {
    for (auto c : observed) weights_[c] += 1.0;
    double total = 0.0;
    for (double w : weights_) total += w;
    for (double& w : weights_) w /= total;
  }

  std::size_t sample(Rng& rng) const {
    double u = rng.uniform();
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      u -= weights_[i];
      if (u < 0.0) return i;
    }
    return weights_.size() - 1;
  }

  double log_density(std::size_t c) const { return std::log(weights_[c]); }

 private:
  std::vector<double> weights_;
};

}  // namespace detail

// Proposal for the next trial, a pure function of (seed, trial index, history).
inline ParamVector sample_trial(const Study& study) {
  const SearchSpace& space = study.space;
  if (space.size() == 0) throw InvalidArgument("empty search space");
  const std::size_t index = study.history.size();
  std::vector<const TrialRecord*> done;
  for (const auto& t : study.history)
    if (t.status == TrialStatus::complete) done.push_back(&t);
  if (index < study.tpe.startup_trials || done.size() < 2) return detail::quasi_random(space, index, study.seed);

  std::stable_sort(done.begin(), done.end(), [](const TrialRecord* a, const TrialRecord* b) {
    return a->loss < b->loss || (a->loss == b->loss && a->index < b->index);
  });
  const std::size_t n_good = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(study.tpe.gamma * static_cast<double>(done.size()))), 1, done.size() - 1);

  Rng rng(Rng::mix_seed(study.seed, 0x7fe0000ull + index));
  std::vector<ParamVector> cands(study.tpe.candidates, ParamVector(space.size()));
  std::vector<double> score(study.tpe.candidates, 0.0);
  for (std::size_t d = 0; d < space.size(); ++d) {
    const Dimension& dim = space.dim(d);
    if (dim.kind == DimKind::int_grid) {
      std::vector<std::size_t> good, bad;
      for (std::size_t i = 0; i < done.size(); ++i)
        (i < n_good ? good : bad).push_back(dim.grid_index(done[i]->params[d]));
      const detail::ParzenCategorical l(good, dim.grid_size()), g(bad, dim.grid_size());
      for (std::size_t c = 0; c < cands.size(); ++c) {
        const std::size_t k = l.sample(rng);
        cands[c][d] = dim.grid_value(k);
        score[c] += l.log_density(k) - g.log_density(k);
      }
    } else {
      std::vector<double> good, bad;
      for (std::size_t i = 0; i < done.size(); ++i)
        (i < n_good ? good : bad).push_back(dim.to_internal(done[i]->params[d]));
      const detail::ParzenContinuous l(good, dim.internal_low(), dim.internal_high());
      const detail::ParzenContinuous g(bad, dim.internal_low(), dim.internal_high());
      for (std::size_t c = 0; c < cands.size(); ++c) {
        const double u = l.sample(rng);
        cands[c][d] = std::clamp(dim.from_internal(u), dim.low, dim.high);
        score[c] += l.log_density(u) - g.log_density(u);
      }
    }
  }
  const std::size_t pick = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
  return cands[pick];
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json trial_to_json(const Study& study, const TrialRecord& t) {
  nlohmann::json params = nlohmann::json::object();
  for (std::size_t d = 0; d < study.space.size(); ++d) params[study.space.dim(d).name] = t.params[d];
  nlohmann::json j = {{"trial", t.index},
                      {"params", params},
                      {"status", t.status == TrialStatus::complete ? "complete" : "failed"},
                      {"seed", t.seed}};
  j["loss"] = std::isfinite(t.loss) ? nlohmann::json(t.loss) : nlohmann::json(nullptr);
  if (!t.error.empty()) j["error"] = t.error;
  return j;
}

inline TrialRecord trial_from_json(const SearchSpace& space, const nlohmann::json& j) {
  TrialRecord t;
  try {
    t.index = j.at("trial").get<std::size_t>();
    for (const auto& d : space.dims()) t.params.push_back(j.at("params").at(d.name).get<double>());
    const std::string status = j.at("status").get<std::string>();
    if (status != "complete" && status != "failed") throw FormatError("unknown trial status " + status);
    t.status = status == "complete" ? TrialStatus::complete : TrialStatus::failed;
    t.loss = j.at("loss").is_null() ? std::numeric_limits<double>::infinity() : j.at("loss").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("error")) t.error = j["error"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trial record: ") + e.what());
  }
  if (t.status == TrialStatus::complete && !std::isfinite(t.loss))
    throw FormatError("trial " + std::to_string(t.index) + " is complete but has no finite loss");
  return t;
}

inline void append_trial(const Study& study, const TrialRecord& t) {
  if (!study.journal) return;
  if (study.journal->has_parent_path()) std::filesystem::create_directories(study.journal->parent_path());
  std::ofstream out(*study.journal, std::ios::app);
  if (!out) throw IoError("cannot append to " + study.journal->string());
  out << trial_to_json(study, t).dump() << '\n';
  if (!out) throw IoError("write failed: " + study.journal->string());
}

// Reads a journal written by append_trial; records must be in trial order.
inline std::vector<TrialRecord> load_trials(const SearchSpace& space, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TrialRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    TrialRecord t = trial_from_json(space, j);
    if (t.index != out.size())
      throw FormatError(path.string() + ": expected trial " + std::to_string(out.size()) + ", found " +
                        std::to_string(t.index));
    out.push_back(std::move(t));
  }
  return out;
}

// Objective: (params, seed) -> loss. Throwing a library Error or returning a
// non-finite value marks the trial failed.
using Objective = std::function<double(const ParamVector&, std::uint64_t)>;

// Runs trials until the history holds `budget` of them (resuming any history
// already present) and returns the best completed trial.
inline TrialRecord run_study(const Objective& objective, Study& study) {
  while (study.history.size() < study.budget) {
    TrialRecord t;
    t.index = study.history.size();
    t.seed = study.trial_seed(t.index);
    t.params = sample_trial(study);
    try {
      const double loss = objective(t.params, t.seed);
      if (std::isfinite(loss)) {
        t.loss = loss;
        t.status = TrialStatus::complete;
      } else {
        t.error = "non-finite objective value";
      }
    } catch (const Error& e) {
      t.error = e.what();
    }
    study.history.push_back(t);
    append_trial(study, t);
  }
  const TrialRecord* b = study.best();
  if (!b) throw Error("all " + std::to_string(study.history.size()) + " trials failed");
  return *b;
}

// ---------------------------------------------------------------------------
// The distillation objective

struct DistillTrial {
  LoraConfig lora;
  DistillConfig distill;
};

inline DistillTrial decode_distill_params(const SearchSpace& space, const ParamVector& p, OptimizerKind optimizer,
                                          std::vector<std::string> targets, std::size_t batch_size = 8) {
  DistillTrial t;
  t.lora.scale = space.get(p, "lora_scale");
  t.lora.rank = static_cast<std::size_t>(std::llround(space.get(p, "lora_rank")));
  t.lora.targets = std::move(targets);
  t.distill.learning_rate = space.get(p, "learning_rate");
  t.distill.temperature = space.get(p, "temperature");
  t.distill.alpha = space.get(p, "alpha");
  t.distill.weight_decay = space.get(p, "weight_decay");
  t.distill.optimizer = optimizer;
  t.distill.batch_size = batch_size;
  return t;
}

struct DistillContext {
  const NanoModel* student = nullptr;  // never modified: each trial adapts a copy
  const LogitStore* teacher = nullptr;
  const DataSplit* data = nullptr;
  OptimizerKind optimizer = OptimizerKind::muon;
  std::vector<std::string> targets = LoraConfig{}.targets;
  std::size_t batch_size = 8;
};

// Fresh adapter, one training run, validation loss.
inline double distill_objective(const ParamVector& params, std::uint64_t seed, const DistillContext& ctx,
                                const SearchSpace& space = SearchSpace::distill()) {
  if (!ctx.student || !ctx.teacher || !ctx.data) throw InvalidArgument("distill objective context incomplete");
  const DistillTrial trial = decode_distill_params(space, params, ctx.optimizer, ctx.targets, ctx.batch_size);
  Rng rng(seed);
  AdaptedModel adapted = attach(*ctx.student, trial.lora, rng);
  return train_distill(adapted, *ctx.teacher, *ctx.data, trial.distill, rng).validation_loss;
}

}  // namespace nanodistill
