#pragma once

// Low-rank adapters on the block linear layers.
//
// A targeted weight W (out x in) is adapted as W + scale * A B with
// A (out x r) ~ N(0, 1/r) and B (r x in) = 0, so the adapted model starts out
// identical to the base. `scale` is applied directly (not divided by r).

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/util.hpp"

namespace nanodistill {

struct LoraConfig {
  std::size_t rank = 8;
  double scale = 1.0;
  std::vector<std::string> targets = {"layers.*.attn.w*", "layers.*.mlp.w*"};

  void validate() const {
    if (rank < 8 || rank > 64)
      throw InvalidArgument("lora rank " + std::to_string(rank) + " outside [8, 64]");
    if (!(scale >= 0.5 && scale <= 2.0))
      throw InvalidArgument("lora scale " + std::to_string(scale) + " outside [0.5, 2.0]");
    if (targets.empty()) throw InvalidArgument("lora: no target patterns");
  }
};

// Mutable views of trainable tensors, keyed by name.
using ParamRefs = std::map<std::string, Matrix*>;

inline ParamRefs param_refs(ParamMap& params) {
  ParamRefs refs;
  for (auto& [name, m] : params) refs[name] = &m;
  return refs;
}

// A frozen base model plus trainable adapters. Consumed by merge().
class AdaptedModel {
 public:
  AdaptedModel(NanoModel base, LoraConfig config, AdapterSet adapters)
      : base_(std::move(base)), config_(std::move(config)), adapters_(std::move(adapters)) {}

  const NanoModel& base() const {
    require_live();
    return base_;
  }
  const AdapterSet& adapters() const {
    require_live();
    return adapters_;
  }
  AdapterSet& adapters() {
    require_live();
    return adapters_;
  }
  const LoraConfig& config() const { return config_; }
  bool consumed() const { return consumed_; }

  // Adapter tensors keyed "<layer>.A" / "<layer>.B", matching BackwardResult::adapter.
  ParamRefs trainable() {
    require_live();
    ParamRefs refs;
    for (auto& [name, pair] : adapters_.pairs) {
      refs[name + ".A"] = &pair.a;
      refs[name + ".B"] = &pair.b;
    }
    return refs;
  }

  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, pair] : adapters_.pairs) n += pair.a.size() + pair.b.size();
    return n;
  }

  Logits forward(const TokenBatch& batch) const { return nanodistill::forward(base(), batch, &adapters()); }

 private:
  friend NanoModel merge(AdaptedModel& adapted);

  void require_live() const {
    if (consumed_) throw InvalidArgument("adapter already merged into its base model");
  }

  NanoModel base_;
  LoraConfig config_;
  AdapterSet adapters_;
  bool consumed_ = false;
};

inline AdaptedModel attach(NanoModel model, const LoraConfig& config, Rng& rng) {
  config.validate();
  AdapterSet adapters;
  adapters.scale = config.scale;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.rank));
  for (const auto& name : model.linear_layer_names()) {
    if (!matches_any(config.targets, name)) continue;
    const Matrix& w = model.param(name);
    if (config.rank >= std::min(w.rows(), w.cols()))
      throw InvalidArgument("lora rank " + std::to_string(config.rank) + " must be < min(" +
                            std::to_string(w.rows()) + ", " + std::to_string(w.cols()) + ") for " + name);
    LowRankPair pair;
    pair.a = gaussian(rng, w.rows(), config.rank, stddev);
    pair.b = Matrix(config.rank, w.cols());
    adapters.pairs.emplace(name, std::move(pair));
  }
  if (adapters.pairs.empty())
    throw InvalidArgument("lora target patterns [" + join(config.targets, ", ") + "] match no layer");
  return AdaptedModel(std::move(model), config, std::move(adapters));
}

// Folds scale * A B into each targeted weight and returns the plain model.
inline NanoModel merge(AdaptedModel& adapted) {
  adapted.require_live();
  NanoModel model = std::move(adapted.base_);
  for (const auto& [name, pair] : adapted.adapters_.pairs) {
    model.param(name).add_scaled(matmul(pair.a, pair.b), adapted.adapters_.scale);
  }
  adapted.adapters_.pairs.clear();
  adapted.consumed_ = true;
  return model;
}

inline NanoModel merge(AdaptedModel&& adapted) { return merge(adapted); }

// Base tensors plus "lora.<layer>.A/B" and the adapter config as metadata.
inline Checkpoint to_checkpoint(const AdaptedModel& adapted) {
  Checkpoint ck = to_checkpoint(adapted.base());
  const LoraConfig& cfg = adapted.config();
  ck.metadata.emplace_back("lora.rank", std::to_string(cfg.rank));
  ck.metadata.emplace_back("lora.scale", strprintf("%.17g", adapted.adapters().scale));
  ck.metadata.emplace_back("lora.targets", join(cfg.targets, ","));
  for (const auto& [name, pair] : adapted.adapters().pairs) {
    ck.tensors.push_back(f64_record("lora." + name + ".A", pair.a));
    ck.tensors.push_back(f64_record("lora." + name + ".B", pair.b));
  }
  return ck;
}

inline AdaptedModel adapted_from_checkpoint(const Checkpoint& ck) {
  NanoModel base = model_from_checkpoint(ck);
  const std::string* rank = ck.meta("lora.rank");
  const std::string* scale = ck.meta("lora.scale");
  const std::string* targets = ck.meta("lora.targets");
  if (!rank || !scale || !targets) throw FormatError("checkpoint carries no lora config record");
  LoraConfig cfg;
  cfg.rank = std::stoul(*rank);
  cfg.scale = std::stod(*scale);
  cfg.targets = split(*targets, ',');
  AdapterSet adapters;
  adapters.scale = cfg.scale;
  for (const auto& t : ck.tensors) {
    if (!t.name.starts_with("lora.") || !t.name.ends_with(".A")) continue;
    const std::string layer = t.name.substr(5, t.name.size() - 7);
    const TensorRecord* b = ck.find("lora." + layer + ".B");
    if (!b) throw FormatError("lora adapter " + layer + " has A but no B");
    LowRankPair pair{f64_matrix(t), f64_matrix(*b)};
    const Matrix& w = base.param(layer);
    if (pair.a.rows() != w.rows() || pair.b.cols() != w.cols() || pair.a.cols() != cfg.rank ||
        pair.b.rows() != cfg.rank)
      throw FormatError("lora adapter " + layer + " shape disagrees with its base layer");
    adapters.pairs.emplace(layer, std::move(pair));
  }
  return AdaptedModel(std::move(base), cfg, std::move(adapters));
}

inline void save_adapted(const AdaptedModel& adapted, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(to_checkpoint(adapted)));
}

inline AdaptedModel load_adapted(const std::filesystem::path& path) {
  return adapted_from_checkpoint(decode_checkpoint(io::read_file(path)));
}

}  // namespace nanodistill
