#pragma once

// Distillation losses, the teacher-logit cache and the adapter training loop.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/lora.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/optim.hpp"
#include "nanodistill/tokenizer.hpp"

namespace nanodistill {

struct DistillConfig {
  double alpha = 0.5;
  double temperature = 2.0;
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  OptimizerKind optimizer = OptimizerKind::muon;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must be in [0, 1]");
    if (!(temperature >= 0.5 && temperature <= 8.0)) throw InvalidArgument("temperature must be in [0.5, 8]");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw InvalidArgument("learning rate must be finite and >= 0");
    if (!(weight_decay >= 0.0 && weight_decay <= 2.0)) throw InvalidArgument("weight decay must be in [0, 2]");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  }
};

// Per-position distributions over the vocabulary (one row per position).
using ProbDist = Matrix;

inline constexpr double kLogFloor = 1e-12;

struct LossCounters {
  std::size_t clamped = 0;      // log terms floored at kLogFloor
  std::size_t label_reads = 0;  // label ids consulted
};

// Row-wise log softmax of logits / T, max-shifted.
inline Matrix log_softmax(const Matrix& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (!logits.all_finite()) throw NumericalError("softmax of non-finite logits");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto in = logits.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      o[i] = (in[i] - mx) / temperature;
      sum += std::exp(o[i]);
    }
    const double lse = std::log(sum);
    for (double& v : o) v -= lse;
  }
  return out;
}

inline ProbDist tempered_softmax(const Matrix& logits, double temperature) {
  Matrix p = log_softmax(logits, temperature);
  for (double& v : p.values()) v = std::exp(v);
  return p;
}

namespace detail {

inline double floored_log(double log_p, LossCounters* counters) {
  if (log_p < std::log(kLogFloor)) {
    if (counters) ++counters->clamped;
    return std::log(kLogFloor);
  }
  return log_p;
}

inline double floored_log_prob(double p, LossCounters* counters) {
  return floored_log(p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity(), counters);
}

inline void require_aligned(const TokenBatch& batch, const Logits& logits, const char* what) {
  if (logits.size() != batch.size())
    throw DimensionError(std::string(what) + ": " + std::to_string(logits.size()) + " logit blocks for " +
                         std::to_string(batch.size()) + " sequences");
  for (std::size_t s = 0; s < batch.size(); ++s)
    if (logits[s].rows() != batch.sequences[s].size())
      throw DimensionError(std::string(what) + ": sequence " + std::to_string(s) + " has " +
                           std::to_string(batch.sequences[s].size()) + " tokens but " +
                           std::to_string(logits[s].rows()) + " logit rows");
}

}  // namespace detail

// Mean over supervised positions of -log p(label).
inline double ce_loss(const TokenBatch& batch, const std::vector<ProbDist>& probs,
                      LossCounters* counters = nullptr) {
  detail::require_aligned(batch, probs, "ce_loss");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Sequence& seq = batch.sequences[s];
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (!seq.supervised(p)) continue;
      const int label = seq.label(p);
      if (counters) ++counters->label_reads;
      if (label < 0 || static_cast<std::size_t>(label) >= probs[s].cols())
        throw InvalidArgument("label id " + std::to_string(label) + " outside vocabulary");
      total -= detail::floored_log_prob(probs[s](p, static_cast<std::size_t>(label)), counters);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// T^2 * mean over rows of sum_i pt_i log(pt_i / ps_i). Terms with pt_i = 0 vanish.
inline double kl_loss(const ProbDist& teacher, const ProbDist& student, double temperature,
                      LossCounters* counters = nullptr) {
  if (!teacher.same_shape(student))
    throw DimensionError("kl_loss: teacher " + teacher.shape_string() + " vs student " + student.shape_string());
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  if (teacher.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < teacher.rows(); ++r) {
    for (std::size_t i = 0; i < teacher.cols(); ++i) {
      const double pt = teacher(r, i);
      if (pt == 0.0) continue;
      total += pt * (std::log(pt) - detail::floored_log_prob(student(r, i), counters));
    }
  }
  return temperature * temperature * total / static_cast<double>(teacher.rows());
}

struct LossValue {
  double loss = 0.0;
  double kl = 0.0;
  double ce = 0.0;
  std::size_t positions = 0;
  Logits grad;  // d loss / d student logits, zero at unsupervised rows
};

// alpha * KL(teacher || student at T) + (1 - alpha) * CE(labels, student at T=1),
// both averaged over the supervised positions of the batch. `teacher` may be
// null only when alpha = 0. Label ids are not consulted when alpha = 1.
inline LossValue combined_loss(const TokenBatch& batch, const Logits* teacher, const Logits& student,
                               const DistillConfig& cfg, LossCounters* counters = nullptr) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw InvalidArgument("alpha must be in [0, 1]");
  if (!(cfg.temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  detail::require_aligned(batch, student, "combined_loss student");
  const bool use_kl = cfg.alpha > 0.0;
  const bool use_ce = cfg.alpha < 1.0;
  if (use_kl) {
    if (!teacher) throw InvalidArgument("combined_loss: alpha > 0 needs teacher logits");
    detail::require_aligned(batch, *teacher, "combined_loss teacher");
    for (std::size_t s = 0; s < batch.size(); ++s)
      if ((*teacher)[s].cols() != student[s].cols())
        throw DimensionError("combined_loss: teacher vocabulary " + std::to_string((*teacher)[s].cols()) +
                             " vs student " + std::to_string(student[s].cols()));
  }
  LossValue out;
  for (const auto& seq : batch.sequences)
    for (std::size_t p = 0; p < seq.size(); ++p) out.positions += seq.supervised(p);
  out.grad.reserve(batch.size());
  if (out.positions == 0) {
    for (const auto& s : student) out.grad.emplace_back(s.rows(), s.cols());
    return out;
  }
  const double inv_n = 1.0 / static_cast<double>(out.positions);
  const double t = cfg.temperature;
  double kl_sum = 0.0, ce_sum = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Sequence& seq = batch.sequences[s];
    const std::size_t v = student[s].cols();
    Matrix grad(student[s].rows(), v);
    Matrix ls_t, lt_t, ls_1;
    if (use_kl) {
      ls_t = log_softmax(student[s], t);
      lt_t = log_softmax((*teacher)[s], t);
    }
    if (use_ce) ls_1 = log_softmax(student[s], 1.0);
    for (std::size_t p = 0; p < seq.size(); ++p) {
      if (!seq.supervised(p)) continue;
      auto g = grad.row(p);
      if (use_kl) {
        double kl = 0.0;
        for (std::size_t i = 0; i < v; ++i) {
          const double pt = std::exp(lt_t(p, i));
          const double ps = std::exp(ls_t(p, i));
          if (pt > 0.0) kl += pt * (lt_t(p, i) - detail::floored_log(ls_t(p, i), counters));
          g[i] += cfg.alpha * t * inv_n * (ps - pt);
        }
        kl_sum += kl;
      }
      if (use_ce) {
        const int label = seq.label(p);
        if (counters) ++counters->label_reads;
        if (label < 0 || static_cast<std::size_t>(label) >= v)
          throw InvalidArgument("label id " + std::to_string(label) + " outside vocabulary");
        ce_sum -= detail::floored_log(ls_1(p, static_cast<std::size_t>(label)), counters);
        const double w = (1.0 - cfg.alpha) * inv_n;
        for (std::size_t i = 0; i < v; ++i) g[i] += w * std::exp(ls_1(p, i));
        g[static_cast<std::size_t>(label)] -= w;
      }
    }
    out.grad.push_back(std::move(grad));
  }
  out.kl = t * t * kl_sum * inv_n;
  out.ce = ce_sum * inv_n;
  out.loss = cfg.alpha * out.kl + (1.0 - cfg.alpha) * out.ce;
  return out;
}

// ---------------------------------------------------------------------------
// Examples

struct Example {
  std::uint64_t id = 0;
  Sequence seq;
};

// BOS prompt answer EOS, supervising exactly the positions that predict the
// answer and the EOS. Over-long prompts lose their leading characters.
inline Sequence encode_pair(std::string_view prompt, std::string_view answer, std::size_t max_seq) {
  std::vector<int> p = CharTokenizer::encode(prompt);
  const std::vector<int> a = CharTokenizer::encode(answer);
  if (a.size() + 3 > max_seq)
    throw InvalidArgument("answer of " + std::to_string(a.size()) + " tokens does not fit max_seq " +
                          std::to_string(max_seq));
  const std::size_t room = max_seq - a.size() - 2;
  if (p.size() > room) p.erase(p.begin(), p.end() - static_cast<std::ptrdiff_t>(room));
  Sequence seq;
  seq.tokens.push_back(CharTokenizer::kBos);
  seq.tokens.insert(seq.tokens.end(), p.begin(), p.end());
  seq.tokens.insert(seq.tokens.end(), a.begin(), a.end());
  seq.tokens.push_back(CharTokenizer::kEos);
  seq.loss_mask.assign(seq.tokens.size(), 0);
  for (std::size_t i = p.size(); i + 1 < seq.tokens.size(); ++i) seq.loss_mask[i] = 1;
  return seq;
}

inline TokenBatch batch_of(const std::vector<Example>& examples, std::size_t begin, std::size_t end) {
  TokenBatch b;
  b.sequences.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) b.sequences.push_back(examples[i].seq);
  return b;
}

struct DataSplit {
  std::vector<Example> train;
  std::vector<Example> validation;
};

// Shuffles with `seed` and holds out the last round(n * fraction) examples.
inline DataSplit split_dataset(std::vector<Example> examples, std::uint64_t seed, double validation_fraction = 0.1) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw InvalidArgument("validation fraction must be in (0, 1)");
  if (examples.size() < 2) throw InvalidArgument("need at least two examples to split");
  Rng rng(Rng::mix_seed(seed, 0x5711));
  rng.shuffle(examples);
  std::size_t n_val = static_cast<std::size_t>(std::llround(validation_fraction * examples.size()));
  n_val = std::clamp<std::size_t>(n_val, 1, examples.size() - 1);
  DataSplit split;
  const auto cut = examples.end() - static_cast<std::ptrdiff_t>(n_val);
  split.train.assign(examples.begin(), cut);
  split.validation.assign(cut, examples.end());
  return split;
}

// ---------------------------------------------------------------------------
// Teacher logit cache
//
//   "NDLG" u16 version u64 count u32 vocab char[4] dtype
//   count x (u64 id, u64 payload offset, u32 rows)
//   payload: rows x vocab f64 per entry, little-endian, in index order

class LogitStore {
 public:
  static constexpr std::uint16_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 4 + 2 + 8 + 4 + 4;
  static constexpr std::size_t kIndexEntryBytes = 8 + 8 + 4;

  explicit LogitStore(std::size_t vocab = CharTokenizer::kVocabSize) : vocab_(vocab) {}

  std::size_t vocab() const { return vocab_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(std::uint64_t id) const { return entries_.count(id) != 0; }

  void put(std::uint64_t id, Matrix logits) {
    if (logits.cols() != vocab_)
      throw DimensionError("logit store holds vocabulary " + std::to_string(vocab_) + ", got " +
                           std::to_string(logits.cols()));
    entries_[id] = std::move(logits);
  }

  const Matrix& get(std::uint64_t id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidArgument("no cached teacher logits for example id " + std::to_string(id));
    return it->second;
  }

  Logits gather(const std::vector<Example>& examples, std::size_t begin, std::size_t end) const {
    Logits out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
      const Matrix& m = get(examples[i].id);
      if (m.rows() != examples[i].seq.size())
        throw DimensionError("cached logits for example " + std::to_string(examples[i].id) + " have " +
                             std::to_string(m.rows()) + " rows, sequence has " +
                             std::to_string(examples[i].seq.size()) + " tokens");
      out.push_back(m);
    }
    return out;
  }

  std::size_t serialized_size() const {
    std::size_t n = kHeaderBytes + kIndexEntryBytes * entries_.size();
    for (const auto& [_, m] : entries_) n += m.size() * sizeof(double);
    return n;
  }

  std::vector<std::uint8_t> encode() const {
    io::ByteWriter w;
    w.chars("NDLG");
    w.u16(kVersion);
    w.u64(entries_.size());
    w.u32(static_cast<std::uint32_t>(vocab_));
    w.bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kDtypeF64.data()), 4));
    std::uint64_t offset = 0;
    for (const auto& [id, m] : entries_) {
      w.u64(id);
      w.u64(offset);
      w.u32(static_cast<std::uint32_t>(m.rows()));
      offset += m.size() * sizeof(double);
    }
    for (const auto& [_, m] : entries_)
      for (double v : m.values()) w.f64(v);
    return w.take();
  }

  static LogitStore decode(std::span<const std::uint8_t> data) {
    io::ByteReader r(data, "logit store");
    if (r.chars(4) != "NDLG") throw FormatError("logit store: bad magic");
    const std::uint16_t version = r.u16();
    if (version != kVersion) throw VersionMismatch(version, kVersion);
    const std::uint64_t count = r.u64();
    const std::uint32_t vocab = r.u32();
    if (r.chars(4) != std::string("f64", 4)) throw FormatError("logit store: unsupported dtype");
    if (vocab == 0) throw FormatError("logit store: zero vocabulary");
    if (count > r.remaining() / kIndexEntryBytes) throw FormatError("logit store: index truncated");
    struct Entry {
      std::uint64_t id, offset;
      std::uint32_t rows;
    };
    std::vector<Entry> index(count);
    for (auto& e : index) {
      e.id = r.u64();
      e.offset = r.u64();
      e.rows = r.u32();
    }
    const std::size_t payload_start = r.position();
    LogitStore store(vocab);
    for (const auto& e : index) {
      const std::size_t bytes = static_cast<std::size_t>(e.rows) * vocab * sizeof(double);
      if (e.offset > data.size() - payload_start || bytes > data.size() - payload_start - e.offset)
        throw FormatError("logit store: entry " + std::to_string(e.id) + " runs past end of file");
      io::ByteReader pr(data.subspan(payload_start + e.offset, bytes), "logit store payload");
      Matrix m(e.rows, vocab);
      for (double& v : m.values()) v = pr.f64();
      if (store.contains(e.id)) throw FormatError("logit store: duplicate id " + std::to_string(e.id));
      store.entries_.emplace(e.id, std::move(m));
    }
    return store;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static LogitStore load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

 private:
  std::size_t vocab_;
  std::map<std::uint64_t, Matrix> entries_;
};

inline LogitStore cache_teacher_logits(const NanoModel& teacher, const std::vector<Example>& dataset) {
  LogitStore store(teacher.config().vocab_size);
  for (const auto& ex : dataset) {
    if (store.contains(ex.id)) throw InvalidArgument("duplicate example id " + std::to_string(ex.id));
    store.put(ex.id, forward(teacher, ex.seq.tokens));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Training

struct TrainMetrics {
  std::vector<double> train_loss;  // one entry per optimizer step
  double initial_validation_loss = 0.0;
  double validation_loss = 0.0;
  std::size_t steps = 0;
  LossCounters counters;
};

// Combined loss over the whole split, weighting every supervised position equally.
inline double evaluate_loss(const NanoModel& model, const AdapterSet* adapters, const LogitStore& teacher,
                            const std::vector<Example>& examples, const DistillConfig& cfg,
                            LossCounters* counters = nullptr) {
  double weighted = 0.0;
  std::size_t positions = 0;
  for (std::size_t b = 0; b < examples.size(); b += cfg.batch_size) {
    const std::size_t e = std::min(examples.size(), b + cfg.batch_size);
    const TokenBatch batch = batch_of(examples, b, e);
    const Logits t = cfg.alpha > 0.0 ? teacher.gather(examples, b, e) : Logits{};
    const LossValue lv = combined_loss(batch, cfg.alpha > 0.0 ? &t : nullptr,
                                       forward(model, batch, adapters), cfg, counters);
    weighted += lv.loss * static_cast<double>(lv.positions);
    positions += lv.positions;
  }
  return positions ? weighted / static_cast<double>(positions) : 0.0;
}

// cfg.epochs passes over data.train in seeded shuffled order, updating only the
// adapter tensors. Validation uses the same alpha and temperature.
inline TrainMetrics train_distill(AdaptedModel& student, const LogitStore& teacher, const DataSplit& data,
                                  const DistillConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.train.empty()) throw InvalidArgument("train_distill: empty training split");
  TrainMetrics metrics;
  metrics.initial_validation_loss =
      evaluate_loss(student.base(), &student.adapters(), teacher, data.validation, cfg);
  Optimizer opt(cfg.optimizer);
  std::vector<Example> order = data.train;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const TokenBatch batch = batch_of(order, b, e);
      const Logits t = cfg.alpha > 0.0 ? teacher.gather(order, b, e) : Logits{};
      const ForwardPass pass(student.base(), batch, &student.adapters());
      const Logits logits = pass.logits();
      for (const auto& m : logits)
        if (!m.all_finite())
          throw TrainingDiverged(metrics.steps, cfg.learning_rate, std::numeric_limits<double>::quiet_NaN());
      const LossValue lv = combined_loss(batch, cfg.alpha > 0.0 ? &t : nullptr, logits, cfg, &metrics.counters);
      if (!std::isfinite(lv.loss)) throw TrainingDiverged(metrics.steps, cfg.learning_rate, lv.loss);
      const BackwardResult grads = pass.backward(lv.grad, {.base_params = false, .adapter_params = true});
      opt.step(student.trainable(), grads.adapter, cfg.learning_rate, cfg.weight_decay);
      metrics.train_loss.push_back(lv.loss);
      ++metrics.steps;
    }
  }
  metrics.validation_loss = evaluate_loss(student.base(), &student.adapters(), teacher, data.validation, cfg);
  return metrics;
}

// ---------------------------------------------------------------------------
// Next-token pretraining of the desk-scale teacher and student backbones.

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
  double warmup_fraction = 0.05;
  double final_lr_fraction = 0.1;
};

// Linear warmup then cosine decay to final_lr_fraction of the peak.
inline double pretrain_lr(const PretrainConfig& cfg, std::size_t step) {
  const double warm = std::max(1.0, cfg.warmup_fraction * static_cast<double>(cfg.steps));
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.learning_rate * (s + 1.0) / warm;
  const double progress = (s - warm) / std::max(1.0, static_cast<double>(cfg.steps) - warm);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
  return cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
}

// Full-parameter Adam on cross-entropy; returns the per-step loss.
inline std::vector<double> pretrain(NanoModel& model, const std::vector<Sequence>& corpus,
                                    const PretrainConfig& cfg, Rng& rng) {
  if (corpus.empty()) throw InvalidArgument("pretrain: empty corpus");
  if (cfg.batch_size == 0) throw InvalidArgument("pretrain: batch size must be >= 1");
  DistillConfig ce_only;
  ce_only.alpha = 0.0;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;
  AdamState state;
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    TokenBatch batch;
    for (std::size_t k = 0; k < cfg.batch_size; ++k) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.sequences.push_back(corpus[order[cursor++]]);
    }
    const ForwardPass pass(model, batch);
    const LossValue lv = combined_loss(batch, nullptr, pass.logits(), ce_only);
    const double lr = pretrain_lr(cfg, step);
    if (!std::isfinite(lv.loss)) throw TrainingDiverged(step, lr, lv.loss);
    const BackwardResult grads = pass.backward(lv.grad, {.base_params = true, .adapter_params = false});
    adam_step(param_refs(model.params()), grads.base, state, lr, cfg.weight_decay);
    losses.push_back(lv.loss);
  }
  return losses;
}

}  // namespace nanodistill
