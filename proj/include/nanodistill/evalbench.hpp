#pragma once

// Multiple-choice scoring on the synthetic tasks, accuracy-drop rows, win
// counts, and the text/JSONL report writers.

#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/distill.hpp"
#include "nanodistill/error.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/tasks.hpp"
#include "nanodistill/tokenizer.hpp"
#include "nanodistill/util.hpp"

namespace nanodistill {

// ---------------------------------------------------------------- scoring

namespace detail {

// Tokens BOS + prompt + option + EOS with the prompt left-truncated to fit;
// returns the index of the first option token.
inline std::size_t render_option(const TaskItem& item, const std::string& option, std::size_t max_seq,
                                 std::vector<int>& tokens) {
  if (option.empty()) throw FormatError("option tokenization: empty option");
  const auto opt = CharTokenizer::encode(option);
  for (int id : opt)
    if (id == CharTokenizer::kUnk) throw FormatError("option tokenization: unsupported character in '" + option + "'");
  auto prompt = CharTokenizer::encode(item.prompt());
  if (opt.size() + 2 >= max_seq) throw FormatError("option tokenization: option longer than the context");
  const std::size_t room = max_seq - opt.size() - 2;
  if (prompt.size() > room) prompt.erase(prompt.begin(), prompt.end() - static_cast<std::ptrdiff_t>(room));
  tokens.clear();
  tokens.push_back(CharTokenizer::kBos);
  tokens.insert(tokens.end(), prompt.begin(), prompt.end());
  const std::size_t first = tokens.size();
  tokens.insert(tokens.end(), opt.begin(), opt.end());
  tokens.push_back(CharTokenizer::kEos);
  return first;
}

}  // namespace detail

// Mean log-probability of the option tokens and the closing EOS.
inline double option_score(const NanoModel& model, const TaskItem& item, const std::string& option,
                           const AdapterSet* adapters = nullptr) {
  std::vector<int> tokens;
  const std::size_t first = detail::render_option(item, option, model.config().max_seq, tokens);
  const Matrix lp = log_softmax(forward(model, tokens, adapters));
  double sum = 0.0;
  for (std::size_t t = first; t < tokens.size(); ++t) sum += lp(t - 1, static_cast<std::size_t>(tokens[t]));
  return sum / static_cast<double>(tokens.size() - first);
}

// Index of the best-scoring option; ties go to the lower index.
inline std::size_t predict(const NanoModel& model, const TaskItem& item, const AdapterSet* adapters = nullptr) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < item.options.size(); ++o) {
    const double s = option_score(model, item, item.options[o], adapters);
    if (s > best_score) {
      best_score = s;
      best = o;
    }
  }
  return best;
}

inline double mcq_accuracy(const NanoModel& model, const std::vector<TaskItem>& items,
                           const AdapterSet* adapters = nullptr) {
  if (items.empty()) throw InvalidArgument("mcq_accuracy: no items");
  if (model.config().vocab_size != static_cast<std::size_t>(CharTokenizer::kVocabSize))
    throw DimensionError("mcq_accuracy: model vocabulary differs from the tokenizer");
  std::size_t correct = 0;
  for (const auto& item : items) correct += predict(model, item, adapters) == item.correct;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

// ---------------------------------------------------------------- reports

struct AccDrop {
  double pre = 0.0;
  double post = 0.0;
  double drop = 0.0;  // pre - post; negative when quantization helped
};

inline AccDrop make_drop(double pre, double post) { return {pre, post, pre - post}; }

inline AccDrop accuracy_drop(const NanoModel& pre, const NanoModel& post, const std::vector<TaskItem>& items) {
  return make_drop(mcq_accuracy(pre, items), mcq_accuracy(post, items));
}

// One method's accuracy per task, in task order.
struct MethodResult {
  std::string method;
  std::vector<std::string> tasks;
  std::vector<double> accuracy;
};

struct WinCounts {
  std::vector<std::string> methods;
  std::vector<double> wins;  // fractional when tied
  std::vector<std::string> tasks;
  std::vector<std::vector<std::size_t>> winners;  // per task, indices of the tied maxima
};

inline WinCounts compare_methods(const std::vector<MethodResult>& results) {
  if (results.empty()) throw InvalidArgument("compare_methods: no methods");
  const auto& tasks = results.front().tasks;
  for (const auto& r : results) {
    if (r.tasks != tasks) throw InvalidArgument("compare_methods: task lists of '" + results.front().method +
                                                "' and '" + r.method + "' differ");
    if (r.accuracy.size() != tasks.size())
      throw InvalidArgument("compare_methods: '" + r.method + "' has " + std::to_string(r.accuracy.size()) +
                            " accuracies for " + std::to_string(tasks.size()) + " tasks");
  }
  WinCounts w;
  w.tasks = tasks;
  w.wins.assign(results.size(), 0.0);
  for (const auto& r : results) w.methods.push_back(r.method);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& r : results) best = std::max(best, r.accuracy[t]);
    std::vector<std::size_t> tied;
    for (std::size_t m = 0; m < results.size(); ++m)
      if (results[m].accuracy[t] == best) tied.push_back(m);
    for (std::size_t m : tied) w.wins[m] += 1.0 / static_cast<double>(tied.size());
    w.winners.push_back(tied);
  }
  return w;
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean_sd: empty");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

// Pre/post accuracy for both optimizers on one task, per seed.
struct RobustnessRow {
  std::string task;
  std::vector<AccDrop> adam;
  std::vector<AccDrop> muon;
};

// ".7159", "-.0015": four decimals without the leading zero.
inline std::string format_acc(double x) {
  std::string s = strprintf("%.4f", x);
  if (s == "-0.0000") s = "0.0000";
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  else if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
  return s;
}

inline std::string format_mean_sd(const MeanSd& m) { return format_acc(m.mean) + "±" + format_acc(m.sd); }

// Columns padded to their widest cell; first column left-aligned, the rest right-aligned.
inline std::string render_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  const auto cell_width = [](const std::string& s) {
    std::size_t n = 0;  // count code points so "±" takes one column
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = cell_width(header[c]);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw InvalidArgument("render_table: row width differs from header");
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], cell_width(r[c]));
  }
  const auto line = [&](const std::vector<std::string>& r) {
    std::string out;
    for (std::size_t c = 0; c < r.size(); ++c) {
      const std::string pad(width[c] - cell_width(r[c]), ' ');
      if (c) out += "  ";
      out += c == 0 ? r[c] + pad : pad + r[c];
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 2 : 0);
  out += std::string(total, '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

inline const std::vector<std::string>& table4_header() {
  static const std::vector<std::string> h = {"Task",      "LoRA-Adam", "Quant-Adam", "AdamAccDrop",
                                             "LoRA-Muon", "Quant-Muon", "MuonAccDrop"};
  return h;
}

inline std::vector<std::string> table4_cells(const RobustnessRow& row) {
  const auto col = [](const std::vector<AccDrop>& v, double AccDrop::*field) {
    std::vector<double> xs;
    for (const auto& d : v) xs.push_back(d.*field);
    return xs.size() == 1 ? format_acc(xs[0]) : format_mean_sd(mean_sd(xs));
  };
  return {row.task,
          col(row.adam, &AccDrop::pre),
          col(row.adam, &AccDrop::post),
          col(row.adam, &AccDrop::drop),
          col(row.muon, &AccDrop::pre),
          col(row.muon, &AccDrop::post),
          col(row.muon, &AccDrop::drop)};
}

inline std::string render_table4(const std::vector<RobustnessRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) cells.push_back(table4_cells(r));
  return render_table(table4_header(), cells);
}

// Accuracy per task and method, plus a Wins row. The first `references`
// columns are shown but do not compete.
inline std::string render_accuracy_table(const std::vector<MethodResult>& results, std::size_t references = 0) {
  if (references >= results.size()) throw InvalidArgument("accuracy table needs at least one contender");
  const WinCounts w =
      compare_methods(std::vector<MethodResult>(results.begin() + static_cast<std::ptrdiff_t>(references), results.end()));
  std::vector<std::string> header{"Task"};
  for (const auto& r : results) header.push_back(r.method);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t t = 0; t < w.tasks.size(); ++t) {
    std::vector<std::string> row{w.tasks[t]};
    for (const auto& r : results) row.push_back(format_acc(r.accuracy[t]));
    rows.push_back(row);
  }
  std::vector<std::string> wins{"Wins"};
  for (std::size_t i = 0; i < references; ++i) wins.push_back("-");
  for (double x : w.wins) wins.push_back(strprintf("%g", x));
  rows.push_back(wins);
  return render_table(header, rows);
}

inline std::vector<nlohmann::json> robustness_records(const std::vector<RobustnessRow>& rows) {
  std::vector<nlohmann::json> out;
  for (const auto& r : rows) {
    for (const auto& [opt, drops] : {std::pair{"adam", &r.adam}, std::pair{"muon", &r.muon}}) {
      for (std::size_t s = 0; s < drops->size(); ++s) {
        const auto& d = (*drops)[s];
        out.push_back({{"kind", "acc_drop"}, {"task", r.task}, {"optimizer", opt}, {"run", s},
                       {"pre", d.pre}, {"post", d.post}, {"drop", d.drop}});
      }
    }
  }
  return out;
}

inline std::vector<nlohmann::json> win_records(const WinCounts& w) {
  std::vector<nlohmann::json> out;
  for (std::size_t m = 0; m < w.methods.size(); ++m)
    out.push_back({{"kind", "wins"}, {"method", w.methods[m]}, {"wins", w.wins[m]}});
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  io::write_text(path, text);
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace nanodistill
