#pragma once

// Self-instruct data generation: key phrases -> subtopics -> QA pairs ->
// rubric scores -> Alpaca records, through a pluggable completion backend.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "nanodistill/checkpoint.hpp"
#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"
#include "nanodistill/nanomodel.hpp"
#include "nanodistill/tasks.hpp"
#include "nanodistill/tokenizer.hpp"
#include "nanodistill/util.hpp"

namespace nanodistill {

class RequestBudgetExhausted : public BackendError {
 public:
  RequestBudgetExhausted(std::size_t accepted, std::size_t target, std::size_t requests)
      : BackendError("request budget exhausted after " + std::to_string(requests) + " requests with " +
                     std::to_string(accepted) + "/" + std::to_string(target) + " records"),
        accepted_(accepted) {}
  std::size_t accepted() const { return accepted_; }

 private:
  std::size_t accepted_;
};

inline std::string hex64(std::uint64_t v) { return strprintf("%016llx", static_cast<unsigned long long>(v)); }

// ---------------------------------------------------------------- seed spec

struct SeedSpec {
  std::string task = "synthetic-reasoning";
  std::vector<std::string> key_phrases;
  std::string prompt_template =
      "Task: {task}\nKey phrase: {phrase}\nList {k} distinct subtopics for this key phrase, one per line.";
  std::size_t k = 2;
  std::size_t target = 600;
  double threshold = 6.0;
  std::size_t pairs_per_request = 8;
  std::size_t budget_multiplier = 5;  // request budget = multiplier * target

  void validate() const {
    if (key_phrases.empty()) throw InvalidArgument("seed spec: at least one key phrase required");
    for (const auto& p : key_phrases)
      if (trim(p).empty()) throw InvalidArgument("seed spec: empty key phrase");
    if (k < 1) throw InvalidArgument("seed spec: k must be >= 1");
    if (target < 1) throw InvalidArgument("seed spec: target must be >= 1");
    if (pairs_per_request < 1) throw InvalidArgument("seed spec: pairs_per_request must be >= 1");
    if (budget_multiplier < 1) throw InvalidArgument("seed spec: budget_multiplier must be >= 1");
    if (!(threshold >= 0.0 && threshold <= 10.0)) throw InvalidArgument("seed spec: threshold must be in [0, 10]");
  }

  std::size_t request_budget() const { return budget_multiplier * target; }

  // Twenty key phrases, four per desk task.
  static SeedSpec desk() {
    SeedSpec s;
    s.key_phrases = {"string copying",     "echo the input",        "repeat the letters", "duplicate text",
                     "string reversal",    "reverse the letters",   "backwards spelling", "mirror words",
                     "modular arithmetic", "clock addition",        "remainders",         "sums modulo n",
                     "sorting digits",     "ordering letters",      "ascending order",    "rank three items",
                     "pattern completion", "sequence continuation", "repeating motifs",   "next symbol"};
    return s;
  }
};

inline nlohmann::json to_json(const SeedSpec& s) {
  return {{"task", s.task},          {"key_phrases", s.key_phrases},
          {"template", s.prompt_template}, {"k", s.k},
          {"target", s.target},      {"threshold", s.threshold},
          {"pairs_per_request", s.pairs_per_request}, {"budget_multiplier", s.budget_multiplier}};
}

inline SeedSpec seed_spec_from_json(const nlohmann::json& j) {
  SeedSpec s;
  try {
    if (!j.is_object()) throw FormatError("seed spec: expected an object");
    s.task = j.value("task", s.task);
    if (j.contains("key_phrases")) s.key_phrases = j.at("key_phrases").get<std::vector<std::string>>();
    s.prompt_template = j.value("template", s.prompt_template);
    s.k = j.value("k", s.k);
    s.target = j.value("target", s.target);
    s.threshold = j.value("threshold", s.threshold);
    s.pairs_per_request = j.value("pairs_per_request", s.pairs_per_request);
    s.budget_multiplier = j.value("budget_multiplier", s.budget_multiplier);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("seed spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline SeedSpec load_seed_spec(const std::filesystem::path& path) {
  try {
    return seed_spec_from_json(nlohmann::json::parse(io::read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- prompts

inline constexpr const char* kRubricVersion = "rubric-v1";

inline std::string rubric_text() {
  return std::string("Rubric ") + kRubricVersion +
         "\nGrade the question-answer pair from 0 to 10 against four criteria:\n"
         "1. well-formedness: the question is a complete prompt and the answer is a bare value.\n"
         "2. factual consistency: the answer is correct for the question.\n"
         "3. answerability: the question has exactly one correct answer.\n"
         "4. topicality: the pair belongs to the stated subtopic.\n"
         "A pair failing criterion 2 scores at most 4.";
}

inline std::string subtopic_prompt(const SeedSpec& spec, const std::string& phrase) {
  std::string out;
  const std::string& t = spec.prompt_template;
  for (std::size_t i = 0; i < t.size();) {
    if (t.compare(i, 6, "{task}") == 0) {
      out += spec.task;
      i += 6;
    } else if (t.compare(i, 8, "{phrase}") == 0) {
      out += phrase;
      i += 8;
    } else if (t.compare(i, 3, "{k}") == 0) {
      out += std::to_string(spec.k);
      i += 3;
    } else {
      out.push_back(t[i++]);
    }
  }
  return out;
}

inline std::string qa_prompt(const std::string& subtopic, std::size_t n, std::size_t round) {
  return "Subtopic: " + subtopic + "\nWrite " + std::to_string(n) + " question-answer pairs for this subtopic (set " +
         std::to_string(round) + ").\nFormat each on its own line as: Q: <question> A: <answer>";
}

struct QAPair;
inline std::string rubric_prompt(const QAPair& pair);

// ---------------------------------------------------------------- backends

struct Completion {
  std::string text;
  std::size_t attempts = 1;
  std::string request_id;
};

inline std::string request_id(const std::string& backend_id, const std::string& prompt) {
  return hex64(fnv1a(prompt, fnv1a(backend_id)));
}

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual std::string id() const = 0;
  virtual Completion complete(const std::string& prompt) = 0;

 protected:
  static void require_prompt(const std::string& prompt) {
    if (prompt.empty()) throw InvalidArgument("complete: empty prompt");
  }
};

struct MockOptions {
  double malformed_rate = 0.05;    // answers deliberately wrong; the rubric should reject them
  double unparseable_rate = 0.0;   // lines missing the answer delimiter
};

namespace detail {

inline std::optional<TaskKind> phrase_task(const std::string& phrase) {
  const std::string p = to_lower(phrase);
  const auto has = [&](std::initializer_list<const char*> words) {
    return std::any_of(words.begin(), words.end(), [&](const char* w) { return p.find(w) != std::string::npos; });
  };
  if (has({"revers", "backward", "mirror"})) return TaskKind::reverse;
  if (has({"copy", "copying", "echo", "repeat the", "duplicate"})) return TaskKind::copy;
  if (has({"modul", "clock", "remainder", "modulo"})) return TaskKind::modsum;
  if (has({"sort", "order", "rank"})) return TaskKind::sort3;
  if (has({"pattern", "sequence", "motif", "next symbol"})) return TaskKind::pattern;
  return std::nullopt;
}

inline std::string line_value(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key, 0) == 0) return trim(line.substr(key.size()));
  return {};
}

}  // namespace detail

// Deterministic stand-in for a teacher endpoint: every answer is a pure
// function of (prompt, seed).
class MockBackend : public CompletionBackend {
 public:
  explicit MockBackend(std::uint64_t seed = 0, MockOptions options = {}) : seed_(seed), options_(options) {}

  std::string id() const override { return "mock:" + std::to_string(seed_); }
  std::size_t calls() const { return calls_; }

  Completion complete(const std::string& prompt) override {
    require_prompt(prompt);
    ++calls_;
    Rng rng(Rng::mix_seed(seed_, fnv1a(prompt)));
    Completion c;
    c.request_id = request_id(id(), prompt);
    if (prompt.rfind("Rubric ", 0) == 0) {
      c.text = grade(prompt, rng);
    } else if (prompt.find("question-answer pairs") != std::string::npos) {
      c.text = pairs(prompt, rng);
    } else if (prompt.find("Key phrase:") != std::string::npos) {
      c.text = subtopics(prompt, rng);
    } else {
      c.text = "I can help with subtopics, question-answer pairs and grading.";
    }
    return c;
  }

 private:
  std::string subtopics(const std::string& prompt, Rng& rng) const {
    const std::string phrase = detail::line_value(prompt, "Key phrase:");
    std::size_t k = 1;
    const auto list = prompt.find("List ");
    if (list != std::string::npos) k = std::max<std::size_t>(1, std::strtoull(prompt.c_str() + list + 5, nullptr, 10));
    std::vector<std::string> out;
    if (const auto kind = detail::phrase_task(phrase)) {
      auto tags = task_subtopics(*kind);
      const std::size_t offset = rng.below(tags.size());
      for (std::size_t i = 0; i < k; ++i) out.push_back(tags[(offset + i) % tags.size()]);
    } else {
      static const char* facets[] = {"history", "core ideas", "instruments", "open problems",
                                     "famous results", "measurement", "applications", "vocabulary"};
      std::vector<std::string> f(std::begin(facets), std::end(facets));
      rng.shuffle(f);
      for (std::size_t i = 0; i < k; ++i)
        out.push_back(phrase + " " + (i < f.size() ? f[i] : "facet " + std::to_string(i + 1)));
    }
    std::string text;
    for (std::size_t i = 0; i < out.size(); ++i) text += std::to_string(i + 1) + ". " + out[i] + "\n";
    return text;
  }

  std::string pairs(const std::string& prompt, Rng& rng) const {
    const std::string subtopic = detail::line_value(prompt, "Subtopic:");
    std::size_t n = 1;
    const auto w = prompt.find("Write ");
    if (w != std::string::npos) n = std::max<std::size_t>(1, std::strtoull(prompt.c_str() + w + 6, nullptr, 10));
    std::string text;
    for (std::size_t i = 0; i < n; ++i) {
      std::string q, a;
      if (task_of_subtopic(subtopic)) {
        const TaskItem item = make_item(subtopic, rng);
        q = item.question;
        a = item.answer;
        if (rng.uniform() < options_.malformed_rate) a = item.options[(item.correct + 1) % item.options.size()];
      } else {
        const auto tag = rng.below(1000);
        q = "Name one fact about " + subtopic + " (#" + std::to_string(tag) + ")?";
        a = "A fact about " + subtopic + " numbered " + std::to_string(tag) + ".";
        if (rng.uniform() < options_.malformed_rate) a = "no idea";
      }
      if (rng.uniform() < options_.unparseable_rate)
        text += "Q: " + q + " " + a + "\n";
      else
        text += "Q: " + q + " A: " + a + "\n";
    }
    return text;
  }

  std::string grade(const std::string& prompt, Rng& rng) const {
    const std::string subtopic = detail::line_value(prompt, "Subtopic:");
    const std::string question = detail::line_value(prompt, "Question:");
    const std::string answer = detail::line_value(prompt, "Answer:");
    bool correct;
    if (task_of_subtopic(subtopic)) {
      const auto truth = solve(subtopic, question);
      correct = truth && *truth == answer;
    } else {
      correct = answer.find(subtopic) != std::string::npos;
    }
    const auto score = correct ? 7 + rng.below(4) : 1 + rng.below(4);
    return "Score: " + std::to_string(score);
  }

  std::uint64_t seed_;
  MockOptions options_;
  std::size_t calls_ = 0;
};

struct RemoteConfig {
  std::string base_url = "http://127.0.0.1:8000";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model = "teacher";
  std::string api_key_env = "NANODISTILL_API_KEY";
  double temperature = 0.7;
  double top_p = 0.95;
  int max_tokens = 1024;
  double timeout_seconds = 60.0;
  int max_retries = 4;
  int backoff_initial_ms = 500;
  int backoff_max_ms = 8000;

  void validate() const {
    if (!(temperature > 0.0)) throw InvalidArgument("remote: temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("remote: top_p must be in (0, 1]");
    if (max_retries < 0 || backoff_initial_ms < 0 || backoff_max_ms < 0)
      throw InvalidArgument("remote: retry settings must be >= 0");
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0)
      throw InvalidArgument("remote: base_url must start with http:// or https://");
  }
};

// OpenAI-compatible chat-completions client.
class RemoteBackend : public CompletionBackend {
 public:
  explicit RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  std::string id() const override { return "remote:" + cfg_.base_url + "#" + cfg_.model; }

  nlohmann::json request_body(const std::string& prompt) const {
    return {{"model", cfg_.model},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
            {"temperature", cfg_.temperature},
            {"top_p", cfg_.top_p},
            {"max_tokens", cfg_.max_tokens}};
  }

  Completion complete(const std::string& prompt) override {
    require_prompt(prompt);
    httplib::Client client(cfg_.base_url);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);
    const std::string body = request_body(prompt).dump();

    std::string last_error;
    int delay = cfg_.backoff_initial_ms;
    for (int attempt = 1; attempt <= cfg_.max_retries + 1; ++attempt) {
      const auto res = client.Post(cfg_.path, headers, body, "application/json");
      if (!res) {
        last_error = "transport: " + httplib::to_string(res.error());
      } else if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
      } else if (res->status != 200) {
        throw BackendError("remote: HTTP " + std::to_string(res->status) + ": " + res->body);
      } else {
        Completion c;
        c.text = parse_content(res->body);
        c.attempts = static_cast<std::size_t>(attempt);
        c.request_id = request_id(id(), prompt);
        return c;
      }
      if (attempt <= cfg_.max_retries) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay = std::min(cfg_.backoff_max_ms, std::max(1, delay * 2));
      }
    }
    throw BackendError("remote: giving up after " + std::to_string(cfg_.max_retries + 1) + " attempts (" +
                       last_error + ")");
  }

  static std::string parse_content(const std::string& raw) {
    try {
      const auto j = nlohmann::json::parse(raw);
      const auto& content = j.at("choices").at(0).at("message").at("content");
      if (!content.is_string()) throw ParseError("remote: message content is not a string", raw);
      return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("remote: malformed response: ") + e.what(), raw);
    }
  }

 private:
  RemoteConfig cfg_;
};

// A local nanomodel as the teacher. Sampling is seeded per prompt so repeated
// requests agree.
class LocalTeacherBackend : public CompletionBackend {
 public:
  LocalTeacherBackend(const NanoModel& teacher, GenerationParams params, std::uint64_t seed)
      : teacher_(&teacher), params_(params), seed_(seed) {
    if (!(params_.temperature > 0.0)) throw InvalidArgument("local: temperature must be > 0");
    if (!(params_.top_p > 0.0 && params_.top_p <= 1.0)) throw InvalidArgument("local: top_p must be in (0, 1]");
  }

  std::string id() const override { return "local:" + std::to_string(seed_); }

  Completion complete(const std::string& prompt) override {
    require_prompt(prompt);
    Rng rng(Rng::mix_seed(seed_, fnv1a(prompt)));
    std::vector<int> ids{CharTokenizer::kBos};
    const auto enc = CharTokenizer::encode(prompt);
    ids.insert(ids.end(), enc.begin(), enc.end());
    Completion c;
    c.text = CharTokenizer::decode(generate(*teacher_, ids, params_, rng));
    c.request_id = request_id(id(), prompt);
    return c;
  }

 private:
  const NanoModel* teacher_;
  GenerationParams params_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------- records

struct QAPair {
  std::string subtopic;
  std::string question;
  std::string answer;
  std::optional<double> score;
  bool discarded = false;
  std::string discard_reason;
  std::string backend;
  std::vector<std::string> request_ids;
  std::string key;  // stable identity: QA request id + position in the response
};

inline std::string rubric_prompt(const QAPair& pair) {
  return rubric_text() + "\nSubtopic: " + pair.subtopic + "\nQuestion: " + pair.question + "\nAnswer: " + pair.answer +
         "\nReply with one line: Score: <integer 0-10>";
}

struct AlpacaRecord {
  std::string instruction;
  std::string input;
  std::string output;

  bool operator==(const AlpacaRecord&) const = default;
};

inline nlohmann::json to_json(const AlpacaRecord& r) {
  return {{"instruction", r.instruction}, {"input", r.input}, {"output", r.output}};
}

inline AlpacaRecord alpaca_from_json(const nlohmann::json& j) {
  try {
    AlpacaRecord r{j.at("instruction").get<std::string>(), j.value("input", std::string()),
                   j.at("output").get<std::string>()};
    if (r.instruction.empty() || r.output.empty()) throw FormatError("alpaca record: empty instruction or output");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("alpaca record: ") + e.what());
  }
}

inline AlpacaRecord to_alpaca(const QAPair& pair) {
  if (pair.discarded) throw InvalidArgument("to_alpaca: pair was discarded (" + pair.discard_reason + ")");
  if (pair.question.empty() || pair.answer.empty()) throw InvalidArgument("to_alpaca: empty question or answer");
  return {pair.subtopic + ": " + pair.question, "", pair.answer};
}

inline std::vector<AlpacaRecord> load_alpaca(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<AlpacaRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(alpaca_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- stages

// Collected warnings; every stage appends here instead of printing.
struct Diagnostics {
  std::vector<std::string> warnings;
  void warn(std::string msg) { warnings.push_back(std::move(msg)); }
};

inline std::vector<std::string> parse_subtopics(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& raw : split(text, '\n')) {
    std::string line = trim(raw);
    std::size_t p = 0;
    while (p < line.size() && (std::isdigit(static_cast<unsigned char>(line[p])) || line[p] == '.' ||
                               line[p] == ')' || line[p] == '-' || line[p] == '*'))
      ++p;
    line = trim(line.substr(p));
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// Appends to `seen` (lower-cased) so repeated calls dedupe globally.
inline std::vector<std::string> dedupe_subtopics(const std::vector<std::string>& candidates,
                                                 std::set<std::string>& seen) {
  std::vector<std::string> out;
  for (const auto& c : candidates)
    if (seen.insert(to_lower(c)).second) out.push_back(c);
  return out;
}

using Requester = std::function<Completion(const std::string& stage, const std::string& prompt)>;

inline Requester direct_requester(CompletionBackend& backend) {
  return [&backend](const std::string&, const std::string& prompt) { return backend.complete(prompt); };
}

inline std::vector<std::string> expand_subtopics(const Requester& request, const SeedSpec& spec, Diagnostics* diag) {
  spec.validate();
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& phrase : spec.key_phrases) {
    auto got = parse_subtopics(request("subtopics", subtopic_prompt(spec, phrase)).text);
    if (got.size() > spec.k) got.resize(spec.k);
    const auto fresh = dedupe_subtopics(got, seen);
    if (fresh.size() < spec.k && diag)
      diag->warn("key phrase '" + phrase + "': " + std::to_string(spec.k - fresh.size()) +
                 " subtopic(s) short after dedup");
    out.insert(out.end(), fresh.begin(), fresh.end());
  }
  return out;
}

inline std::vector<std::string> expand_subtopics(CompletionBackend& backend, const SeedSpec& spec,
                                                 Diagnostics* diag = nullptr) {
  return expand_subtopics(direct_requester(backend), spec, diag);
}

struct QABatch {
  std::vector<QAPair> pairs;
  std::size_t generated = 0;  // lines that attempted a "Q:" pair
  std::size_t dropped = 0;    // of those, unparseable
};

inline QABatch parse_qa(const std::string& text, const std::string& subtopic, const std::string& backend,
                        const std::string& req_id) {
  QABatch b;
  for (const auto& raw : split(text, '\n')) {
    const std::string line = trim(raw);
    const auto q = line.find("Q:");
    if (q == std::string::npos) continue;  // chatter, not an attempt
    ++b.generated;
    const auto a = line.find(" A:", q + 2);
    if (a == std::string::npos) {
      ++b.dropped;
      continue;
    }
    QAPair p;
    p.subtopic = subtopic;
    p.question = trim(line.substr(q + 2, a - q - 2));
    p.answer = trim(line.substr(a + 3));
    if (p.question.empty() || p.answer.empty()) {
      ++b.dropped;
      continue;
    }
    p.backend = backend;
    p.request_ids = {req_id};
    p.key = hex64(fnv1a(req_id + "#" + std::to_string(b.generated - 1)));
    b.pairs.push_back(std::move(p));
  }
  return b;
}

inline QABatch generate_qa(const Requester& request, const std::string& backend_id, const std::string& subtopic,
                           std::size_t n, std::size_t round = 0) {
  if (n < 1) throw InvalidArgument("generate_qa: n must be >= 1");
  const Completion c = request("qa", qa_prompt(subtopic, n, round));
  return parse_qa(c.text, subtopic, backend_id, c.request_id);
}

inline QABatch generate_qa(CompletionBackend& backend, const std::string& subtopic, std::size_t n,
                           std::size_t round = 0) {
  return generate_qa(direct_requester(backend), backend.id(), subtopic, n, round);
}

// First integer following "score" (case-insensitive), else the first integer.
inline std::optional<long> parse_score(const std::string& text) {
  const std::string lower = to_lower(text);
  const auto from = [&](std::size_t pos) -> std::optional<long> {
    for (std::size_t i = pos; i < lower.size(); ++i) {
      if (std::isdigit(static_cast<unsigned char>(lower[i]))) {
        const bool neg = i > 0 && lower[i - 1] == '-';
        long v = std::strtol(lower.c_str() + i, nullptr, 10);
        return neg ? -v : v;
      }
    }
    return std::nullopt;
  };
  if (const auto s = lower.find("score"); s != std::string::npos)
    if (auto v = from(s + 5)) return v;
  return from(0);
}

inline QAPair rubric_critique(const Requester& request, QAPair pair, double threshold, Diagnostics* diag) {
  if (pair.score) throw InvalidArgument("rubric_critique: pair already scored");
  const Completion c = request("rubric", rubric_prompt(pair));
  pair.request_ids.push_back(c.request_id);
  const auto raw = parse_score(c.text);
  if (!raw) {
    pair.discarded = true;
    pair.discard_reason = "unparseable score";
    return pair;
  }
  double s = static_cast<double>(*raw);
  if (s < 0.0 || s > 10.0) {
    const double clamped = std::clamp(s, 0.0, 10.0);
    if (diag) diag->warn(strprintf("rubric score %g clamped to %g", s, clamped));
    s = clamped;
  }
  pair.score = s;
  if (s < threshold) {
    pair.discarded = true;
    pair.discard_reason = "below threshold";
  }
  return pair;
}

inline QAPair rubric_critique(CompletionBackend& backend, QAPair pair, double threshold = 6.0,
                              Diagnostics* diag = nullptr) {
  return rubric_critique(direct_requester(backend), std::move(pair), threshold, diag);
}

// ---------------------------------------------------------------- journal

// Stage-tagged JSONL log of every backend response. Records are ordered by
// (wave, stage); wave 0 holds seed and subtopics, later waves run
// qa -> rubric -> format.
enum class Stage { seed = 0, subtopics = 1, qa = 2, rubric = 3, format = 4 };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::seed: return "seed";
    case Stage::subtopics: return "subtopics";
    case Stage::qa: return "qa";
    case Stage::rubric: return "rubric";
    case Stage::format: return "format";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::seed, Stage::subtopics, Stage::qa, Stage::rubric, Stage::format})
    if (to_string(st) == s) return st;
  throw FormatError("journal: unknown stage '" + s + "'");
}

class Journal {
 public:
  Journal() = default;
  // Opens `path`; existing records are replayed when resume is true and
  // discarded otherwise.
  Journal(std::filesystem::path path, bool resume) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    if (resume && std::filesystem::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      std::size_t n = 0;
      bool torn = false;
      while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
          // A torn final line from a killed run is dropped; anything earlier is corruption.
          if (in.peek() == EOF) {
            torn = true;
            break;
          }
          throw FormatError(path_.string() + ":" + std::to_string(n) + ": unparseable journal record");
        }
        accept(j, false);
      }
      if (torn) rewrite();
    } else {
      std::ofstream(path_, std::ios::trunc);
    }
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

  std::optional<nlohmann::json> cached(const std::string& request) const {
    const auto it = responses_.find(request);
    if (it == responses_.end()) return std::nullopt;
    return records_[it->second];
  }
  bool formatted(const std::string& record_key) const { return formatted_.count(record_key) > 0; }

  void append(nlohmann::json record) { accept(record, true); }

 private:
  void accept(const nlohmann::json& j, bool write) {
    std::size_t wave;
    Stage stage;
    try {
      wave = j.at("wave").get<std::size_t>();
      stage = stage_from_string(j.at("stage").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("journal record: ") + e.what());
    }
    if (records_.empty() && stage != Stage::seed) throw FormatError("journal: first record must be the seed stage");
    const auto pos = std::make_pair(wave, static_cast<int>(stage));
    if (!records_.empty() && pos < last_) {
      throw FormatError("journal: stage '" + to_string(stage) + "' in wave " + std::to_string(wave) +
                        " after wave " + std::to_string(last_.first) + " stage rank " +
                        std::to_string(last_.second));
    }
    if (wave == 0 && stage > Stage::subtopics) throw FormatError("journal: wave 0 holds only seed and subtopics");
    if (wave > 0 && stage < Stage::qa) throw FormatError("journal: seed/subtopics outside wave 0");
    last_ = pos;
    records_.push_back(j);
    if (j.contains("request")) responses_.emplace(j["request"].get<std::string>(), records_.size() - 1);
    if (stage == Stage::format) formatted_.insert(j.at("record").get<std::string>());
    if (write && !path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      out << j.dump() << '\n';
      out.flush();
      if (!out) throw IoError("journal write failed: " + path_.string());
    }
  }

  void rewrite() const {
    std::string text;
    for (const auto& r : records_) text += r.dump() + "\n";
    io::write_text(path_, text);
  }

  std::filesystem::path path_;
  std::vector<nlohmann::json> records_;
  std::map<std::string, std::size_t> responses_;
  std::set<std::string> formatted_;
  std::pair<std::size_t, int> last_{0, 0};
};

// ---------------------------------------------------------------- driver

struct SelfInstructOptions {
  bool resume = false;
  std::size_t concurrency = 1;  // requests are issued sequentially; see README
  double overprovision = 1.15;  // QA requests per wave cover this multiple of the shortfall
};

struct DatasetSummary {
  std::size_t generated = 0;
  std::size_t accepted = 0;
  std::size_t discarded = 0;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> discarded_by_reason;
  std::size_t critiqued = 0;
  std::size_t rubric_rejected = 0;
  std::size_t requests = 0;           // logical requests, including journal replays
  std::size_t backend_requests = 0;   // actually sent this run
  std::size_t retries = 0;
  std::size_t budget = 0;
  std::size_t waves = 0;
  std::vector<std::string> subtopics;
  std::vector<std::string> warnings;
  std::string backend;
  std::size_t target = 0;
  bool complete = false;

  // Rubric rejections over critiqued pairs.
  double attrition() const {
    return critiqued ? static_cast<double>(rubric_rejected) / static_cast<double>(critiqued) : 0.0;
  }
};

inline nlohmann::json to_json(const DatasetSummary& s) {
  return {{"generated", s.generated},
          {"accepted", s.accepted},
          {"discarded", s.discarded},
          {"dropped", s.dropped},
          {"discarded_by_reason", s.discarded_by_reason},
          {"critiqued", s.critiqued},
          {"attrition", s.attrition()},
          {"requests", s.requests},
          {"backend_requests", s.backend_requests},
          {"retries", s.retries},
          {"budget", s.budget},
          {"waves", s.waves},
          {"subtopics", s.subtopics},
          {"warnings", s.warnings},
          {"backend", s.backend},
          {"rubric", kRubricVersion},
          {"target", s.target},
          {"complete", s.complete}};
}

inline std::filesystem::path journal_path(const std::filesystem::path& out) { return out.string() + ".journal.jsonl"; }
inline std::filesystem::path report_path(const std::filesystem::path& out) { return out.string() + ".report.json"; }

namespace detail {

struct BudgetStop {};

inline std::string record_key(const AlpacaRecord& r) {
  return hex64(fnv1a(r.output, fnv1a(r.instruction + "\x1f" + r.input)));
}

}  // namespace detail

// Runs the whole pipeline and writes `out` (JSONL Alpaca records, sorted by
// pair key), `out`.report.json and `out`.journal.jsonl. With resume, journaled
// responses are replayed instead of re-requested.
inline DatasetSummary run_self_instruct(CompletionBackend& backend, const SeedSpec& spec,
                                        const std::filesystem::path& out, const SelfInstructOptions& opt = {}) {
  spec.validate();
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  DatasetSummary sum;
  sum.backend = backend.id();
  sum.target = spec.target;
  sum.budget = spec.request_budget();
  Diagnostics diag;
  Journal journal(journal_path(out), opt.resume);

  const std::string spec_hash = hex64(fnv1a(to_json(spec).dump()));
  if (journal.records().empty()) {
    journal.append({{"wave", 0}, {"stage", "seed"}, {"spec", spec_hash}, {"backend", backend.id()}});
  } else if (journal.records().front().value("spec", std::string()) != spec_hash) {
    throw FormatError("journal: seed spec differs from the resumed run; remove the journal or disable resume");
  }

  // Existing output lines are kept during the run and never appended twice.
  std::map<std::string, AlpacaRecord> written;
  if (opt.resume && std::filesystem::exists(out))
    for (const auto& r : load_alpaca(out)) written.emplace(detail::record_key(r), r);
  const bool existed = opt.resume && std::filesystem::exists(out);
  std::ofstream out_stream(out, existed ? std::ios::app : std::ios::trunc);
  if (!out_stream) throw IoError("cannot open for writing: " + out.string());

  std::size_t wave = 0;
  const Requester request = [&](const std::string& stage, const std::string& prompt) -> Completion {
    if (sum.requests >= sum.budget) throw detail::BudgetStop{};
    ++sum.requests;
    const std::string rid = request_id(backend.id(), prompt);
    if (const auto hit = journal.cached(rid)) {
      return {hit->at("response").get<std::string>(), hit->value("attempts", std::size_t{1}), rid};
    }
    Completion c = backend.complete(prompt);
    ++sum.backend_requests;
    sum.retries += c.attempts - 1;
    c.request_id = rid;
    journal.append({{"wave", wave}, {"stage", stage}, {"request", rid}, {"attempts", c.attempts},
                    {"response", c.text}});
    return c;
  };

  std::vector<std::pair<std::string, AlpacaRecord>> accepted;  // (pair key, record)
  std::set<std::string> accepted_content;
  const auto count_discard = [&](const std::string& reason) {
    ++sum.discarded;
    ++sum.discarded_by_reason[reason];
  };

  try {
    sum.subtopics = expand_subtopics(request, spec, &diag);
    if (sum.subtopics.empty()) throw BackendError("self-instruct: backend produced no subtopics");
    std::size_t cursor = 0;
    while (accepted.size() < spec.target) {
      ++wave;
      sum.waves = wave;
      const std::size_t need = spec.target - accepted.size();
      const auto planned = static_cast<std::size_t>(
          std::ceil(static_cast<double>(need) * opt.overprovision / static_cast<double>(spec.pairs_per_request)));
      std::vector<QAPair> fresh;
      for (std::size_t r = 0; r < std::max<std::size_t>(1, planned); ++r, ++cursor) {
        const std::string& subtopic = sum.subtopics[cursor % sum.subtopics.size()];
        const std::size_t round = cursor / sum.subtopics.size();
        QABatch b;
        try {
          b = generate_qa(request, backend.id(), subtopic, spec.pairs_per_request, round);
        } catch (const detail::BudgetStop&) {
          if (fresh.empty()) throw;
          break;
        }
        sum.generated += b.generated;
        sum.dropped += b.dropped;
        fresh.insert(fresh.end(), b.pairs.begin(), b.pairs.end());
      }

      std::vector<QAPair> passed;
      std::size_t i = 0;
      try {
        for (; i < fresh.size() && accepted.size() + passed.size() < spec.target; ++i) {
          QAPair scored = rubric_critique(request, fresh[i], spec.threshold, &diag);
          ++sum.critiqued;
          if (scored.discarded) {
            if (scored.discard_reason == "below threshold") ++sum.rubric_rejected;
            count_discard(scored.discard_reason);
            continue;
          }
          const AlpacaRecord rec = to_alpaca(scored);
          if (!accepted_content.insert(detail::record_key(rec)).second) {
            count_discard("duplicate");
            continue;
          }
          passed.push_back(std::move(scored));
        }
      } catch (const detail::BudgetStop&) {
        for (std::size_t j = i; j < fresh.size(); ++j) count_discard("budget exhausted");
        i = fresh.size();
      }
      for (; i < fresh.size(); ++i) count_discard("surplus");

      for (const auto& p : passed) {
        const AlpacaRecord rec = to_alpaca(p);
        const std::string ck = detail::record_key(rec);
        if (!written.count(ck)) {
          out_stream << to_json(rec).dump() << '\n';
          out_stream.flush();
          written.emplace(ck, rec);
        }
        if (!journal.formatted(ck)) journal.append({{"wave", wave}, {"stage", "format"}, {"record", ck}});
        accepted.emplace_back(p.key, rec);
      }
      if (sum.requests >= sum.budget && accepted.size() < spec.target) throw detail::BudgetStop{};
    }
  } catch (const detail::BudgetStop&) {
    diag.warn("request budget of " + std::to_string(sum.budget) + " exhausted");
  }
  out_stream.close();

  sum.accepted = accepted.size();
  sum.complete = sum.accepted == spec.target;
  std::sort(accepted.begin(), accepted.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::string text;
  for (const auto& [key, rec] : accepted) text += to_json(rec).dump() + "\n";
  io::write_text(out, text);
  sum.warnings = diag.warnings;
  io::write_text(report_path(out), to_json(sum).dump(2) + "\n");

  if (!sum.complete && 2 * sum.accepted < spec.target)
    throw RequestBudgetExhausted(sum.accepted, spec.target, sum.requests);
  return sum;
}

// Checks a journal file against the stage-order rules; returns the first
// violation or an empty string.
inline std::string check_journal(const std::filesystem::path& path) {
  try {
    Journal j(path, true);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

}  // namespace nanodistill
