#pragma once

// Synthetic desk-scale tasks. An item is a short prompt "<tag>: <question>"
// whose answer is a short continuation, plus four distinct candidate answers
// for multiple-choice scoring.
//
//   copy   copy4: abcd=        -> abcd
//   reverse rev4: abcd=        -> dcba
//   modsum mod5: 3+4 mod 5 =   -> 2
//   sort3  sort3: 312=         -> 123
//   pattern pat3: abcabca=     -> b

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "nanodistill/error.hpp"
#include "nanodistill/linalg.hpp"

namespace nanodistill {

enum class TaskKind { copy, reverse, modsum, sort3, pattern };

inline constexpr std::array<TaskKind, 5> kAllTasks = {TaskKind::copy, TaskKind::reverse, TaskKind::modsum,
                                                      TaskKind::sort3, TaskKind::pattern};

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modsum: return "modular-sum";
    case TaskKind::sort3: return "sort-3";
    case TaskKind::pattern: return "pattern-complete";
  }
  return "?";
}

inline TaskKind task_from_string(const std::string& s) {
  for (TaskKind k : kAllTasks)
    if (to_string(k) == s) return k;
  if (s == "modsum") return TaskKind::modsum;
  if (s == "sort3") return TaskKind::sort3;
  if (s == "pattern") return TaskKind::pattern;
  throw InvalidArgument("unknown task '" + s + "'");
}

// Subtopic tags per task; the tag fixes the difficulty parameter.
inline std::vector<std::string> task_subtopics(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return {"copy3", "copy4", "copy5"};
    case TaskKind::reverse: return {"rev3", "rev4", "rev5"};
    case TaskKind::modsum: return {"mod5", "mod7", "mod9"};
    case TaskKind::sort3: return {"sort3d", "sort3c"};
    case TaskKind::pattern: return {"pat2", "pat3"};
  }
  return {};
}

inline std::optional<TaskKind> task_of_subtopic(const std::string& tag) {
  for (TaskKind k : kAllTasks) {
    const auto tags = task_subtopics(k);
    if (std::find(tags.begin(), tags.end(), tag) != tags.end()) return k;
  }
  return std::nullopt;
}

struct TaskItem {
  TaskKind kind = TaskKind::copy;
  std::string subtopic;
  std::string question;
  std::string answer;
  std::vector<std::string> options;  // four distinct candidates, answer among them
  std::size_t correct = 0;

  std::string prompt() const { return subtopic + ": " + question; }
};

namespace detail {

inline std::string random_letters(Rng& rng, std::size_t n, char first = 'a', std::size_t span = 26) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>(first + rng.below(span)));
  return s;
}

inline int tag_number(const std::string& tag) {
  std::size_t p = 0;
  while (p < tag.size() && !std::isdigit(static_cast<unsigned char>(tag[p]))) ++p;
  return p < tag.size() ? std::stoi(tag.substr(p)) : 0;
}

inline std::string parse_body(const std::string& question) {
  const auto eq = question.find('=');
  return eq == std::string::npos ? question : question.substr(0, eq);
}

}  // namespace detail

// Reference answer for a (subtopic, question) pair, or nullopt when the
// question is not a well-formed instance of the subtopic.
inline std::optional<std::string> solve(const std::string& subtopic, const std::string& question) {
  const auto kind = task_of_subtopic(subtopic);
  if (!kind || question.empty() || question.back() != '=') return std::nullopt;
  const std::string body = detail::parse_body(question);
  switch (*kind) {
    case TaskKind::copy:
      return body.empty() ? std::nullopt : std::optional<std::string>(body);
    case TaskKind::reverse:
      return body.empty() ? std::nullopt : std::optional<std::string>(std::string(body.rbegin(), body.rend()));
    case TaskKind::sort3: {
      if (body.size() != 3) return std::nullopt;
      std::string s = body;
      std::sort(s.begin(), s.end());
      return s;
    }
    case TaskKind::modsum: {
      int a, b, m;
      if (std::sscanf(question.c_str(), "%d+%d mod %d =", &a, &b, &m) != 3 || m <= 0) return std::nullopt;
      return std::to_string((a + b) % m);
    }
    case TaskKind::pattern: {
      const int period = detail::tag_number(subtopic);
      if (period <= 0 || body.size() < static_cast<std::size_t>(period)) return std::nullopt;
      return std::string(1, body[body.size() % static_cast<std::size_t>(period)]);
    }
  }
  return std::nullopt;
}

// One item of the given subtopic, drawn from rng.
inline TaskItem make_item(const std::string& subtopic, Rng& rng) {
  const auto kind = task_of_subtopic(subtopic);
  if (!kind) throw InvalidArgument("unknown subtopic '" + subtopic + "'");
  TaskItem item;
  item.kind = *kind;
  item.subtopic = subtopic;
  const int n = detail::tag_number(subtopic);
  std::vector<std::string> distractors;
  switch (*kind) {
    case TaskKind::copy:
    case TaskKind::reverse: {
      const std::string s = detail::random_letters(rng, static_cast<std::size_t>(n));
      item.question = s + "=";
      item.answer = *kind == TaskKind::copy ? s : std::string(s.rbegin(), s.rend());
      // Near misses: the other direction, one swapped pair, one changed letter.
      distractors.push_back(*kind == TaskKind::copy ? std::string(s.rbegin(), s.rend()) : s);
      for (int attempt = 0; attempt < 64 && distractors.size() < 12; ++attempt) {
        std::string d = item.answer;
        if (attempt % 2 == 0) {
          const std::size_t i = rng.below(d.size()), j = rng.below(d.size());
          std::swap(d[i], d[j]);
        } else {
          d[rng.below(d.size())] = static_cast<char>('a' + rng.below(26));
        }
        distractors.push_back(d);
      }
      break;
    }
    case TaskKind::modsum: {
      const int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * n)));
      const int b = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * n)));
      item.question = std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(n) + " =";
      item.answer = std::to_string((a + b) % n);
      for (int r = 0; r < n; ++r) distractors.push_back(std::to_string(r));
      rng.shuffle(distractors);
      break;
    }
    case TaskKind::sort3: {
      std::string pool = subtopic == "sort3d" ? "0123456789" : "abcdefghijklmnopqrstuvwxyz";
      rng.shuffle(std::span<char>(pool));
      const std::string s = pool.substr(0, 3);
      item.question = s + "=";
      item.answer = s;
      std::sort(item.answer.begin(), item.answer.end());
      std::string perm = item.answer;
      while (std::next_permutation(perm.begin(), perm.end())) distractors.push_back(perm);
      rng.shuffle(distractors);
      break;
    }
    case TaskKind::pattern: {
      std::string motif;
      std::string pool = "abcdefghijklmnopqrstuvwxyz";
      rng.shuffle(std::span<char>(pool));
      motif = pool.substr(0, static_cast<std::size_t>(n));
      const std::size_t len = static_cast<std::size_t>(2 * n + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
      std::string body;
      for (std::size_t i = 0; i < len; ++i) body.push_back(motif[i % motif.size()]);
      item.question = body + "=";
      item.answer = std::string(1, motif[len % motif.size()]);
      for (char c : pool.substr(0, 8)) distractors.emplace_back(1, c);
      rng.shuffle(distractors);
      break;
    }
  }
  item.options.push_back(item.answer);
  for (const auto& d : distractors) {
    if (item.options.size() == 4) break;
    if (std::find(item.options.begin(), item.options.end(), d) == item.options.end()) item.options.push_back(d);
  }
  while (item.options.size() < 4) {  // tiny alphabets: pad with fresh strings
    std::string d = detail::random_letters(rng, item.answer.size());
    if (std::find(item.options.begin(), item.options.end(), d) == item.options.end()) item.options.push_back(d);
  }
  rng.shuffle(item.options);
  item.correct = static_cast<std::size_t>(std::find(item.options.begin(), item.options.end(), item.answer) -
                                          item.options.begin());
  return item;
}

// n items of a task, cycling through its subtopics.
inline std::vector<TaskItem> make_task(TaskKind kind, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("make_task: n must be >= 1");
  Rng rng(Rng::mix_seed(seed, 0x7a5c + static_cast<std::uint64_t>(kind)));
  const auto tags = task_subtopics(kind);
  std::vector<TaskItem> items;
  items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) items.push_back(make_item(tags[i % tags.size()], rng));
  return items;
}

}  // namespace nanodistill
