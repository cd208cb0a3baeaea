#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "nanodistill/dataget.hpp"

using namespace nanodistill;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nanodistill_dataget_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

// Replies from a fixed script, cycling.
class ScriptedBackend : public CompletionBackend {
 public:
  explicit ScriptedBackend(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  std::string id() const override { return "scripted"; }
  Completion complete(const std::string& prompt) override {
    require_prompt(prompt);
    prompts.push_back(prompt);
    return {replies_[(prompts.size() - 1) % replies_.size()], 1, request_id(id(), prompt)};
  }
  std::vector<std::string> prompts;

 private:
  std::vector<std::string> replies_;
};

// Forwards to a mock and fails hard after `limit` calls, like a killed run.
class DyingBackend : public CompletionBackend {
 public:
  DyingBackend(MockBackend& inner, std::size_t limit) : inner_(inner), limit_(limit) {}
  std::string id() const override { return inner_.id(); }
  Completion complete(const std::string& prompt) override {
    if (inner_.calls() >= limit_) throw BackendError("connection reset");
    return inner_.complete(prompt);
  }

 private:
  MockBackend& inner_;
  std::size_t limit_;
};

}  // namespace

TEST(MockBackend, DeterministicPerPromptAndSeed) {
  MockBackend a(3), b(3), c(4);
  const std::string p = qa_prompt("rev4", 5, 0);
  EXPECT_EQ(a.complete(p).text, b.complete(p).text);
  EXPECT_NE(a.complete(p).text, c.complete(p).text);
  EXPECT_THROW(a.complete(""), InvalidArgument);
}

TEST(Subtopics, AstronomyGivesThreeDistinct) {
  MockBackend mock(1);
  SeedSpec spec;
  spec.key_phrases = {"Astronomy"};
  spec.k = 3;
  const auto subs = expand_subtopics(mock, spec);
  ASSERT_EQ(subs.size(), 3u);
  EXPECT_EQ(std::set<std::string>(subs.begin(), subs.end()).size(), 3u);
}

TEST(Subtopics, CaseInsensitiveDedupLogsShortfall) {
  ScriptedBackend backend({"1. Orbits\n2. Comets\n", "- orbits\n- COMETS\n- Tides\n"});
  SeedSpec spec;
  spec.key_phrases = {"sky", "space"};
  spec.k = 2;
  Diagnostics diag;
  const auto subs = expand_subtopics(direct_requester(backend), spec, &diag);
  EXPECT_EQ(subs, (std::vector<std::string>{"Orbits", "Comets"}));
  ASSERT_EQ(diag.warnings.size(), 1u);
  EXPECT_NE(diag.warnings[0].find("space"), std::string::npos);
}

TEST(Subtopics, BoundedByPhrasesTimesK) {
  MockBackend mock(2);
  SeedSpec spec = SeedSpec::desk();
  ASSERT_EQ(spec.key_phrases.size(), 20u);
  for (std::size_t k : {1u, 2u, 4u}) {
    spec.k = k;
    EXPECT_LE(expand_subtopics(mock, spec).size(), 20u * k);
  }
}

TEST(GenerateQa, MockGivesExactlyNWithProvenance) {
  MockBackend mock(5);
  const QABatch b = generate_qa(mock, "mod5", 7);
  ASSERT_EQ(b.pairs.size(), 7u);
  EXPECT_EQ(b.generated, 7u);
  EXPECT_EQ(b.dropped, 0u);
  const std::string rid = request_id(mock.id(), qa_prompt("mod5", 7, 0));
  for (const auto& p : b.pairs) {
    EXPECT_FALSE(p.question.empty());
    EXPECT_FALSE(p.answer.empty());
    EXPECT_EQ(p.request_ids, std::vector<std::string>{rid});
    EXPECT_EQ(p.backend, mock.id());
  }
  EXPECT_THROW(generate_qa(mock, "mod5", 0), InvalidArgument);
}

TEST(GenerateQa, MissingDelimiterIsDropped) {
  ScriptedBackend backend({"Here you go:\nQ: abc= A: cba\nQ: abd= dba\nQ: xy= A: yx\n"});
  const QABatch b = generate_qa(backend, "rev3", 3);
  EXPECT_EQ(b.generated, 3u);
  EXPECT_EQ(b.dropped, 1u);
  ASSERT_EQ(b.pairs.size(), 2u);
  EXPECT_EQ(b.pairs[1].question, "xy=");
  EXPECT_EQ(b.pairs[1].answer, "yx");
}

TEST(Rubric, MockRejectsWrongAnswer) {
  MockBackend mock(9);
  QAPair good{"mod5", "3+4 mod 5 =", "2"};
  QAPair bad{"mod5", "3+4 mod 5 =", "3"};
  const QAPair g = rubric_critique(mock, good);
  const QAPair b = rubric_critique(mock, bad);
  ASSERT_TRUE(g.score && b.score);
  EXPECT_FALSE(g.discarded);
  EXPECT_GE(*g.score, 6.0);
  EXPECT_TRUE(b.discarded);
  EXPECT_LT(*b.score, 6.0);
  EXPECT_EQ(b.discard_reason, "below threshold");
  EXPECT_THROW(rubric_critique(mock, g), InvalidArgument);
}

TEST(Rubric, ClampsAndFlagsUnparseable) {
  ScriptedBackend backend({"Score: 11", "I would rather not say.", "score -3"});
  Diagnostics diag;
  const Requester req = direct_requester(backend);
  const QAPair hi = rubric_critique(req, QAPair{"copy3", "abc=", "abc"}, 6.0, &diag);
  EXPECT_EQ(*hi.score, 10.0);
  EXPECT_FALSE(hi.discarded);
  ASSERT_EQ(diag.warnings.size(), 1u);
  EXPECT_NE(diag.warnings[0].find("clamped"), std::string::npos);
  const QAPair none = rubric_critique(req, QAPair{"copy3", "abc=", "abc"}, 6.0, &diag);
  EXPECT_TRUE(none.discarded);
  EXPECT_EQ(none.discard_reason, "unparseable score");
  const QAPair lo = rubric_critique(req, QAPair{"copy3", "abc=", "abc"}, 6.0, &diag);
  EXPECT_EQ(*lo.score, 0.0);
  EXPECT_TRUE(lo.discarded);
  EXPECT_NE(backend.prompts[0].find(kRubricVersion), std::string::npos);
}

TEST(Alpaca, MappingAndErrors) {
  QAPair p{"rev3", "abc=", "cba"};
  const AlpacaRecord r = to_alpaca(p);
  EXPECT_EQ(r.instruction, "rev3: abc=");
  EXPECT_EQ(r.input, "");
  EXPECT_EQ(r.output, "cba");
  EXPECT_EQ(alpaca_from_json(to_json(r)), r);
  p.answer = "";
  EXPECT_THROW(to_alpaca(p), InvalidArgument);
  p.answer = "cba";
  p.discarded = true;
  EXPECT_THROW(to_alpaca(p), InvalidArgument);
}

TEST(SelfInstruct, UnicodeIsByteExact) {
  const auto dir = scratch("unicode");
  MockBackend mock(4, {0.0, 0.0});
  SeedSpec spec;
  spec.key_phrases = {"Sternkunde über Galaxien ✨"};
  spec.k = 1;
  spec.target = 3;
  run_self_instruct(mock, spec, dir / "u.jsonl");
  const std::string text = io::read_text(dir / "u.jsonl");
  EXPECT_NE(text.find("über Galaxien ✨"), std::string::npos);
  const auto recs = load_alpaca(dir / "u.jsonl");
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_NE(recs[0].instruction.find("über Galaxien ✨"), std::string::npos);
  fs::remove_all(dir);
}

TEST(SelfInstruct, MockTargetIsExactAndAccountingHolds) {
  const auto dir = scratch("full");
  MockBackend mock(21);
  const SeedSpec spec = SeedSpec::desk();
  const auto out = dir / "data.jsonl";
  const DatasetSummary s = run_self_instruct(mock, spec, out);
  EXPECT_TRUE(s.complete);
  EXPECT_EQ(s.accepted, 600u);
  EXPECT_EQ(s.accepted + s.discarded + s.dropped, s.generated);
  EXPECT_LE(s.requests, spec.request_budget());
  EXPECT_GT(s.discarded_by_reason.at("below threshold"), 0u);
  EXPECT_LT(s.attrition(), 0.10);

  const auto lines = lines_of(out);
  ASSERT_EQ(lines.size(), 600u);
  EXPECT_EQ(std::set<std::string>(lines.begin(), lines.end()).size(), 600u);
  for (const auto& l : lines) {
    const AlpacaRecord r = alpaca_from_json(nlohmann::json::parse(l));
    const auto colon = r.instruction.find(": ");
    ASSERT_NE(colon, std::string::npos);
    const auto truth = solve(r.instruction.substr(0, colon), r.instruction.substr(colon + 2));
    ASSERT_TRUE(truth.has_value()) << r.instruction;
    EXPECT_EQ(*truth, r.output) << r.instruction;  // the rubric filtered every wrong answer
  }
  EXPECT_EQ(check_journal(journal_path(out)), "");
  const auto report = nlohmann::json::parse(io::read_text(report_path(out)));
  EXPECT_EQ(report["accepted"], 600);
  EXPECT_EQ(report["rubric"], kRubricVersion);

  // Same seed, same bytes.
  MockBackend again(21);
  run_self_instruct(again, spec, dir / "again.jsonl");
  EXPECT_EQ(io::read_text(out), io::read_text(dir / "again.jsonl"));
  fs::remove_all(dir);
}

TEST(SelfInstruct, ResumeAfterKillHasNoDuplicatesAndSkipsJournaledRequests) {
  const auto dir = scratch("resume");
  const SeedSpec spec = SeedSpec::desk();
  // Short waves so the kill lands after some records were written.
  const SelfInstructOptions fresh{.overprovision = 0.5};
  const SelfInstructOptions resume{.resume = true, .overprovision = 0.5};
  MockBackend reference(33);
  run_self_instruct(reference, spec, dir / "ref.jsonl", fresh);

  const auto out = dir / "data.jsonl";
  MockBackend first(33);
  DyingBackend dying(first, 400);
  EXPECT_THROW(run_self_instruct(dying, spec, out, fresh), BackendError);
  const auto partial = lines_of(out);
  EXPECT_GT(partial.size(), 0u);
  EXPECT_LT(partial.size(), 600u);
  EXPECT_EQ(check_journal(journal_path(out)), "");

  MockBackend second(33);
  const DatasetSummary s = run_self_instruct(second, spec, out, resume);
  EXPECT_EQ(second.calls(), reference.calls() - 400);
  EXPECT_EQ(s.backend_requests, reference.calls() - 400);
  const auto lines = lines_of(out);
  ASSERT_EQ(lines.size(), 600u);
  EXPECT_EQ(std::set<std::string>(lines.begin(), lines.end()).size(), 600u);
  EXPECT_EQ(io::read_text(out), io::read_text(dir / "ref.jsonl"));
  EXPECT_EQ(check_journal(journal_path(out)), "");

  // Resuming a finished run is a pure replay.
  MockBackend third(33);
  run_self_instruct(third, spec, out, resume);
  EXPECT_EQ(third.calls(), 0u);
  EXPECT_EQ(lines_of(out).size(), 600u);
  fs::remove_all(dir);
}

TEST(SelfInstruct, BudgetBelowHalfFailsWithPartialOutput) {
  const auto dir = scratch("budget");
  MockBackend mock(8, {0.8, 0.0});
  SeedSpec spec = SeedSpec::desk();
  spec.target = 100;
  spec.budget_multiplier = 1;
  const auto out = dir / "data.jsonl";
  try {
    run_self_instruct(mock, spec, out);
    FAIL() << "expected RequestBudgetExhausted";
  } catch (const RequestBudgetExhausted& e) {
    EXPECT_LT(2 * e.accepted(), 100u);
    EXPECT_EQ(lines_of(out).size(), e.accepted());
  }
  const auto report = nlohmann::json::parse(io::read_text(report_path(out)));
  EXPECT_EQ(report["complete"], false);
  EXPECT_LE(report["requests"].get<std::size_t>(), 100u);
  const std::size_t identity = report["accepted"].get<std::size_t>() + report["discarded"].get<std::size_t>() +
                               report["dropped"].get<std::size_t>();
  EXPECT_EQ(identity, report["generated"].get<std::size_t>());
  fs::remove_all(dir);
}

TEST(SelfInstruct, DroppedLinesCountedInIdentity) {
  const auto dir = scratch("dropped");
  MockBackend mock(12, {0.05, 0.1});
  SeedSpec spec = SeedSpec::desk();
  spec.target = 120;
  const DatasetSummary s = run_self_instruct(mock, spec, dir / "d.jsonl");
  EXPECT_GT(s.dropped, 0u);
  EXPECT_EQ(s.accepted, 120u);
  EXPECT_EQ(s.accepted + s.discarded + s.dropped, s.generated);
  fs::remove_all(dir);
}

TEST(Journal, RejectsOutOfOrderStages) {
  const auto dir = scratch("journal");
  const auto p = dir / "j.jsonl";
  io::write_text(p, R"({"wave":0,"stage":"seed"})" "\n" R"({"wave":1,"stage":"rubric","request":"a","response":"x"})"
                    "\n" R"({"wave":1,"stage":"qa","request":"b","response":"y"})" "\n");
  EXPECT_NE(check_journal(p), "");
  io::write_text(p, R"({"wave":0,"stage":"subtopics","request":"a","response":"x"})" "\n");
  EXPECT_NE(check_journal(p), "");
  io::write_text(p, R"({"wave":0,"stage":"seed"})" "\n" R"({"wave":1,"stage":"qa","request":"b","response":"y"})"
                    "\n" R"({"wave":1,"stage":"rub)");
  EXPECT_EQ(check_journal(p), "");  // torn tail from a killed writer is tolerated
  fs::remove_all(dir);
}

TEST(SeedSpecFile, RoundtripAndValidation) {
  SeedSpec s = SeedSpec::desk();
  s.k = 3;
  const SeedSpec back = seed_spec_from_json(to_json(s));
  EXPECT_EQ(back.key_phrases, s.key_phrases);
  EXPECT_EQ(back.k, 3u);
  auto j = to_json(s);
  j["k"] = 0;
  EXPECT_THROW(seed_spec_from_json(j), InvalidArgument);
  j = to_json(s);
  j["key_phrases"] = nlohmann::json::array();
  EXPECT_THROW(seed_spec_from_json(j), InvalidArgument);
  EXPECT_THROW(seed_spec_from_json(nlohmann::json::parse(R"({"k":"two"})")), FormatError);
}

class RemoteFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      bodies.push_back(req.body);
      auth.push_back(req.get_header_value("Authorization"));
      const int n = ++hits;
      if (mode == "429-once" && n == 1) {
        res.status = 429;
        return;
      }
      if (mode == "garbage") {
        res.set_content("<html>not json</html>", "text/html");
        return;
      }
      if (mode == "always-503") {
        res.status = 503;
        return;
      }
      const nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "Score: 8"}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }

  RemoteConfig config() const {
    RemoteConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port_);
    c.backoff_initial_ms = 1;
    c.max_retries = 3;
    c.timeout_seconds = 5;
    c.api_key_env = "NANODISTILL_TEST_KEY";
    return c;
  }

  std::string mode = "ok";
  std::vector<std::string> bodies, auth;
  std::atomic<int> hits{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

TEST_F(RemoteFixture, DefaultSamplingParamsAndBearerKey) {
  ::setenv("NANODISTILL_TEST_KEY", "sk-test", 1);
  RemoteBackend remote(config());
  const Completion c = remote.complete("grade this");
  EXPECT_EQ(c.text, "Score: 8");
  EXPECT_EQ(c.attempts, 1u);
  ASSERT_EQ(bodies.size(), 1u);
  const auto body = nlohmann::json::parse(bodies[0]);
  EXPECT_EQ(body["temperature"], 0.7);
  EXPECT_EQ(body["top_p"], 0.95);
  EXPECT_EQ(body["messages"][0]["content"], "grade this");
  EXPECT_EQ(auth[0], "Bearer sk-test");
  ::unsetenv("NANODISTILL_TEST_KEY");
}

TEST_F(RemoteFixture, RateLimitRetriedWithAttemptCount) {
  mode = "429-once";
  RemoteBackend remote(config());
  const Completion c = remote.complete("hello");
  EXPECT_EQ(c.attempts, 2u);
  EXPECT_EQ(hits.load(), 2);
}

TEST_F(RemoteFixture, MalformedBodyCarriesRaw) {
  mode = "garbage";
  RemoteBackend remote(config());
  try {
    remote.complete("hello");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.raw(), "<html>not json</html>");
  }
}

TEST_F(RemoteFixture, BoundedRetriesThenError) {
  mode = "always-503";
  RemoteBackend remote(config());
  EXPECT_THROW(remote.complete("hello"), BackendError);
  EXPECT_EQ(hits.load(), 4);
}

TEST(RemoteConfig, RejectsBadSettings) {
  RemoteConfig c;
  c.top_p = 1.5;
  EXPECT_THROW(RemoteBackend{c}, InvalidArgument);
  c = RemoteConfig{};
  c.base_url = "ftp://x";
  EXPECT_THROW(RemoteBackend{c}, InvalidArgument);
}

TEST(Tasks, ItemsAreSolvableWithFourDistinctOptions) {
  Rng rng(1);
  for (TaskKind k : kAllTasks)
    for (const auto& tag : task_subtopics(k))
      for (int i = 0; i < 50; ++i) {
        const TaskItem item = make_item(tag, rng);
        ASSERT_EQ(item.options.size(), 4u);
        EXPECT_EQ(std::set<std::string>(item.options.begin(), item.options.end()).size(), 4u);
        EXPECT_EQ(item.options[item.correct], item.answer);
        EXPECT_EQ(solve(tag, item.question), item.answer) << item.prompt();
      }
  EXPECT_EQ(solve("mod5", "3+4 mod 5 ="), "2");
}
