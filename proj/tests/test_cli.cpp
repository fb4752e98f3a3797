#include <gtest/gtest.h>

#include <json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace {

struct Outcome {
  int status = -1;
  std::string output;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(YEARSPAN_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) o.output.append(buf.data(), n);
  const int raw = pclose(pipe);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path fresh(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "yearspan_cli_tests" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Cli, ListsExperiments) {
  const auto o = run("--list");
  EXPECT_EQ(o.status, 0);
  EXPECT_NE(o.output.find("circuit-eval"), std::string::npos);
  EXPECT_NE(o.output.find("generalize-main"), std::string::npos);
}

TEST(Cli, UnknownExperimentListsValidIds) {
  const auto o = run("--experiment nope --checkpoint " YEARSPAN_TINY_REF_DIR);
  EXPECT_EQ(o.status, 1);
  EXPECT_NE(o.output.find("valid ids"), std::string::npos);
  EXPECT_NE(o.output.find("behavioral"), std::string::npos);
}

TEST(Cli, MissingExperimentIsUsageError) { EXPECT_EQ(run("").status, 2); }

TEST(Cli, MissingCheckpointFails) {
  const auto o = run("--experiment circuit-eval --checkpoint /nonexistent/gpt2 --out " + fresh("missing").string());
  EXPECT_EQ(o.status, 1);
  EXPECT_NE(o.output.find("checkpoint"), std::string::npos);
}

TEST(Cli, RunsAreByteIdentical) {
  const auto a = fresh("a");
  const auto b = fresh("b");
  const std::string common = "--experiment circuit-eval --n 8 --seed 5 --checkpoint " YEARSPAN_TINY_REF_DIR " --out ";
  const auto ra = run(common + a.string());
  ASSERT_EQ(ra.status, 0) << ra.output;
  const auto rb = run(common + b.string());
  ASSERT_EQ(rb.status, 0) << rb.output;

  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 3u);
  EXPECT_TRUE(std::filesystem::exists(a / "manifest.json"));
  const auto summary = nlohmann::json::parse(slurp(a / "circuit-eval" / "summary.json"));
  EXPECT_EQ(summary["provenance"]["experiment"], "circuit-eval");
  EXPECT_EQ(summary["provenance"]["seed"], 5);
  EXPECT_EQ(summary["provenance"]["n"], 8);
  for (const auto& entry : std::filesystem::directory_iterator(a / "circuit-eval")) {
    if (entry.path().extension() == ".csv") EXPECT_EQ(slurp(entry.path()).rfind("# experiment=circuit-eval\n", 0), 0u);
  }
}
