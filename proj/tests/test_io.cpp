#include "yearspan/experiments.hpp"
#include "yearspan/io.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace yearspan;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "yearspan_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Io, NumbersRoundTrip) {
  for (double v : {0.0, -0.0, 1.0, 0.1, -123.456, 1e-300, 6.02214076e23, 0.3333333333333333}) {
    EXPECT_EQ(std::stod(format_number(v)), v) << v;
  }
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_EQ(format_number(-INFINITY), "-inf");
}

TEST(Io, CsvRoundTripWithProvenance) {
  const auto path = temp_dir("csv") / "t.csv";
  Table t{{"a", "b", "c"}, {}};
  t.add({"1", "x", ""});
  t.add({"2", "y", format_number(0.25)});
  const Provenance prov{"demo", 7, 2};
  write_csv(path, prov, t);
  const auto text = slurp(path);
  EXPECT_EQ(text.rfind("# experiment=demo\n# seed=7\n# n=2\n# code_version=" + code_version() + "\n", 0), 0u);
  const auto back = read_csv(path);
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
}

TEST(Io, TableRejectsBadRows) {
  Table t{{"a", "b"}, {}};
  EXPECT_THROW(t.add({"1"}), std::invalid_argument);
  Table q{{"a"}, {{"has,comma"}}};
  EXPECT_THROW(write_csv(temp_dir("bad") / "q.csv", {}, q), std::invalid_argument);
}

TEST(Io, JsonCarriesProvenance) {
  const auto path = temp_dir("json") / "s.json";
  write_json(path, {"demo", 3, 10}, {{"value", 1.5}});
  const auto doc = nlohmann::json::parse(slurp(path));
  EXPECT_EQ(doc["provenance"]["experiment"], "demo");
  EXPECT_EQ(doc["provenance"]["seed"], 3);
  EXPECT_EQ(doc["provenance"]["n"], 10);
  EXPECT_EQ(doc["provenance"]["code_version"], code_version());
  EXPECT_EQ(doc["value"], 1.5);
}

TEST(Io, TableSchemas) {
  Heatmap h;
  h.values = Tensor::zeros({97, 100});
  h.counts.assign(97, 0);
  h.counts[0] = 3;
  h.values.at(0, 5) = 0.5f;
  const auto ht = heatmap_table(h);
  ASSERT_EQ(ht.header.size(), 102u);
  EXPECT_EQ(ht.header[2], "p00");
  EXPECT_EQ(ht.header[101], "p99");
  ASSERT_EQ(ht.rows.size(), 1u);
  EXPECT_EQ(ht.rows[0][0], "02");
  EXPECT_EQ(ht.rows[0][1], "3");
  EXPECT_EQ(ht.rows[0][7], "0.5");

  ScanResult s;
  s.entries = {{ComponentId::head(9, 1), 0.1, -0.2}, {ComponentId::mlp(8), 0.3, 0.0}};
  const auto st = scan_table(s);
  EXPECT_EQ(st.header, (std::vector<std::string>{"component", "kind", "layer", "head", "patched", "delta"}));
  EXPECT_EQ(st.rows[0][1], "head");
  EXPECT_EQ(st.rows[0][2], "9");
  EXPECT_EQ(st.rows[1][1], "mlp");

  const auto ct = curve_table({{2, 0.5}, {98, 0.25}});
  EXPECT_EQ(ct.header, (std::vector<std::string>{"yy", "value"}));
  EXPECT_EQ(ct.rows[1], (std::vector<std::string>{"98", "0.25"}));
}

TEST(Io, ExperimentCatalog) {
  const auto ids = experiment_ids();
  EXPECT_FALSE(ids.empty());
  for (const auto& t : template_ids()) {
    EXPECT_NO_THROW(find_experiment("generalize-" + t));
  }
  EXPECT_EQ(find_experiment("behavioral").default_n, 10000u);
  EXPECT_EQ(find_experiment("pca").default_n, 97u);
  try {
    find_experiment("bogus");
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("circuit-eval"), std::string::npos);
  }
}

TEST(Io, MissingCheckpointIsReported) {
  ExperimentConfig c;
  c.experiment = "circuit-eval";
  c.checkpoint = "/nonexistent/gpt2";
  EXPECT_ANY_THROW(resolve_checkpoint(c));
}

TEST(Io, ManifestListsEveryExperiment) {
  const auto dir = temp_dir("manifest");
  write_manifest(dir);
  const auto doc = nlohmann::json::parse(slurp(dir / "manifest.json"));
  for (const auto& id : experiment_ids()) EXPECT_TRUE(doc.contains(id)) << id;
}
