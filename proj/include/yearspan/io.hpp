#pragma once

#include "yearspan/analysis.hpp"
#include "yearspan/patching.hpp"
#include "yearspan/tasks.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace yearspan {

std::string code_version();

// Written at the top of every CSV (as "# key=value" lines) and JSON output.
struct Provenance {
  std::string experiment;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::string code_version = yearspan::code_version();
};

nlohmann::ordered_json to_json(const Provenance& p);

// Shortest round-trip decimal form, locale independent.
std::string format_number(double v);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row);
};

void write_csv(const std::filesystem::path& path, const Provenance& provenance, const Table& table);
// Reads a CSV written by write_csv (provenance lines skipped, no quoting).
Table read_csv(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Provenance& provenance, const nlohmann::ordered_json& body);

// Column schemas.
// metrics:  metric, mean, sd
// heatmap:  yy, count, p00..p99
// scan:     component, kind, layer, head, patched, delta
// lens:     yy, count, y00..y99, argmax_token
// pca:      yy, pc1, pc2
// curve:    yy, value
Table metrics_table(const Metrics& m);
Table heatmap_table(const Heatmap& h);
Table scan_table(const ScanResult& s);
Table lens_table(const LensMap& lens, const Tokenizer& tok);
Table pca_table(const PCAResult& p);
Table curve_table(const std::map<int, double>& curve);

}  // namespace yearspan
