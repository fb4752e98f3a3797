#include "yearspan/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#ifndef YEARSPAN_VERSION
#define YEARSPAN_VERSION "0.1.0"
#endif

namespace yearspan {

namespace {

std::string two_digits(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", v);
  return buf;
}

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

}  // namespace

std::string code_version() { return YEARSPAN_VERSION; }

nlohmann::ordered_json to_json(const Provenance& p) {
  return {{"experiment", p.experiment}, {"seed", p.seed}, {"n", p.n}, {"code_version", p.code_version}};
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void Table::add(std::vector<std::string> row) {
  if (!header.empty() && row.size() != header.size()) {
    throw std::invalid_argument("table row has " + std::to_string(row.size()) + " cells, header has " +
                                std::to_string(header.size()));
  }
  rows.push_back(std::move(row));
}

void write_csv(const std::filesystem::path& path, const Provenance& provenance, const Table& table) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# experiment=" << provenance.experiment << "\n# seed=" << provenance.seed << "\n# n=" << provenance.n
      << "\n# code_version=" << provenance.code_version << "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n\"") != std::string::npos) {
        throw std::invalid_argument("CSV cell needs quoting: " + cells[i]);
      }
      out << (i ? "," : "") << cells[i];
    }
    out << "\n";
  };
  line(table.header);
  for (const auto& r : table.rows) line(r);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Table read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Table t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      t.add(std::move(cells));
    }
  }
  return t;
}

void write_json(const std::filesystem::path& path, const Provenance& provenance, const nlohmann::ordered_json& body) {
  ensure_parent(path);
  nlohmann::ordered_json doc;
  doc["provenance"] = to_json(provenance);
  for (auto it = body.begin(); it != body.end(); ++it) doc[it.key()] = it.value();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

Table metrics_table(const Metrics& m) {
  Table t{{"metric", "mean", "sd"}, {}};
  const auto pd = m.prob_diff_summary();
  const auto cs = m.cutoff_summary();
  t.add({"prob_diff", format_number(pd.mean), format_number(pd.sd)});
  t.add({"cutoff_sharpness", format_number(cs.mean), format_number(cs.sd)});
  return t;
}

Table heatmap_table(const Heatmap& h) {
  Table t;
  t.header = {"yy", "count"};
  for (int y = 0; y < 100; ++y) t.header.push_back("p" + two_digits(y));
  for (std::size_t r = 0; r < h.values.rows(); ++r) {
    if (h.counts[r] == 0) continue;
    std::vector<std::string> row = {two_digits(static_cast<int>(r) + 2), std::to_string(h.counts[r])};
    for (std::size_t y = 0; y < 100; ++y) row.push_back(format_number(h.values.at(r, y)));
    t.add(std::move(row));
  }
  return t;
}

Table scan_table(const ScanResult& s) {
  Table t{{"component", "kind", "layer", "head", "patched", "delta"}, {}};
  for (const auto& e : s.entries) {
    const auto& c = e.component;
    const char* kind = c.is_head() ? "head" : c.is_mlp() ? "mlp" : c.kind == ComponentKind::Neuron ? "neuron" : "other";
    t.add({c.name(), kind, std::to_string(c.layer), std::to_string(c.index), format_number(e.patched),
           format_number(e.delta)});
  }
  return t;
}

Table lens_table(const LensMap& lens, const Tokenizer& tok) {
  Table t;
  t.header = {"yy", "count"};
  for (int y = 0; y < 100; ++y) t.header.push_back("y" + two_digits(y));
  t.header.push_back("argmax_token");
  for (std::size_t r = 0; r < lens.rows(); ++r) {
    std::vector<std::string> row = {two_digits(lens.years[r]), std::to_string(lens.counts[r])};
    for (double v : lens.values[r]) row.push_back(format_number(v));
    std::string arg;
    if (!lens.row_argmax.empty()) arg = tok.token_string(lens.row_argmax[r]);
    if (arg.find_first_of(",\n\"") != std::string::npos) arg = std::to_string(lens.row_argmax[r]);
    row.push_back(arg);
    t.add(std::move(row));
  }
  return t;
}

Table pca_table(const PCAResult& p) {
  Table t{{"yy", "pc1", "pc2"}, {}};
  for (std::size_t i = 0; i < p.years.size(); ++i) {
    t.add({two_digits(p.years[i]), format_number(p.projections[i][0]), format_number(p.projections[i][1])});
  }
  return t;
}

Table curve_table(const std::map<int, double>& curve) {
  Table t{{"yy", "value"}, {}};
  for (const auto& [yy, v] : curve) t.add({two_digits(yy), format_number(v)});
  return t;
}

}  // namespace yearspan
