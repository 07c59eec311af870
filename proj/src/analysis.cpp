#include "crossfuse/analysis.hpp"

#include "crossfuse/error.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace crossfuse {

namespace fs = std::filesystem;

AttentionGroup mean_traces(std::span<const AttentionTrace> traces) {
  if (traces.empty()) throw DataError("attention summary group is empty");
  AttentionGroup g;
  g.count = traces.size();
  const std::size_t heads = traces.front().head_weights.size();
  if (heads == 0) throw ConfigError("model has no attention heads to summarize");
  for (std::size_t h = 0; h < heads; ++h) {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(traces.front().head_weights[h].rows(),
                                                traces.front().head_weights[h].cols());
    for (const auto& t : traces) acc += t.head_weights.at(h);
    g.per_head.push_back(acc / static_cast<double>(traces.size()));
  }
  g.head_mean = Eigen::MatrixXd::Zero(g.per_head[0].rows(), g.per_head[0].cols());
  for (const auto& m : g.per_head) g.head_mean += m;
  g.head_mean /= static_cast<double>(heads);
  return g;
}

AttentionSummary attention_summary(const Model& model, std::span<const SampleRecord* const> records,
                                   AttentionGrouping grouping) {
  if (model.config().aggregator != Aggregator::cross_attention)
    throw ConfigError("attention maps need a cross-attention model, got " + to_string(model.config().aggregator));
  if (records.empty()) throw DataError("attention summary needs at least one record");
  AttentionSummary s;
  s.source = model.source_domain();
  s.target = records.front()->domain;
  for (auto m : model.config().modalities) s.token_names.push_back(modality_letters({m}));
  std::map<std::string, std::vector<AttentionTrace>> traces;
  if (grouping == AttentionGrouping::by_class) {
    traces["real"];
    traces["fake"];
  }
  for (const auto* r : records) {
    const PreparedSample p = model.prepare(*r);
    const PreparedSample* ptr = &p;
    std::vector<AttentionTrace> t;
    model.logits(std::span(&ptr, 1), &t);
    const std::string key = grouping == AttentionGrouping::all ? "all" : (r->label == kFake ? "fake" : "real");
    traces[key].push_back(std::move(t.front()));
  }
  for (const auto& [k, v] : traces) {
    if (v.empty()) throw DataError("attention summary group '" + k + "' is empty");
    s.groups[k] = mean_traces(v);
  }
  return s;
}

Grid mean_log_spectrum(std::span<const Grid> grays) {
  if (grays.empty()) throw DataError("spectrum summary needs at least one image");
  Grid acc = Grid::Zero(grays.front().rows(), grays.front().cols());
  for (const auto& g : grays) {
    if (g.rows() != acc.rows() || g.cols() != acc.cols())
      throw ShapeError("spectrum images differ in size: " + std::to_string(g.rows()) + "x" +
                       std::to_string(g.cols()) + " vs " + std::to_string(acc.rows()) + "x" +
                       std::to_string(acc.cols()));
    acc += log_abs_features(dct2(g));
  }
  return acc / static_cast<double>(grays.size());
}

SpectrumSummary spectrum_summary(std::span<const SampleRecord* const> records, double clip_lo, double clip_hi) {
  if (records.empty()) throw DataError("spectrum summary needs at least one record");
  if (!(clip_lo < clip_hi)) throw ConfigError("spectrum clip range must satisfy lo < hi");
  SpectrumSummary s;
  s.clip_lo = clip_lo;
  s.clip_hi = clip_hi;
  std::map<std::string, std::vector<Grid>> groups;
  for (const auto* r : records)
    groups[r->domain + "/" + (r->label == kFake ? "fake" : "real")].push_back(r->image.gray());
  for (const auto& [k, g] : groups) {
    s.mean[k] = mean_log_spectrum(g);
    s.count[k] = g.size();
  }
  s.rows = static_cast<int>(s.mean.begin()->second.rows());
  s.cols = static_cast<int>(s.mean.begin()->second.cols());
  for (const auto& [k, g] : s.mean)
    if (g.rows() != s.rows || g.cols() != s.cols) throw ShapeError("spectrum groups differ in image size");
  return s;
}

void write_grid_csv(const Grid& g, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[40];
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", g(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

Grid read_grid_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || *end) throw ParseError("bad number '" + cell + "'", lineno);
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw ParseError("ragged grid row", lineno);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("empty grid file", lineno);
  Grid g(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return g;
}

namespace {

std::string safe_name(std::string s) {
  for (auto& c : s)
    if (c == '/' || c == ' ' || c == '\\') c = '_';
  return s;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

void write_heatmap_svg(const Eigen::MatrixXd& m, const std::vector<std::string>& names,
                       const std::string& title, const fs::path& path) {
  const int cell = 80, margin = 60;
  const auto n = static_cast<int>(m.rows());
  const int w = margin + n * cell + 20, h = margin + n * cell + 20;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\">\n";
  out << "<text x=\"" << margin << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  char buf[32];
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double v = std::clamp(m(r, c), 0.0, 1.0);
      const int shade = static_cast<int>(255 * (1 - v));
      std::snprintf(buf, sizeof buf, "%.3f", m(r, c));
      const int x = margin + c * cell, y = margin + r * cell;
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#444\"/>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 5 << "\" text-anchor=\"middle\" font-size=\"14\" fill=\""
          << (v > 0.5 ? "white" : "black") << "\">" << buf << "</text>\n";
    }
    const std::string label = r < static_cast<int>(names.size()) ? names[r] : std::to_string(r);
    out << "<text x=\"" << margin - 10 << "\" y=\"" << margin + r * cell + cell / 2 + 5
        << "\" text-anchor=\"end\" font-size=\"14\">" << label << "</text>\n";
    out << "<text x=\"" << margin + r * cell + cell / 2 << "\" y=\"" << margin - 8
        << "\" text-anchor=\"middle\" font-size=\"14\">" << label << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

std::vector<fs::path> render_attention(const AttentionSummary& s, const fs::path& dir) {
  ensure_dir(dir);
  std::vector<fs::path> written;
  for (const auto& [group, g] : s.groups) {
    const std::string base = safe_name(group);
    auto p = dir / ("attention_" + base + "_mean.csv");
    write_grid_csv(g.head_mean, p);
    written.push_back(p);
    for (std::size_t h = 0; h < g.per_head.size(); ++h) {
      p = dir / ("attention_" + base + "_head" + std::to_string(h) + ".csv");
      write_grid_csv(g.per_head[h], p);
      written.push_back(p);
    }
    p = dir / ("attention_" + base + "_mean.svg");
    write_heatmap_svg(g.head_mean, s.token_names,
                      s.source + " -> " + s.target + ", " + group + " (n=" + std::to_string(g.count) + ")", p);
    written.push_back(p);
  }
  return written;
}

std::vector<fs::path> render_spectra(const SpectrumSummary& s, const fs::path& dir) {
  ensure_dir(dir);
  std::vector<fs::path> written;
  for (const auto& [key, g] : s.mean) {
    const std::string base = "spectrum_" + safe_name(key);
    auto p = dir / (base + ".csv");
    write_grid_csv(g, p);
    written.push_back(p);
    const Grid scaled =
        ((g.array().max(s.clip_lo).min(s.clip_hi) - s.clip_lo) / (s.clip_hi - s.clip_lo)).matrix();
    Image img = Image::from_grid(scaled);
    quantize_8bit(img);
    p = dir / (base + ".png");
    write_png(img, p);
    written.push_back(p);
  }
  return written;
}

}  // namespace crossfuse
