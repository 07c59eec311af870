#include "crossfuse/metrics.hpp"

#include "crossfuse/error.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace crossfuse {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string full(double v) { return fmt("%.17g", v); }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

MetricBundle MetricBundle::from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
  MetricBundle m;
  m.tp = tp;
  m.fp = fp;
  m.tn = tn;
  m.fn = fn;
  const auto d = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  m.precision = d(tp, tp + fp);
  m.recall = d(tp, tp + fn);
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.accuracy = d(tp + tn, m.total());
  return m;
}

int hard_label(double probability) { return probability >= kDecisionThreshold ? 1 : 0; }

MetricBundle compute_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw DataError("compute_metrics: empty input");
  if (predictions.size() != labels.size())
    throw DataError("compute_metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                    std::to_string(labels.size()) + " labels");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) throw DataError("compute_metrics: labels must be 0 or 1");
    if (p == 1) (y == 1 ? tp : fp)++;
    else (y == 0 ? tn : fn)++;
  }
  return MetricBundle::from_counts(tp, fp, tn, fn);
}

MetricBundle compute_metrics_prob(std::span<const double> probabilities, std::span<const int> labels) {
  std::vector<int> hard(probabilities.size());
  std::transform(probabilities.begin(), probabilities.end(), hard.begin(), hard_label);
  return compute_metrics(hard, labels);
}

TransferMatrix::TransferMatrix(std::vector<std::string> domains)
    : domains_(std::move(domains)), cells_(domains_.size() * domains_.size()) {}

std::size_t TransferMatrix::index_of(const std::string& domain) const {
  auto it = std::find(domains_.begin(), domains_.end(), domain);
  if (it == domains_.end()) throw DataError("domain '" + domain + "' is not in the transfer matrix");
  return static_cast<std::size_t>(it - domains_.begin());
}

double TransferMatrix::ia(std::size_t source) const {
  if (size() < 2) throw DataError("inter-domain average needs at least two domains");
  double sum = 0;
  for (std::size_t t = 0; t < size(); ++t)
    if (t != source) sum += at(source, t).f1;
  return sum / static_cast<double>(size() - 1);
}

double TransferMatrix::average_ia() const {
  double sum = 0;
  for (std::size_t s = 0; s < size(); ++s) sum += ia(s);
  return sum / static_cast<double>(size());
}

TableFormat parse_table_format(const std::string& s) {
  if (s == "text") return TableFormat::text;
  if (s == "csv") return TableFormat::csv;
  if (s == "latex") return TableFormat::latex;
  throw ConfigError("unknown table format '" + s + "' (expected text, csv or latex)");
}

std::string render_table(const TransferMatrix& m, TableFormat format) {
  if (m.empty()) throw DataError("cannot render an empty transfer matrix");
  const std::size_t n = m.size();
  const bool has_ia = n >= 2;
  std::ostringstream out;
  switch (format) {
    case TableFormat::csv: {
      out << "kind,source,target,intra,tp,fp,tn,fn,precision,recall,f1,accuracy,value\n";
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t t = 0; t < n; ++t) {
          const auto& c = m.at(s, t);
          out << "cell," << m.domains()[s] << ',' << m.domains()[t] << ',' << (s == t ? 1 : 0) << ','
              << c.tp << ',' << c.fp << ',' << c.tn << ',' << c.fn << ',' << full(c.precision) << ','
              << full(c.recall) << ',' << full(c.f1) << ',' << full(c.accuracy) << ",\n";
        }
      if (has_ia) {
        for (std::size_t s = 0; s < n; ++s)
          out << "ia," << m.domains()[s] << ",,,,,,,,,,," << full(m.ia(s)) << '\n';
        out << "average_ia,,,,,,,,,,,," << full(m.average_ia()) << '\n';
      }
      break;
    }
    case TableFormat::text: {
      std::size_t w = 8;
      for (const auto& d : m.domains()) w = std::max(w, d.size() + 2);
      auto pad = [&](const std::string& s) { return s + std::string(w > s.size() ? w - s.size() : 1, ' '); };
      out << pad("src\\tgt");
      for (const auto& d : m.domains()) out << pad(d);
      if (has_ia) out << pad("IA");
      out << '\n';
      for (std::size_t s = 0; s < n; ++s) {
        out << pad(m.domains()[s]);
        for (std::size_t t = 0; t < n; ++t)
          out << pad(fmt("%.2f", 100 * m.at(s, t).f1) + (s == t ? "*" : ""));
        if (has_ia) out << pad(fmt("%.2f", 100 * m.ia(s)));
        out << '\n';
      }
      if (has_ia) out << "Average of IA: " << fmt("%.2f", 100 * m.average_ia()) << '\n';
      out << "F1 x 100; * marks intra-domain cells\n";
      break;
    }
    case TableFormat::latex: {
      out << "\\begin{tabular}{l" << std::string(n + (has_ia ? 1 : 0), 'c') << "}\n";
      out << "Train $\\backslash$ Test";
      for (const auto& d : m.domains()) out << " & " << d;
      if (has_ia) out << " & IA";
      out << " \\\\\n\\hline\n";
      for (std::size_t s = 0; s < n; ++s) {
        out << m.domains()[s];
        for (std::size_t t = 0; t < n; ++t) {
          const std::string v = fmt("%.2f", 100 * m.at(s, t).f1);
          out << " & " << (s == t ? "\\textbf{" + v + "}" : v);
        }
        if (has_ia) out << " & " << fmt("%.2f", 100 * m.ia(s));
        out << " \\\\\n";
      }
      if (has_ia)
        out << "\\hline\n\\multicolumn{" << n + 1 << "}{r}{Average of IA} & "
            << fmt("%.2f", 100 * m.average_ia()) << " \\\\\n";
      out << "\\end{tabular}\n";
      break;
    }
  }
  return out.str();
}

TransferMatrix parse_transfer_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::size_t lineno = 0;
  struct Row {
    std::string s, t;
    MetricBundle b;
  };
  std::vector<Row> rows;
  std::vector<std::string> domains;
  auto to_count = [&](const std::string& f) {
    char* end = nullptr;
    const auto v = std::strtoull(f.c_str(), &end, 10);
    if (f.empty() || *end) throw ParseError("bad count '" + f + "'", lineno);
    return static_cast<std::size_t>(v);
  };
  auto to_double = [&](const std::string& f) {
    char* end = nullptr;
    const double v = std::strtod(f.c_str(), &end);
    if (f.empty() || *end) throw ParseError("bad number '" + f + "'", lineno);
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line.rfind("kind,source,target", 0) != 0) throw ParseError("missing transfer csv header", lineno);
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 13) throw ParseError("expected 13 fields, got " + std::to_string(f.size()), lineno);
    if (f[0] != "cell") continue;
    Row r{f[1], f[2], {}};
    r.b.tp = to_count(f[4]);
    r.b.fp = to_count(f[5]);
    r.b.tn = to_count(f[6]);
    r.b.fn = to_count(f[7]);
    r.b.precision = to_double(f[8]);
    r.b.recall = to_double(f[9]);
    r.b.f1 = to_double(f[10]);
    r.b.accuracy = to_double(f[11]);
    if (std::find(domains.begin(), domains.end(), r.s) == domains.end()) domains.push_back(r.s);
    rows.push_back(std::move(r));
  }
  if (domains.empty()) throw ParseError("transfer csv has no cells", lineno);
  if (rows.size() != domains.size() * domains.size())
    throw ParseError("transfer csv is not square", lineno);
  TransferMatrix m(domains);
  for (const auto& r : rows) m.at(m.index_of(r.s), m.index_of(r.t)) = r.b;
  return m;
}

}  // namespace crossfuse
