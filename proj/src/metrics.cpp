#include "condacl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

#include "condacl/datagen.hpp"

namespace condacl {

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w) fail(Err::BadShape, "confusion: extent mismatch");
  for (size_t i = 0; i < gt.ids.size(); ++i) {
    uint8_t g = gt.ids[i];
    if (g == LabelMap::kIgnore) continue;
    uint8_t p = pred.ids[i];
    if (g >= n_ || p >= n_) fail(Err::BadLabel, "class id out of range in confusion accumulation");
    ++counts_[static_cast<size_t>(g) * n_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) fail(Err::BadShape, "confusion: class count mismatch");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

uint64_t ConfusionMatrix::total() const {
  uint64_t t = 0;
  for (uint64_t v : counts_) t += v;
  return t;
}

IouResult compute_iou(const ConfusionMatrix& cm) {
  int n = cm.n_classes();
  IouResult r;
  r.per_class.resize(static_cast<size_t>(n));
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < n; ++c) {
    uint64_t inter = cm.at(c, c);
    uint64_t row = 0, col = 0;
    for (int j = 0; j < n; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    uint64_t uni = row + col - inter;
    if (uni == 0) {
      r.per_class[static_cast<size_t>(c)] = std::numeric_limits<double>::quiet_NaN();
    } else {
      double iou = static_cast<double>(inter) / static_cast<double>(uni);
      r.per_class[static_cast<size_t>(c)] = iou;
      sum += iou;
      ++defined;
    }
  }
  if (defined == 0) fail(Err::EmptyMetric, "all classes undefined");
  r.miou = sum / static_cast<double>(defined);
  return r;
}

bool MetricsRecord::operator==(const MetricsRecord& o) const {
  if (stage != o.stage || domain != o.domain || miou != o.miou || timestamp != o.timestamp ||
      config_hash != o.config_hash || iou.size() != o.iou.size())
    return false;
  for (size_t i = 0; i < iou.size(); ++i) {
    bool an = std::isnan(iou[i]), bn = std::isnan(o.iou[i]);
    if (an != bn) return false;
    if (!an && iou[i] != o.iou[i]) return false;
  }
  return true;
}

ForgettingReport forgetting_report(const std::vector<MetricsRecord>& records,
                                   const std::vector<std::string>& domains, int n_stages) {
  std::map<std::pair<int, std::string>, double> miou;
  for (const auto& r : records) miou[{r.stage, r.domain}] = r.miou;
  for (int s = 0; s < n_stages; ++s)
    for (const auto& d : domains)
      if (!miou.count({s, d}))
        fail(Err::IncompleteRecords, "missing record for stage " + std::to_string(s) + ", domain " + d);

  ForgettingReport report;
  for (size_t di = 0; di < domains.size(); ++di) {
    int own_stage = static_cast<int>(di);  // source adapts at 0, target_k at k
    if (own_stage >= n_stages) continue;
    double base = miou[{own_stage, domains[di]}];
    for (int s = own_stage; s < n_stages; ++s)
      report.deltas.push_back({domains[di], s, miou[{s, domains[di]}] - base});
  }
  for (int s = 0; s < n_stages; ++s) {
    double all = 0.0, targets = 0.0;
    for (size_t di = 0; di < domains.size(); ++di) {
      double v = miou[{s, domains[di]}];
      all += v;
      if (di > 0) targets += v;
    }
    report.stage_avg_miou.push_back(all / static_cast<double>(domains.size()));
    report.stage_target_avg_miou.push_back(
        domains.size() > 1 ? targets / static_cast<double>(domains.size() - 1) : all);
  }
  return report;
}

namespace {

std::string percent1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
  return buf;
}

nlohmann::json record_to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["stage"] = r.stage;
  j["domain"] = r.domain;
  nlohmann::json iou = nlohmann::json::array();
  for (double v : r.iou) {
    if (std::isnan(v))
      iou.push_back(nullptr);
    else
      iou.push_back(v);
  }
  j["iou"] = iou;
  j["miou"] = r.miou;
  j["timestamp"] = r.timestamp;
  j["config_hash"] = r.config_hash;
  return j;
}

}  // namespace

void export_metrics(const std::vector<MetricsRecord>& records, const ForgettingReport& report,
                    const std::string& config_hash, uint64_t seed, const std::string& path_prefix) {
  // CSV
  {
    std::ofstream os(path_prefix + "_metrics.csv");
    if (!os) fail(Err::WriteError, "cannot open " + path_prefix + "_metrics.csv");
    os << "stage,domain,class,iou\n";
    for (const auto& r : records) {
      for (size_t c = 0; c < r.iou.size(); ++c) {
        os << r.stage << "," << r.domain << "," << kClassNames[c] << ",";
        if (std::isnan(r.iou[c]))
          os << "NA";
        else
          os << percent1(r.iou[c]);
        os << "\n";
      }
      os << r.stage << "," << r.domain << ",ALL," << percent1(r.miou) << "\n";
    }
    if (!os) fail(Err::WriteError, "failed writing CSV");
  }

  // JSON
  {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) recs.push_back(record_to_json(r));
    j["records"] = recs;
    nlohmann::json deltas = nlohmann::json::array();
    for (const auto& d : report.deltas)
      deltas.push_back({{"domain", d.domain}, {"stage", d.stage}, {"delta", d.delta}});
    j["report"]["deltas"] = deltas;
    j["report"]["stage_avg_miou"] = report.stage_avg_miou;
    j["report"]["stage_target_avg_miou"] = report.stage_target_avg_miou;
    std::ofstream os(path_prefix + "_metrics.json");
    if (!os) fail(Err::WriteError, "cannot open " + path_prefix + "_metrics.json");
    os << j.dump(2) << "\n";
    if (!os) fail(Err::WriteError, "failed writing JSON");
  }

  // SVG line chart: mIoU (%) per domain across stages
  {
    std::map<std::string, std::map<int, double>> series;
    int max_stage = 0;
    for (const auto& r : records) {
      series[r.domain][r.stage] = r.miou;
      max_stage = std::max(max_stage, r.stage);
    }
    const int width = 640, height = 400, ml = 60, mr = 150, mt = 30, mb = 50;
    const int pw = width - ml - mr, ph = height - mt - mb;
    static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2"};
    std::ofstream os(path_prefix + "_miou.svg");
    if (!os) fail(Err::WriteError, "cannot open " + path_prefix + "_miou.svg");
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    os << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << ml << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">mIoU (%) per "
          "domain across stages</text>\n";
    // axes
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
       << "\" stroke=\"black\"/>\n";
    for (int tick = 0; tick <= 10; tick += 2) {
      int y = mt + ph - tick * ph / 10;
      os << "<text x=\"" << ml - 34 << "\" y=\"" << y + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
         << tick * 10 << "</text>\n";
      os << "<line x1=\"" << ml - 4 << "\" y1=\"" << y << "\" x2=\"" << ml << "\" y2=\"" << y
         << "\" stroke=\"black\"/>\n";
    }
    for (int s = 0; s <= max_stage; ++s) {
      int x = max_stage > 0 ? ml + s * pw / max_stage : ml;
      os << "<text x=\"" << x - 4 << "\" y=\"" << mt + ph + 20
         << "\" font-family=\"sans-serif\" font-size=\"11\">" << s << "</text>\n";
    }
    os << "<text x=\"" << ml + pw / 2 - 20 << "\" y=\"" << height - 12
       << "\" font-family=\"sans-serif\" font-size=\"12\">stage</text>\n";
    int color_idx = 0, legend_y = mt + 10;
    for (const auto& [domain, points] : series) {
      const char* color = kColors[color_idx % 7];
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [s, v] : points) {
        int x = max_stage > 0 ? ml + s * pw / max_stage : ml;
        int y = mt + ph - static_cast<int>(std::lround(v * ph));
        os << x << "," << y << " ";
      }
      os << "\"/>\n";
      os << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << legend_y << "\" x2=\"" << ml + pw + 30
         << "\" y2=\"" << legend_y << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
      os << "<text x=\"" << ml + pw + 36 << "\" y=\"" << legend_y + 4
         << "\" font-family=\"sans-serif\" font-size=\"12\">" << domain << "</text>\n";
      legend_y += 18;
      ++color_idx;
    }
    os << "</svg>\n";
    if (!os) fail(Err::WriteError, "failed writing SVG");
  }
}

std::vector<MetricsRecord> load_metrics_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Err::MissingArtifact, "cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) fail(Err::CorruptDataset, "invalid JSON in " + path);
  std::vector<MetricsRecord> out;
  for (const auto& rj : j.at("records")) {
    MetricsRecord r;
    r.stage = rj.at("stage").get<int>();
    r.domain = rj.at("domain").get<std::string>();
    for (const auto& v : rj.at("iou")) {
      if (v.is_null())
        r.iou.push_back(std::numeric_limits<double>::quiet_NaN());
      else
        r.iou.push_back(v.get<double>());
    }
    r.miou = rj.at("miou").get<double>();
    r.timestamp = rj.at("timestamp").get<int64_t>();
    r.config_hash = rj.at("config_hash").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace condacl
