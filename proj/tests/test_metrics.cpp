#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "condacl/checks.hpp"
#include "condacl/metrics.hpp"

using namespace condacl;

namespace {

LabelMap random_labels(int64_t h, int64_t w, int n_classes, Rng& rng, double ignore_frac = 0.0) {
  LabelMap m(h, w);
  for (auto& id : m.ids) {
    if (ignore_frac > 0.0 && rng.uniform() < ignore_frac)
      id = LabelMap::kIgnore;
    else
      id = static_cast<uint8_t>(rng.below(static_cast<uint64_t>(n_classes)));
  }
  return m;
}

MetricsRecord make_record(int stage, const std::string& domain, double miou) {
  MetricsRecord r;
  r.stage = stage;
  r.domain = domain;
  r.iou.assign(7, miou);
  r.miou = miou;
  r.timestamp = stage;
  r.config_hash = "cafebabe";
  return r;
}

}  // namespace

TEST_CASE("confusion accumulation basics") {
  ConfusionMatrix cm(4);
  LabelMap gt(2, 5), pred(2, 5);
  std::fill(gt.ids.begin(), gt.ids.end(), 2);
  std::fill(pred.ids.begin(), pred.ids.end(), 2);
  cm.accumulate(pred, gt);
  CHECK(cm.at(2, 2) == 10);
  CHECK(cm.total() == 10);

  LabelMap ignored(2, 5);
  std::fill(ignored.ids.begin(), ignored.ids.end(), LabelMap::kIgnore);
  cm.accumulate(pred, ignored);
  CHECK(cm.total() == 10);

  CHECK_THROWS_AS(cm.accumulate(LabelMap(3, 3), gt), Error);
}

TEST_CASE("merge of partial accumulations equals the single pass") {
  Rng rng(1);
  std::vector<LabelMap> preds, gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(random_labels(8, 8, 5, rng));
    gts.push_back(random_labels(8, 8, 5, rng, 0.1));
  }
  ConfusionMatrix full(5), a(5), b(5);
  for (int i = 0; i < 6; ++i) full.accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)]);
  for (int i = 0; i < 3; ++i) a.accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)]);
  for (int i = 3; i < 6; ++i) b.accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)]);
  a.merge(b);
  for (int g = 0; g < 5; ++g)
    for (int p = 0; p < 5; ++p) CHECK(a.at(g, p) == full.at(g, p));
}

TEST_CASE("compute_iou hand cases") {
  ConfusionMatrix diag(3);
  LabelMap gt(1, 3), pred(1, 3);
  gt.ids = {0, 1, 2};
  pred.ids = {0, 1, 2};
  diag.accumulate(pred, gt);
  IouResult r = compute_iou(diag);
  for (double v : r.per_class) CHECK(v == 1.0);
  CHECK(r.miou == 1.0);

  // cm = [[5,5],[0,10]]: IoU0 = 5/10, IoU1 = 10/15
  ConfusionMatrix cm(2);
  LabelMap g2(1, 20), p2(1, 20);
  for (int i = 0; i < 10; ++i) {
    g2.ids[static_cast<size_t>(i)] = 0;
    p2.ids[static_cast<size_t>(i)] = i < 5 ? 0 : 1;
  }
  for (int i = 10; i < 20; ++i) {
    g2.ids[static_cast<size_t>(i)] = 1;
    p2.ids[static_cast<size_t>(i)] = 1;
  }
  cm.accumulate(p2, g2);
  CHECK(cm.at(0, 0) == 5);
  CHECK(cm.at(0, 1) == 5);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 10);
  IouResult r2 = compute_iou(cm);
  CHECK(r2.per_class[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r2.per_class[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r2.miou == doctest::Approx(0.5 * (0.5 + 2.0 / 3.0)).epsilon(1e-15));

  CHECK_THROWS_AS(compute_iou(ConfusionMatrix(3)), Error);
}

TEST_CASE("compute_iou equals brute-force pixel sets on random maps") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    LabelMap pred = random_labels(8, 8, 7, rng);
    LabelMap gt = random_labels(8, 8, 7, rng, trial % 3 == 0 ? 0.2 : 0.0);
    ConfusionMatrix cm(7);
    cm.accumulate(pred, gt);
    IouResult got = compute_iou(cm);
    std::vector<double> expect = checks::iou_from_pixels(pred.ids, gt.ids, 7, LabelMap::kIgnore);
    for (int c = 0; c < 7; ++c) {
      bool gn = std::isnan(got.per_class[static_cast<size_t>(c)]);
      bool en = std::isnan(expect[static_cast<size_t>(c)]);
      CHECK(gn == en);
      if (!gn) CHECK(got.per_class[static_cast<size_t>(c)] == expect[static_cast<size_t>(c)]);
    }
  }
}

TEST_CASE("miou invariant under pixel permutation") {
  Rng rng(3);
  LabelMap pred = random_labels(8, 8, 4, rng);
  LabelMap gt = random_labels(8, 8, 4, rng);
  ConfusionMatrix cm1(4);
  cm1.accumulate(pred, gt);

  // permute both maps with the same shuffle
  std::vector<size_t> perm(64);
  for (size_t i = 0; i < 64; ++i) perm[i] = i;
  for (size_t i = 63; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  LabelMap pred2(8, 8), gt2(8, 8);
  for (size_t i = 0; i < 64; ++i) {
    pred2.ids[i] = pred.ids[perm[i]];
    gt2.ids[i] = gt.ids[perm[i]];
  }
  ConfusionMatrix cm2(4);
  cm2.accumulate(pred2, gt2);
  CHECK(compute_iou(cm1).miou == compute_iou(cm2).miou);
}

TEST_CASE("forgetting report") {
  std::vector<std::string> domains = {"source", "t1", "t2"};
  std::vector<MetricsRecord> records;
  for (int s = 0; s < 3; ++s)
    for (const auto& d : domains) records.push_back(make_record(s, d, 0.5));
  ForgettingReport same = forgetting_report(records, domains, 3);
  for (const auto& d : same.deltas) CHECK(d.delta == 0.0);
  CHECK(same.stage_avg_miou.size() == 3);

  // hand case: t1 adapted at stage 1 with 0.70, drops to 0.65 by stage 2
  std::vector<MetricsRecord> drift;
  auto miou_of = [](const std::string& d, int s) {
    if (d == "t1" && s == 1) return 0.70;
    if (d == "t1" && s == 2) return 0.65;
    return 0.5;
  };
  for (int s = 0; s < 3; ++s)
    for (const auto& d : domains) drift.push_back(make_record(s, d, miou_of(d, s)));
  ForgettingReport rep = forgetting_report(drift, domains, 3);
  bool found = false;
  for (const auto& d : rep.deltas)
    if (d.domain == "t1" && d.stage == 2) {
      found = true;
      CHECK(d.delta == doctest::Approx(-0.05).epsilon(1e-12));
    }
  CHECK(found);

  records.pop_back();
  CHECK_THROWS_AS(forgetting_report(records, domains, 3), Error);
}

TEST_CASE("export determinism, row counts, and json round trip") {
  std::vector<std::string> domains = {"source", "t1"};
  std::vector<MetricsRecord> records;
  int64_t ts = 0;
  for (int s = 0; s < 2; ++s)
    for (const auto& d : domains) {
      MetricsRecord r = make_record(s, d, 0.25 * (s + 1));
      r.timestamp = ts++;
      r.iou[6] = std::numeric_limits<double>::quiet_NaN();  // one undefined class
      records.push_back(r);
    }
  ForgettingReport rep = forgetting_report(records, domains, 2);

  export_metrics(records, rep, "cafebabe", 7, "test_tmp_run");
  auto slurp = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  };
  std::string csv1 = slurp("test_tmp_run_metrics.csv");
  std::string json1 = slurp("test_tmp_run_metrics.json");
  std::string svg1 = slurp("test_tmp_run_miou.svg");

  // stages × domains × (C + 1) data rows plus the header
  int lines = static_cast<int>(std::count(csv1.begin(), csv1.end(), '\n'));
  CHECK(lines == 2 * 2 * (7 + 1) + 1);

  export_metrics(records, rep, "cafebabe", 7, "test_tmp_run");
  CHECK(slurp("test_tmp_run_metrics.csv") == csv1);
  CHECK(slurp("test_tmp_run_metrics.json") == json1);
  CHECK(slurp("test_tmp_run_miou.svg") == svg1);

  std::vector<MetricsRecord> loaded = load_metrics_json("test_tmp_run_metrics.json");
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) CHECK(loaded[i] == records[i]);

  std::remove("test_tmp_run_metrics.csv");
  std::remove("test_tmp_run_metrics.json");
  std::remove("test_tmp_run_miou.svg");
}
