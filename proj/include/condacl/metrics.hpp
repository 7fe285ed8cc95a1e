#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condacl/label_map.hpp"
#include "condacl/tensor.hpp"

namespace condacl {

/// Rows are ground truth, columns predictions; ignore pixels are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_classes)
      : n_(n_classes), counts_(static_cast<size_t>(n_classes) * n_classes, 0) {}

  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  int n_classes() const { return n_; }
  uint64_t at(int gt, int pred) const { return counts_[static_cast<size_t>(gt) * n_ + pred]; }
  uint64_t total() const;

 private:
  int n_;
  std::vector<uint64_t> counts_;
};

struct IouResult {
  std::vector<double> per_class;  // NaN marks classes with zero union
  double miou;                    // mean over defined classes
};

/// IoU_c = cm[c,c] / (row_c + col_c − cm[c,c]); zero-union classes are
/// excluded from the mean. Throws EmptyMetric when nothing is defined.
IouResult compute_iou(const ConfusionMatrix& cm);

struct MetricsRecord {
  int stage = 0;
  std::string domain;
  std::vector<double> iou;  // per class, NaN = undefined
  double miou = 0.0;
  int64_t timestamp = 0;  // logical event index within the run (deterministic)
  std::string config_hash;

  bool operator==(const MetricsRecord& o) const;
};

struct ForgettingDelta {
  std::string domain;
  int stage = 0;   // evaluation stage
  double delta = 0.0;  // mIoU(stage) − mIoU(own adaptation stage); negative = forgetting
};

struct ForgettingReport {
  std::vector<ForgettingDelta> deltas;
  std::vector<double> stage_avg_miou;         // all evaluated domains
  std::vector<double> stage_target_avg_miou;  // targets only
};

/// Domains must be listed in stage order (source first); records must cover
/// every (stage, domain) pair for stages 0..n_stages−1.
ForgettingReport forgetting_report(const std::vector<MetricsRecord>& records,
                                   const std::vector<std::string>& domains, int n_stages);

/// Writes {prefix}_metrics.csv, {prefix}_metrics.json and {prefix}_miou.svg.
/// Identical inputs produce identical bytes.
void export_metrics(const std::vector<MetricsRecord>& records, const ForgettingReport& report,
                    const std::string& config_hash, uint64_t seed, const std::string& path_prefix);

std::vector<MetricsRecord> load_metrics_json(const std::string& path);

}  // namespace condacl
