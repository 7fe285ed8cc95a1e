#pragma once

#include <string>
#include <vector>

#include "condacl/config.hpp"
#include "condacl/metrics.hpp"

namespace condacl {

struct RunPaths {
  std::string root;

  explicit RunPaths(std::string out_dir) : root(std::move(out_dir)) {}
  std::string dataset(const std::string& domain, const std::string& split) const {
    return root + "/datasets/" + domain + "_" + split + ".cdsd";
  }
  std::string source_checkpoint() const { return root + "/checkpoints/segnet_source.cseg"; }
  std::string stage_checkpoint(int k) const {
    return root + "/checkpoints/segnet_stage" + std::to_string(k) + ".cseg";
  }
  std::string teacher_checkpoint(int k) const {
    return root + "/checkpoints/teacher_stage" + std::to_string(k) + ".cseg";
  }
  std::string flow_file() const { return root + "/checkpoints/flow.cflw"; }
  std::string audit_log() const { return root + "/audit_log.jsonl"; }
  std::string records_file(int stage) const {
    return root + "/metrics/records_stage" + std::to_string(stage) + ".json";
  }
  std::string metrics_prefix() const { return root + "/metrics/run"; }
  std::string manifest() const { return root + "/run_manifest.json"; }
};

struct FlowSanity {
  double holdout_mean_logprob = 0.0;
  double uniform_mean_logprob = 0.0;
  double margin() const { return holdout_mean_logprob - uniform_mean_logprob; }
};

struct RunSummary {
  std::vector<MetricsRecord> records;
  ForgettingReport report;
  FlowSanity flow_sanity;
};

// Subcommand bodies, shared between the CLI and the test harnesses. The
// stepwise commands talk through files; run_all keeps everything in one
// process and produces identical artifacts for a given config.
void cmd_generate(const PipelineConfig& cfg);
void cmd_train_source(const PipelineConfig& cfg);
void cmd_train_flow(const PipelineConfig& cfg);
void cmd_adapt(const PipelineConfig& cfg, int stage);
void cmd_evaluate(const PipelineConfig& cfg, int stage);
void cmd_report(const PipelineConfig& cfg);
RunSummary run_all(const PipelineConfig& cfg);

/// Reduced oracle suite; prints one line per property, returns 0 iff all pass.
int run_selftest(bool corrupt_inverse_hook);

}  // namespace condacl
