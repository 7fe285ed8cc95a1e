#pragma once

#include <array>
#include <string>
#include <vector>

#include "condacl/adapt.hpp"
#include "condacl/datagen.hpp"
#include "condacl/flow.hpp"
#include "condacl/segnet.hpp"

namespace condacl {

struct DataConfig {
  int64_t n_train = 64;
  int64_t n_val = 32;
};

struct PipelineConfig {
  uint64_t seed = 0;
  int classes = kNumClasses;
  std::array<int64_t, 2> image_size = {32, 32};
  std::vector<DomainSpec> domains;  // first entry is the source
  DataConfig data;
  SegNetConfig segnet;
  FlowConfig flow;
  AdaptConfig adapt;
  std::string output_dir = "out";
  std::string config_hash;  // filled by parse_config

  SceneSpec scene_spec() const;
  int n_stages() const { return static_cast<int>(domains.size()); }
  void validate() const;
};

/// Strict parse: unknown keys, type mismatches, and invariant violations are
/// ConfigError carrying the offending key path. Omitted fields take defaults.
PipelineConfig parse_config(const std::string& path);
PipelineConfig parse_config_text(const std::string& text);

/// FNV-1a over the canonicalized (defaults-filled, key-sorted) document.
std::string config_hash_of(const PipelineConfig& cfg);

}  // namespace condacl
