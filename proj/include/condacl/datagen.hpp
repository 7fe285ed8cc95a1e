#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "condacl/label_map.hpp"
#include "condacl/rng.hpp"
#include "condacl/tensor.hpp"

namespace condacl {

constexpr int kNumClasses = 7;

enum ClassId : uint8_t {
  kFlat = 0,
  kConstr = 1,
  kObject = 2,
  kNature = 3,
  kSky = 4,
  kHuman = 5,
  kVehicle = 6,
};

extern const std::array<const char*, kNumClasses> kClassNames;

using Palette = std::array<std::array<double, 3>, kNumClasses>;

/// Appearance of one domain: shared scene statistics, shifted photometrics.
struct DomainSpec {
  std::string name;
  Palette palette;
  double hue_rotation = 0.0;  // degrees around the gray axis
  double brightness = 1.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;  // additive Gaussian std in [0,1] units
  double texture_freq = 0.0;  // multiplicative sinusoid; 0 disables

  void validate() const;
  static Palette default_palette();
};

struct CountRange {
  int lo = 1, hi = 1;
};

struct SceneSpec {
  int64_t h = 32, w = 32;
  double horizon_lo = 0.35, horizon_hi = 0.55;
  CountRange constr{1, 3};
  CountRange objects{1, 4};
  CountRange nature{1, 3};
  CountRange humans{1, 3};
  CountRange vehicles{1, 2};
};

struct DomainDataset {
  std::string domain;
  std::string split;  // train | val
  uint64_t seed = 0;
  int64_t n = 0, h = 0, w = 0;
  std::vector<uint8_t> images;  // n×H×W×3, u8 RGB
  std::vector<uint8_t> labels;  // n×H×W class ids; empty when absent

  bool has_labels() const { return !labels.empty(); }
  Tensor image_tensor(int64_t i) const;  // 3×H×W scaled to [0,1]
  LabelMap label_map(int64_t i) const;
};

/// Rasterizes labels in the fixed layer order flat < sky < nature < constr <
/// vehicle < human < object, then applies the domain photometrics.
void render_scene(const SceneSpec& scene, const DomainSpec& domain, Rng rng, uint8_t* image_hwc,
                  uint8_t* labels_hw);

/// Train/val pair with per-sample child streams; rejection-resamples until
/// every class covers >= 1% of each split's pixels.
std::pair<DomainDataset, DomainDataset> generate_domain(const DomainSpec& spec, const SceneSpec& scene,
                                                        int64_t n_train, int64_t n_val, uint64_t seed);

void save_dataset(const std::string& path, const DomainDataset& ds);
DomainDataset load_dataset(const std::string& path, const std::string& domain, const std::string& split);

enum class Purpose { Train, Eval };

struct Batch {
  Tensor images;                 // B×3×H×W in [0,1]
  std::vector<LabelMap> labels;  // empty when withheld
  bool labeled() const { return !labels.empty(); }
};

/// Stage-gated dataset access. Training reads are legal only for (source,
/// train/val) at stage 0 and (target_k, train) at stage k, and target reads
/// never carry labels. Eval reads serve any val split to the metrics path.
/// Every read() is counted in the audit.
class DataVault {
 public:
  /// Domains must be added in stage order (source first).
  void add_dataset(DomainDataset ds);

  void set_stage(int stage);
  int stage() const { return stage_; }

  class Handle {
   public:
    int64_t size() const { return ds_->n; }
    Batch batch(const std::vector<int64_t>& indices) const;
    bool labeled() const { return labeled_; }

   private:
    friend class DataVault;
    Handle(const DomainDataset* ds, bool labeled) : ds_(ds), labeled_(labeled) {}
    const DomainDataset* ds_;
    bool labeled_;
  };

  Handle read(const std::string& domain, const std::string& split, Purpose purpose);

  const std::vector<std::string>& domains() const { return order_; }

  struct AuditKey {
    int stage;
    std::string domain;
    std::string split;
    bool operator<(const AuditKey& o) const {
      return std::tie(stage, domain, split) < std::tie(o.stage, o.domain, o.split);
    }
  };
  const std::map<AuditKey, int64_t>& audit() const { return audit_; }

  /// Appends one JSON line {stage, domain, split, count} per counter.
  void append_audit(const std::string& path) const;

 private:
  std::map<std::pair<std::string, std::string>, DomainDataset> sets_;
  std::vector<std::string> order_;
  std::map<AuditKey, int64_t> audit_;
  int stage_ = 0;
};

}  // namespace condacl
