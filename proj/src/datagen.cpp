#include "condacl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "condacl/serialize.hpp"

namespace condacl {

const std::array<const char*, kNumClasses> kClassNames = {"flat",  "constr", "object", "nature",
                                                          "sky",   "human",  "vehicle"};

void DomainSpec::validate() const {
  if (name.empty()) fail(Err::BadConfig, "domain name must be nonempty");
  if (brightness <= 0.0) fail(Err::BadConfig, "brightness must be > 0");
  if (contrast <= 0.0) fail(Err::BadConfig, "contrast must be > 0");
  if (noise_sigma < 0.0) fail(Err::BadConfig, "noise_sigma must be >= 0");
  if (texture_freq < 0.0) fail(Err::BadConfig, "texture_freq must be >= 0");
}

Palette DomainSpec::default_palette() {
  return Palette{{
      {{0.45, 0.45, 0.45}},  // flat: asphalt gray
      {{0.62, 0.32, 0.24}},  // constr: brick
      {{0.88, 0.78, 0.20}},  // object: signal yellow
      {{0.16, 0.55, 0.22}},  // nature: foliage green
      {{0.36, 0.62, 0.92}},  // sky
      {{0.82, 0.18, 0.28}},  // human: red jacket
      {{0.24, 0.22, 0.70}},  // vehicle: blue body
  }};
}

namespace {

struct Frame {
  int64_t h, w;
  uint8_t* labels;

  void fill_rect(int64_t y0, int64_t x0, int64_t y1, int64_t x1, uint8_t id) {
    y0 = std::clamp<int64_t>(y0, 0, h);
    y1 = std::clamp<int64_t>(y1, 0, h);
    x0 = std::clamp<int64_t>(x0, 0, w);
    x1 = std::clamp<int64_t>(x1, 0, w);
    for (int64_t y = y0; y < y1; ++y)
      for (int64_t x = x0; x < x1; ++x) labels[y * w + x] = id;
  }

  void fill_ellipse(double cy, double cx, double ry, double rx, uint8_t id) {
    int64_t y0 = static_cast<int64_t>(std::floor(cy - ry)), y1 = static_cast<int64_t>(std::ceil(cy + ry));
    int64_t x0 = static_cast<int64_t>(std::floor(cx - rx)), x1 = static_cast<int64_t>(std::ceil(cx + rx));
    for (int64_t y = std::max<int64_t>(0, y0); y <= std::min(h - 1, y1); ++y)
      for (int64_t x = std::max<int64_t>(0, x0); x <= std::min(w - 1, x1); ++x) {
        double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        if (dy * dy + dx * dx <= 1.0) labels[y * w + x] = id;
      }
  }
};

// Rotation of RGB around the (1,1,1) axis by the given angle in degrees.
std::array<double, 9> hue_matrix(double degrees) {
  double a = degrees * 3.14159265358979323846 / 180.0;
  double c = std::cos(a), s = std::sin(a);
  double third = 1.0 / 3.0;
  double rt3 = std::sqrt(1.0 / 3.0);
  std::array<double, 9> m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double entry = third * (1.0 - c);
      if (i == j) entry += c;
      m[static_cast<size_t>(i * 3 + j)] = entry;
    }
  // antisymmetric part
  m[1] += -rt3 * s;  // (0,1)
  m[2] += rt3 * s;   // (0,2)
  m[3] += rt3 * s;   // (1,0)
  m[5] += -rt3 * s;  // (1,2)
  m[6] += -rt3 * s;  // (2,0)
  m[7] += rt3 * s;   // (2,1)
  return m;
}

int draw_count(const CountRange& r, Rng& rng) {
  if (r.hi <= r.lo) return r.lo;
  return static_cast<int>(rng.range(r.lo, r.hi));
}

}  // namespace

void render_scene(const SceneSpec& scene, const DomainSpec& domain, Rng rng, uint8_t* image_hwc,
                  uint8_t* labels_hw) {
  if (scene.h < 16 || scene.w < 16) fail(Err::BadConfig, "canvas extents must be >= 16");
  const int64_t H = scene.h, W = scene.w;
  Frame f{H, W, labels_hw};
  double hd = static_cast<double>(H), wd = static_cast<double>(W);

  // flat base, sky band above the horizon
  f.fill_rect(0, 0, H, W, kFlat);
  int64_t horizon = static_cast<int64_t>(hd * rng.uniform(scene.horizon_lo, scene.horizon_hi));
  f.fill_rect(0, 0, horizon, W, kSky);

  // nature: irregular blobs of overlapping ellipses near the horizon
  int n_nature = draw_count(scene.nature, rng);
  for (int i = 0; i < n_nature; ++i) {
    double cx = rng.uniform(0.0, wd);
    double cy = rng.uniform(0.55, 1.05) * static_cast<double>(horizon);
    double r = rng.uniform(0.06, 0.14) * wd;
    int lobes = static_cast<int>(rng.range(2, 4));
    for (int l = 0; l < lobes; ++l) {
      double ox = cx + rng.uniform(-0.6, 0.6) * r;
      double oy = cy + rng.uniform(-0.4, 0.4) * r;
      f.fill_ellipse(oy, ox, r * rng.uniform(0.6, 1.1), r * rng.uniform(0.6, 1.1), kNature);
    }
  }

  // constr: rectangles standing on the horizon
  int n_constr = draw_count(scene.constr, rng);
  for (int i = 0; i < n_constr; ++i) {
    int64_t bw = static_cast<int64_t>(rng.uniform(0.12, 0.28) * wd);
    int64_t bh = static_cast<int64_t>(rng.uniform(0.15, 0.35) * hd);
    int64_t x0 = static_cast<int64_t>(rng.uniform(0.0, wd - static_cast<double>(bw)));
    int64_t y1 = horizon + static_cast<int64_t>(rng.uniform(0.0, 0.1) * hd);
    f.fill_rect(y1 - bh, x0, y1, x0 + bw, kConstr);
  }

  // vehicle: wide rounded rectangles on the ground
  int n_vehicle = draw_count(scene.vehicles, rng);
  for (int i = 0; i < n_vehicle; ++i) {
    double vw = rng.uniform(0.18, 0.30) * wd;
    double vh = rng.uniform(0.08, 0.14) * hd;
    double cx = rng.uniform(0.1, 0.9) * wd;
    double cy = static_cast<double>(horizon) + rng.uniform(0.15, 0.75) * (hd - static_cast<double>(horizon));
    f.fill_ellipse(cy, cx, vh * 0.5, vw * 0.5, kVehicle);
    f.fill_rect(static_cast<int64_t>(cy - vh * 0.35), static_cast<int64_t>(cx - vw * 0.5),
                static_cast<int64_t>(cy + vh * 0.35), static_cast<int64_t>(cx + vw * 0.5), kVehicle);
  }

  // human: thin vertical capsules
  int n_human = draw_count(scene.humans, rng);
  for (int i = 0; i < n_human; ++i) {
    double ph = rng.uniform(0.16, 0.26) * hd;
    double pw = std::max(1.5, 0.02 * wd + rng.uniform(0.0, 0.02) * wd);
    double cx = rng.uniform(0.05, 0.95) * wd;
    double cy = static_cast<double>(horizon) + rng.uniform(0.1, 0.8) * (hd - static_cast<double>(horizon));
    f.fill_rect(static_cast<int64_t>(cy - ph * 0.5), static_cast<int64_t>(cx - pw),
                static_cast<int64_t>(cy + ph * 0.5), static_cast<int64_t>(cx + pw), kHuman);
    f.fill_ellipse(cy - ph * 0.5, cx, pw * 1.6, pw * 1.6, kHuman);
  }

  // object: small circles anywhere below the sky top
  int n_object = draw_count(scene.objects, rng);
  for (int i = 0; i < n_object; ++i) {
    double r = rng.uniform(0.03, 0.06) * wd;
    double cx = rng.uniform(0.05, 0.95) * wd;
    double cy = rng.uniform(0.6, 1.0) * static_cast<double>(horizon) + rng.uniform(0.0, 0.3) * hd;
    f.fill_ellipse(cy, cx, r, r, kObject);
  }

  // photometrics
  std::array<double, 9> hue = hue_matrix(domain.hue_rotation);
  Rng noise_rng = rng.child(7);
  constexpr double kTextureAmp = 0.15;
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) {
      const auto& base = domain.palette[labels_hw[y * W + x]];
      double rgb[3];
      for (int i = 0; i < 3; ++i)
        rgb[i] = hue[static_cast<size_t>(i * 3)] * base[0] + hue[static_cast<size_t>(i * 3 + 1)] * base[1] +
                 hue[static_cast<size_t>(i * 3 + 2)] * base[2];
      double tex = 1.0;
      if (domain.texture_freq > 0.0) {
        double fy = 6.283185307179586 * domain.texture_freq * static_cast<double>(y) / hd;
        double fx = 6.283185307179586 * domain.texture_freq * static_cast<double>(x) / wd;
        tex = 1.0 + kTextureAmp * std::sin(fy) * std::sin(fx);
      }
      for (int i = 0; i < 3; ++i) {
        double v = rgb[i] * domain.brightness;
        v = (v - 0.5) * domain.contrast + 0.5;
        v *= tex;
        if (domain.noise_sigma > 0.0) v += domain.noise_sigma * noise_rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        image_hwc[(y * W + x) * 3 + i] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  }
}

namespace {

bool coverage_ok(const std::vector<uint8_t>& labels, int64_t total_pixels) {
  std::array<int64_t, kNumClasses> hist{};
  for (uint8_t id : labels) ++hist[id];
  for (int c = 0; c < kNumClasses; ++c)
    if (static_cast<double>(hist[static_cast<size_t>(c)]) < 0.01 * static_cast<double>(total_pixels))
      return false;
  return true;
}

DomainDataset generate_split(const DomainSpec& spec, const SceneSpec& scene, const std::string& split,
                             int64_t n, uint64_t seed, uint64_t stream_base) {
  DomainDataset ds;
  ds.domain = spec.name;
  ds.split = split;
  ds.seed = seed;
  ds.n = n;
  ds.h = scene.h;
  ds.w = scene.w;
  ds.images.resize(static_cast<size_t>(n * scene.h * scene.w * 3));
  ds.labels.resize(static_cast<size_t>(n * scene.h * scene.w));
  Rng root(seed);
  int64_t px = scene.h * scene.w;
  // Rejection resampling: attempt a advances every per-scene stream, keeping
  // regeneration deterministic in (spec, seed).
  for (uint64_t attempt = 0; attempt < 1000; ++attempt) {
    for (int64_t i = 0; i < n; ++i) {
      Rng sample_rng = root.child(stream_base + attempt * (1u << 20) + static_cast<uint64_t>(i));
      render_scene(scene, spec, sample_rng, ds.images.data() + i * px * 3, ds.labels.data() + i * px);
    }
    if (coverage_ok(ds.labels, n * px)) return ds;
  }
  fail(Err::GenerationFailure, "class coverage unreachable for domain " + spec.name);
}

}  // namespace

std::pair<DomainDataset, DomainDataset> generate_domain(const DomainSpec& spec, const SceneSpec& scene,
                                                        int64_t n_train, int64_t n_val, uint64_t seed) {
  spec.validate();
  if (n_train < 1 || n_val < 1) fail(Err::BadConfig, "dataset sizes must be >= 1");
  // Disjoint stream index ranges keep train and val non-overlapping.
  DomainDataset train = generate_split(spec, scene, "train", n_train, seed, 0);
  DomainDataset val = generate_split(spec, scene, "val", n_val, seed, static_cast<uint64_t>(n_train));
  return {std::move(train), std::move(val)};
}

Tensor DomainDataset::image_tensor(int64_t i) const {
  Tensor t({3, h, w});
  const uint8_t* src = images.data() + i * h * w * 3;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        t[(c * h + y) * w + x] = static_cast<double>(src[(y * w + x) * 3 + c]) / 255.0;
  return t;
}

LabelMap DomainDataset::label_map(int64_t i) const {
  LabelMap m(h, w);
  const uint8_t* src = labels.data() + i * h * w;
  std::copy(src, src + h * w, m.ids.begin());
  return m;
}

void save_dataset(const std::string& path, const DomainDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Err::WriteError, "cannot open " + path);
  os.write("CDSD", 4);
  write_u32(os, 1);
  write_u32(os, static_cast<uint32_t>(ds.n));
  write_u16(os, static_cast<uint16_t>(ds.h));
  write_u16(os, static_cast<uint16_t>(ds.w));
  write_u8(os, 3);
  write_u8(os, kNumClasses);
  write_u8(os, ds.has_labels() ? 1 : 0);
  int64_t px = ds.h * ds.w;
  for (int64_t i = 0; i < ds.n; ++i) {
    os.write(reinterpret_cast<const char*>(ds.images.data() + i * px * 3), px * 3);
    if (ds.has_labels()) os.write(reinterpret_cast<const char*>(ds.labels.data() + i * px), px);
  }
  if (!os) fail(Err::WriteError, "failed writing " + path);
}

DomainDataset load_dataset(const std::string& path, const std::string& domain, const std::string& split) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) fail(Err::MissingArtifact, "cannot open " + path);
  int64_t file_size = static_cast<int64_t>(is.tellg());
  is.seekg(0);
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::string(magic, 4) != "CDSD") corrupt("bad magic in " + path);
  if (read_u32(is, "version") != 1) corrupt("unsupported version in " + path);
  DomainDataset ds;
  ds.domain = domain;
  ds.split = split;
  ds.n = read_u32(is, "n");
  ds.h = read_u16(is, "H");
  ds.w = read_u16(is, "W");
  if (read_u8(is, "channels") != 3) corrupt("unexpected channel count in " + path);
  if (read_u8(is, "n_classes") != kNumClasses) corrupt("unexpected class count in " + path);
  uint8_t has_labels = read_u8(is, "has_labels");
  if (has_labels > 1) corrupt("invalid has_labels flag in " + path);
  int64_t px = ds.h * ds.w;
  int64_t record = px * 3 + (has_labels ? px : 0);
  int64_t expected = 4 + 4 + 4 + 2 + 2 + 3 + ds.n * record;
  if (file_size != expected) corrupt("header does not match payload length in " + path);
  ds.images.resize(static_cast<size_t>(ds.n * px * 3));
  if (has_labels) ds.labels.resize(static_cast<size_t>(ds.n * px));
  for (int64_t i = 0; i < ds.n; ++i) {
    read_bytes(is, reinterpret_cast<char*>(ds.images.data() + i * px * 3), static_cast<size_t>(px * 3),
               "image record");
    if (has_labels)
      read_bytes(is, reinterpret_cast<char*>(ds.labels.data() + i * px), static_cast<size_t>(px),
                 "label record");
  }
  for (uint8_t id : ds.labels)
    if (id >= kNumClasses) corrupt("label id out of range in " + path);
  return ds;
}

void DataVault::add_dataset(DomainDataset ds) {
  auto key = std::make_pair(ds.domain, ds.split);
  if (std::find(order_.begin(), order_.end(), ds.domain) == order_.end()) order_.push_back(ds.domain);
  sets_.insert_or_assign(key, std::move(ds));
}

void DataVault::set_stage(int stage) {
  if (stage < 0) fail(Err::BadConfig, "stage must be >= 0");
  stage_ = stage;
}

DataVault::Handle DataVault::read(const std::string& domain, const std::string& split, Purpose purpose) {
  auto it = sets_.find(std::make_pair(domain, split));
  if (it == sets_.end()) fail(Err::MissingArtifact, "no dataset (" + domain + ", " + split + ")");

  auto deny = [&](const std::string& why) {
    fail(Err::AccessDenied, "stage " + std::to_string(stage_) + ", (" + domain + ", " + split + "): " + why);
  };

  bool with_labels = false;
  if (purpose == Purpose::Train) {
    if (stage_ == 0) {
      if (domain != order_.front()) deny("only source data is readable for training at stage 0");
      with_labels = true;
    } else {
      if (static_cast<size_t>(stage_) >= order_.size()) deny("stage beyond configured targets");
      if (domain != order_[static_cast<size_t>(stage_)]) deny("only the current target is readable for training");
      if (split != "train") deny("only the train split is readable for training at stages >= 1");
      with_labels = false;  // unlabeled adaptation: labels withheld
    }
  } else {
    if (split != "val") deny("evaluation reads are limited to val splits");
    with_labels = true;
  }
  if (with_labels && !it->second.has_labels()) deny("dataset stores no labels");

  ++audit_[AuditKey{stage_, domain, split}];
  return Handle(&it->second, with_labels);
}

Batch DataVault::Handle::batch(const std::vector<int64_t>& indices) const {
  Batch b;
  int64_t n = static_cast<int64_t>(indices.size());
  if (n == 0) fail(Err::BadBatch, "empty batch request");
  b.images = Tensor({n, 3, ds_->h, ds_->w});
  int64_t per = 3 * ds_->h * ds_->w;
  for (int64_t i = 0; i < n; ++i) {
    int64_t idx = indices[static_cast<size_t>(i)];
    if (idx < 0 || idx >= ds_->n) fail(Err::BadBatch, "index out of range");
    Tensor img = ds_->image_tensor(idx);
    std::copy(img.data(), img.data() + per, b.images.data() + i * per);
    if (labeled_) b.labels.push_back(ds_->label_map(idx));
  }
  return b;
}

void DataVault::append_audit(const std::string& path) const {
  std::ofstream os(path, std::ios::app);
  if (!os) fail(Err::WriteError, "cannot open " + path);
  for (const auto& [key, count] : audit_) {
    os << "{\"stage\": " << key.stage << ", \"domain\": \"" << key.domain << "\", \"split\": \""
       << key.split << "\", \"count\": " << count << "}\n";
  }
  if (!os) fail(Err::WriteError, "failed writing " + path);
}

}  // namespace condacl
