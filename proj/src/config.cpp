#include "condacl/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace condacl {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& why) {
  fail(Err::ConfigError, path + ": " + why);
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  if (!j.is_object()) bad(path, "expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) bad(path + "." + key, "unknown key");
}

double get_num(const json& j, const std::string& path) {
  if (!j.is_number()) bad(path, "expected a number");
  return j.get<double>();
}

int get_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) bad(path, "expected an integer");
  return j.get<int>();
}

std::string get_str(const json& j, const std::string& path) {
  if (!j.is_string()) bad(path, "expected a string");
  return j.get<std::string>();
}

template <typename T, typename Get>
void opt(const json& j, const std::string& base, const char* key, T& out, Get get) {
  if (j.contains(key)) out = get(j.at(key), base + "." + key);
}

DomainSpec parse_domain(const json& j, const std::string& path) {
  check_keys(j, path,
             {"name", "palette", "hue_rotation", "brightness", "contrast", "noise_sigma", "texture_freq"});
  DomainSpec d;
  d.palette = DomainSpec::default_palette();
  if (!j.contains("name")) bad(path, "missing required key name");
  d.name = get_str(j.at("name"), path + ".name");
  opt(j, path, "hue_rotation", d.hue_rotation, get_num);
  opt(j, path, "brightness", d.brightness, get_num);
  opt(j, path, "contrast", d.contrast, get_num);
  opt(j, path, "noise_sigma", d.noise_sigma, get_num);
  opt(j, path, "texture_freq", d.texture_freq, get_num);
  if (j.contains("palette")) {
    const json& p = j.at("palette");
    if (!p.is_array() || p.size() != kNumClasses) bad(path + ".palette", "expected 7 RGB triples");
    for (size_t c = 0; c < kNumClasses; ++c) {
      const json& rgb = p.at(c);
      if (!rgb.is_array() || rgb.size() != 3) bad(path + ".palette", "expected 7 RGB triples");
      for (size_t i = 0; i < 3; ++i)
        d.palette[c][i] = get_num(rgb.at(i), path + ".palette");
    }
  }
  return d;
}

}  // namespace

SceneSpec PipelineConfig::scene_spec() const {
  SceneSpec s;
  s.h = image_size[0];
  s.w = image_size[1];
  return s;
}

void PipelineConfig::validate() const {
  if (classes != kNumClasses) fail(Err::ConfigError, "classes: this build is fixed to 7 classes");
  if (image_size[0] < 16 || image_size[1] < 16) fail(Err::ConfigError, "image_size: extents must be >= 16");
  if (domains.size() < 2) fail(Err::ConfigError, "domains: need a source plus at least one target");
  std::set<std::string> names;
  for (const auto& d : domains) {
    d.validate();
    if (!names.insert(d.name).second) fail(Err::ConfigError, "domains: duplicate name " + d.name);
  }
  if (data.n_train < 1 || data.n_val < 1) fail(Err::ConfigError, "data: dataset sizes must be >= 1");
  if (output_dir.empty()) fail(Err::ConfigError, "output_dir: must be nonempty");
  segnet.validate();
  flow.validate(classes);
  adapt.validate();
  int64_t div = int64_t{1} << (segnet.levels() - 1);
  if (image_size[0] % div != 0 || image_size[1] % div != 0)
    fail(Err::ConfigError, "image_size: extents must divide by 2^(segnet levels - 1)");
  int64_t fdiv = (int64_t{1} << flow.scales) * flow.input_pool;
  if (image_size[0] % fdiv != 0 || image_size[1] % fdiv != 0)
    fail(Err::ConfigError, "image_size: extents must divide by input_pool * 2^flow.scales");
}

PipelineConfig parse_config_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(Err::ConfigError, "invalid JSON");

  check_keys(j, "config",
             {"seed", "classes", "image_size", "domains", "data", "segnet", "flow", "adapt", "output_dir"});

  PipelineConfig cfg;
  if (!j.contains("seed")) bad("config", "missing required key seed");
  if (!j.at("seed").is_number_unsigned() && !j.at("seed").is_number_integer())
    bad("config.seed", "expected a nonnegative integer");
  cfg.seed = j.at("seed").get<uint64_t>();

  opt(j, "config", "classes", cfg.classes, get_int);
  if (j.contains("image_size")) {
    const json& sz = j.at("image_size");
    if (!sz.is_array() || sz.size() != 2) bad("config.image_size", "expected [H, W]");
    cfg.image_size[0] = get_int(sz.at(0), "config.image_size");
    cfg.image_size[1] = get_int(sz.at(1), "config.image_size");
  }
  opt(j, "config", "output_dir", cfg.output_dir, get_str);

  if (!j.contains("domains")) bad("config", "missing required key domains");
  const json& doms = j.at("domains");
  if (!doms.is_array()) bad("config.domains", "expected an array");
  for (size_t i = 0; i < doms.size(); ++i)
    cfg.domains.push_back(parse_domain(doms.at(i), "config.domains[" + std::to_string(i) + "]"));

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "config.data", {"n_train", "n_val"});
    if (d.contains("n_train")) cfg.data.n_train = get_int(d.at("n_train"), "config.data.n_train");
    if (d.contains("n_val")) cfg.data.n_val = get_int(d.at("n_val"), "config.data.n_val");
  }

  if (j.contains("segnet")) {
    const json& s = j.at("segnet");
    check_keys(s, "config.segnet", {"widths", "lr", "momentum", "weight_decay", "epochs", "batch"});
    if (s.contains("widths")) {
      const json& w = s.at("widths");
      if (!w.is_array() || w.empty()) bad("config.segnet.widths", "expected a nonempty array");
      cfg.segnet.widths.clear();
      for (size_t i = 0; i < w.size(); ++i)
        cfg.segnet.widths.push_back(get_int(w.at(i), "config.segnet.widths"));
    }
    opt(s, "config.segnet", "lr", cfg.segnet.lr, get_num);
    opt(s, "config.segnet", "momentum", cfg.segnet.momentum, get_num);
    opt(s, "config.segnet", "weight_decay", cfg.segnet.weight_decay, get_num);
    opt(s, "config.segnet", "epochs", cfg.segnet.epochs, get_int);
    opt(s, "config.segnet", "batch", cfg.segnet.batch, get_int);
  }
  cfg.segnet.n_classes = cfg.classes;

  if (j.contains("flow")) {
    const json& f = j.at("flow");
    check_keys(f, "config.flow",
               {"scales", "blocks_per_scale", "hidden_channels", "dequant_delta", "label_smoothing",
                "input_pool", "lr", "momentum", "weight_decay", "epochs", "batch", "train_on"});
    opt(f, "config.flow", "scales", cfg.flow.scales, get_int);
    opt(f, "config.flow", "blocks_per_scale", cfg.flow.blocks_per_scale, get_int);
    opt(f, "config.flow", "hidden_channels", cfg.flow.hidden_channels, get_int);
    opt(f, "config.flow", "dequant_delta", cfg.flow.dequant_delta, get_num);
    opt(f, "config.flow", "label_smoothing", cfg.flow.label_smoothing, get_num);
    opt(f, "config.flow", "input_pool", cfg.flow.input_pool, get_int);
    opt(f, "config.flow", "lr", cfg.flow.lr, get_num);
    opt(f, "config.flow", "momentum", cfg.flow.momentum, get_num);
    opt(f, "config.flow", "weight_decay", cfg.flow.weight_decay, get_num);
    opt(f, "config.flow", "epochs", cfg.flow.epochs, get_int);
    opt(f, "config.flow", "batch", cfg.flow.batch, get_int);
    opt(f, "config.flow", "train_on", cfg.flow.train_on, get_str);
  }

  if (j.contains("adapt")) {
    const json& a = j.at("adapt");
    check_keys(a, "config.adapt",
               {"lambda", "tau", "alpha", "epochs_per_stage", "batch", "lr", "momentum", "weight_decay",
                "pseudo_refresh"});
    opt(a, "config.adapt", "lambda", cfg.adapt.lambda, get_num);
    opt(a, "config.adapt", "tau", cfg.adapt.tau, get_num);
    opt(a, "config.adapt", "alpha", cfg.adapt.alpha, get_num);
    opt(a, "config.adapt", "epochs_per_stage", cfg.adapt.epochs_per_stage, get_int);
    opt(a, "config.adapt", "batch", cfg.adapt.batch, get_int);
    opt(a, "config.adapt", "lr", cfg.adapt.lr, get_num);
    opt(a, "config.adapt", "momentum", cfg.adapt.momentum, get_num);
    opt(a, "config.adapt", "weight_decay", cfg.adapt.weight_decay, get_num);
    opt(a, "config.adapt", "pseudo_refresh", cfg.adapt.pseudo_refresh, get_str);
  }

  cfg.validate();
  cfg.config_hash = config_hash_of(cfg);
  return cfg;
}

PipelineConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Err::ConfigError, "cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

std::string config_hash_of(const PipelineConfig& cfg) {
  json j;  // plain json sorts keys: canonical by construction
  j["seed"] = cfg.seed;
  j["classes"] = cfg.classes;
  j["image_size"] = {cfg.image_size[0], cfg.image_size[1]};
  j["output_dir"] = cfg.output_dir;
  json doms = json::array();
  for (const auto& d : cfg.domains) {
    json dj;
    dj["name"] = d.name;
    dj["hue_rotation"] = d.hue_rotation;
    dj["brightness"] = d.brightness;
    dj["contrast"] = d.contrast;
    dj["noise_sigma"] = d.noise_sigma;
    dj["texture_freq"] = d.texture_freq;
    json pal = json::array();
    for (const auto& rgb : d.palette) pal.push_back({rgb[0], rgb[1], rgb[2]});
    dj["palette"] = pal;
    doms.push_back(dj);
  }
  j["domains"] = doms;
  j["data"] = {{"n_train", cfg.data.n_train}, {"n_val", cfg.data.n_val}};
  j["segnet"] = {{"widths", cfg.segnet.widths},
                 {"lr", cfg.segnet.lr},
                 {"momentum", cfg.segnet.momentum},
                 {"weight_decay", cfg.segnet.weight_decay},
                 {"epochs", cfg.segnet.epochs},
                 {"batch", cfg.segnet.batch}};
  j["flow"] = {{"scales", cfg.flow.scales},
               {"blocks_per_scale", cfg.flow.blocks_per_scale},
               {"hidden_channels", cfg.flow.hidden_channels},
               {"dequant_delta", cfg.flow.dequant_delta},
               {"label_smoothing", cfg.flow.label_smoothing},
               {"input_pool", cfg.flow.input_pool},
               {"lr", cfg.flow.lr},
               {"momentum", cfg.flow.momentum},
               {"weight_decay", cfg.flow.weight_decay},
               {"epochs", cfg.flow.epochs},
               {"batch", cfg.flow.batch},
               {"train_on", cfg.flow.train_on}};
  j["adapt"] = {{"lambda", cfg.adapt.lambda},
                {"tau", cfg.adapt.tau},
                {"alpha", cfg.adapt.alpha},
                {"epochs_per_stage", cfg.adapt.epochs_per_stage},
                {"batch", cfg.adapt.batch},
                {"lr", cfg.adapt.lr},
                {"momentum", cfg.adapt.momentum},
                {"weight_decay", cfg.adapt.weight_decay},
                {"pseudo_refresh", cfg.adapt.pseudo_refresh}};

  std::string canon = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace condacl
