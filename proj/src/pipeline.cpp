#include "condacl/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "condacl/adapt.hpp"
#include "condacl/checks.hpp"

namespace condacl {

namespace fs = std::filesystem;

namespace {

// Stage rng streams shared by run_all and the stepwise commands so both
// produce bit-identical artifacts.
Rng data_rng(const PipelineConfig& cfg) { return Rng(cfg.seed).child(1); }
Rng source_rng(const PipelineConfig& cfg) { return Rng(cfg.seed).child(2); }
Rng flow_rng(const PipelineConfig& cfg) { return Rng(cfg.seed).child(3); }
Rng adapt_rng(const PipelineConfig& cfg, int stage) {
  return Rng(cfg.seed).child(3000 + static_cast<uint64_t>(stage));
}
Rng sanity_rng(const PipelineConfig& cfg) { return Rng(cfg.seed).child(4); }

void ensure_dirs(const RunPaths& paths) {
  fs::create_directories(paths.root + "/datasets");
  fs::create_directories(paths.root + "/checkpoints");
  fs::create_directories(paths.root + "/metrics");
}

std::pair<DomainDataset, DomainDataset> generate_one(const PipelineConfig& cfg, size_t domain_idx) {
  Rng root = data_rng(cfg);
  uint64_t domain_seed = root.child(domain_idx).seed();
  return generate_domain(cfg.domains[domain_idx], cfg.scene_spec(), cfg.data.n_train, cfg.data.n_val,
                         domain_seed);
}

DataVault build_vault_in_memory(const PipelineConfig& cfg) {
  DataVault vault;
  for (size_t i = 0; i < cfg.domains.size(); ++i) {
    auto [train, val] = generate_one(cfg, i);
    vault.add_dataset(std::move(train));
    vault.add_dataset(std::move(val));
  }
  return vault;
}

DataVault load_vault(const PipelineConfig& cfg, const RunPaths& paths) {
  DataVault vault;
  for (const auto& d : cfg.domains) {
    vault.add_dataset(load_dataset(paths.dataset(d.name, "train"), d.name, "train"));
    vault.add_dataset(load_dataset(paths.dataset(d.name, "val"), d.name, "val"));
  }
  return vault;
}

FlowInputProvider prediction_provider(const PipelineConfig& cfg, const SegNet& net,
                                      std::shared_ptr<std::map<std::string, Tensor>> weights) {
  (void)cfg;
  return [&net, weights](const Batch& batch, Rng&) {
    NodePtr logits = net.forward(constant(batch.images), frozen_params(*weights));
    return softmax_channels(logits)->value;
  };
}

FlowModel train_flow_for(const PipelineConfig& cfg, DataVault& vault, const RunPaths* paths) {
  Rng rng = flow_rng(cfg);
  FlowInputProvider provider = nullptr;
  SegNet net(cfg.segnet);
  std::shared_ptr<std::map<std::string, Tensor>> weights;
  if (cfg.flow.train_on == "source_predictions") {
    if (!paths) fail(Err::MissingArtifact, "source_predictions flow training needs a checkpoint path");
    auto [scfg, store] = load_segnet(paths->source_checkpoint());
    weights = std::make_shared<std::map<std::string, Tensor>>(store.snapshot_values());
    provider = prediction_provider(cfg, net, weights);
  }
  return train_flow(vault, cfg.domains[0].name, cfg.classes, static_cast<int>(cfg.image_size[0]),
                    static_cast<int>(cfg.image_size[1]), cfg.flow, rng, provider);
}

FlowModel train_flow_in_memory(const PipelineConfig& cfg, DataVault& vault, const ParamStore& theta) {
  Rng rng = flow_rng(cfg);
  FlowInputProvider provider = nullptr;
  SegNet net(cfg.segnet);
  std::shared_ptr<std::map<std::string, Tensor>> weights;
  if (cfg.flow.train_on == "source_predictions") {
    weights = std::make_shared<std::map<std::string, Tensor>>(theta.snapshot_values());
    provider = prediction_provider(cfg, net, weights);
  }
  return train_flow(vault, cfg.domains[0].name, cfg.classes, static_cast<int>(cfg.image_size[0]),
                    static_cast<int>(cfg.image_size[1]), cfg.flow, rng, provider);
}

std::vector<MetricsRecord> evaluate_stage(const PipelineConfig& cfg, DataVault& vault, const SegNet& net,
                                          const ParamStore& params, int stage) {
  std::vector<MetricsRecord> records;
  int64_t n_domains = static_cast<int64_t>(cfg.domains.size());
  for (size_t di = 0; di < cfg.domains.size(); ++di) {
    const std::string& domain = cfg.domains[di].name;
    DataVault::Handle handle = vault.read(domain, "val", Purpose::Eval);
    ConfusionMatrix cm(cfg.classes);
    const int64_t chunk = 16;
    for (int64_t at = 0; at < handle.size(); at += chunk) {
      std::vector<int64_t> idx;
      for (int64_t i = at; i < std::min(handle.size(), at + chunk); ++i) idx.push_back(i);
      Batch batch = handle.batch(idx);
      std::vector<LabelMap> preds = net.predict_labels_batch(batch.images, store_params(params));
      for (size_t b = 0; b < preds.size(); ++b) cm.accumulate(preds[b], batch.labels[b]);
    }
    IouResult iou = compute_iou(cm);
    MetricsRecord rec;
    rec.stage = stage;
    rec.domain = domain;
    rec.iou = iou.per_class;
    rec.miou = iou.miou;
    rec.timestamp = stage * n_domains + static_cast<int64_t>(di);
    rec.config_hash = cfg.config_hash;
    records.push_back(std::move(rec));
  }
  return records;
}

void save_records(const std::string& path, const std::vector<MetricsRecord>& records) {
  nlohmann::json j;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json rj;
    rj["stage"] = r.stage;
    rj["domain"] = r.domain;
    nlohmann::json iou = nlohmann::json::array();
    for (double v : r.iou) {
      if (std::isnan(v))
        iou.push_back(nullptr);
      else
        iou.push_back(v);
    }
    rj["iou"] = iou;
    rj["miou"] = r.miou;
    rj["timestamp"] = r.timestamp;
    rj["config_hash"] = r.config_hash;
    arr.push_back(rj);
  }
  j["records"] = arr;
  std::ofstream os(path);
  if (!os) fail(Err::WriteError, "cannot open " + path);
  os << j.dump(2) << "\n";
}

ParamStore store_from_values(const std::map<std::string, Tensor>& values) {
  ParamStore store;
  for (const auto& [name, t] : values) store.add_value(name, t);
  return store;
}

void save_teacher(const std::string& path, const SegNetConfig& cfg, const TeacherState& teacher) {
  ParamStore store = store_from_values(teacher.params);
  save_segnet(path, cfg, store);
}

TeacherState load_teacher(const std::string& path, double alpha) {
  auto [cfg, store] = load_segnet(path);
  return TeacherState{store.snapshot_values(), alpha};
}

FlowSanity flow_sanity_check(const PipelineConfig& cfg, DataVault& vault, const FlowModel& flow) {
  // held-out source maps vs uniform-random simplex maps, mean log-likelihood
  DataVault::Handle handle = vault.read(cfg.domains[0].name, "val", Purpose::Eval);
  Rng rng = sanity_rng(cfg);
  FlowSanity out;
  int64_t n = handle.size();
  std::vector<int64_t> all(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
  Batch batch = handle.batch(all);
  double holdout = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    Rng noise = rng.child(static_cast<uint64_t>(i));
    Tensor map = dequantize(batch.labels[static_cast<size_t>(i)], cfg.classes, cfg.flow.label_smoothing,
                            cfg.flow.dequant_delta, noise);
    holdout += flow.log_prob(map);
  }
  out.holdout_mean_logprob = holdout / static_cast<double>(n);

  double uniform = 0.0;
  int64_t hw = cfg.image_size[0] * cfg.image_size[1];
  for (int64_t i = 0; i < n; ++i) {
    Rng noise = rng.child(100000 + static_cast<uint64_t>(i));
    Tensor map({cfg.classes, cfg.image_size[0], cfg.image_size[1]});
    for (int64_t p = 0; p < hw; ++p) {
      auto simplex = checks::random_simplex(cfg.classes, noise);
      for (int64_t c = 0; c < cfg.classes; ++c) map[c * hw + p] = simplex[static_cast<size_t>(c)];
    }
    uniform += flow.log_prob(map);
  }
  out.uniform_mean_logprob = uniform / static_cast<double>(n);
  return out;
}

void write_manifest(const PipelineConfig& cfg, const RunPaths& paths, const FlowSanity* sanity) {
  nlohmann::json j;
  j["config_hash"] = cfg.config_hash;
  j["seed"] = cfg.seed;
  nlohmann::json datasets;
  for (const auto& d : cfg.domains) {
    datasets[d.name] = {{"train", paths.dataset(d.name, "train")}, {"val", paths.dataset(d.name, "val")}};
  }
  j["datasets"] = datasets;
  nlohmann::json ckpt;
  ckpt["source"] = paths.source_checkpoint();
  ckpt["flow"] = paths.flow_file();
  nlohmann::json stages = nlohmann::json::array();
  nlohmann::json teachers = nlohmann::json::array();
  for (int k = 1; k < cfg.n_stages(); ++k) {
    stages.push_back(paths.stage_checkpoint(k));
    teachers.push_back(paths.teacher_checkpoint(k));
  }
  ckpt["stages"] = stages;
  ckpt["teachers"] = teachers;
  j["checkpoints"] = ckpt;
  j["audit_log"] = paths.audit_log();
  j["metrics"] = {{"csv", paths.metrics_prefix() + "_metrics.csv"},
                  {"json", paths.metrics_prefix() + "_metrics.json"},
                  {"svg", paths.metrics_prefix() + "_miou.svg"}};
  if (sanity) {
    j["flow_sanity"] = {{"holdout_mean_logprob", sanity->holdout_mean_logprob},
                        {"uniform_mean_logprob", sanity->uniform_mean_logprob},
                        {"margin", sanity->margin()}};
  }
  std::ofstream os(paths.manifest());
  if (!os) fail(Err::WriteError, "cannot open " + paths.manifest());
  os << j.dump(2) << "\n";
}

}  // namespace

void cmd_generate(const PipelineConfig& cfg) {
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  std::error_code ec;
  fs::remove(paths.audit_log(), ec);  // a fresh run starts a fresh audit
  for (size_t i = 0; i < cfg.domains.size(); ++i) {
    auto [train, val] = generate_one(cfg, i);
    save_dataset(paths.dataset(cfg.domains[i].name, "train"), train);
    save_dataset(paths.dataset(cfg.domains[i].name, "val"), val);
  }
}

void cmd_train_source(const PipelineConfig& cfg) {
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  DataVault vault = load_vault(cfg, paths);
  SegNet net(cfg.segnet);
  Rng rng = source_rng(cfg);
  ParamStore theta = train_source(vault, cfg.domains[0].name, net, rng);
  save_segnet(paths.source_checkpoint(), cfg.segnet, theta);
  vault.append_audit(paths.audit_log());
}

void cmd_train_flow(const PipelineConfig& cfg) {
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  DataVault vault = load_vault(cfg, paths);
  FlowModel flow = train_flow_for(cfg, vault, &paths);
  flow.save(paths.flow_file());
  vault.append_audit(paths.audit_log());
}

void cmd_adapt(const PipelineConfig& cfg, int stage) {
  if (stage < 1 || stage >= cfg.n_stages())
    fail(Err::BadConfig, "adapt stage must be in [1, " + std::to_string(cfg.n_stages() - 1) + "]");
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  FlowModel flow = FlowModel::load(paths.flow_file());
  flow.params().set_trainable(false);

  std::string student_path = stage == 1 ? paths.source_checkpoint() : paths.stage_checkpoint(stage - 1);
  auto [scfg, student] = load_segnet(student_path);
  TeacherState teacher = stage == 1 ? load_teacher(paths.source_checkpoint(), cfg.adapt.alpha)
                                    : load_teacher(paths.teacher_checkpoint(stage - 1), cfg.adapt.alpha);

  DataVault vault = load_vault(cfg, paths);
  vault.set_stage(stage);
  SegNet net(cfg.segnet);
  Rng rng = adapt_rng(cfg, stage);
  run_adapt_stage(student, teacher, &flow, net, vault, cfg.domains[static_cast<size_t>(stage)].name,
                  cfg.adapt, rng);
  save_segnet(paths.stage_checkpoint(stage), cfg.segnet, student);
  save_teacher(paths.teacher_checkpoint(stage), cfg.segnet, teacher);
  vault.append_audit(paths.audit_log());
}

void cmd_evaluate(const PipelineConfig& cfg, int stage) {
  if (stage < 0 || stage >= cfg.n_stages())
    fail(Err::BadConfig, "evaluate stage must be in [0, " + std::to_string(cfg.n_stages() - 1) + "]");
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  std::string ckpt = stage == 0 ? paths.source_checkpoint() : paths.stage_checkpoint(stage);
  auto [scfg, params] = load_segnet(ckpt);
  DataVault vault = load_vault(cfg, paths);
  vault.set_stage(stage);
  SegNet net(cfg.segnet);
  std::vector<MetricsRecord> records = evaluate_stage(cfg, vault, net, params, stage);
  save_records(paths.records_file(stage), records);
  vault.append_audit(paths.audit_log());
}

void cmd_report(const PipelineConfig& cfg) {
  RunPaths paths(cfg.output_dir);
  std::vector<MetricsRecord> records;
  for (int s = 0; s < cfg.n_stages(); ++s) {
    auto stage_records = load_metrics_json(paths.records_file(s));
    records.insert(records.end(), stage_records.begin(), stage_records.end());
  }
  std::vector<std::string> names;
  for (const auto& d : cfg.domains) names.push_back(d.name);
  ForgettingReport report = forgetting_report(records, names, cfg.n_stages());
  export_metrics(records, report, cfg.config_hash, cfg.seed, paths.metrics_prefix());
  write_manifest(cfg, paths, nullptr);
}

RunSummary run_all(const PipelineConfig& cfg) {
  RunPaths paths(cfg.output_dir);
  ensure_dirs(paths);
  std::error_code ec;
  fs::remove(paths.audit_log(), ec);

  // generate + persist datasets, then work from the in-memory vault
  DataVault vault;
  for (size_t i = 0; i < cfg.domains.size(); ++i) {
    auto [train, val] = generate_one(cfg, i);
    save_dataset(paths.dataset(cfg.domains[i].name, "train"), train);
    save_dataset(paths.dataset(cfg.domains[i].name, "val"), val);
    vault.add_dataset(std::move(train));
    vault.add_dataset(std::move(val));
  }

  SegNet net(cfg.segnet);
  Rng srng = source_rng(cfg);
  ParamStore theta = train_source(vault, cfg.domains[0].name, net, srng);
  save_segnet(paths.source_checkpoint(), cfg.segnet, theta);

  FlowModel flow = train_flow_in_memory(cfg, vault, theta);
  flow.save(paths.flow_file());
  flow.params().set_trainable(false);
  FlowSanity sanity = flow_sanity_check(cfg, vault, flow);

  RunSummary summary;
  auto stage0 = evaluate_stage(cfg, vault, net, theta, 0);
  save_records(paths.records_file(0), stage0);
  summary.records.insert(summary.records.end(), stage0.begin(), stage0.end());

  ParamStore student = store_from_values(theta.snapshot_values());
  TeacherState teacher = make_teacher(student, cfg.adapt.alpha);
  for (int k = 1; k < cfg.n_stages(); ++k) {
    vault.set_stage(k);
    Rng arng = adapt_rng(cfg, k);
    run_adapt_stage(student, teacher, &flow, net, vault, cfg.domains[static_cast<size_t>(k)].name,
                    cfg.adapt, arng);
    save_segnet(paths.stage_checkpoint(k), cfg.segnet, student);
    save_teacher(paths.teacher_checkpoint(k), cfg.segnet, teacher);
    auto stage_records = evaluate_stage(cfg, vault, net, student, k);
    save_records(paths.records_file(k), stage_records);
    summary.records.insert(summary.records.end(), stage_records.begin(), stage_records.end());
  }

  std::vector<std::string> names;
  for (const auto& d : cfg.domains) names.push_back(d.name);
  summary.report = forgetting_report(summary.records, names, cfg.n_stages());
  summary.flow_sanity = sanity;
  export_metrics(summary.records, summary.report, cfg.config_hash, cfg.seed, paths.metrics_prefix());
  vault.append_audit(paths.audit_log());
  write_manifest(cfg, paths, &sanity);
  return summary;
}

namespace {

struct SelfTest {
  bool all_ok = true;
  void report(const std::string& name, bool ok, const std::string& detail = "") {
    std::printf("%-4s %s%s%s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.empty() ? "" : ": ",
                detail.c_str());
    all_ok = all_ok && ok;
  }
};

}  // namespace

int run_selftest(bool corrupt_inverse_hook) {
  flow_testing::corrupt_inverse = corrupt_inverse_hook;
  SelfTest st;
  char buf[128];

  {  // gradient fidelity through a small conv net
    ParamStore store;
    Rng rng(101);
    NodePtr input = leaf(Tensor({1, 2, 8, 8}));
    for (int64_t i = 0; i < input->value.numel(); ++i) input->value[i] = rng.uniform(-1, 1);
    NodePtr w1 = store.make_param("w1", {4, 2, 3, 3}, Init::kaiming(18), rng);
    NodePtr b1 = store.make_param("b1", {4}, Init::zeros(), rng);
    NodePtr w2 = store.make_param("w2", {3, 4, 1, 1}, Init::kaiming(4), rng);
    Tensor readout({1, 3, 8, 8});
    for (int64_t i = 0; i < readout.numel(); ++i) readout[i] = rng.uniform(0.5, 1.5);
    NodePtr ro = constant(readout);
    auto rebuild = [&] {
      NodePtr h = leaky_relu(conv2d(input, w1, b1, 1, 1));
      NodePtr o = conv2d(avgpool2(nearest_upsample2(h)), w2, nullptr, 1, 0);
      return sum_all(mul(softmax_channels(o), ro));
    };
    double worst = 0.0;
    Rng coord_rng(102);
    for (const auto& p : {w1, b1, w2, input}) {
      store.zero_grads();
      worst = std::max(worst, checks::gradient_check(rebuild, p, 10, coord_rng).max_rel_err);
    }
    std::snprintf(buf, sizeof(buf), "max rel err %.2e", worst);
    st.report("gradient-fidelity", worst <= 1e-6, buf);
  }

  FlowConfig fcfg;
  fcfg.scales = 2;
  fcfg.blocks_per_scale = 2;
  fcfg.hidden_channels = 6;

  {  // flow invertibility (exercises the corrupt-inverse hook)
    Rng rng(103);
    FlowModel model = FlowModel::build(fcfg, 2, 8, 8, rng);
    Rng prng(104);
    for (const auto& name : model.params().names()) {
      if (name.find(".mix") != std::string::npos) continue;
      NodePtr p = model.params().get(name);
      for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = prng.uniform(-0.3, 0.3);
    }
    double worst = 0.0;
    Rng drng(105);
    double antisym = 0.0;
    for (int t = 0; t < 10; ++t) {
      Tensor y({2, 8, 8});
      for (int64_t i = 0; i < y.numel(); ++i) y[i] = drng.uniform();
      auto [z, ld] = model.forward(y);
      double ild = 0.0;
      Tensor back = model.inverse(z, &ild);
      for (int64_t i = 0; i < y.numel(); ++i) worst = std::max(worst, std::fabs(back[i] - y[i]));
      antisym = std::max(antisym, std::fabs(ld + ild));
    }
    std::snprintf(buf, sizeof(buf), "max abs err %.2e", worst);
    st.report("flow-invertibility", worst <= 1e-8, buf);
    std::snprintf(buf, sizeof(buf), "max |fwd+inv| %.2e", antisym);
    st.report("logdet-antisymmetry", antisym <= 1e-9, buf);

    // change-of-variable exactness on 16 dims
    FlowConfig tiny = fcfg;
    tiny.scales = 1;
    tiny.blocks_per_scale = 2;
    Rng rng2(106);
    FlowModel small = FlowModel::build(tiny, 1, 4, 4, rng2);
    Rng prng2(107);
    for (const auto& name : small.params().names()) {
      if (name.find(".mix") != std::string::npos) continue;
      NodePtr p = small.params().get(name);
      for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = prng2.uniform(-0.3, 0.3);
    }
    Tensor y({1, 4, 4});
    Rng drng2(108);
    for (int64_t i = 0; i < 16; ++i) y[i] = drng2.uniform();
    auto [z, ld] = small.forward(y);
    auto fn = [&](const std::vector<double>& flat) {
      Tensor yy({1, 4, 4}, flat);
      auto [zz, l2] = small.forward(yy);
      std::vector<double> out;
      for (const auto& part : zz.parts) out.insert(out.end(), part.vec().begin(), part.vec().end());
      return out;
    };
    std::vector<double> jac = checks::fd_jacobian(fn, y.vec());
    double oracle = checks::log_abs_det(jac, 16);
    double rel = std::fabs(ld - oracle) / std::max(1.0, std::fabs(oracle));
    std::snprintf(buf, sizeof(buf), "rel err %.2e", rel);
    st.report("logdet-vs-jacobian", rel <= 1e-5, buf);
  }

  {  // linear flow against the closed-form gaussian
    FlowConfig lin;
    lin.scales = 1;
    lin.blocks_per_scale = 1;
    lin.hidden_channels = 4;
    Rng rng(109);
    FlowModel model = FlowModel::build(lin, 1, 2, 2, rng);
    Rng mrng(110);
    Tensor m({4, 4});
    for (int64_t i = 0; i < 16; ++i) m[i] = mrng.uniform(-1, 1);
    for (int64_t i = 0; i < 4; ++i) m.at2(i, i) += 2.0;
    model.scales()[0].mixes[0].m->value = m;
    Rng drng(111);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
      Tensor y({1, 2, 2});
      for (int64_t i = 0; i < 4; ++i) y[i] = drng.uniform(-1.5, 1.5);
      worst = std::max(worst, std::fabs(model.log_prob(y) - checks::linear_gaussian_logpdf(m.vec(), 4, y.vec())));
    }
    std::snprintf(buf, sizeof(buf), "max abs err %.2e", worst);
    st.report("linear-flow-gaussian", worst <= 1e-8, buf);
  }

  {  // KL bound sweep
    Rng rng(112);
    bool ok = true;
    double min_slack = 1e9;
    for (int t = 0; t < 200 && ok; ++t) {
      int support = 2 + static_cast<int>(rng.below(15));
      DiscreteDist p{checks::random_simplex(support, rng)};
      DiscreteDist q{checks::random_simplex(support, rng)};
      double kl = kl_divergence(p, q);
      double slack = checks::cross_entropy_direct(p.p, q.p) - kl;
      min_slack = std::min(min_slack, slack);
      ok = ok && kl >= -1e-12 && slack >= -1e-12;
    }
    std::snprintf(buf, sizeof(buf), "min slack %.2e", min_slack);
    st.report("kl-upper-bound", ok, buf);
  }

  {  // mIoU against brute-force pixel sets
    Rng rng(113);
    bool ok = true;
    for (int t = 0; t < 10 && ok; ++t) {
      LabelMap pred(8, 8), gt(8, 8);
      for (auto& id : pred.ids) id = static_cast<uint8_t>(rng.below(7));
      for (auto& id : gt.ids) id = rng.uniform() < 0.1 ? LabelMap::kIgnore : static_cast<uint8_t>(rng.below(7));
      ConfusionMatrix cm(7);
      cm.accumulate(pred, gt);
      auto got = compute_iou(cm).per_class;
      auto expect = checks::iou_from_pixels(pred.ids, gt.ids, 7, LabelMap::kIgnore);
      for (int c = 0; c < 7; ++c) {
        bool gn = std::isnan(got[static_cast<size_t>(c)]), en = std::isnan(expect[static_cast<size_t>(c)]);
        if (gn != en || (!gn && got[static_cast<size_t>(c)] != expect[static_cast<size_t>(c)])) ok = false;
      }
    }
    st.report("miou-brute-force", ok);
  }

  {  // softmax simplex and pooling identities
    Rng rng(114);
    Tensor logits({1, 5, 4, 4});
    for (int64_t i = 0; i < logits.numel(); ++i) logits[i] = rng.uniform(-4, 4);
    NodePtr sm = softmax_channels(constant(logits));
    double worst = 0.0;
    for (int64_t p = 0; p < 16; ++p) {
      double sum = 0.0;
      for (int64_t c = 0; c < 5; ++c) sum += sm->value[c * 16 + p];
      worst = std::max(worst, std::fabs(sum - 1.0));
    }
    std::snprintf(buf, sizeof(buf), "max |sum-1| %.2e", worst);
    st.report("softmax-simplex", worst <= 1e-12, buf);

    Tensor x({1, 2, 4, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-2, 2);
    Tensor round = avgpool2(nearest_upsample2(constant(x)))->value;
    bool ok = true;
    for (int64_t i = 0; i < x.numel(); ++i) ok = ok && round[i] == x[i];
    st.report("upsample-avgpool-identity", ok);
  }

  {  // determinism of a small training step sequence
    auto run = [] {
      ParamStore store;
      Rng rng(115);
      NodePtr w = store.make_param("w", {3, 2, 3, 3}, Init::kaiming(18), rng);
      NodePtr x = constant(Tensor::full({1, 2, 4, 4}, 0.5));
      for (int i = 0; i < 5; ++i) {
        backward(mean_all(conv2d(x, w, nullptr, 1, 1)));
        store.sgd_step(0.01, 0.9);
      }
      return w->value;
    };
    Tensor a = run(), b = run();
    bool ok = true;
    for (int64_t i = 0; i < a.numel(); ++i) ok = ok && a[i] == b[i];
    st.report("determinism", ok);
  }

  flow_testing::corrupt_inverse = false;
  return st.all_ok ? 0 : 1;
}

}  // namespace condacl
