#pragma once

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "lesionfuse/data.hpp"
#include "lesionfuse/fusion.hpp"
#include "lesionfuse/metrics.hpp"
#include "lesionfuse/optim.hpp"

namespace lesionfuse {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class DatasetSource { synthetic, files };

struct DatasetConfig {
  DatasetSource source = DatasetSource::synthetic;
  SyntheticSpec synthetic{};
  std::string csv, schema, images;  // used when source == files
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;
  bool group_folds = false;    // keep samples with equal id-column values in one fold
  bool zero_metadata = false;  // replace encoded metadata by zeros (image-only ablation)
  bool operator==(const DatasetConfig&) const = default;
};

struct ExperimentConfig {
  DatasetConfig dataset{};
  std::vector<BackboneKind> backbones{BackboneKind::tiny_cnn};
  BackboneConfig backbone{};  // per-kind settings; `kind` is ignored in favour of `backbones`
  std::vector<FusionKind> fusions{FusionKind::concat};
  FusionConfig fusion{};
  std::size_t reducer_dim = 90;
  TrainConfig train{};
  SgdConfig optim{};
  PlateauConfig schedule{};
  std::size_t parallel_folds = 1;
  std::string output_dir = "results";
  bool operator==(const ExperimentConfig&) const = default;
};

inline BackboneKind parse_backbone_kind(const std::string& s) {
  for (auto k : {BackboneKind::tiny_cnn, BackboneKind::tiny_vit, BackboneKind::tiny_dualvit})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown backbone kind \"" + s + "\"; valid kinds: tiny_cnn, tiny_vit, tiny_dualvit");
}

namespace detail {

using Json = nlohmann::json;

/// Flattens nested objects into dotted paths; arrays and scalars are leaves.
inline void flatten(const Json& j, const std::string& prefix, std::map<std::string, Json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    return;
  }
  if (out.count(prefix)) throw ConfigError(prefix + ": key given twice");
  out[prefix] = j;
}

class KeyReader {
 public:
  explicit KeyReader(std::map<std::string, Json> values) : values_(std::move(values)) {}

  template <class T>
  void read(const std::string& key, T& target) {
    auto it = values_.find(key);
    known_.insert(key);
    if (it == values_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t>) {
        if (!it->second.is_number_integer() || it->second.get<long long>() < 0) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        if (!it->second.is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->second.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->second.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->second.is_string()) throw ConfigError("");
      }
      target = it->second.get<T>();
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected " + type_name<T>() + ", got " + it->second.dump());
    }
  }

  /// A string or a list of strings.
  std::optional<std::vector<std::string>> read_names(const std::string& key) {
    known_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    if (it->second.is_string()) return std::vector<std::string>{it->second.get<std::string>()};
    if (it->second.is_array() && !it->second.empty() &&
        std::all_of(it->second.begin(), it->second.end(), [](const Json& v) { return v.is_string(); }))
      return it->second.get<std::vector<std::string>>();
    throw ConfigError(key + ": expected a string or a non-empty list of strings, got " + it->second.dump());
  }

  void read_sizes(const std::string& key, std::vector<std::size_t>& target) {
    known_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return;
    if (!it->second.is_array() || it->second.empty() ||
        !std::all_of(it->second.begin(), it->second.end(),
                     [](const Json& v) { return v.is_number_integer() && v.get<long long>() > 0; }))
      throw ConfigError(key + ": expected a non-empty list of positive integers, got " + it->second.dump());
    target = it->second.get<std::vector<std::size_t>>();
  }

  void reject_unknown() const {
    for (const auto& [key, value] : values_)
      if (!known_.count(key)) throw ConfigError(key + ": unknown configuration key");
  }

 private:
  template <class T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, std::size_t>) return "a non-negative integer";
    if constexpr (std::is_same_v<T, std::uint64_t>) return "an integer";
    if constexpr (std::is_same_v<T, double>) return "a number";
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    return "a string";
  }

  std::map<std::string, Json> values_;
  std::set<std::string> known_;
};

template <class F>
void rethrow_with_key(const std::string& key, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline void read_vit(KeyReader& r, const std::string& p, TinyVitConfig& v) {
  r.read(p + ".patch_size", v.patch_size);
  r.read(p + ".embed_dim", v.embed_dim);
  r.read(p + ".depth", v.depth);
  r.read(p + ".heads", v.heads);
  r.read(p + ".mlp_hidden", v.mlp_hidden);
}

inline Json vit_json(const TinyVitConfig& v) {
  return {{"patch_size", v.patch_size}, {"embed_dim", v.embed_dim}, {"depth", v.depth}, {"heads", v.heads},
          {"mlp_hidden", v.mlp_hidden}};
}

template <class T, class F>
Json names_json(const std::vector<T>& kinds, F&& name) {
  if (kinds.size() == 1) return name(kinds[0]);
  Json a = Json::array();
  for (auto k : kinds) a.push_back(name(k));
  return a;
}

}  // namespace detail

/// Checks cross-field constraints; each error names the offending key.
inline void validate(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.folds < 2) throw ConfigError("dataset.folds: must be >= 2");
  if (d.source == DatasetSource::synthetic) {
    const auto& s = d.synthetic;
    if (s.classes < 2) throw ConfigError("dataset.classes: must be >= 2");
    if (s.n < s.classes * d.folds)
      throw ConfigError("dataset.n: must be at least classes * folds = " + std::to_string(s.classes * d.folds));
    if (!(s.delta >= 0)) throw ConfigError("dataset.delta: must be >= 0");
    if (!(s.missing_rate >= 0 && s.missing_rate < 1)) throw ConfigError("dataset.missing_rate: must be in [0, 1)");
    if (s.image.channels == 0 || s.image.height == 0 || s.image.width == 0)
      throw ConfigError("dataset.channels/height/width: must be positive");
  } else {
    if (d.csv.empty()) throw ConfigError("dataset.csv: required when dataset.source is \"files\"");
    if (d.schema.empty()) throw ConfigError("dataset.schema: required when dataset.source is \"files\"");
    if (d.images.empty()) throw ConfigError("dataset.images: required when dataset.source is \"files\"");
  }
  if (c.backbones.empty()) throw ConfigError("backbone.kind: at least one backbone required");
  if (c.fusions.empty()) throw ConfigError("fusion.kind: at least one fusion kind required");
  if (c.reducer_dim == 0) throw ConfigError("head.reducer_dim: must be positive");
  if (c.fusion.mat_chunks < 2) throw ConfigError("fusion.mat_chunks: must be >= 2");
  if (c.fusion.mat_attn_dim == 0 || c.fusion.mat_attn_dim % std::max<std::size_t>(c.fusion.mat_heads, 1) != 0 ||
      c.fusion.mat_heads == 0)
    throw ConfigError("fusion.mat_attn_dim: must be a positive multiple of fusion.mat_heads");
  if (c.fusion.metanet_hidden == 0) throw ConfigError("fusion.metanet_hidden: must be positive");
  if (c.parallel_folds == 0) throw ConfigError("train.parallel_folds: must be positive");
  detail::rethrow_with_key("train", [&] { c.train.validate(); });
  detail::rethrow_with_key("optim", [&] { c.optim.validate(); });
  detail::rethrow_with_key("schedule", [&] { c.schedule.validate(); });
}

/// Parses a JSON configuration. Nested objects and dotted keys are equivalent
/// ({"train": {"max_epochs": 5}} == {"train.max_epochs": 5}).
inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  std::map<std::string, nlohmann::json> flat;
  detail::flatten(doc, "", flat);
  detail::KeyReader r(std::move(flat));
  ExperimentConfig c;

  std::string source = "synthetic";
  r.read("dataset.source", source);
  if (source == "synthetic")
    c.dataset.source = DatasetSource::synthetic;
  else if (source == "files")
    c.dataset.source = DatasetSource::files;
  else
    throw ConfigError("dataset.source: unknown source \"" + source + "\"; valid sources: synthetic, files");
  auto& s = c.dataset.synthetic;
  r.read("dataset.n", s.n);
  r.read("dataset.classes", s.classes);
  std::string mode = to_string(s.mode);
  r.read("dataset.mode", mode);
  detail::rethrow_with_key("dataset.mode", [&] { s.mode = parse_signal_mode(mode); });
  r.read("dataset.delta", s.delta);
  r.read("dataset.missing_rate", s.missing_rate);
  r.read("dataset.seed", s.seed);
  r.read("dataset.channels", s.image.channels);
  r.read("dataset.height", s.image.height);
  r.read("dataset.width", s.image.width);
  r.read("dataset.csv", c.dataset.csv);
  r.read("dataset.schema", c.dataset.schema);
  r.read("dataset.images", c.dataset.images);
  r.read("dataset.folds", c.dataset.folds);
  r.read("dataset.fold_seed", c.dataset.fold_seed);
  r.read("dataset.group_folds", c.dataset.group_folds);
  r.read("dataset.zero_metadata", c.dataset.zero_metadata);
  s.folds = c.dataset.folds;

  if (auto names = r.read_names("backbone.kind")) {
    c.backbones.clear();
    for (const auto& n : *names) detail::rethrow_with_key("backbone.kind", [&] { c.backbones.push_back(parse_backbone_kind(n)); });
  }
  r.read_sizes("backbone.cnn.channels", c.backbone.cnn.channels);
  r.read("backbone.cnn.kernel", c.backbone.cnn.kernel);
  detail::read_vit(r, "backbone.vit", c.backbone.vit);
  detail::read_vit(r, "backbone.dualvit.big", c.backbone.dualvit.big);
  detail::read_vit(r, "backbone.dualvit.small", c.backbone.dualvit.small);

  if (auto names = r.read_names("fusion.kind")) {
    c.fusions.clear();
    for (const auto& n : *names) detail::rethrow_with_key("fusion.kind", [&] { c.fusions.push_back(parse_fusion_kind(n)); });
  }
  r.read("fusion.metanet_hidden", c.fusion.metanet_hidden);
  r.read("fusion.mat_chunks", c.fusion.mat_chunks);
  r.read("fusion.mat_attn_dim", c.fusion.mat_attn_dim);
  r.read("fusion.mat_heads", c.fusion.mat_heads);

  r.read("head.reducer_dim", c.reducer_dim);

  r.read("train.max_epochs", c.train.max_epochs);
  r.read("train.batch_size", c.train.batch_size);
  r.read("train.early_stop_patience", c.train.early_stop_patience);
  r.read("train.seed", c.train.seed);
  std::string monitor = to_string(c.train.monitor);
  r.read("train.monitor", monitor);
  if (monitor == "val_loss")
    c.train.monitor = Monitor::val_loss;
  else if (monitor == "val_bcc")
    c.train.monitor = Monitor::val_bcc;
  else
    throw ConfigError("train.monitor: unknown value \"" + monitor + "\"; valid values: val_loss, val_bcc");
  r.read("train.parallel_folds", c.parallel_folds);
  r.read("train.output_dir", c.output_dir);

  r.read("optim.lr", c.optim.lr);
  r.read("optim.momentum", c.optim.momentum);
  r.read("optim.weight_decay", c.optim.weight_decay);

  r.read("schedule.patience", c.schedule.patience);
  r.read("schedule.factor", c.schedule.factor);
  r.read("schedule.min_lr", c.schedule.min_lr);
  r.read("schedule.threshold", c.schedule.threshold);

  r.reject_unknown();
  validate(c);
  return c;
}

/// Fully resolved configuration as nested JSON (keys sorted).
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  const auto& s = c.dataset.synthetic;
  nlohmann::json dataset{{"source", c.dataset.source == DatasetSource::synthetic ? "synthetic" : "files"},
                         {"folds", c.dataset.folds},
                         {"fold_seed", c.dataset.fold_seed},
                         {"group_folds", c.dataset.group_folds},
                         {"zero_metadata", c.dataset.zero_metadata}};
  if (c.dataset.source == DatasetSource::synthetic) {
    dataset.update({{"n", s.n},
                    {"classes", s.classes},
                    {"mode", to_string(s.mode)},
                    {"delta", s.delta},
                    {"missing_rate", s.missing_rate},
                    {"seed", s.seed},
                    {"channels", s.image.channels},
                    {"height", s.image.height},
                    {"width", s.image.width}});
  } else {
    dataset.update({{"csv", c.dataset.csv}, {"schema", c.dataset.schema}, {"images", c.dataset.images}});
  }
  return {
      {"dataset", dataset},
      {"backbone",
       {{"kind", detail::names_json(c.backbones, [](BackboneKind k) { return to_string(k); })},
        {"cnn", {{"channels", c.backbone.cnn.channels}, {"kernel", c.backbone.cnn.kernel}}},
        {"vit", detail::vit_json(c.backbone.vit)},
        {"dualvit", {{"big", detail::vit_json(c.backbone.dualvit.big)}, {"small", detail::vit_json(c.backbone.dualvit.small)}}}}},
      {"fusion",
       {{"kind", detail::names_json(c.fusions, [](FusionKind k) { return to_string(k); })},
        {"metanet_hidden", c.fusion.metanet_hidden},
        {"mat_chunks", c.fusion.mat_chunks},
        {"mat_attn_dim", c.fusion.mat_attn_dim},
        {"mat_heads", c.fusion.mat_heads}}},
      {"head", {{"reducer_dim", c.reducer_dim}}},
      {"train",
       {{"max_epochs", c.train.max_epochs},
        {"batch_size", c.train.batch_size},
        {"early_stop_patience", c.train.early_stop_patience},
        {"seed", c.train.seed},
        {"monitor", to_string(c.train.monitor)},
        {"parallel_folds", c.parallel_folds},
        {"output_dir", c.output_dir}}},
      {"optim", {{"lr", c.optim.lr}, {"momentum", c.optim.momentum}, {"weight_decay", c.optim.weight_decay}}},
      {"schedule",
       {{"patience", c.schedule.patience},
        {"factor", c.schedule.factor},
        {"min_lr", c.schedule.min_lr},
        {"threshold", c.schedule.threshold}}},
  };
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "config") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return config_from_json(doc);
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

inline std::string serialize_config(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

/// FNV-1a 64 over the canonical (sorted-key, compact) serialization, as 16 hex digits.
/// Execution-only settings (parallelism, output location) are excluded.
inline std::string config_digest(const ExperimentConfig& c) {
  auto j = config_to_json(c);
  j["train"].erase("parallel_folds");
  j["train"].erase("output_dir");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// A fold failed; completed folds were persisted before this is thrown.
class ExperimentFault : public std::runtime_error {
 public:
  ExperimentFault(const std::string& what, std::size_t fold) : std::runtime_error(what), fold_(fold) {}
  std::size_t fold() const { return fold_; }

 private:
  std::size_t fold_;
};

struct FoldOutcome {
  std::size_t fold = 0;
  FoldMetrics metrics{};
  TrainResult training{};
  double seconds = 0;
};

struct RunResult {
  std::string model;   // backbone name
  FusionKind fusion = FusionKind::concat;
  std::string config_digest;
  std::vector<FoldOutcome> folds;  // complete runs hold one per fold, in fold order
  std::optional<MetricsReport> report;
  double seconds = 0;
};

inline Dataset load_experiment_data(const DatasetConfig& d) {
  if (d.source == DatasetSource::synthetic) {
    auto spec = d.synthetic;
    spec.folds = d.folds;
    return generate_synthetic(spec);
  }
  return load_dataset(d.csv, d.schema, std::optional<std::filesystem::path>(d.images));
}

inline FoldPlan plan_folds(const Dataset& ds, const DatasetConfig& d) {
  if (d.group_folds) {
    if (ds.groups.empty()) throw ConfigError("dataset.group_folds: the schema has no id column");
    return grouped_stratified_kfold(ds.labels, ds.groups, d.folds, d.fold_seed);
  }
  return stratified_kfold(ds.labels, d.folds, d.fold_seed);
}

/// Trains and evaluates one fold. The model seed is run seed + fold index.
inline FoldOutcome run_fold(const ExperimentConfig& cfg, const Dataset& ds, const FoldPlan& plan, BackboneKind backbone,
                            FusionKind fusion, std::size_t fold) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_rows = plan.training_indices(fold), val_rows = plan.validation_indices(fold);
  if (train_rows.empty() || val_rows.empty()) throw ConfigError("fold " + std::to_string(fold) + " has an empty split");
  MetadataEncoder encoder(ds.schema);
  encoder.fit(ds, train_rows);
  SplitData train = make_split(ds, encoder, train_rows), val = make_split(ds, encoder, val_rows);
  if (cfg.dataset.zero_metadata) {
    train.metadata = Tensor::zeros(train.metadata.shape());
    val.metadata = Tensor::zeros(val.metadata.shape());
  }
  const std::uint64_t seed = cfg.train.seed + fold;
  ModelConfig mc{cfg.backbone, cfg.fusion, cfg.reducer_dim};
  mc.backbone.kind = backbone;
  mc.fusion.kind = fusion;
  FusionModel model = build_model(mc, ds.image_shape(), encoder.dim(), ds.classes(), seed);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  FoldOutcome out;
  out.fold = fold;
  out.training = train_model(model, train, val, ds.classes(), tc, cfg.optim, cfg.schedule);
  const Evaluation ev = evaluate(model, val, ds.classes());
  if (std::isnan(ev.auc)) throw MetricError("fold " + std::to_string(fold) + " lacks a class in its held-out split");
  out.metrics = {ev.bcc, ev.auc};
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Cross-validates one (backbone, fusion) pair. Folds run on up to `parallel_folds`
/// threads. If any fold throws, the completed folds are kept in `partial` and the
/// lowest failing fold's error is rethrown as ExperimentFault.
inline RunResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds, const FoldPlan& plan,
                                BackboneKind backbone, FusionKind fusion, RunResult* partial = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  result.model = to_string(backbone);
  result.fusion = fusion;
  result.config_digest = config_digest(cfg);

  const std::size_t folds = plan.folds;
  std::vector<std::optional<FoldOutcome>> outcomes(folds);
  std::vector<std::exception_ptr> errors(folds);
  std::mutex mutex;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t fold;
      {
        std::lock_guard lock(mutex);
        if (next >= folds) return;
        fold = next++;
      }
      try {
        outcomes[fold] = run_fold(cfg, ds, plan, backbone, fusion, fold);
      } catch (...) {
        errors[fold] = std::current_exception();
        std::lock_guard lock(mutex);
        next = folds;  // abort: start no new folds
      }
    }
  };
  const std::size_t threads = std::min(cfg.parallel_folds, folds);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& o : outcomes)
    if (o) result.folds.push_back(std::move(*o));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::size_t f = 0; f < folds; ++f) {
    if (!errors[f]) continue;
    if (partial) *partial = result;
    try {
      std::rethrow_exception(errors[f]);
    } catch (const std::exception& e) {
      throw ExperimentFault(result.model + "/" + to_string(fusion) + " fold " + std::to_string(f) + ": " + e.what(), f);
    }
  }
  std::vector<FoldMetrics> metrics;
  for (const auto& o : result.folds) metrics.push_back(o.metrics);
  result.report = summarize(std::move(metrics));
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace detail {
inline std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

/// model,fusion,fold,bcc,auc with one row per fold, then fold=mean and fold=std rows
/// for complete results.
inline std::string results_csv(const std::vector<RunResult>& results) {
  std::ostringstream out;
  out << "model,fusion,fold,bcc,auc\n";
  for (const auto& r : results) {
    const std::string prefix = r.model + "," + to_string(r.fusion) + ",";
    for (const auto& f : r.folds)
      out << prefix << f.fold << "," << detail::exact(f.metrics.bcc) << "," << detail::exact(f.metrics.auc) << "\n";
    if (r.report) {
      out << prefix << "mean," << detail::exact(r.report->bcc.mean) << "," << detail::exact(r.report->auc.mean) << "\n";
      out << prefix << "std," << detail::exact(r.report->bcc.std) << "," << detail::exact(r.report->auc.std) << "\n";
    }
  }
  return out.str();
}

struct ReportRow {
  std::string model;
  FusionKind fusion = FusionKind::concat;
  MeanStd bcc, auc;
};

/// Table grouped by fusion kind (Concatenation, MAT, MetaBlock, MetaNet). Per backbone
/// and metric, the highest mean across fusion kinds is bold (first in section order on
/// ties).
inline std::string render_table(const std::vector<ReportRow>& rows) {
  std::map<std::pair<std::string, int>, const ReportRow*> best;  // (model, metric) -> row
  for (auto kind : kAllFusionKinds)
    for (const auto& r : rows) {
      if (r.fusion != kind) continue;
      for (int metric = 0; metric < 2; ++metric) {
        auto& slot = best[{r.model, metric}];
        const double v = metric == 0 ? r.bcc.mean : r.auc.mean;
        if (!slot || v > (metric == 0 ? slot->bcc.mean : slot->auc.mean)) slot = &r;
      }
    }
  std::ostringstream out;
  bool first = true;
  for (auto kind : kAllFusionKinds) {
    std::vector<const ReportRow*> section;
    for (const auto& r : rows)
      if (r.fusion == kind) section.push_back(&r);
    if (section.empty()) continue;
    if (!first) out << "\n";
    first = false;
    out << "### " << display_name(kind) << "\n\n| Model | BCC | AUC |\n|---|---|---|\n";
    for (const auto* r : section)
      out << "| " << r->model << " | " << format_mean_std(r->bcc, best[{r->model, 0}] == r) << " | "
          << format_mean_std(r->auc, best[{r->model, 1}] == r) << " |\n";
  }
  return out.str();
}

inline std::vector<ReportRow> report_rows(const std::vector<RunResult>& results) {
  std::vector<ReportRow> rows;
  for (const auto& r : results)
    if (r.report) rows.push_back({r.model, r.fusion, r.report->bcc, r.report->auc});
  return rows;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string history_csv(const TrainResult& t) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_bcc,lr\n";
  for (const auto& h : t.history)
    out << h.epoch << "," << detail::exact(h.train_loss) << "," << detail::exact(h.val_loss) << ","
        << detail::exact(h.val_bcc) << "," << detail::exact(h.lr) << "\n";
  return out.str();
}

/// Writes results.csv, report.md, per-fold histories and timings.json into `dir`.
inline void write_report(const std::vector<RunResult>& results, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "history", ec);
  if (ec) throw IoError("cannot create " + (dir / "history").string() + ": " + ec.message());
  write_text(dir / "results.csv", results_csv(results));
  write_text(dir / "report.md", render_table(report_rows(results)));
  nlohmann::json timings = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.folds) {
      write_text(dir / "history" / (r.model + "_" + to_string(r.fusion) + "_fold" + std::to_string(f.fold) + ".csv"),
                 history_csv(f.training));
      folds.push_back({{"fold", f.fold}, {"seconds", f.seconds}, {"epochs", f.training.history.size()},
                       {"best_epoch", f.training.best_epoch}});
    }
    timings.push_back({{"model", r.model}, {"fusion", to_string(r.fusion)}, {"config_digest", r.config_digest},
                       {"seconds", r.seconds}, {"folds", folds}});
  }
  write_text(dir / "timings.json", timings.dump(2) + "\n");
}

struct ParsedResults {
  std::vector<ReportRow> rows;  // from the aggregate rows
  // (model, fusion) -> per-fold (bcc, auc), in file order
  std::map<std::pair<std::string, std::string>, std::vector<FoldMetrics>> folds;
};

inline ParsedResults parse_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "model,fusion,fold,bcc,auc")
    throw DataError("results CSV: header must be model,fusion,fold,bcc,auc");
  ParsedResults out;
  std::map<std::pair<std::string, std::string>, std::pair<std::optional<FoldMetrics>, std::optional<FoldMetrics>>> agg;
  std::vector<std::pair<std::string, std::string>> order;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) throw DataError("results CSV: row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells");
    double bcc, auc;
    try {
      bcc = std::stod(cells[3]);
      auc = std::stod(cells[4]);
    } catch (const std::exception&) {
      throw DataError("results CSV: row " + std::to_string(row) + " has a non-numeric metric");
    }
    auto key = std::make_pair(cells[0], cells[1]);
    if (!out.folds.count(key) && !agg.count(key)) order.push_back(key);
    if (cells[2] == "mean")
      agg[key].first = FoldMetrics{bcc, auc};
    else if (cells[2] == "std")
      agg[key].second = FoldMetrics{bcc, auc};
    else
      out.folds[key].push_back({bcc, auc});
  }
  for (const auto& key : order) {
    const auto& [mean, sd] = agg[key];
    if (!mean || !sd) continue;
    FusionKind kind;
    try {
      kind = parse_fusion_kind(key.second);
    } catch (const ConfigError& e) {
      throw DataError(std::string("results CSV: ") + e.what());
    }
    out.rows.push_back({key.first, kind, {mean->bcc, sd->bcc}, {mean->auc, sd->auc}});
  }
  return out;
}

inline ParsedResults read_results(const std::filesystem::path& dir) {
  std::ifstream in(dir / "results.csv");
  if (!in) throw IoError("cannot open " + (dir / "results.csv").string());
  return parse_results_csv(in);
}

/// Largest absolute difference between the stored aggregate rows and aggregates
/// recomputed from the fold rows.
inline double aggregate_discrepancy(const ParsedResults& parsed) {
  double worst = 0;
  for (const auto& row : parsed.rows) {
    auto it = parsed.folds.find({row.model, to_string(row.fusion)});
    if (it == parsed.folds.end() || it->second.size() < 2) return std::numeric_limits<double>::infinity();
    auto recomputed = summarize(it->second);
    for (double d : {recomputed.bcc.mean - row.bcc.mean, recomputed.bcc.std - row.bcc.std,
                     recomputed.auc.mean - row.auc.mean, recomputed.auc.std - row.auc.std})
      worst = std::max(worst, std::abs(d));
  }
  return worst;
}

/// Runs every (backbone, fusion) pair of the config and writes the report into
/// `out_dir`, including the resolved config. On a fold fault, everything completed so
/// far is persisted before the ExperimentFault propagates.
inline std::vector<RunResult> run_all(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                      const std::function<void(const RunResult&)>& on_result = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "config.resolved.json", serialize_config(cfg));
  const Dataset ds = load_experiment_data(cfg.dataset);
  const FoldPlan plan = plan_folds(ds, cfg.dataset);
  std::vector<RunResult> results;
  for (auto backbone : cfg.backbones)
    for (auto fusion : cfg.fusions) {
      RunResult partial;
      try {
        results.push_back(run_experiment(cfg, ds, plan, backbone, fusion, &partial));
      } catch (const ExperimentFault&) {
        results.push_back(std::move(partial));
        write_report(results, out_dir);
        throw;
      }
      if (on_result) on_result(results.back());
    }
  write_report(results, out_dir);
  return results;
}

}  // namespace lesionfuse
