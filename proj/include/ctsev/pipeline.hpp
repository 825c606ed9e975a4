#pragma once

// End-to-end orchestration shared by the CLI and the acceptance suite:
// load + preprocess a manifest, train a volumetric or slice-vote model, and
// evaluate checkpoints.

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctsev/eval.hpp"
#include "ctsev/nn/network.hpp"
#include "ctsev/preprocess.hpp"
#include "ctsev/train.hpp"
#include "ctsev/volio.hpp"

namespace ctsev {

struct PreparedData {
  std::vector<TestCase> train;
  std::vector<TestCase> test;
};

/// Loads and (unless `already_preprocessed`) preprocesses one record.
inline TestCase prepare_record(const DatasetManifest& m, const PatientRecord& r, const PreprocessConfig& cfg,
                               bool already_preprocessed) {
  Volume v;
  try {
    v = load_volume(m.resolve(r));
  } catch (Error& e) {
    e.add_context("record '" + r.id + "'");
    throw;
  }
  if (!already_preprocessed) {
    v = preprocess_volume(v, cfg, r.id);
  } else if (v.voxels.shape() != Shape{cfg.target_depth, cfg.target_h, cfg.target_w}) {
    throw ShapeError("record '" + r.id + "': preprocessed volume has shape " + shape_string(v.voxels.shape()) +
                     ", expected " + shape_string({cfg.target_depth, cfg.target_h, cfg.target_w}));
  }
  return {r.id, std::move(v), r.severity()};
}

/// Assigns a stratified split when the manifest carries none.
inline DatasetManifest ensure_split(const DatasetManifest& m, double test_fraction, std::uint64_t seed) {
  for (const auto& r : m.records) {
    if (r.split != Split::unassigned) return m;
  }
  return stratified_split(m, test_fraction, seed);
}

/// Unassigned records count as training data.
inline PreparedData prepare_data(const DatasetManifest& m, const PreprocessConfig& cfg, bool already_preprocessed) {
  PreparedData d;
  for (const auto& r : m.records) {
    auto tc = prepare_record(m, r, cfg, already_preprocessed);
    (r.split == Split::test ? d.test : d.train).push_back(std::move(tc));
  }
  return d;
}

template <typename T>
std::vector<Tensor<T>> cast_volumes(std::span<const TestCase> cases) {
  std::vector<Tensor<T>> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(c.volume.voxels.cast<T>());
  return out;
}

inline std::vector<SeverityClass> labels_of(std::span<const TestCase> cases) {
  std::vector<SeverityClass> out;
  for (const auto& c : cases) out.push_back(c.label);
  return out;
}

template <typename T>
struct TrainedModel {
  nn::Network<T> network;
  MetricsLog metrics;
};

struct TrainHooks {
  BatchObserver on_batch;
  std::function<void(const EpochMetrics&)> on_epoch;
  bool validate_each_epoch = true;  // false leaves val_acc at 0
};

/// Trains the volumetric network (cfg.network) or the planar slice-vote
/// baseline (cfg.baseline2d). Validation accuracy uses the test cases in
/// infer mode, once per epoch (0 when there are none or it is switched off).
template <typename T>
TrainedModel<T> train_model(const RunConfig& cfg, EvalMode mode, const PreparedData& data,
                            const TrainHooks& hooks = {}) {
  cfg.train.validate();
  const bool planar = mode == EvalMode::slicevote2d;
  const auto& preset = planar ? cfg.baseline2d : cfg.network;
  auto net = nn::build_network<T>(preset, cfg.train.seed, nn::Geometry{planar});

  std::unique_ptr<BatchSource<T>> source;
  if (planar) {
    source = std::make_unique<SliceBatchSource<T>>(cast_volumes<T>(data.train), labels_of(data.train), cfg.train.seed);
  } else {
    source = std::make_unique<VolumeBatchSource<T>>(cast_volumes<T>(data.train), labels_of(data.train));
  }
  const auto labels = source->labels();
  UniformBatchSampler sampler(labels, cfg.train.per_class_batch, cfg.train.seed);
  SgdMomentum<T> optimizer(net, cfg.train.momentum);

  MetricsLog log;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    EpochMetrics m = train_epoch(net, *source, sampler, optimizer, cfg.train, epoch, hooks.on_batch);
    if (hooks.validate_each_epoch && !data.test.empty()) {
      m.val_acc = evaluate(net, std::span<const TestCase>(data.test), mode, "val").accuracy;
    }
    log.append(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
  }
  return {std::move(net), std::move(log)};
}

inline std::string model_name(const nn::NetworkPreset& p, const nn::Geometry& g) {
  return std::string(g.planar ? "2d-" : "3d-") + nn::to_string(p.name);
}

/// Writes metrics.csv and model.ckpt under `out_dir`.
template <typename T>
void write_training_outputs(const TrainedModel<T>& model, const RunConfig& cfg, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  model.metrics.save(out_dir / "metrics.csv");
  CheckpointMeta meta{{model.network.preset, model.network.geometry}, cfg.train.epochs, cfg.preprocess};
  save_checkpoint(model.network, meta, out_dir / "model.ckpt");
}

/// Evaluates a checkpoint on the manifest's test split (all records when the
/// manifest has no split). Preprocessing follows the checkpoint's stored
/// config unless `override_cfg` is given.
inline EvalReport evaluate_checkpoint(const fs::path& checkpoint, const DatasetManifest& manifest, EvalMode mode,
                                      bool already_preprocessed,
                                      const std::optional<PreprocessConfig>& override_cfg = std::nullopt) {
  auto loaded = load_checkpoint<float>(checkpoint);
  if (mode_of(loaded.meta.architecture.geometry) != mode) {
    throw ConfigError("checkpoint holds a " + to_string(mode_of(loaded.meta.architecture.geometry)) +
                      " model, requested mode " + to_string(mode));
  }
  const PreprocessConfig cfg = override_cfg ? *override_cfg : loaded.meta.preprocess.value_or(PreprocessConfig{});
  bool any_split = false;
  for (const auto& r : manifest.records) any_split |= r.split != Split::unassigned;
  std::vector<TestCase> cases;
  for (const auto& r : manifest.records) {
    if (any_split && r.split != Split::test) continue;
    cases.push_back(prepare_record(manifest, r, cfg, already_preprocessed));
  }
  if (cases.empty()) throw ConfigError("manifest has no test records to evaluate");
  return evaluate(loaded.network, std::span<const TestCase>(cases), mode,
                  model_name(loaded.network.preset, loaded.network.geometry));
}

}  // namespace ctsev
