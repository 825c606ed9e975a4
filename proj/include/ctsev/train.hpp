#pragma once

// Training loop pieces: class-uniform batch sampling, SGD with momentum,
// per-epoch metrics and versioned checkpoints.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctsev/error.hpp"
#include "ctsev/nn/network.hpp"
#include "ctsev/preprocess.hpp"
#include "ctsev/rng.hpp"
#include "ctsev/tensor.hpp"
#include "ctsev/volio.hpp"

namespace ctsev {

// ---------------------------------------------------------------------------
// Configuration

struct StepDecay {
  std::size_t every_epochs = 10;
  double gamma = 0.1;
};

struct TrainConfig {
  std::size_t per_class_batch = 2;  // k; batch size 3k
  std::size_t epochs = 20;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;
  std::optional<StepDecay> lr_decay;

  std::size_t batch_size() const { return 3 * per_class_batch; }

  double learning_rate_at(std::size_t epoch) const {
    if (!lr_decay) return learning_rate;
    return learning_rate * std::pow(lr_decay->gamma, static_cast<double>(epoch / lr_decay->every_epochs));
  }

  void validate() const {
    if (per_class_batch == 0) throw ConfigError("per_class_batch must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (lr_decay && (lr_decay->every_epochs == 0 || !(lr_decay->gamma > 0.0))) {
      throw ConfigError("lr_decay needs every_epochs > 0 and gamma > 0");
    }
  }
};

/// Everything that determines a model's parameter layout.
struct Architecture {
  nn::NetworkPreset preset;
  nn::Geometry geometry;
};

inline nlohmann::json to_json(const Architecture& a) {
  return {{"preset", nn::to_string(a.preset.name)},
          {"blocks_per_stage", a.preset.blocks_per_stage},
          {"base_channels", a.preset.base_channels},
          {"dropout_rate", a.preset.dropout_rate},
          {"planar", a.geometry.planar}};
}

inline nlohmann::json to_json(const nn::NetworkPreset& p) {
  return {{"name", nn::to_string(p.name)},
          {"blocks_per_stage", p.blocks_per_stage},
          {"base_channels", p.base_channels},
          {"dropout_rate", p.dropout_rate}};
}

/// A named preset, optionally with overridden fields.
inline nn::NetworkPreset preset_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"name", "blocks_per_stage", "base_channels", "dropout_rate"}, "network config");
  try {
    auto p = nn::NetworkPreset::named(nn::preset_from_string(j.value("name", std::string("nano"))));
    if (j.contains("blocks_per_stage")) p.blocks_per_stage = j["blocks_per_stage"].get<std::array<std::size_t, 4>>();
    if (j.contains("base_channels")) p.base_channels = j["base_channels"].get<std::size_t>();
    if (j.contains("dropout_rate")) p.dropout_rate = j["dropout_rate"].get<double>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  try {
    nlohmann::json preset = {{"name", j.at("preset")}};
    for (const char* k : {"blocks_per_stage", "base_channels", "dropout_rate"}) {
      if (j.contains(k)) preset[k] = j[k];
    }
    return {preset_from_json(preset), nn::Geometry{j.value("planar", false)}};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("architecture: ") + e.what());
  }
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"per_class_batch", c.per_class_batch},
                      {"epochs", c.epochs},
                      {"learning_rate", c.learning_rate},
                      {"momentum", c.momentum},
                      {"seed", c.seed},
                      {"precision", to_string(c.precision)}};
  if (c.lr_decay) j["lr_decay"] = {{"every_epochs", c.lr_decay->every_epochs}, {"gamma", c.lr_decay->gamma}};
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  detail::reject_unknown_keys(
      j, {"per_class_batch", "epochs", "learning_rate", "momentum", "seed", "precision", "lr_decay"}, "train config");
  try {
    c.per_class_batch = j.value("per_class_batch", c.per_class_batch);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.seed = j.value("seed", c.seed);
    const auto prec = j.value("precision", std::string("single"));
    if (prec == "single") {
      c.precision = Precision::single;
    } else if (prec == "double") {
      c.precision = Precision::double_;
    } else {
      throw ConfigError("precision must be \"single\" or \"double\"");
    }
    if (j.contains("lr_decay") && !j["lr_decay"].is_null()) {
      c.lr_decay = StepDecay{j["lr_decay"].at("every_epochs").get<std::size_t>(),
                             j["lr_decay"].at("gamma").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

/// One JSON document: {"preprocess": {...}, "network": {...}, "baseline2d": {...}, "train": {...}}.
struct RunConfig {
  PreprocessConfig preprocess;
  nn::NetworkPreset network = nn::NetworkPreset::named(nn::PresetName::nano);
  /// Planar network for the slice-vote baseline.
  nn::NetworkPreset baseline2d = nn::NetworkPreset::named(nn::PresetName::s50);
  TrainConfig train;
  double test_fraction = 0.3;
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"preprocess", to_json(c.preprocess)},
          {"network", to_json(c.network)},
          {"baseline2d", to_json(c.baseline2d)},
          {"train", to_json(c.train)},
          {"test_fraction", c.test_fraction}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"preprocess", "network", "baseline2d", "train", "test_fraction"}, "run config");
  RunConfig c;
  if (j.contains("preprocess")) c.preprocess = preprocess_config_from_json(j["preprocess"]);
  if (j.contains("network")) c.network = preset_from_json(j["network"]);
  if (j.contains("baseline2d")) c.baseline2d = preset_from_json(j["baseline2d"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("test_fraction")) {
    if (!j["test_fraction"].is_number()) throw ConfigError("test_fraction must be a number");
    c.test_fraction = j["test_fraction"].get<double>();
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(detail::parse_json(detail::read_text(path), path.string()));
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string architecture_digest(const Architecture& a) { return fnv1a_hex(to_json(a).dump()); }

// ---------------------------------------------------------------------------
// Sampler

/// Draws k record indices per class for every batch.
///
/// Each class keeps a shuffled epoch pool; draws come off the pool without
/// replacement while at least k remain, otherwise the k draws are taken with
/// replacement from the whole class.
class UniformBatchSampler {
 public:
  UniformBatchSampler(std::span<const SeverityClass> labels, std::size_t k, std::uint64_t seed)
      : k_(k), seed_(seed) {
    if (k == 0) throw SamplerError("per-class batch size must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i) members_[index_of(labels[i])].push_back(i);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (members_[c].empty()) {
        throw SamplerError("class '" + class_name(static_cast<SeverityClass>(c)) +
                           "' has no training records");
      }
    }
    start_epoch(0);
  }

  void start_epoch(std::size_t epoch) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      pools_[c] = members_[c];
      Rng rng(hash_words({seed_, 0x9001u, epoch, c}));
      rng.shuffle(pools_[c]);
      cursor_[c] = 0;
      draw_rng_[c] = Rng(hash_words({seed_, 0x9002u, epoch, c}));
    }
  }

  /// 3k indices, class-major (k Low, k Medium, k High).
  std::vector<std::size_t> next_batch() {
    std::vector<std::size_t> batch;
    batch.reserve(3 * k_);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (pools_[c].size() - cursor_[c] >= k_) {
        batch.insert(batch.end(), pools_[c].begin() + static_cast<std::ptrdiff_t>(cursor_[c]),
                     pools_[c].begin() + static_cast<std::ptrdiff_t>(cursor_[c] + k_));
        cursor_[c] += k_;
      } else {
        for (std::size_t j = 0; j < k_; ++j) {
          batch.push_back(members_[c][draw_rng_[c].below(members_[c].size())]);
        }
      }
    }
    return batch;
  }

  std::size_t per_class() const { return k_; }
  std::size_t class_size(SeverityClass c) const { return members_[index_of(c)].size(); }

 private:
  std::size_t k_;
  std::uint64_t seed_;
  std::array<std::vector<std::size_t>, kNumClasses> members_;
  std::array<std::vector<std::size_t>, kNumClasses> pools_;
  std::array<std::size_t, kNumClasses> cursor_{};
  std::array<Rng, kNumClasses> draw_rng_{Rng(0), Rng(0), Rng(0)};
};

// ---------------------------------------------------------------------------
// Optimizer

/// v <- momentum * v + g ; p <- p - lr * v
template <typename T>
void sgd_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum) {
  if (param.shape() != grad.shape() || param.shape() != velocity.shape()) {
    throw ShapeError("sgd_step shapes disagree: param " + shape_string(param.shape()) + ", grad " +
                     shape_string(grad.shape()) + ", velocity " + shape_string(velocity.shape()));
  }
  const T m = static_cast<T>(momentum);
  const T a = static_cast<T>(lr);
  auto p = param.data();
  auto g = grad.data();
  auto v = velocity.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = m * v[i] + g[i];
    p[i] -= a * v[i];
  }
}

/// Momentum SGD owning one velocity tensor per parameter.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(const nn::Network<T>& net, double momentum) : momentum_(momentum) {
    for (const auto* p : net.parameters()) velocity_.push_back(Tensor<T>::zeros_like(*p));
  }

  void step(nn::Network<T>& net, const nn::Gradients<T>& grads, double lr) {
    auto params = net.parameters();
    if (params.size() != grads.size() || params.size() != velocity_.size()) {
      throw ShapeError("optimizer: parameter/gradient count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) sgd_step(*params[i], grads[i], velocity_[i], lr, momentum_);
  }

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Batch sources

/// Maps sampled record indices to a network batch [B, 1, D, H, W].
template <typename T>
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual SeverityClass label(std::size_t i) const = 0;
  /// `step` is the global optimizer step, for sources that randomize.
  virtual Tensor<T> assemble(std::span<const std::size_t> indices, std::uint64_t step) const = 0;

  std::vector<SeverityClass> labels() const {
    std::vector<SeverityClass> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = label(i);
    return out;
  }
};

/// Whole preprocessed volumes.
template <typename T>
class VolumeBatchSource final : public BatchSource<T> {
 public:
  VolumeBatchSource(std::vector<Tensor<T>> volumes, std::vector<SeverityClass> labels)
      : volumes_(std::move(volumes)), labels_(std::move(labels)) {
    if (volumes_.size() != labels_.size()) throw ShapeError("volume/label count mismatch");
    for (const auto& v : volumes_) {
      if (v.rank() != 3 || v.shape() != volumes_.front().shape()) {
        throw ShapeError("training volumes must share one [D,H,W] shape");
      }
    }
  }

  std::size_t size() const override { return volumes_.size(); }
  SeverityClass label(std::size_t i) const override { return labels_.at(i); }

  Tensor<T> assemble(std::span<const std::size_t> indices, std::uint64_t) const override {
    const Shape& s = volumes_.front().shape();
    Tensor<T> batch({indices.size(), 1, s[0], s[1], s[2]});
    const std::size_t n = volumes_.front().size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto src = volumes_.at(indices[b]).data();
      std::copy(src.begin(), src.end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return batch;
  }

  const Tensor<T>& volume(std::size_t i) const { return volumes_.at(i); }

 private:
  std::vector<Tensor<T>> volumes_;
  std::vector<SeverityClass> labels_;
};

/// One slice per sampled patient, labeled with the patient's class; the slice
/// index is hash(seed, step, position) mod depth.
template <typename T>
class SliceBatchSource final : public BatchSource<T> {
 public:
  SliceBatchSource(std::vector<Tensor<T>> volumes, std::vector<SeverityClass> labels, std::uint64_t seed)
      : inner_(std::move(volumes), std::move(labels)), seed_(seed) {}

  std::size_t size() const override { return inner_.size(); }
  SeverityClass label(std::size_t i) const override { return inner_.label(i); }

  Tensor<T> assemble(std::span<const std::size_t> indices, std::uint64_t step) const override {
    const Shape& s = inner_.volume(0).shape();
    const std::size_t plane = s[1] * s[2];
    Tensor<T> batch({indices.size(), 1, 1, s[1], s[2]});
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::size_t z = hash_words({seed_, 0x511cu, step, b}) % s[0];
      const auto src = inner_.volume(indices[b]).data().subspan(z * plane, plane);
      std::copy(src.begin(), src.end(), batch.data().begin() + static_cast<std::ptrdiff_t>(b * plane));
    }
    return batch;
  }

 private:
  VolumeBatchSource<T> inner_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Epoch loop and metrics

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean over batches
  double train_acc = 0.0;  // over all sampled training examples
  double val_acc = 0.0;
};

/// Optional observer of every emitted batch (indices, labels).
using BatchObserver = std::function<void(std::span<const std::size_t>, std::span<const std::int64_t>)>;

inline std::size_t batches_per_epoch(std::size_t n_records, std::size_t per_class_batch) {
  const std::size_t b = 3 * per_class_batch;
  return (n_records + b - 1) / b;
}

/// ceil(N / 3k) steps of: sample -> forward (train) -> loss -> backward -> SGD.
template <typename T>
EpochMetrics train_epoch(nn::Network<T>& net, const BatchSource<T>& data, UniformBatchSampler& sampler,
                         SgdMomentum<T>& optimizer, const TrainConfig& cfg, std::size_t epoch,
                         const BatchObserver& observer = {}) {
  const std::size_t steps = batches_per_epoch(data.size(), cfg.per_class_batch);
  const double lr = cfg.learning_rate_at(epoch);
  sampler.start_epoch(epoch);
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::uint64_t step = static_cast<std::uint64_t>(epoch) * steps + s;
    const auto indices = sampler.next_batch();
    std::vector<std::int64_t> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      labels[i] = static_cast<std::int64_t>(index_of(data.label(indices[i])));
    }
    if (observer) observer(indices, labels);
    const Tensor<T> batch = data.assemble(indices, step);
    auto fwd = nn::network_forward(net, batch, nn::Mode::train, nn::DropoutKey{cfg.seed, 0, step});
    auto loss = nn::softmax_cross_entropy(fwd.logits, labels);
    const auto grads = nn::network_backward(net, fwd.cache, loss.grad_logits);
    optimizer.step(net, grads, lr);

    loss_sum += static_cast<double>(loss.loss);
    const auto pred = argmax_last(fwd.logits);
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
    seen += labels.size();
  }
  return {epoch, loss_sum / static_cast<double>(steps),
          static_cast<double>(correct) / static_cast<double>(seen), 0.0};
}

/// Rows of (epoch, loss, train_acc, val_acc); CSV with a fixed 6-digit format.
class MetricsLog {
 public:
  void append(const EpochMetrics& m) {
    if (!rows_.empty() && m.epoch <= rows_.back().epoch) {
      throw ConfigError("metrics epochs must be strictly increasing");
    }
    rows_.push_back(m);
  }

  const std::vector<EpochMetrics>& rows() const { return rows_; }

  std::string to_csv() const {
    std::string out = "epoch,loss,train_acc,val_acc\n";
    char buf[128];
    for (const auto& r : rows_) {
      std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f\n", r.epoch, r.loss, r.train_acc, r.val_acc);
      out += buf;
    }
    return out;
  }

  void save(const fs::path& path) const { detail::write_text(path, to_csv()); }

 private:
  std::vector<EpochMetrics> rows_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//
// "CTSCKPT1" | u32 LE header length | JSON header | float32 LE parameters

inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  Architecture architecture;
  std::size_t epoch = 0;
  std::optional<PreprocessConfig> preprocess;
};

template <typename T>
std::string serialize_checkpoint(const nn::Network<T>& net, const CheckpointMeta& meta) {
  const Architecture arch{net.preset, net.geometry};
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"preset", nn::to_string(net.preset.name)},
                           {"epoch", meta.epoch},
                           {"config_digest", architecture_digest(arch)},
                           {"parameter_count", net.parameter_count()},
                           {"architecture", to_json(arch)}};
  if (meta.preprocess) header["preprocess"] = to_json(*meta.preprocess);
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 8);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += text;
  const std::size_t start = out.size();
  out.resize(start + 4 * net.parameter_count());
  auto* p = reinterpret_cast<unsigned char*>(out.data() + start);
  for (const auto* t : net.parameters()) {
    for (auto v : t->data()) {
      detail::write_f32_le(p, static_cast<float>(v));
      p += 4;
    }
  }
  return out;
}

template <typename T>
void save_checkpoint(const nn::Network<T>& net, const CheckpointMeta& meta, const fs::path& path) {
  detail::write_text(path, serialize_checkpoint(net, meta));
}

template <typename T>
struct LoadedCheckpoint {
  nn::Network<T> network;
  CheckpointMeta meta;
};

/// Verifies magic, version, digest and blob length. When `expected` is given
/// its digest must match the stored one.
template <typename T>
LoadedCheckpoint<T> deserialize_checkpoint(std::string_view bytes,
                                           const std::optional<Architecture>& expected = std::nullopt) {
  if (bytes.size() < 12) throw CheckpointTruncatedError("checkpoint shorter than its fixed prefix");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= std::uint32_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (bytes.size() < 12 + static_cast<std::size_t>(len)) {
    throw CheckpointTruncatedError("checkpoint header truncated");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (!header.contains("format_version") || header["format_version"] != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint format_version " +
                                 header.value("format_version", nlohmann::json()).dump());
  }
  CheckpointMeta meta;
  std::string stored_digest;
  std::size_t count = 0;
  try {
    meta.architecture = architecture_from_json(header.at("architecture"));
    meta.epoch = header.at("epoch").get<std::size_t>();
    stored_digest = header.at("config_digest").get<std::string>();
    count = header.at("parameter_count").get<std::size_t>();
    if (header.contains("preprocess")) meta.preprocess = preprocess_config_from_json(header["preprocess"]);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (architecture_digest(meta.architecture) != stored_digest) {
    throw CheckpointDigestError("checkpoint digest does not match its architecture");
  }
  if (expected && architecture_digest(*expected) != stored_digest) {
    throw CheckpointDigestError("checkpoint architecture (" + to_json(meta.architecture).dump() +
                                ") differs from the requested one (" + to_json(*expected).dump() + ")");
  }
  auto net = nn::build_network<T>(meta.architecture.preset, 0, meta.architecture.geometry);
  if (net.parameter_count() != count) {
    throw FormatError("checkpoint parameter_count " + std::to_string(count) + " does not fit its architecture");
  }
  const std::size_t blob = bytes.size() - 12 - len;
  if (blob < 4 * count) {
    throw CheckpointTruncatedError("parameter blob holds " + std::to_string(blob) + " bytes, expected " +
                                   std::to_string(4 * count));
  }
  if (blob > 4 * count) throw FormatError("trailing bytes after the parameter blob");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + 12 + len);
  for (auto* t : net.parameters()) {
    for (auto& v : t->data()) {
      v = static_cast<T>(detail::read_f32_le(p));
      p += 4;
    }
  }
  return {std::move(net), std::move(meta)};
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const fs::path& path,
                                    const std::optional<Architecture>& expected = std::nullopt) {
  const std::string bytes = detail::read_text(path);
  try {
    return deserialize_checkpoint<T>(bytes, expected);
  } catch (Error& e) {
    e.add_context(path.string());
    throw;
  }
}

}  // namespace ctsev
