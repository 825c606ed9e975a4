#pragma once

// Patient-level prediction (volumetric and slice-vote), accuracy, confusion
// matrices and the evaluation report.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctsev/error.hpp"
#include "ctsev/nn/network.hpp"
#include "ctsev/tensor.hpp"
#include "ctsev/volio.hpp"

namespace ctsev {

enum class EvalMode { volumetric3d, slicevote2d };

inline std::string to_string(EvalMode m) {
  return m == EvalMode::volumetric3d ? "volumetric3d" : "slicevote2d";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "volumetric3d") return EvalMode::volumetric3d;
  if (s == "slicevote2d") return EvalMode::slicevote2d;
  throw ConfigError("unknown mode '" + s + "' (expected volumetric3d|slicevote2d)");
}

inline EvalMode mode_of(const nn::Geometry& g) {
  return g.planar ? EvalMode::slicevote2d : EvalMode::volumetric3d;
}

/// Plurality vote; ties go to the more severe class. Order-independent.
inline SeverityClass majority_vote(std::span<const SeverityClass> votes) {
  if (votes.empty()) throw ShapeError("majority vote over no predictions");
  std::array<std::size_t, kNumClasses> counts{};
  for (auto v : votes) ++counts[index_of(v)];
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    if (counts[c] >= counts[best]) best = c;
  }
  return static_cast<SeverityClass>(best);
}

template <typename T>
Tensor<T> volume_to_input(const Volume& v) {
  if (v.voxels.rank() != 3) throw ShapeError("volume must be [D,H,W]");
  return v.voxels.cast<T>().reshaped({1, 1, v.depth(), v.height(), v.width()});
}

/// Argmax of infer-mode logits (ties toward the more severe class).
template <typename T>
SeverityClass predict_volume_3d(const nn::Network<T>& net, const Volume& volume) {
  if (net.geometry.planar) throw ConfigError("predict_volume_3d needs a volumetric network");
  const auto fwd = nn::network_forward(net, volume_to_input<T>(volume), nn::Mode::infer);
  return class_from_index(argmax_last(fwd.logits)[0]);
}

/// Per-slice class predictions from a planar network.
template <typename T>
std::vector<SeverityClass> predict_slices(const nn::Network<T>& net, const Volume& volume) {
  if (!net.geometry.planar) throw ConfigError("slice prediction needs a planar network");
  const std::size_t D = volume.depth(), H = volume.height(), W = volume.width();
  const Tensor<T> batch = volume.voxels.cast<T>().reshaped({D, 1, 1, H, W});
  const auto fwd = nn::network_forward(net, batch, nn::Mode::infer);
  const auto idx = argmax_last(fwd.logits);
  std::vector<SeverityClass> out(D);
  for (std::size_t z = 0; z < D; ++z) out[z] = class_from_index(idx[z]);
  return out;
}

template <typename T>
SeverityClass predict_volume_2d_baseline(const nn::Network<T>& net, const Volume& volume) {
  const auto slices = predict_slices(net, volume);
  return majority_vote(slices);
}

template <typename T>
SeverityClass predict(const nn::Network<T>& net, const Volume& volume) {
  return net.geometry.planar ? predict_volume_2d_baseline(net, volume) : predict_volume_3d(net, volume);
}

inline void check_pairs(std::size_t preds, std::size_t labels) {
  if (preds != labels) {
    throw ShapeError("prediction count " + std::to_string(preds) + " != label count " + std::to_string(labels));
  }
}

inline double accuracy(std::span<const SeverityClass> preds, std::span<const SeverityClass> labels) {
  check_pairs(preds.size(), labels.size());
  if (preds.empty()) throw ShapeError("accuracy of an empty prediction list");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};
  std::array<std::array<double, kNumClasses>, kNumClasses> row_normalized{};
  std::array<bool, kNumClasses> empty_rows{};

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : counts) {
      for (auto v : r) n += v;
    }
    return n;
  }
  std::size_t trace() const { return counts[0][0] + counts[1][1] + counts[2][2]; }
  std::size_t row_sum(std::size_t r) const { return counts[r][0] + counts[r][1] + counts[r][2]; }
};

inline ConfusionMatrix confusion_matrix(std::span<const SeverityClass> preds, std::span<const SeverityClass> labels) {
  check_pairs(preds.size(), labels.size());
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) ++cm.counts[index_of(labels[i])][index_of(preds[i])];
  for (std::size_t r = 0; r < kNumClasses; ++r) {
    const std::size_t n = cm.row_sum(r);
    cm.empty_rows[r] = n == 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      cm.row_normalized[r][c] = n == 0 ? 0.0 : static_cast<double>(cm.counts[r][c]) / static_cast<double>(n);
    }
  }
  return cm;
}

/// "59.0" style: percentage with one decimal.
inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

struct EvalReport {
  std::string model;
  EvalMode mode = EvalMode::volumetric3d;
  std::size_t n_test = 0;
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::array<double, kNumClasses> per_class_recall{};
  std::array<std::size_t, kNumClasses> class_histogram{};
};

/// Accuracy is trace / total in integer counts, so it always agrees with the matrix.
inline EvalReport make_report(std::string model, EvalMode mode, std::span<const SeverityClass> preds,
                              std::span<const SeverityClass> labels) {
  check_pairs(preds.size(), labels.size());
  if (preds.empty()) throw ShapeError("evaluation over an empty test split");
  EvalReport r;
  r.model = std::move(model);
  r.mode = mode;
  r.n_test = preds.size();
  r.confusion = confusion_matrix(preds, labels);
  r.accuracy = static_cast<double>(r.confusion.trace()) / static_cast<double>(r.n_test);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    r.per_class_recall[c] = r.confusion.row_normalized[c][c];
    r.class_histogram[c] = r.confusion.row_sum(c);
  }
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"model", r.model},
          {"mode", to_string(r.mode)},
          {"n_test", r.n_test},
          {"accuracy", r.accuracy},
          {"confusion_counts", r.confusion.counts},
          {"confusion_row_norm", r.confusion.row_normalized},
          {"per_class_recall", r.per_class_recall},
          {"class_histogram", r.class_histogram},
          {"empty_rows", r.confusion.empty_rows}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.model = j.at("model").get<std::string>();
    r.mode = eval_mode_from_string(j.at("mode").get<std::string>());
    r.n_test = j.at("n_test").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.confusion.counts = j.at("confusion_counts").get<decltype(r.confusion.counts)>();
    r.confusion.row_normalized = j.at("confusion_row_norm").get<decltype(r.confusion.row_normalized)>();
    r.per_class_recall = j.at("per_class_recall").get<decltype(r.per_class_recall)>();
    r.class_histogram = j.at("class_histogram").get<decltype(r.class_histogram)>();
    for (std::size_t c = 0; c < kNumClasses; ++c) r.confusion.empty_rows[c] = r.confusion.row_sum(c) == 0;
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
}

/// Human-readable table: accuracy and row percentages.
inline std::string render_report(const EvalReport& r) {
  std::string out = r.model + " (" + to_string(r.mode) + "): accuracy " + format_percent(r.accuracy) +
                    "% over " + std::to_string(r.n_test) + " patients\n";
  out += "true\\pred     low  medium    high\n";
  char buf[96];
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    std::snprintf(buf, sizeof buf, "%-9s %6.0f%% %6.0f%% %6.0f%%%s\n", class_name(static_cast<SeverityClass>(t)).c_str(),
                  100.0 * r.confusion.row_normalized[t][0], 100.0 * r.confusion.row_normalized[t][1],
                  100.0 * r.confusion.row_normalized[t][2], r.confusion.empty_rows[t] ? "  (no samples)" : "");
    out += buf;
  }
  return out;
}

/// A preprocessed test patient.
struct TestCase {
  std::string id;
  Volume volume;
  SeverityClass label = SeverityClass::Low;
};

/// Predicts every patient independently and assembles the report in
/// patient-id order.
template <typename T>
EvalReport evaluate(const nn::Network<T>& net, std::span<const TestCase> cases, EvalMode mode,
                    const std::string& model_name) {
  if (cases.empty()) throw ShapeError("evaluation over an empty test split");
  if (mode_of(net.geometry) != mode) {
    throw ConfigError("model is " + to_string(mode_of(net.geometry)) + " but evaluation mode is " + to_string(mode));
  }
  std::vector<const TestCase*> order;
  for (const auto& c : cases) order.push_back(&c);
  std::sort(order.begin(), order.end(), [](const TestCase* a, const TestCase* b) { return a->id < b->id; });
  std::vector<SeverityClass> preds, labels;
  for (const auto* c : order) {
    try {
      preds.push_back(predict(net, c->volume));
    } catch (Error& e) {
      e.add_context("record '" + c->id + "'");
      throw;
    }
    labels.push_back(c->label);
  }
  return make_report(model_name, mode, preds, labels);
}

}  // namespace ctsev
