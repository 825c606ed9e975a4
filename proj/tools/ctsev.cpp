// Command-line front end: synth, preprocess, train, eval, predict, histogram.
//
// Exit status: 0 success, 1 validation error or bad usage, 2 I/O error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctsev/ctsev.hpp"

namespace {

using namespace ctsev;

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitIo = 2;

std::array<std::size_t, kNumClasses> parse_profile(const std::string& text) {
  std::array<std::size_t, kNumClasses> counts{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= kNumClasses) throw ConfigError("profile needs exactly three counts, got '" + text + "'");
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      counts[i++] = static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw ConfigError("profile entry '" + item + "' is not a non-negative integer");
    }
  }
  if (i != kNumClasses) throw ConfigError("profile needs exactly three counts, got '" + text + "'");
  return counts;
}

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

struct SynthArgs {
  std::string out;
  std::size_t per_class = 10;
  std::string profile;
  std::uint64_t seed = 0;
  double noise_std = PhantomSpec{}.noise_std;
};

int run_synth(const SynthArgs& a) {
  PhantomSpec spec;
  spec.seed = a.seed;
  spec.noise_std = a.noise_std;
  const auto counts = a.profile.empty() ? std::array<std::size_t, kNumClasses>{a.per_class, a.per_class, a.per_class}
                                        : parse_profile(a.profile);
  const auto m = generate_dataset(spec, counts, a.out);
  std::cout << "wrote " << m.records.size() << " phantoms to " << a.out << "\n";
  return kExitOk;
}

struct PreprocessArgs {
  std::string manifest;
  std::string out;
  std::string config;
};

int run_preprocess(const PreprocessArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto m = load_manifest(a.manifest);
  DatasetManifest out;
  out.source_note = m.source_note.empty() ? "preprocessed" : m.source_note + " (preprocessed)";
  out.base_dir = a.out;
  for (const auto& r : m.records) {
    const TestCase tc = prepare_record(m, r, cfg.preprocess, false);
    save_volume_raw(tc.volume, fs::path(a.out) / r.id);
    out.records.push_back({r.id, r.id, r.score, r.split});
  }
  save_manifest(out, fs::path(a.out) / "manifest.json");
  detail::write_text(fs::path(a.out) / "preprocess.json", to_json(cfg.preprocess).dump(2) + "\n");
  std::cout << "preprocessed " << out.records.size() << " volumes into " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string mode = "volumetric3d";
  std::string out;
  bool preprocessed = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

template <typename T>
void train_and_save(const RunConfig& cfg, EvalMode mode, const PreparedData& data, const fs::path& out) {
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochMetrics& m) {
    std::fprintf(stderr, "epoch %zu  loss %.4f  train_acc %.3f  val_acc %.3f\n", m.epoch, m.loss, m.train_acc,
                 m.val_acc);
  };
  const auto model = train_model<T>(cfg, mode, data, hooks);
  write_training_outputs(model, cfg, out);
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.train.validate();
  const EvalMode mode = eval_mode_from_string(a.mode);
  const fs::path out(a.out);

  const auto manifest = ensure_split(load_manifest(a.manifest), cfg.test_fraction, cfg.train.seed);
  const PreparedData data = prepare_data(manifest, cfg.preprocess, a.preprocessed);
  if (data.train.empty()) throw ConfigError("manifest has no training records");

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  save_manifest(relocated(manifest, out), out / "split_manifest.json");
  detail::write_text(out / "run_config.json", to_json(cfg).dump(2) + "\n");

  if (cfg.train.precision == Precision::double_) {
    train_and_save<double>(cfg, mode, data, out);
  } else {
    train_and_save<float>(cfg, mode, data, out);
  }
  std::cout << "wrote " << (out / "model.ckpt").string() << " and " << (out / "metrics.csv").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string mode = "volumetric3d";
  std::string out;
  bool preprocessed = false;
};

int run_eval(const EvalArgs& a) {
  const auto report = evaluate_checkpoint(a.checkpoint, load_manifest(a.manifest), eval_mode_from_string(a.mode),
                                          a.preprocessed);
  if (!a.out.empty()) detail::write_text(a.out, to_json(report).dump(2) + "\n");
  std::cout << render_report(report);
  return kExitOk;
}

struct PredictArgs {
  std::string checkpoint;
  std::string volume;
  bool preprocessed = false;
};

int run_predict(const PredictArgs& a) {
  const auto loaded = load_checkpoint<float>(a.checkpoint);
  Volume v = load_volume(a.volume);
  if (!a.preprocessed) v = preprocess_volume(v, loaded.meta.preprocess.value_or(PreprocessConfig{}), a.volume);
  std::cout << class_name(predict(loaded.network, v)) << "\n";
  return kExitOk;
}

struct HistogramArgs {
  std::string manifest;
  std::string out;
};

int run_histogram(const HistogramArgs& a) {
  const auto counts = class_histogram(load_manifest(a.manifest));
  std::string csv = "class,count\n";
  for (auto c : kAllClasses) csv += class_name(c) + "," + std::to_string(counts[index_of(c)]) + "\n";
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    detail::write_text(a.out, csv);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric CT severity classification toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic phantom dataset");
  s->add_option("--out", synth.out, "output dataset directory")->required();
  s->add_option("--per-class", synth.per_class, "patients per class (balanced)");
  s->add_option("--profile", synth.profile, "per-class counts low,medium,high (overrides --per-class)");
  s->add_option("--seed", synth.seed, "dataset seed");
  s->add_option("--noise-std", synth.noise_std, "noise standard deviation in HU");

  PreprocessArgs prep;
  auto* p = app.add_subcommand("preprocess", "window, crop, resize and depth-uniformize every volume");
  p->add_option("--manifest", prep.manifest, "input manifest")->required();
  p->add_option("--out", prep.out, "output dataset directory")->required();
  p->add_option("--config", prep.config, "run-config JSON (preprocess section is used)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a volumetric or slice-vote model");
  t->add_option("--manifest", train.manifest, "dataset manifest")->required();
  t->add_option("--config", train.config, "run-config JSON");
  t->add_option("--mode", train.mode, "volumetric3d | slicevote2d");
  t->add_option("--out", train.out, "output directory for model.ckpt and metrics.csv")->required();
  t->add_flag("--preprocessed", train.preprocessed, "volumes are already preprocessed");
  t->add_option("--seed", train.seed, "override the training seed");
  t->add_option("--epochs", train.epochs, "override the epoch count");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a manifest's test split");
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  e->add_option("--manifest", ev.manifest, "dataset manifest")->required();
  e->add_option("--mode", ev.mode, "volumetric3d | slicevote2d");
  e->add_option("--out", ev.out, "report JSON path");
  e->add_flag("--preprocessed", ev.preprocessed, "volumes are already preprocessed");

  PredictArgs pred;
  auto* pr = app.add_subcommand("predict", "classify one volume");
  pr->add_option("--checkpoint", pred.checkpoint, "model checkpoint")->required();
  pr->add_option("--volume", pred.volume, "volume directory")->required();
  pr->add_flag("--preprocessed", pred.preprocessed, "volume is already preprocessed");

  HistogramArgs hist;
  auto* h = app.add_subcommand("histogram", "class distribution of a manifest as CSV");
  h->add_option("--manifest", hist.manifest, "dataset manifest")->required();
  h->add_option("--out", hist.out, "CSV path (standard output when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n\n" << app.help();
    return kExitInvalid;
  }

  try {
    if (*s) return run_synth(synth);
    if (*p) return run_preprocess(prep);
    if (*t) return run_train(train);
    if (*e) return run_eval(ev);
    if (*pr) return run_predict(pred);
    if (*h) return run_histogram(hist);
  } catch (const IoError& err) {
    std::cerr << "I/O error: " << err.what() << "\n";
    return kExitIo;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInvalid;
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}
