#pragma once

#include "uniphynet/augment.hpp"
#include "uniphynet/dataset.hpp"
#include "uniphynet/eval.hpp"
#include "uniphynet/model.hpp"
#include "uniphynet/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace uniphynet {

// Values from the [model] section; anything unset keeps the size preset's value.
struct ModelOverrides {
  std::string size = "full";  // full | tiny
  std::map<Modality, std::vector<int>> kernels;
  std::map<Modality, int> blocks;
  std::map<Modality, int> feature_maps;
  std::optional<int> gru_hidden;
  std::optional<int> cbam_reduction;
  std::optional<bool> gru_on_raw;
  std::optional<bool> use_gru;
  std::optional<BlockKind> block_kind;
  std::optional<double> dropout;
};

struct ExperimentConfig {
  // [dataset]
  std::filesystem::path data_root;  // empty: synthesize
  SynthSpec synth;
  std::uint64_t synth_seed = 1;
  std::vector<Modality> modalities{Modality::EEG};
  LabelScheme labels = LabelScheme::Binary;
  double window_seconds = 10.0;
  // [dsp]
  std::map<Modality, std::string> filter_presets;  // missing entries use the modality default
  // [augment]
  augment::AugmentPolicy augment;
  // [model]
  ModelOverrides model;
  // [train]
  train::TrainConfig train;
  // [eval]
  Protocol protocol = Protocol::KFold;
  int folds = 10;
  double val_fraction = 0.1;
  int jobs = 1;
  std::uint64_t seed = 0;  // drives splits, model init, augmentation and batching
  std::filesystem::path out_dir = "out";

  NetConfig net_config() const;
  std::string filter_preset_for(Modality m) const;
  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
};

// INI text with sections [dataset] [dsp] [augment] [model] [train] [eval].
// Values may be quoted or bracketed lists ("[3, 9]").
ExperimentConfig parse_experiment(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// Synthesizes or loads the configured dataset (raw windows).
LabeledDataset load_experiment_data(const ExperimentConfig& cfg);

// Runs each window through its modality's configured filter chain.
void preprocess_dataset(LabeledDataset& ds, const ExperimentConfig& cfg);

// Binary cache of a dataset: "UPWC", u32 version, then a JSON header line
// describing modalities, scheme and window length, then per example the key,
// rating and every window's samples as little-endian doubles.
void write_window_cache(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset read_window_cache(const std::filesystem::path& path);

std::string sha256_file(const std::filesystem::path& path);

// manifest.json: command line, config echo, seeds, precision and SHA-256 of
// every listed artifact.
void write_manifest(const std::filesystem::path& out_dir, const std::vector<std::string>& argv,
                    const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& artifacts,
                    eval::Precision precision);

}  // namespace uniphynet
