#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace uniphynet {

enum class Modality { EEG, ECG, EDA };

struct ModalityShape {
  int sample_rate_hz;
  int channels;
};

// CL-Drive acquisition layout: EEG 4 ch @ 256 Hz, ECG 3 ch @ 512 Hz, EDA 3 ch @ 128 Hz.
ModalityShape modality_shape(Modality m);
std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);
std::vector<Modality> parse_modality_list(std::string_view csv);

// channels x samples, each channel contiguous.
using Signal = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Rating {
  double offset_s = 0.0;
  int value = 0;
};

struct Recording {
  int subject_id = 0;
  int trial_id = 0;
  Modality modality = Modality::EEG;
  int sample_rate_hz = 0;
  int channels = 0;
  Signal samples;
  std::vector<Rating> ratings;  // ordered by offset

  double duration_s() const { return static_cast<double>(samples.cols()) / sample_rate_hz; }
};

struct Window {
  Signal data;
  int rating = 0;
  int subject_id = 0;
  int trial_id = 0;
  double offset_s = 0.0;
  Modality modality = Modality::EEG;
  bool preprocessed = false;

  Eigen::Index channels() const { return data.rows(); }
  Eigen::Index samples() const { return data.cols(); }
};

enum class LabelScheme { Binary, Ternary };

int num_classes(LabelScheme scheme);
std::string_view to_string(LabelScheme scheme);
LabelScheme parse_label_scheme(std::string_view name);

// Binary: 1-4 -> 0, 5-9 -> 1. Ternary: 1-3 -> 0, 4-6 -> 1, 7-9 -> 2.
int map_label(int rating, LabelScheme scheme);

// Identity of one rated segment; shared by all modalities and augmented copies.
struct ExampleKey {
  int subject_id = 0;
  int trial_id = 0;
  long offset_index = 0;

  auto operator<=>(const ExampleKey&) const = default;
};

// One labeled sample: the aligned windows of every modality in the dataset,
// in the dataset's modality order.
struct Example {
  ExampleKey key;
  int rating = 0;
  std::vector<Window> parts;
};

struct LabeledDataset {
  std::vector<Modality> modalities;
  LabelScheme scheme = LabelScheme::Binary;
  double window_seconds = 10.0;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  int label(std::size_t i) const { return map_label(examples[i].rating, scheme); }
  std::vector<int> subjects() const;  // sorted, unique
  std::vector<int> class_histogram() const;
};

Eigen::Index window_samples(Modality m, double window_seconds);

// Reads `<trial_dir>/<modality>.csv` and `<trial_dir>/labels.csv`. Subject and
// trial ids come from the two trailing directory names.
Recording load_recording(const std::filesystem::path& trial_dir, Modality expected,
                         double window_seconds = 10.0);

// One window per rating, starting at its offset.
std::vector<Window> segment(const Recording& rec, double window_seconds = 10.0);

// Loads `<root>/<subject>/<trial>/...` for the given modalities and aligns
// windows by (subject, trial, offset). Tuples missing a modality are dropped.
LabeledDataset load_dataset(const std::filesystem::path& root, std::span<const Modality> modalities,
                            LabelScheme scheme, double window_seconds = 10.0);

// Writes a dataset back to the directory layout: per (subject, trial) the
// windows are concatenated in offset order into one recording per modality.
void write_dataset(const LabeledDataset& ds, const std::filesystem::path& root);

struct SynthSpec {
  int subjects = 6;
  int trials = 3;
  int windows_per_trial = 18;
  int classes = 2;
  std::vector<Modality> modalities{Modality::EEG};
  double window_seconds = 10.0;
};

// Class-c windows carry a tone of amplitude 0.4 (c + 1) times a per-subject
// gain from U[0.9, 1.1], on top of unit-variance 1/f noise.
double synthetic_tone_hz(Modality m);
LabeledDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

enum class Protocol { KFold, LOSO };

std::string_view to_string(Protocol p);

struct FoldPlan {
  Protocol protocol = Protocol::KFold;
  int num_folds = 0;
  std::vector<int> assignment;  // example index -> fold index
  std::vector<int> fold_subject;  // LOSO only: held-out subject per fold
  std::uint64_t seed = 0;

  std::vector<std::size_t> test_indices(int fold) const;
  std::vector<std::size_t> train_indices(int fold) const;
};

// k is ignored for LOSO.
FoldPlan make_folds(const LabeledDataset& ds, Protocol protocol, std::uint64_t seed, int k = 10);

// Training examples of one fold. Construction rejects any example whose key is
// in `held_out`, so a partition can never carry validation or test data.
class TrainingPartition {
 public:
  TrainingPartition(std::vector<Example> examples, std::vector<ExampleKey> held_out);

  const std::vector<Example>& examples() const { return examples_; }
  const std::vector<ExampleKey>& held_out() const { return held_out_; }
  std::size_t size() const { return examples_.size(); }

 private:
  std::vector<Example> examples_;
  std::vector<ExampleKey> held_out_;  // sorted
};

struct FoldSplit {
  std::vector<Example> train;       // before augmentation
  std::vector<Example> validation;  // inner split, drives scheduler + checkpoint selection
  std::vector<Example> test;
};

// Test = the fold; validation = `val_fraction` of the remaining examples (seeded).
FoldSplit split_fold(const LabeledDataset& ds, const FoldPlan& plan, int fold, double val_fraction,
                     std::uint64_t seed);

}  // namespace uniphynet
