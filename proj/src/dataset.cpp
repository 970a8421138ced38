#include "uniphynet/dataset.hpp"

#include "uniphynet/errors.hpp"
#include "uniphynet/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace uniphynet {

namespace fs = std::filesystem;

ModalityShape modality_shape(Modality m) {
  switch (m) {
    case Modality::EEG: return {256, 4};
    case Modality::ECG: return {512, 3};
    case Modality::EDA: return {128, 3};
  }
  throw ConfigError("unknown modality");
}

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::EEG: return "eeg";
    case Modality::ECG: return "ecg";
    case Modality::EDA: return "eda";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "eeg") return Modality::EEG;
  if (lower == "ecg") return Modality::ECG;
  if (lower == "eda") return Modality::EDA;
  throw ConfigError("unknown modality '" + std::string(name) + "'");
}

std::vector<Modality> parse_modality_list(std::string_view csv) {
  std::vector<Modality> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    auto end = csv.find(',', start);
    if (end == std::string_view::npos) end = csv.size();
    auto item = csv.substr(start, end - start);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
    if (!item.empty()) {
      Modality m = parse_modality(item);
      if (std::find(out.begin(), out.end(), m) != out.end())
        throw ConfigError("modality listed twice: " + std::string(item));
      out.push_back(m);
    }
    start = end + 1;
  }
  if (out.empty()) throw ConfigError("empty modality list");
  return out;
}

int num_classes(LabelScheme scheme) { return scheme == LabelScheme::Binary ? 2 : 3; }

std::string_view to_string(LabelScheme scheme) {
  return scheme == LabelScheme::Binary ? "binary" : "ternary";
}

LabelScheme parse_label_scheme(std::string_view name) {
  if (name == "binary") return LabelScheme::Binary;
  if (name == "ternary") return LabelScheme::Ternary;
  throw ConfigError("unknown label scheme '" + std::string(name) + "'");
}

int map_label(int rating, LabelScheme scheme) {
  if (rating < 1 || rating > 9)
    throw ValidationError("rating " + std::to_string(rating) + " outside 1..9");
  if (scheme == LabelScheme::Binary) return rating <= 4 ? 0 : 1;
  return (rating - 1) / 3;
}

std::vector<int> LabeledDataset::subjects() const {
  std::vector<int> ids;
  for (const auto& ex : examples) ids.push_back(ex.key.subject_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<int> LabeledDataset::class_histogram() const {
  std::vector<int> hist(num_classes(scheme), 0);
  for (std::size_t i = 0; i < examples.size(); ++i) ++hist[label(i)];
  return hist;
}

Eigen::Index window_samples(Modality m, double window_seconds) {
  double n = window_seconds * modality_shape(m).sample_rate_hz;
  auto rounded = static_cast<Eigen::Index>(std::llround(n));
  if (rounded <= 0 || std::abs(n - static_cast<double>(rounded)) > 1e-9)
    throw ConfigError("window of " + std::to_string(window_seconds) + " s is not a whole number of samples");
  return rounded;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto end = line.find(',', start);
    if (end == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, end - start));
    start = end + 1;
  }
  for (auto& f : fields) {
    while (!f.empty() && std::isspace(static_cast<unsigned char>(f.front()))) f.remove_prefix(1);
    while (!f.empty() && std::isspace(static_cast<unsigned char>(f.back()))) f.remove_suffix(1);
  }
  return fields;
}

template <typename Num>
bool parse_number(std::string_view s, Num& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::string read_line(std::istream& in, long& line_no, bool& ok) {
  std::string line;
  ok = static_cast<bool>(std::getline(in, line));
  if (ok) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  }
  return line;
}

Signal read_signal_csv(const fs::path& path, int expected_channels) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  long line_no = 0;
  bool ok = false;
  std::string header = read_line(in, line_no, ok);
  if (!ok) throw ParseError(path.string() + ": empty file", 1);
  auto names = split_fields(header);
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (names[c] != "ch" + std::to_string(c + 1))
      throw ParseError(path.string() + ": header must be ch1,...,chN", line_no);
  }
  const auto channels = static_cast<int>(names.size());
  if (channels != expected_channels)
    throw SchemaError(path.string() + ": expected " + std::to_string(expected_channels) +
                      " channels, found " + std::to_string(channels));

  std::vector<double> values;
  while (true) {
    std::string line = read_line(in, line_no, ok);
    if (!ok) break;
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (static_cast<int>(fields.size()) != channels)
      throw ParseError(path.string() + ": expected " + std::to_string(channels) + " fields", line_no);
    for (auto f : fields) {
      double v = 0.0;
      if (!parse_number(f, v) || !std::isfinite(v))
        throw ParseError(path.string() + ": bad number '" + std::string(f) + "'", line_no);
      values.push_back(v);
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(values.size()) / channels;
  Signal sig(channels, n);
  for (Eigen::Index t = 0; t < n; ++t)
    for (int c = 0; c < channels; ++c) sig(c, t) = values[t * channels + c];
  return sig;
}

std::vector<Rating> read_labels_csv(const fs::path& path, double cadence_s) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  long line_no = 0;
  bool ok = false;
  std::string header = read_line(in, line_no, ok);
  if (!ok || split_fields(header) != std::vector<std::string_view>{"offset_s", "rating"})
    throw ParseError(path.string() + ": header must be offset_s,rating", 1);

  std::vector<Rating> ratings;
  while (true) {
    std::string line = read_line(in, line_no, ok);
    if (!ok) break;
    if (line.empty()) continue;
    auto fields = split_fields(line);
    Rating r;
    if (fields.size() != 2 || !parse_number(fields[0], r.offset_s) || !parse_number(fields[1], r.value))
      throw ParseError(path.string() + ": expected offset_s,rating", line_no);
    if (r.value < 1 || r.value > 9)
      throw ValidationError(path.string() + ": rating " + std::to_string(r.value) + " outside 1..9 (line " +
                            std::to_string(line_no) + ")");
    double steps = r.offset_s / cadence_s;
    if (r.offset_s < 0 || std::abs(steps - std::round(steps)) > 1e-6)
      throw ValidationError(path.string() + ": offset " + std::string(fields[0]) + " is not a multiple of the " +
                            std::to_string(cadence_s) + " s cadence (line " + std::to_string(line_no) + ")");
    ratings.push_back(r);
  }
  std::stable_sort(ratings.begin(), ratings.end(),
                   [](const Rating& a, const Rating& b) { return a.offset_s < b.offset_s; });
  for (std::size_t i = 1; i < ratings.size(); ++i)
    if (ratings[i].offset_s == ratings[i - 1].offset_s)
      throw ValidationError(path.string() + ": duplicate offset " + std::to_string(ratings[i].offset_s));
  return ratings;
}

int parse_id(const fs::path& dir) {
  int id = 0;
  const std::string name = dir.filename().string();
  if (!parse_number(std::string_view(name), id))
    throw ParseError("directory name '" + name + "' is not an integer id");
  return id;
}

long offset_index(double offset_s, double window_seconds) {
  return std::lround(offset_s / window_seconds);
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Recording load_recording(const fs::path& trial_dir, Modality expected, double window_seconds) {
  const auto shape = modality_shape(expected);
  Recording rec;
  rec.trial_id = parse_id(trial_dir);
  rec.subject_id = parse_id(trial_dir.parent_path());
  rec.modality = expected;
  rec.sample_rate_hz = shape.sample_rate_hz;
  rec.channels = shape.channels;
  rec.samples = read_signal_csv(trial_dir / (std::string(to_string(expected)) + ".csv"), shape.channels);
  rec.ratings = read_labels_csv(trial_dir / "labels.csv", window_seconds);
  return rec;
}

std::vector<Window> segment(const Recording& rec, double window_seconds) {
  const Eigen::Index width = window_samples(rec.modality, window_seconds);
  std::vector<Window> windows;
  windows.reserve(rec.ratings.size());
  for (const auto& r : rec.ratings) {
    const auto start = static_cast<Eigen::Index>(std::llround(r.offset_s * rec.sample_rate_hz));
    if (start + width > rec.samples.cols())
      throw ValidationError("rating window at offset " + format_double(r.offset_s) + " s exceeds the " +
                            format_double(rec.duration_s()) + " s signal");
    Window w;
    w.data = rec.samples.middleCols(start, width);
    w.rating = r.value;
    w.subject_id = rec.subject_id;
    w.trial_id = rec.trial_id;
    w.offset_s = r.offset_s;
    w.modality = rec.modality;
    windows.push_back(std::move(w));
  }
  return windows;
}

LabeledDataset load_dataset(const fs::path& root, std::span<const Modality> modalities, LabelScheme scheme,
                            double window_seconds) {
  if (modalities.empty()) throw ConfigError("no modalities requested");
  if (!fs::is_directory(root)) throw ParseError("dataset root " + root.string() + " is not a directory");

  std::vector<fs::path> trial_dirs;
  for (const auto& subject : fs::directory_iterator(root)) {
    if (!subject.is_directory()) continue;
    for (const auto& trial : fs::directory_iterator(subject.path()))
      if (trial.is_directory()) trial_dirs.push_back(trial.path());
  }
  std::sort(trial_dirs.begin(), trial_dirs.end());

  LabeledDataset ds;
  ds.modalities.assign(modalities.begin(), modalities.end());
  ds.scheme = scheme;
  ds.window_seconds = window_seconds;

  std::size_t dropped = 0;
  for (const auto& dir : trial_dirs) {
    std::map<long, Example> aligned;
    std::map<long, int> seen;
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      if (!fs::exists(dir / (std::string(to_string(modalities[m])) + ".csv"))) continue;
      for (auto& w : segment(load_recording(dir, modalities[m], window_seconds), window_seconds)) {
        const long idx = offset_index(w.offset_s, window_seconds);
        auto& ex = aligned[idx];
        if (ex.parts.empty()) {
          ex.key = {w.subject_id, w.trial_id, idx};
          ex.rating = w.rating;
          ex.parts.resize(modalities.size());
        } else if (ex.rating != w.rating) {
          throw ValidationError(dir.string() + ": modalities disagree on the rating at offset " +
                                format_double(w.offset_s));
        }
        ex.parts[m] = std::move(w);
        ++seen[idx];
      }
    }
    for (auto& [idx, ex] : aligned) {
      if (seen[idx] == static_cast<int>(modalities.size()))
        ds.examples.push_back(std::move(ex));
      else
        ++dropped;
    }
  }
  if (dropped > 0) spdlog::warn("dropped {} windows missing at least one modality", dropped);
  if (ds.examples.empty()) throw ParseError("no windows found under " + root.string());
  return ds;
}

void write_dataset(const LabeledDataset& ds, const fs::path& root) {
  std::map<std::pair<int, int>, std::vector<const Example*>> trials;
  for (const auto& ex : ds.examples) trials[{ex.key.subject_id, ex.key.trial_id}].push_back(&ex);

  for (const auto& [id, exs] : trials) {
    const fs::path dir = root / std::to_string(id.first) / std::to_string(id.second);
    fs::create_directories(dir);
    long max_index = 0;
    for (const auto* ex : exs) max_index = std::max(max_index, ex->key.offset_index);

    std::ofstream labels(dir / "labels.csv");
    labels << "offset_s,rating\n";
    for (const auto* ex : exs)
      labels << format_double(static_cast<double>(ex->key.offset_index) * ds.window_seconds) << ','
             << ex->rating << '\n';

    for (std::size_t m = 0; m < ds.modalities.size(); ++m) {
      const auto shape = modality_shape(ds.modalities[m]);
      const Eigen::Index width = window_samples(ds.modalities[m], ds.window_seconds);
      Signal rec = Signal::Zero(shape.channels, (max_index + 1) * width);
      for (const auto* ex : exs) rec.middleCols(ex->key.offset_index * width, width) = ex->parts[m].data;

      std::ofstream out(dir / (std::string(to_string(ds.modalities[m])) + ".csv"));
      for (int c = 0; c < shape.channels; ++c) out << (c ? "," : "") << "ch" << c + 1;
      out << '\n';
      std::string line;
      for (Eigen::Index t = 0; t < rec.cols(); ++t) {
        line.clear();
        for (int c = 0; c < shape.channels; ++c) {
          if (c) line += ',';
          line += format_double(rec(c, t));
        }
        line += '\n';
        out << line;
      }
    }
  }
}

double synthetic_tone_hz(Modality m) {
  // The EDA chain keeps only 0.05-3 Hz, so its class tone sits inside that band.
  return m == Modality::EDA ? 1.0 : 10.0;
}

namespace {

// Kellet's refined pink filter over white Gaussian noise, then standardized.
Eigen::VectorXd pink_noise(Eigen::Index n, RngStream& rng) {
  constexpr Eigen::Index kBurnIn = 512;
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  Eigen::VectorXd out(n);
  for (Eigen::Index i = -kBurnIn; i < n; ++i) {
    const double white = rng.normal();
    b0 = 0.99886 * b0 + white * 0.0555179;
    b1 = 0.99332 * b1 + white * 0.0750759;
    b2 = 0.96900 * b2 + white * 0.1538520;
    b3 = 0.86650 * b3 + white * 0.3104856;
    b4 = 0.55000 * b4 + white * 0.5329522;
    b5 = -0.7616 * b5 - white * 0.0168980;
    const double pink = b0 + b1 + b2 + b3 + b4 + b5 + b6 + white * 0.5362;
    b6 = white * 0.115926;
    if (i >= 0) out[i] = pink;
  }
  out.array() -= out.mean();
  const double sd = std::sqrt(out.squaredNorm() / static_cast<double>(n));
  if (sd > 0) out /= sd;
  return out;
}

int rating_for_class(int cls, int classes, RngStream& rng) {
  // Rating ranges that map_label sends to `cls`.
  int lo = 1, hi = 9;
  if (classes == 2) {
    lo = cls == 0 ? 1 : 5;
    hi = cls == 0 ? 4 : 9;
  } else {
    lo = 3 * cls + 1;
    hi = 3 * cls + 3;
  }
  return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

}  // namespace

LabeledDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes != 2 && spec.classes != 3)
    throw ConfigError("synthetic classes must be 2 or 3, got " + std::to_string(spec.classes));
  if (spec.subjects < 1 || spec.trials < 1 || spec.windows_per_trial < 1)
    throw ConfigError("synthetic subjects, trials and windows_per_trial must be positive");
  if (spec.modalities.empty()) throw ConfigError("synthetic dataset needs at least one modality");

  LabeledDataset ds;
  ds.modalities = spec.modalities;
  ds.scheme = spec.classes == 2 ? LabelScheme::Binary : LabelScheme::Ternary;
  ds.window_seconds = spec.window_seconds;

  const RngStream root(seed);
  long global = 0;
  for (int s = 0; s < spec.subjects; ++s) {
    RngStream subject_rng = root.split("subject").split(static_cast<std::uint64_t>(s));
    const double gain = subject_rng.uniform(0.9, 1.1);
    for (int t = 0; t < spec.trials; ++t) {
      RngStream trial_rng = subject_rng.split("trial").split(static_cast<std::uint64_t>(t));
      // Round-robin classes over the whole dataset, shuffled inside the trial.
      std::vector<int> classes(spec.windows_per_trial);
      for (auto& c : classes) c = static_cast<int>(global++ % spec.classes);
      RngStream order_rng = trial_rng.split("order");
      std::shuffle(classes.begin(), classes.end(), order_rng);

      for (int w = 0; w < spec.windows_per_trial; ++w) {
        RngStream win_rng = trial_rng.split("window").split(static_cast<std::uint64_t>(w));
        const int cls = classes[w];
        Example ex;
        ex.key = {s, t, w};
        ex.rating = rating_for_class(cls, spec.classes, win_rng);
        for (Modality m : spec.modalities) {
          RngStream mod_rng = win_rng.split(to_string(m));
          const auto shape = modality_shape(m);
          const Eigen::Index n = window_samples(m, spec.window_seconds);
          const double amplitude = 0.4 * (cls + 1) * gain;
          const double omega = 2.0 * std::numbers::pi * synthetic_tone_hz(m) / shape.sample_rate_hz;
          Window win;
          win.data.resize(shape.channels, n);
          for (int c = 0; c < shape.channels; ++c) {
            const double phase = mod_rng.uniform(0.0, 2.0 * std::numbers::pi);
            Eigen::VectorXd noise = pink_noise(n, mod_rng);
            for (Eigen::Index i = 0; i < n; ++i)
              win.data(c, i) = noise[i] + amplitude * std::sin(omega * static_cast<double>(i) + phase);
          }
          win.rating = ex.rating;
          win.subject_id = s;
          win.trial_id = t;
          win.offset_s = w * spec.window_seconds;
          win.modality = m;
          ex.parts.push_back(std::move(win));
        }
        ds.examples.push_back(std::move(ex));
      }
    }
  }
  return ds;
}

std::string_view to_string(Protocol p) { return p == Protocol::KFold ? "kfold" : "loso"; }

std::vector<std::size_t> FoldPlan::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] != fold) out.push_back(i);
  return out;
}

FoldPlan make_folds(const LabeledDataset& ds, Protocol protocol, std::uint64_t seed, int k) {
  if (ds.examples.empty()) throw ConfigError("cannot fold an empty dataset");
  FoldPlan plan;
  plan.protocol = protocol;
  plan.seed = seed;
  plan.assignment.assign(ds.size(), -1);

  if (protocol == Protocol::LOSO) {
    const auto subjects = ds.subjects();
    if (subjects.size() < 2) throw ConfigError("LOSO needs at least two subjects");
    plan.num_folds = static_cast<int>(subjects.size());
    plan.fold_subject = subjects;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto it = std::lower_bound(subjects.begin(), subjects.end(), ds.examples[i].key.subject_id);
      plan.assignment[i] = static_cast<int>(it - subjects.begin());
    }
    return plan;
  }

  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  if (static_cast<std::size_t>(k) > ds.size()) throw ConfigError("more folds than windows");
  plan.num_folds = k;
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RngStream rng = RngStream(seed).split("kfold");
  std::shuffle(order.begin(), order.end(), rng);
  // Contiguous chunks of the shuffled order; the first n % k folds get one extra.
  const std::size_t base = ds.size() / k, extra = ds.size() % k;
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t len = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t j = 0; j < len; ++j) plan.assignment[order[pos++]] = f;
  }
  return plan;
}

TrainingPartition::TrainingPartition(std::vector<Example> examples, std::vector<ExampleKey> held_out)
    : examples_(std::move(examples)), held_out_(std::move(held_out)) {
  std::sort(held_out_.begin(), held_out_.end());
  for (const auto& ex : examples_) {
    if (std::binary_search(held_out_.begin(), held_out_.end(), ex.key))
      throw StateError("training partition contains held-out window (subject " +
                       std::to_string(ex.key.subject_id) + ", trial " + std::to_string(ex.key.trial_id) +
                       ", index " + std::to_string(ex.key.offset_index) + ")");
  }
}

FoldSplit split_fold(const LabeledDataset& ds, const FoldPlan& plan, int fold, double val_fraction,
                     std::uint64_t seed) {
  if (fold < 0 || fold >= plan.num_folds) throw ConfigError("fold index out of range");
  if (plan.assignment.size() != ds.size()) throw ConfigError("fold plan does not match dataset size");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("validation fraction must be in [0, 1)");

  FoldSplit split;
  for (auto i : plan.test_indices(fold)) split.test.push_back(ds.examples[i]);

  auto rest = plan.train_indices(fold);
  RngStream rng = RngStream(seed).split("inner-validation").split(static_cast<std::uint64_t>(fold));
  std::shuffle(rest.begin(), rest.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rest.size())));
  if (val_fraction > 0.0 && n_val == 0 && rest.size() > 1) n_val = 1;
  std::vector<std::size_t> val_idx(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  for (auto i : val_idx) split.validation.push_back(ds.examples[i]);
  for (auto i : train_idx) split.train.push_back(ds.examples[i]);
  return split;
}

}  // namespace uniphynet
