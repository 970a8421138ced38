#include "uniphynet/experiment.hpp"

#include "uniphynet/dsp.hpp"
#include "uniphynet/errors.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/lexical_cast.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>

#include <bit>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

namespace uniphynet {

namespace pt = boost::property_tree;

namespace {

std::string clean(std::string v) {
  boost::trim(v);
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\'')))
    v = v.substr(1, v.size() - 2);
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  boost::trim(v);
  return v;
}

class Section {
 public:
  Section(const pt::ptree& root, std::string name) : name_(std::move(name)) {
    if (auto child = root.get_child_optional(name_)) tree_ = *child;
  }

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    if (auto v = tree_.get_optional<std::string>(key)) return clean(*v);
    return std::nullopt;
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    if (auto v = raw(key)) out = convert<V>(key, *v);
  }

  template <typename V>
  std::optional<V> get(const std::string& key) {
    if (auto v = raw(key)) return convert<V>(key, *v);
    return std::nullopt;
  }

  // Keys present in the file that nothing asked for.
  void reject_unknown() const {
    for (const auto& [key, _] : tree_)
      if (!used_.count(key)) throw ConfigError(fmt::format("[{}]: unknown key '{}'", name_, key));
  }

  const pt::ptree& tree() const { return tree_; }

 private:
  template <typename V>
  V convert(const std::string& key, const std::string& v) {
    try {
      if constexpr (std::is_same_v<V, bool>) {
        const auto lower = boost::to_lower_copy(v);
        if (lower == "true" || lower == "1" || lower == "yes" || lower == "on") return true;
        if (lower == "false" || lower == "0" || lower == "no" || lower == "off") return false;
        throw boost::bad_lexical_cast();
      } else {
        return boost::lexical_cast<V>(v);
      }
    } catch (const boost::bad_lexical_cast&) {
      throw ConfigError(fmt::format("[{}] {}: cannot parse '{}'", name_, key, v));
    }
  }

  std::string name_;
  pt::ptree tree_;
  std::set<std::string> used_;
};

std::vector<int> int_list(const std::string& text) {
  std::vector<std::string> items;
  boost::split(items, text, boost::is_any_of(","));
  std::vector<int> out;
  for (auto& item : items) {
    boost::trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(boost::lexical_cast<int>(item));
    } catch (const boost::bad_lexical_cast&) {
      throw ConfigError("not an integer list: '" + text + "'");
    }
  }
  return out;
}

Protocol parse_protocol(const std::string& v, int& folds) {
  if (v == "loso") return Protocol::LOSO;
  if (v == "kfold") return Protocol::KFold;
  if (v.starts_with("kfold")) {
    try {
      folds = boost::lexical_cast<int>(v.substr(5));
      return Protocol::KFold;
    } catch (const boost::bad_lexical_cast&) {
    }
  }
  throw ConfigError("unknown protocol '" + v + "' (expected kfold<N> or loso)");
}

constexpr Modality kAllModalities[] = {Modality::EEG, Modality::ECG, Modality::EDA};

}  // namespace

NetConfig ExperimentConfig::net_config() const {
  const int classes = num_classes(labels);
  NetConfig net = model.size == "tiny" ? NetConfig::tiny(modalities, classes, window_seconds)
                                       : NetConfig::defaults(modalities, classes);
  for (auto& m : net.modalities) {
    m.window_seconds = window_seconds;
    if (auto it = model.kernels.find(m.modality); it != model.kernels.end()) m.kernels = it->second;
    if (auto it = model.blocks.find(m.modality); it != model.blocks.end()) m.resnet_blocks = it->second;
    if (auto it = model.feature_maps.find(m.modality); it != model.feature_maps.end()) m.feature_maps = it->second;
    if (model.gru_hidden) m.gru_hidden = *model.gru_hidden;
    if (model.cbam_reduction) m.cbam_reduction = *model.cbam_reduction;
    if (model.gru_on_raw) m.gru_on_raw = *model.gru_on_raw;
  }
  if (model.use_gru) net.use_gru = *model.use_gru;
  if (model.block_kind) net.block_kind = *model.block_kind;
  if (model.dropout) net.dropout = *model.dropout;
  return net;
}

std::string ExperimentConfig::filter_preset_for(Modality m) const {
  auto it = filter_presets.find(m);
  return it == filter_presets.end() ? dsp::default_preset(m) : it->second;
}

void ExperimentConfig::validate() const {
  if (modalities.empty()) throw ConfigError("no modalities configured");
  if (!(window_seconds > 0)) throw ConfigError("window_seconds must be positive");
  if (model.size != "full" && model.size != "tiny") throw ConfigError("[model] size must be full or tiny");
  for (const auto& [m, preset] : filter_presets) {
    const auto chain = dsp::filter_preset(preset);  // throws on unknown names
    if (chain.modality != m)
      throw ConfigError(fmt::format("filter preset {} does not apply to {}", preset, to_string(m)));
  }
  if (data_root.empty()) {
    if (synth.subjects < 1 || synth.trials < 1 || synth.windows_per_trial < 1)
      throw ConfigError("synthetic dataset needs positive subjects, trials and windows_per_trial");
  }
  if (protocol == Protocol::KFold && folds < 2) throw ConfigError("k-fold needs at least 2 folds");
  if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("val_fraction must be in [0, 1)");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  augment.validate();
  train.validate();
  net_config().validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  std::string mods;
  for (auto m : modalities) mods += (mods.empty() ? "" : ",") + std::string(to_string(m));
  nlohmann::json presets = nlohmann::json::object();
  for (auto m : modalities) presets[std::string(to_string(m))] = filter_preset_for(m);
  return {
      {"dataset",
       {{"source", data_root.empty() ? "synth" : data_root.string()},
        {"modalities", mods},
        {"labels", to_string(labels)},
        {"window_seconds", window_seconds},
        {"synth_subjects", synth.subjects},
        {"synth_trials", synth.trials},
        {"synth_windows_per_trial", synth.windows_per_trial},
        {"synth_seed", synth_seed}}},
      {"dsp", presets},
      {"augment",
       {{"enabled", augment.enabled},
        {"noise_sigma", augment.noise_sigma_rel},
        {"max_warp", augment.max_warp},
        {"warp_knots", augment.warp_knots},
        {"scale_low", augment.scale_low},
        {"scale_high", augment.scale_high},
        {"copies", augment.copies_per_window},
        {"seed", augment.seed}}},
      {"model", uniphynet::to_json(net_config())},
      {"train",
       {{"lr", train.lr},
        {"weight_decay", train.weight_decay},
        {"batch_size", train.batch_size},
        {"epochs", train.epochs},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"eps", train.eps},
        {"plateau_factor", train.plateau_factor},
        {"plateau_patience", train.plateau_patience},
        {"seed", train.seed}}},
      {"eval",
       {{"protocol", protocol == Protocol::LOSO ? std::string("loso") : fmt::format("kfold{}", folds)},
        {"val_fraction", val_fraction},
        {"seed", seed}}}};
}

ExperimentConfig parse_experiment(const std::string& text) {
  pt::ptree root;
  try {
    std::istringstream is(text);
    pt::read_ini(is, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config line {}: {}", e.line(), e.message()));
  }
  for (const auto& [name, _] : root)
    if (name != "dataset" && name != "dsp" && name != "augment" && name != "model" && name != "train" && name != "eval")
      throw ConfigError("unknown config section [" + name + "]");

  ExperimentConfig cfg;
  {
    Section s(root, "dataset");
    if (auto src = s.raw("source"); src && *src != "synth") cfg.data_root = *src;
    if (auto v = s.raw("modalities")) cfg.modalities = parse_modality_list(*v);
    if (auto v = s.raw("labels")) cfg.labels = parse_label_scheme(*v);
    s.read("window_seconds", cfg.window_seconds);
    s.read("synth_subjects", cfg.synth.subjects);
    s.read("synth_trials", cfg.synth.trials);
    s.read("synth_windows_per_trial", cfg.synth.windows_per_trial);
    s.read("synth_seed", cfg.synth_seed);
    s.reject_unknown();
  }
  {
    Section s(root, "dsp");
    for (auto m : kAllModalities)
      if (auto v = s.raw(std::string(to_string(m)))) cfg.filter_presets[m] = *v;
    s.reject_unknown();
  }
  std::optional<std::uint64_t> augment_seed, train_seed;
  {
    Section s(root, "augment");
    s.read("enabled", cfg.augment.enabled);
    s.read("noise_sigma", cfg.augment.noise_sigma_rel);
    s.read("max_warp", cfg.augment.max_warp);
    s.read("warp_knots", cfg.augment.warp_knots);
    s.read("scale_low", cfg.augment.scale_low);
    s.read("scale_high", cfg.augment.scale_high);
    s.read("copies", cfg.augment.copies_per_window);
    augment_seed = s.get<std::uint64_t>("seed");
    s.reject_unknown();
  }
  {
    Section s(root, "model");
    s.read("size", cfg.model.size);
    for (auto m : kAllModalities) {
      const std::string p(to_string(m));
      if (auto v = s.raw(p + "_kernels")) cfg.model.kernels[m] = int_list(*v);
      if (auto v = s.get<int>(p + "_blocks")) cfg.model.blocks[m] = *v;
      if (auto v = s.get<int>(p + "_feature_maps")) cfg.model.feature_maps[m] = *v;
    }
    cfg.model.gru_hidden = s.get<int>("gru_hidden");
    cfg.model.cbam_reduction = s.get<int>("cbam_reduction");
    cfg.model.gru_on_raw = s.get<bool>("gru_on_raw");
    cfg.model.use_gru = s.get<bool>("use_gru");
    if (auto v = s.raw("block_kind")) cfg.model.block_kind = parse_block_kind(*v);
    cfg.model.dropout = s.get<double>("dropout");
    s.reject_unknown();
  }
  {
    Section s(root, "train");
    s.read("lr", cfg.train.lr);
    s.read("weight_decay", cfg.train.weight_decay);
    s.read("batch_size", cfg.train.batch_size);
    s.read("epochs", cfg.train.epochs);
    s.read("beta1", cfg.train.beta1);
    s.read("beta2", cfg.train.beta2);
    s.read("eps", cfg.train.eps);
    s.read("plateau_factor", cfg.train.plateau_factor);
    s.read("plateau_patience", cfg.train.plateau_patience);
    train_seed = s.get<std::uint64_t>("seed");
    s.reject_unknown();
  }
  {
    Section s(root, "eval");
    if (auto v = s.raw("protocol")) cfg.protocol = parse_protocol(*v, cfg.folds);
    s.read("folds", cfg.folds);
    s.read("val_fraction", cfg.val_fraction);
    s.read("jobs", cfg.jobs);
    s.read("seed", cfg.seed);
    if (auto v = s.raw("out")) cfg.out_dir = *v;
    s.reject_unknown();
  }
  cfg.augment.seed = augment_seed.value_or(cfg.seed);
  cfg.train.seed = train_seed.value_or(cfg.seed);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return parse_experiment(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

LabeledDataset load_experiment_data(const ExperimentConfig& cfg) {
  if (!cfg.data_root.empty()) return load_dataset(cfg.data_root, cfg.modalities, cfg.labels, cfg.window_seconds);
  SynthSpec spec = cfg.synth;
  spec.modalities = cfg.modalities;
  spec.classes = num_classes(cfg.labels);
  spec.window_seconds = cfg.window_seconds;
  LabeledDataset ds = generate_synthetic(spec, cfg.synth_seed);
  ds.scheme = cfg.labels;
  return ds;
}

void preprocess_dataset(LabeledDataset& ds, const ExperimentConfig& cfg) {
  std::map<Modality, dsp::FilterChain> chains;
  for (auto m : ds.modalities) chains.emplace(m, dsp::filter_preset(cfg.filter_preset_for(m)));
  for (auto& ex : ds.examples)
    for (auto& w : ex.parts) w = dsp::preprocess(w, chains.at(w.modality));
}

namespace {
constexpr char kCacheMagic[4] = {'U', 'P', 'W', 'C'};
constexpr std::uint32_t kCacheVersion = 1;
static_assert(std::endian::native == std::endian::little, "window cache assumes a little-endian host");

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V take(std::istream& is) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw ParseError("truncated window cache");
  return v;
}
}  // namespace

void write_window_cache(const LabeledDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write " + path.string());
  nlohmann::json header = {{"labels", to_string(ds.scheme)},
                           {"window_seconds", ds.window_seconds},
                           {"examples", ds.examples.size()}};
  header["modalities"] = nlohmann::json::array();
  for (auto m : ds.modalities) header["modalities"].push_back(to_string(m));
  os.write(kCacheMagic, 4);
  put(os, kCacheVersion);
  os << header.dump() << '\n';
  for (const auto& ex : ds.examples) {
    put<std::int32_t>(os, ex.key.subject_id);
    put<std::int32_t>(os, ex.key.trial_id);
    put<std::int64_t>(os, ex.key.offset_index);
    put<std::int32_t>(os, ex.rating);
    for (const auto& w : ex.parts) {
      put<double>(os, w.offset_s);
      put<std::uint8_t>(os, w.preprocessed ? 1 : 0);
      put<std::int64_t>(os, w.channels());
      put<std::int64_t>(os, w.samples());
      os.write(reinterpret_cast<const char*>(w.data.data()), static_cast<std::streamsize>(w.data.size() * sizeof(double)));
    }
  }
  if (!os) throw StateError("write failed: " + path.string());
}

LabeledDataset read_window_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kCacheMagic, 4))
    throw ParseError(path.string() + ": not a window cache");
  if (take<std::uint32_t>(is) != kCacheVersion) throw ParseError(path.string() + ": unsupported cache version");
  std::string line;
  std::getline(is, line);
  LabeledDataset ds;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    ds.scheme = parse_label_scheme(header.at("labels").get<std::string>());
    ds.window_seconds = header.at("window_seconds");
    for (const auto& m : header.at("modalities")) ds.modalities.push_back(parse_modality(m.get<std::string>()));
    count = header.at("examples");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad cache header: " + e.what());
  }
  ds.examples.resize(count);
  for (auto& ex : ds.examples) {
    ex.key.subject_id = take<std::int32_t>(is);
    ex.key.trial_id = take<std::int32_t>(is);
    ex.key.offset_index = take<std::int64_t>(is);
    ex.rating = take<std::int32_t>(is);
    for (auto m : ds.modalities) {
      Window w;
      w.modality = m;
      w.subject_id = ex.key.subject_id;
      w.trial_id = ex.key.trial_id;
      w.rating = ex.rating;
      w.offset_s = take<double>(is);
      w.preprocessed = take<std::uint8_t>(is) != 0;
      const auto rows = take<std::int64_t>(is), cols = take<std::int64_t>(is);
      if (rows < 0 || cols < 0 || rows > 1024 || cols > (1 << 24)) throw ParseError(path.string() + ": bad window shape");
      w.data.resize(rows, cols);
      if (!is.read(reinterpret_cast<char*>(w.data.data()), static_cast<std::streamsize>(w.data.size() * sizeof(double))))
        throw ParseError(path.string() + ": truncated window cache");
      ex.parts.push_back(std::move(w));
    }
  }
  return ds;
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw StateError("SHA-256 unavailable");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

void write_manifest(const std::filesystem::path& out_dir, const std::vector<std::string>& argv,
                    const ExperimentConfig& cfg, const std::vector<std::filesystem::path>& artifacts,
                    eval::Precision precision) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& a : artifacts)
    files.push_back({{"path", std::filesystem::relative(a, out_dir).generic_string()}, {"sha256", sha256_file(a)}});
  const nlohmann::json manifest = {
      {"argv", argv},
      {"precision", eval::to_string(precision)},
      {"seeds",
       {{"run", cfg.seed}, {"synth", cfg.synth_seed}, {"augment", cfg.augment.seed}, {"train", cfg.train.seed}}},
      {"config", cfg.to_json()},
      {"artifacts", files}};
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw StateError("cannot write manifest in " + out_dir.string());
  os << manifest.dump(2) << '\n';
}

}  // namespace uniphynet
