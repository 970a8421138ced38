#include "uniphynet/model.hpp"

#include "uniphynet/errors.hpp"

#include <boost/algorithm/string.hpp>

#include <cmath>

namespace uniphynet {

namespace {
std::vector<int> parse_int_list(std::string_view text) {
  std::vector<std::string> items;
  boost::split(items, text, boost::is_any_of(","));
  std::vector<int> out;
  for (auto item : items) {
    boost::trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not an integer: '" + item + "'");
    }
  }
  return out;
}
}  // namespace

std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::ResNetCBAM: return "resnet-cbam";
    case BlockKind::ResNetPlain: return "resnet";
    case BlockKind::DSC: return "dsc";
    case BlockKind::DSCCBAM: return "dsc-cbam";
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view name) {
  for (auto k : {BlockKind::ResNetCBAM, BlockKind::ResNetPlain, BlockKind::DSC, BlockKind::DSCCBAM})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown block kind '" + std::string(name) + "'");
}

Eigen::Index ModalityConfig::window_length() const {
  return static_cast<Eigen::Index>(std::llround(window_seconds * sample_rate_hz));
}

Eigen::Index ModalityConfig::trunk_length() const { return window_length() >> resnet_blocks; }

ModalityConfig ModalityConfig::defaults(Modality m, bool multimodal) {
  ModalityConfig c;
  c.modality = m;
  const auto shape = modality_shape(m);
  c.in_channels = shape.channels;
  c.sample_rate_hz = shape.sample_rate_hz;
  c.feature_maps = multimodal ? 32 : 64;
  switch (m) {
    case Modality::EEG:
      c.kernels = {3, 9};
      c.resnet_blocks = 8;
      break;
    case Modality::ECG:
      c.kernels = {5, 11};
      c.resnet_blocks = 9;
      break;
    case Modality::EDA:
      c.kernels = {13};
      c.resnet_blocks = 7;
      break;
  }
  return c;
}

void NetConfig::validate() const {
  if (modalities.empty()) throw ConfigError("network needs at least one modality");
  if (num_classes != 2 && num_classes != 3) throw ConfigError("num_classes must be 2 or 3");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if ((fusion == Fusion::None) != (modalities.size() == 1))
    throw ConfigError("fusion must be none for exactly one modality and self-attention otherwise");
  std::vector<Modality> seen;
  for (const auto& m : modalities) {
    const std::string who(to_string(m.modality));
    if (std::find(seen.begin(), seen.end(), m.modality) != seen.end()) throw ConfigError("duplicate modality " + who);
    seen.push_back(m.modality);
    if (m.in_channels < 1 || m.sample_rate_hz < 1 || m.window_seconds <= 0.0)
      throw ConfigError(who + ": channels, rate and window must be positive");
    if (m.kernels.empty()) throw ConfigError(who + ": no kernels");
    for (int k : m.kernels)
      if (k < 1) throw ConfigError(who + ": kernel sizes must be positive");
    if (m.feature_maps < 1 || m.feature_maps % static_cast<int>(m.kernels.size()) != 0)
      throw ConfigError(who + ": feature maps " + std::to_string(m.feature_maps) + " not divisible by " +
                        std::to_string(m.kernels.size()) + " kernel branches");
    if (m.resnet_blocks < 0 || m.resnet_blocks > 20) throw ConfigError(who + ": resnet_blocks out of range");
    const auto len = m.window_length();
    if (len % (Eigen::Index{1} << m.resnet_blocks) != 0)
      throw ConfigError(who + ": window length " + std::to_string(len) + " not divisible by 2^" +
                        std::to_string(m.resnet_blocks));
    if (uses_cbam(block_kind)) {
      if (m.cbam_reduction < 1 || m.feature_maps % m.cbam_reduction != 0)
        throw ConfigError(who + ": feature maps not divisible by CBAM reduction");
      if (m.resnet_blocks > 0 && m.trunk_length() < 7)
        throw ConfigError(who + ": temporal attention needs length >= 7, trunk ends at " +
                          std::to_string(m.trunk_length()));
    }
    if (use_gru && m.gru_hidden < 1) throw ConfigError(who + ": gru_hidden must be positive");
    if (m.gru_on_raw && modalities.size() > 1) throw ConfigError("gru_on_raw is only supported for one modality");
  }
  for (const auto& m : modalities)
    if (m.trunk_length() != modalities.front().trunk_length())
      throw ConfigError("trunk output lengths differ across modalities");
}

NetConfig NetConfig::defaults(std::span<const Modality> modalities, int num_classes) {
  NetConfig cfg;
  cfg.num_classes = num_classes;
  cfg.modalities.clear();
  const bool multi = modalities.size() > 1;
  for (auto m : modalities) cfg.modalities.push_back(ModalityConfig::defaults(m, multi));
  cfg.fusion = multi ? Fusion::SelfAttention : Fusion::None;
  return cfg;
}

NetConfig NetConfig::tiny(std::span<const Modality> modalities, int num_classes, double window_seconds) {
  NetConfig cfg = defaults(modalities, num_classes);
  for (auto& m : cfg.modalities) {
    m.window_seconds = window_seconds;
    m.feature_maps = 16;
    m.gru_hidden = 16;
    m.resnet_blocks = 4;
  }
  // EDA at 128 Hz has fewer samples per window; keep every trunk the same length.
  const auto target = cfg.modalities.front().trunk_length();
  for (auto& m : cfg.modalities)
    while (m.trunk_length() > target && m.window_length() % (Eigen::Index{1} << (m.resnet_blocks + 1)) == 0)
      ++m.resnet_blocks;
  for (auto& m : cfg.modalities)
    while (m.trunk_length() < target && m.resnet_blocks > 0) --m.resnet_blocks;
  return cfg;
}

nlohmann::json to_json(const NetConfig& cfg) {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& m : cfg.modalities)
    mods.push_back({{"modality", to_string(m.modality)},
                    {"in_channels", m.in_channels},
                    {"sample_rate_hz", m.sample_rate_hz},
                    {"window_seconds", m.window_seconds},
                    {"kernels", m.kernels},
                    {"resnet_blocks", m.resnet_blocks},
                    {"feature_maps", m.feature_maps},
                    {"gru_hidden", m.gru_hidden},
                    {"cbam_reduction", m.cbam_reduction},
                    {"gru_on_raw", m.gru_on_raw}});
  return {{"modalities", mods},
          {"num_classes", cfg.num_classes},
          {"dropout", cfg.dropout},
          {"fusion", cfg.fusion == Fusion::None ? "none" : "self-attention"},
          {"use_gru", cfg.use_gru},
          {"block_kind", to_string(cfg.block_kind)}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  try {
    NetConfig cfg;
    cfg.modalities.clear();
    for (const auto& m : j.at("modalities")) {
      ModalityConfig c;
      c.modality = parse_modality(m.at("modality").get<std::string>());
      c.in_channels = m.at("in_channels");
      c.sample_rate_hz = m.at("sample_rate_hz");
      c.window_seconds = m.at("window_seconds");
      c.kernels = m.at("kernels").get<std::vector<int>>();
      c.resnet_blocks = m.at("resnet_blocks");
      c.feature_maps = m.at("feature_maps");
      c.gru_hidden = m.at("gru_hidden");
      c.cbam_reduction = m.at("cbam_reduction");
      c.gru_on_raw = m.at("gru_on_raw");
      cfg.modalities.push_back(std::move(c));
    }
    cfg.num_classes = j.at("num_classes");
    cfg.dropout = j.at("dropout");
    cfg.fusion = j.at("fusion").get<std::string>() == "none" ? Fusion::None : Fusion::SelfAttention;
    cfg.use_gru = j.at("use_gru");
    cfg.block_kind = parse_block_kind(j.at("block_kind").get<std::string>());
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
}

AblationPreset parse_ablation(std::string_view preset) {
  AblationPreset p;
  p.name = std::string(preset);
  if (preset == "no-gru") {
    p.use_gru = false;
  } else if (preset == "no-aug") {
    p.disable_augmentation = true;
  } else if (preset == "dsc") {
    p.block_kind = BlockKind::DSC;
  } else if (preset == "dsc-cbam") {
    p.block_kind = BlockKind::DSCCBAM;
  } else if (preset.starts_with("kernels:")) {
    auto list = parse_int_list(preset.substr(8));
    if (list.empty()) throw ConfigError("kernels preset needs at least one size");
    p.kernels = std::move(list);
  } else {
    throw ConfigError("unknown ablation preset '" + std::string(preset) + "'");
  }
  return p;
}

void apply_ablation(const AblationPreset& preset, NetConfig& cfg) {
  if (preset.use_gru) cfg.use_gru = *preset.use_gru;
  if (preset.block_kind) cfg.block_kind = *preset.block_kind;
  if (preset.kernels)
    for (auto& m : cfg.modalities) m.kernels = *preset.kernels;
  cfg.validate();
}

std::vector<std::string> standard_ablations() {
  return {"no-gru", "no-aug", "dsc", "dsc-cbam", "kernels:3,9", "kernels:3", "kernels:64", "kernels:3,64"};
}

}  // namespace uniphynet
