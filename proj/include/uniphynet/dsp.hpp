#pragma once

#include "uniphynet/dataset.hpp"

#include <Eigen/Dense>

#include <complex>
#include <string>
#include <string_view>
#include <vector>

namespace uniphynet::dsp {

enum class FilterKind { LowPass, BandPass, Notch };

struct FilterSpec {
  FilterKind kind = FilterKind::LowPass;
  int order = 4;                    // Butterworth prototype order (LowPass/BandPass)
  std::vector<double> cutoffs_hz;   // 1 entry (LowPass, Notch centre) or 2 (BandPass)
  double notch_q = 30.0;
  double sample_rate_hz = 256.0;

  static FilterSpec lowpass(int order, double cutoff_hz, double fs);
  static FilterSpec bandpass(int order, double low_hz, double high_hz, double fs);
  static FilterSpec notch(double centre_hz, double q, double fs);
};

// Transposed direct form II section: y = b0 x + s1; s1 = b1 x - a1 y + s2; s2 = b2 x - a2 y.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0;
  double a1 = 0, a2 = 0;

  std::complex<double> response(double omega) const;  // omega in rad/sample
  bool stable() const;
};

class BiquadCascade {
 public:
  BiquadCascade() = default;
  BiquadCascade(std::vector<Biquad> sections, double sample_rate_hz);

  const std::vector<Biquad>& sections() const { return sections_; }
  double sample_rate_hz() const { return sample_rate_hz_; }
  std::size_t state_size() const { return 2 * sections_.size(); }

  std::complex<double> response(double freq_hz) const;
  double magnitude(double freq_hz) const { return std::abs(response(freq_hz)); }
  double gain_db(double freq_hz) const;

  // Single causal pass. `state` (length state_size()) is used as the initial
  // condition and left holding the final one.
  Eigen::VectorXd filter(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::VectorXd& state) const;
  Eigen::VectorXd filter(const Eigen::Ref<const Eigen::VectorXd>& x) const;

 private:
  std::vector<Biquad> sections_;
  double sample_rate_hz_ = 0.0;
};

// Butterworth via bilinear transform with prewarping; iirnotch-style second
// order notch. Throws DesignError for cutoffs at or above Nyquist.
BiquadCascade design_filter(const FilterSpec& spec);

std::size_t filtfilt_padlen(const BiquadCascade& filter);

// Zero-phase filtering: odd reflection padding of filtfilt_padlen() samples,
// then forward, reverse, forward, reverse, with the two passes' initial
// states chosen so the result equals the backward-first ordering.
Eigen::VectorXd filtfilt(const BiquadCascade& filter, const Eigen::Ref<const Eigen::VectorXd>& x);

// Per channel: subtract the mean, divide by the population std. Channels with
// std below 1e-8 become all zeros.
Window zscore(const Window& w);
void zscore_inplace(Signal& data);

// Named filter chains, applied in order before z-scoring.
struct FilterChain {
  std::string name;
  Modality modality;
  std::vector<FilterSpec> stages;
};

// eeg_default, eeg_lp20, ecg_default, eda_default
FilterChain filter_preset(std::string_view name);
std::string default_preset(Modality m);
std::vector<std::string> preset_names();

// Applies the chain's filters then z-scores. Throws StateError when the
// window is already preprocessed, ConfigError on modality mismatch.
Window preprocess(const Window& w, const FilterChain& chain);
Window preprocess(const Window& w);  // modality default chain

}  // namespace uniphynet::dsp
