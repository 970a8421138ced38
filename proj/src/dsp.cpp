#include "uniphynet/dsp.hpp"

#include "uniphynet/errors.hpp"

#include <Eigen/QR>

#include <cmath>
#include <numbers>

namespace uniphynet::dsp {

using cplx = std::complex<double>;

FilterSpec FilterSpec::lowpass(int order, double cutoff_hz, double fs) {
  return {FilterKind::LowPass, order, {cutoff_hz}, 0.0, fs};
}

FilterSpec FilterSpec::bandpass(int order, double low_hz, double high_hz, double fs) {
  return {FilterKind::BandPass, order, {low_hz, high_hz}, 0.0, fs};
}

FilterSpec FilterSpec::notch(double centre_hz, double q, double fs) {
  return {FilterKind::Notch, 2, {centre_hz}, q, fs};
}

cplx Biquad::response(double omega) const {
  const cplx z1 = std::polar(1.0, -omega);
  const cplx z2 = z1 * z1;
  return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
}

bool Biquad::stable() const {
  // Jury conditions for z^2 + a1 z + a2.
  return std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2;
}

BiquadCascade::BiquadCascade(std::vector<Biquad> sections, double sample_rate_hz)
    : sections_(std::move(sections)), sample_rate_hz_(sample_rate_hz) {
  for (const auto& s : sections_)
    if (!s.stable()) throw DesignError("unstable biquad section");
}

cplx BiquadCascade::response(double freq_hz) const {
  const double omega = 2.0 * std::numbers::pi * freq_hz / sample_rate_hz_;
  cplx h = 1.0;
  for (const auto& s : sections_) h *= s.response(omega);
  return h;
}

double BiquadCascade::gain_db(double freq_hz) const { return 20.0 * std::log10(magnitude(freq_hz)); }

Eigen::VectorXd BiquadCascade::filter(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::VectorXd& state) const {
  Eigen::VectorXd y = x;
  for (std::size_t k = 0; k < sections_.size(); ++k) {
    const auto& s = sections_[k];
    double s1 = state[2 * k], s2 = state[2 * k + 1];
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double in = y[i];
      const double out = s.b0 * in + s1;
      s1 = s.b1 * in - s.a1 * out + s2;
      s2 = s.b2 * in - s.a2 * out;
      y[i] = out;
    }
    state[2 * k] = s1;
    state[2 * k + 1] = s2;
  }
  return y;
}

Eigen::VectorXd BiquadCascade::filter(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  Eigen::VectorXd state = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(state_size()));
  return filter(x, state);
}

namespace {

cplx bilinear(cplx s, double fs) { return (2.0 * fs + s) / (2.0 * fs - s); }

double prewarp(double f, double fs) { return 2.0 * fs * std::tan(std::numbers::pi * f / fs); }

// Normalized Butterworth prototype poles in the upper half plane (plus the
// real pole for odd orders).
std::vector<cplx> prototype_poles(int order) {
  std::vector<cplx> poles;
  for (int k = 0; k < order; ++k) {
    const cplx p = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    if (p.imag() > 1e-12) poles.push_back(p);
    else if (std::abs(p.imag()) <= 1e-12) poles.push_back({p.real(), 0.0});
  }
  return poles;
}

Biquad conjugate_pair_section(cplx z, double b0, double b1, double b2) {
  return {b0, b1, b2, -2.0 * z.real(), std::norm(z)};
}

void check_cutoff(double f, double fs) {
  if (!(f > 0.0)) throw DesignError("cutoff must be positive");
  if (f >= fs / 2.0)
    throw DesignError("cutoff " + std::to_string(f) + " Hz is not below Nyquist (" + std::to_string(fs / 2.0) + " Hz)");
}

BiquadCascade design_lowpass(int order, double fc, double fs) {
  const double wc = prewarp(fc, fs);
  std::vector<Biquad> sections;
  for (const cplx q : prototype_poles(order)) {
    const cplx z = bilinear(q * wc, fs);
    Biquad s = q.imag() > 0 ? conjugate_pair_section(z, 1, 2, 1) : Biquad{1, 1, 0, -z.real(), 0};
    const double dc = (1.0 + s.a1 + s.a2) / (s.b0 + s.b1 + s.b2);
    s.b0 *= dc;
    s.b1 *= dc;
    s.b2 *= dc;
    sections.push_back(s);
  }
  return {std::move(sections), fs};
}

BiquadCascade design_bandpass(int order, double f1, double f2, double fs) {
  const double w1 = prewarp(f1, fs), w2 = prewarp(f2, fs);
  const double w0 = std::sqrt(w1 * w2), bw = w2 - w1;
  std::vector<Biquad> sections;
  for (const cplx q : prototype_poles(order)) {
    // Lowpass-to-bandpass: s^2 - q bw s + w0^2 = 0.
    const cplx half = q * bw / 2.0;
    const cplx root = std::sqrt(half * half - w0 * w0);
    const cplx s1 = half + root, s2 = half - root;
    if (q.imag() > 0) {
      sections.push_back(conjugate_pair_section(bilinear(s1, fs), 1, 0, -1));
      sections.push_back(conjugate_pair_section(bilinear(s2, fs), 1, 0, -1));
    } else {
      const cplx z1 = bilinear(s1, fs), z2 = bilinear(s2, fs);
      sections.push_back({1, 0, -1, -(z1 + z2).real(), (z1 * z2).real()});
    }
  }
  // Unit gain at the digital image of the analog centre frequency.
  const double omega0 = 2.0 * std::atan(w0 / (2.0 * fs));
  for (auto& s : sections) {
    const double g = 1.0 / std::abs(s.response(omega0));
    s.b0 *= g;
    s.b1 *= g;
    s.b2 *= g;
  }
  return {std::move(sections), fs};
}

BiquadCascade design_notch(double f0, double q, double fs) {
  if (!(q > 0.0)) throw DesignError("notch Q must be positive");
  const double w0 = 2.0 * std::numbers::pi * f0 / fs;
  const double beta = std::tan(w0 / q / 2.0);
  const double gain = 1.0 / (1.0 + beta);
  const double c = std::cos(w0);
  return {{Biquad{gain, -2.0 * gain * c, gain, -2.0 * gain * c, 2.0 * gain - 1.0}}, fs};
}

}  // namespace

BiquadCascade design_filter(const FilterSpec& spec) {
  const double fs = spec.sample_rate_hz;
  if (!(fs > 0.0)) throw DesignError("sample rate must be positive");
  switch (spec.kind) {
    case FilterKind::LowPass:
      if (spec.cutoffs_hz.size() != 1) throw DesignError("low-pass takes one cutoff");
      if (spec.order < 1) throw DesignError("filter order must be positive");
      check_cutoff(spec.cutoffs_hz[0], fs);
      return design_lowpass(spec.order, spec.cutoffs_hz[0], fs);
    case FilterKind::BandPass:
      if (spec.cutoffs_hz.size() != 2) throw DesignError("band-pass takes two cutoffs");
      if (spec.order < 1) throw DesignError("filter order must be positive");
      check_cutoff(spec.cutoffs_hz[0], fs);
      check_cutoff(spec.cutoffs_hz[1], fs);
      if (!(spec.cutoffs_hz[0] < spec.cutoffs_hz[1])) throw DesignError("band-pass needs low < high");
      return design_bandpass(spec.order, spec.cutoffs_hz[0], spec.cutoffs_hz[1], fs);
    case FilterKind::Notch:
      if (spec.cutoffs_hz.size() != 1) throw DesignError("notch takes one centre frequency");
      check_cutoff(spec.cutoffs_hz[0], fs);
      return design_notch(spec.cutoffs_hz[0], spec.notch_q, fs);
  }
  throw DesignError("unknown filter kind");
}

std::size_t filtfilt_padlen(const BiquadCascade& filter) { return 3 * filter.sections().size() * 2; }

namespace {

Eigen::VectorXd reversed(const Eigen::Ref<const Eigen::VectorXd>& x) { return x.reverse(); }

// Forward-backward with Gustafsson's initial conditions for a fixed filter and
// signal length. The least-squares system depends only on those two, so one
// plan serves every channel of a window.
class ZeroPhasePlan {
 public:
  ZeroPhasePlan(const BiquadCascade& filter, Eigen::Index n) : filter_(filter) {
    const auto ns = static_cast<Eigen::Index>(filter.state_size());
    Eigen::MatrixXd obs(n, ns), s(n, ns);
    for (Eigen::Index j = 0; j < ns; ++j) {
      Eigen::VectorXd state = Eigen::VectorXd::Unit(ns, j);
      obs.col(j) = filter.filter(Eigen::VectorXd::Zero(n), state);
      s.col(j) = filter.filter(reversed(obs.col(j)));
    }
    const Eigen::MatrixXd sr = s.colwise().reverse(), obsr = obs.colwise().reverse();
    Eigen::MatrixXd m(n, 2 * ns);
    m << sr - obs, obsr - s;
    w_.resize(n, 2 * ns);
    w_ << sr, obsr;
    solver_.compute(m);
  }

  Eigen::VectorXd apply(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const Eigen::VectorXd y_fb = reversed(filter_.filter(reversed(filter_.filter(x))));
    const Eigen::VectorXd y_bf = filter_.filter(reversed(filter_.filter(reversed(x))));
    const Eigen::VectorXd ic = solver_.solve(y_bf - y_fb);
    return y_fb + w_ * ic;
  }

 private:
  const BiquadCascade& filter_;
  Eigen::MatrixXd w_;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> solver_;
};

Eigen::VectorXd odd_extend(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index pad) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd ext(n + 2 * pad);
  for (Eigen::Index i = 0; i < pad; ++i) {
    ext[i] = 2.0 * x[0] - x[pad - i];
    ext[n + pad + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  ext.segment(pad, n) = x;
  return ext;
}

void check_length(const BiquadCascade& filter, Eigen::Index n) {
  const auto pad = static_cast<Eigen::Index>(filtfilt_padlen(filter));
  if (n <= pad)
    throw ShapeError("signal of " + std::to_string(n) + " samples is too short for zero-phase filtering (needs > " +
                     std::to_string(pad) + ")");
}

}  // namespace

Eigen::VectorXd filtfilt(const BiquadCascade& filter, const Eigen::Ref<const Eigen::VectorXd>& x) {
  check_length(filter, x.size());
  const auto pad = static_cast<Eigen::Index>(filtfilt_padlen(filter));
  const ZeroPhasePlan plan(filter, x.size() + 2 * pad);
  return plan.apply(odd_extend(x, pad)).segment(pad, x.size());
}

void zscore_inplace(Signal& data) {
  const auto n = static_cast<double>(data.cols());
  for (Eigen::Index c = 0; c < data.rows(); ++c) {
    auto row = data.row(c);
    const double mean = row.mean();
    row.array() -= mean;
    const double sd = std::sqrt(row.squaredNorm() / n);
    if (sd < 1e-8) row.setZero();
    else row /= sd;
  }
}

Window zscore(const Window& w) {
  Window out = w;
  zscore_inplace(out.data);
  return out;
}

FilterChain filter_preset(std::string_view name) {
  if (name == "eeg_default")
    return {"eeg_default", Modality::EEG,
            {FilterSpec::notch(60.0, 30.0, 256), FilterSpec::bandpass(4, 0.5, 40.0, 256)}};
  if (name == "eeg_lp20")
    return {"eeg_lp20", Modality::EEG, {FilterSpec::notch(60.0, 30.0, 256), FilterSpec::lowpass(4, 20.0, 256)}};
  if (name == "ecg_default") return {"ecg_default", Modality::ECG, {FilterSpec::bandpass(4, 0.5, 40.0, 512)}};
  if (name == "eda_default") return {"eda_default", Modality::EDA, {FilterSpec::bandpass(2, 0.05, 3.0, 128)}};
  throw ConfigError("unknown filter preset '" + std::string(name) + "'");
}

std::string default_preset(Modality m) { return std::string(to_string(m)) + "_default"; }

std::vector<std::string> preset_names() { return {"eeg_default", "eeg_lp20", "ecg_default", "eda_default"}; }

Window preprocess(const Window& w, const FilterChain& chain) {
  if (w.preprocessed) throw StateError("window is already preprocessed");
  if (w.modality != chain.modality)
    throw ConfigError("filter preset " + chain.name + " does not apply to " + std::string(to_string(w.modality)));
  Window out = w;
  for (const auto& spec : chain.stages) {
    const BiquadCascade filter = design_filter(spec);
    check_length(filter, out.samples());
    const auto pad = static_cast<Eigen::Index>(filtfilt_padlen(filter));
    const ZeroPhasePlan plan(filter, out.samples() + 2 * pad);
    for (Eigen::Index c = 0; c < out.channels(); ++c) {
      const Eigen::VectorXd x = out.data.row(c).transpose();
      out.data.row(c) = plan.apply(odd_extend(x, pad)).segment(pad, x.size()).transpose();
    }
  }
  zscore_inplace(out.data);
  out.preprocessed = true;
  return out;
}

Window preprocess(const Window& w) { return preprocess(w, filter_preset(default_preset(w.modality))); }

}  // namespace uniphynet::dsp
