#pragma once

// Baseline removal, R-peak detection, channel screening and classification,
// least-squares transfer fitting, and reference construction.

#include "fecg/common.hpp"
#include "fecg/recording.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fecg {

struct BaselineConfig {
  double first_window = 0.2;   ///< s
  double second_window = 0.6;  ///< s
};

/// Running median with reflected edges; window is forced odd.
std::vector<double> moving_median(std::span<const double> x, std::size_t window);

/// Subtracts median(median(x, first), second) from x.
std::vector<double> remove_baseline(std::span<const double> x, double sample_rate,
                                    const BaselineConfig& cfg = {});
RecordingSet remove_baseline(const RecordingSet& rec, const BaselineConfig& cfg = {});

struct RateBand {
  double min_rate = 0.7;  ///< Hz
  double max_rate = 3.0;  ///< Hz

  void validate() const;
};

inline RateBand maternal_rate_band() { return {0.7, 2.2}; }
inline RateBand fetal_rate_band() { return {1.5, 3.8}; }

struct PeakTrain {
  std::vector<std::size_t> indices;
  std::optional<std::size_t> source_channel;
  double mean_interval = 0.0;  ///< samples
  /// Median interval falls inside the requested rate band.
  bool plausible = true;
};

struct PeakDetectorConfig {
  double band_low = 8.0;        ///< Hz
  double band_high = 20.0;      ///< Hz
  double smoothing = 0.02;      ///< s, moving-average window on the squared band signal
  double threshold = 0.25;      ///< fraction of the local energy maximum
  double threshold_span = 1.5;  ///< s, half-width of the local-maximum window
};

/// Zero-phase second-order band-pass (forward and backward biquad).
std::vector<double> bandpass(std::span<const double> x, double sample_rate, double low, double high);

/// Energy detector: band-pass, square, smooth, threshold against the local
/// maximum, refractory period 0.6 / max_rate, one search-back pass over long
/// gaps. Throws Error when fewer than three peaks are found.
PeakTrain detect_r_peaks(std::span<const double> x, double sample_rate, const RateBand& band,
                         const PeakDetectorConfig& cfg = {});

/// Greedy one-to-one matching within +/- tolerance samples.
struct PeakMatch {
  std::size_t true_positives = 0;
  double precision = 0.0;
  double sensitivity = 0.0;
  double f1 = 0.0;
};
PeakMatch match_peaks(const std::vector<std::size_t>& detected,
                      const std::vector<std::size_t>& truth, std::size_t tolerance);

struct RejectionConfig {
  double min_std = 1e-12;            ///< absolute floor
  double relative_min_std = 1e-6;    ///< fraction of the median channel std
  double rail_fraction = 0.01;       ///< max share of samples sitting at min or max
  double max_flatness = 0.98;        ///< Welch spectral flatness above this = noise only
  std::size_t segment = 1024;
};

struct RejectionResult {
  std::vector<std::size_t> valid;
  std::vector<std::size_t> rejected;
  std::vector<std::string> reasons;  ///< one per rejected id
};

double spectral_flatness(std::span<const double> x, std::size_t segment);

/// Screens every channel. Channels already flagged invalid count as rejected.
RejectionResult reject_bad_channels(const RecordingSet& rec, const RejectionConfig& cfg = {});

/// Applies a rejection result to the validity flags.
void apply_rejection(RecordingSet& rec, const RejectionResult& r);

/// argmax_j |corr(x_i, r_j)| per channel, ties to the lowest j. Invalid
/// channels get -1. refs is n_classes x T.
std::vector<int> classify_channels(const RecordingSet& rec, const Matrix& refs);

enum class ReferenceKind { FrankTriplet, PerChannelLocal, Fetal };
std::string to_string(ReferenceKind k);

struct ReferenceSet {
  ReferenceKind kind = ReferenceKind::FrankTriplet;
  Matrix signals;  ///< n x T
  std::vector<int> classes;  ///< per channel, frank-triplet only
};

struct FrankTemplates {
  Matrix waveforms;  ///< 3 x L
  double sample_rate = 1000.0;
  std::size_t anchor = 0;  ///< sample of the R wave inside the template
};

/// Templates built from one noise-free beat of the default dipole model
/// (synthetic, not digitized from recordings).
FrankTemplates default_frank_templates(double sample_rate = 1000.0);

// File layout: "# sample_rate=<Hz> anchor=<sample>" comment, header "x,y,z",
// then one template sample per row.
void write_frank_templates(const FrankTemplates& t, std::ostream& out);
FrankTemplates read_frank_templates(std::istream& in);

/// Impulse train at the peaks convolved with a template whose anchor sample
/// lands on each peak; out of range parts are cut.
std::vector<double> impulse_convolve(const std::vector<std::size_t>& peaks,
                                     std::span<const double> kernel, std::size_t anchor,
                                     std::size_t length);

ReferenceSet synth_frank_reference(const PeakTrain& peaks, const FrankTemplates& templates,
                                   std::size_t length, double sample_rate);

struct TransferFit {
  Matrix h;                       ///< N x 3
  std::vector<double> residuals;  ///< ||x_i - h_i VCG||
};

TransferFit fit_transfer(const Matrix& recordings, const Matrix& vcg);

/// Row i = h_i * VCG.
ReferenceSet local_references(const TransferFit& fit, const Matrix& vcg);

/// Mean of windows [p - anchor, p - anchor + window) over peaks whose window
/// fits inside the signal. anchor defaults to window / 2.
std::vector<double> synchronous_average(std::span<const double> x, const PeakTrain& peaks,
                                        std::size_t window,
                                        std::optional<std::size_t> anchor = std::nullopt);

/// Per channel: synchronous average on the fetal peaks, re-synthesized on the
/// same peak train.
ReferenceSet build_fetal_references(const RecordingSet& rec, const PeakTrain& fetal_peaks,
                                    std::size_t window);

}  // namespace fecg
