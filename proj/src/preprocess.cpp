#include "fecg/preprocess.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <deque>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fecg/dipole.hpp"
#include "fecg/io.hpp"
#include "fecg/mi.hpp"

namespace fecg {

namespace {

std::size_t odd_window(double seconds, double sample_rate) {
  const auto half = static_cast<std::size_t>(std::llround(seconds * sample_rate / 2.0));
  return 2 * half + 1;
}

std::span<const double> row_span(const RowMatrix& m, std::size_t i) {
  return {m.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(m.cols())};
}

double stddev(std::span<const double> x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double s = 0.0;
  for (double v : x) s += (v - mean) * (v - mean);
  return std::sqrt(s / std::max(n - 1.0, 1.0));
}

void check_peaks_sorted(const std::vector<std::size_t>& p, const char* what) {
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] <= p[i - 1]) throw ValidationError(std::string(what) + ": peaks must be strictly increasing");
  }
}

std::size_t min_interval(const std::vector<std::size_t>& p) {
  std::size_t m = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 1; i < p.size(); ++i) m = std::min(m, p[i] - p[i - 1]);
  return m;
}

}  // namespace

std::vector<double> moving_median(std::span<const double> x, std::size_t window) {
  const std::size_t n = x.size();
  if (window % 2 == 0) ++window;
  const std::size_t h = window / 2;
  if (n == 0) return {};
  if (h >= n) throw ValidationError("moving_median: window longer than the signal");
  // reflect without repeating the edge sample: x[-i] = x[i], x[n-1+i] = x[n-1-i]
  auto at = [&](std::ptrdiff_t i) {
    const auto nn = static_cast<std::ptrdiff_t>(n);
    if (i < 0) i = -i;
    if (i >= nn) i = 2 * (nn - 1) - i;
    return x[static_cast<std::size_t>(i)];
  };
  std::vector<double> win;
  win.reserve(window);
  for (std::ptrdiff_t i = -static_cast<std::ptrdiff_t>(h); i <= static_cast<std::ptrdiff_t>(h); ++i) {
    win.push_back(at(i));
  }
  std::sort(win.begin(), win.end());
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    out[t] = win[h];
    if (t + 1 == n) break;
    const double leaving = at(static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(h));
    const double entering = at(static_cast<std::ptrdiff_t>(t + h + 1));
    win.erase(std::lower_bound(win.begin(), win.end(), leaving));
    win.insert(std::upper_bound(win.begin(), win.end(), entering), entering);
  }
  return out;
}

std::vector<double> remove_baseline(std::span<const double> x, double sample_rate,
                                    const BaselineConfig& cfg) {
  if (!(sample_rate > 0.0)) throw ValidationError("remove_baseline: sample_rate must be > 0");
  if (!(cfg.first_window > 0.0 && cfg.second_window > 0.0)) {
    throw ValidationError("remove_baseline: windows must be > 0");
  }
  if (static_cast<double>(x.size()) <= 2.0 * sample_rate) {
    throw ValidationError("remove_baseline: need more than 2 s of samples");
  }
  const auto m1 = moving_median(x, odd_window(cfg.first_window, sample_rate));
  const auto m2 = moving_median(m1, odd_window(cfg.second_window, sample_rate));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - m2[i];
  return out;
}

RecordingSet remove_baseline(const RecordingSet& rec, const BaselineConfig& cfg) {
  rec.validate();
  RecordingSet out = rec;
  const RowMatrix x = rec.data;
  RowMatrix y(x.rows(), x.cols());
  parallel_for(rec.channels(), [&](std::size_t i) {
    const auto r = remove_baseline(row_span(x, i), rec.sample_rate, cfg);
    std::copy(r.begin(), r.end(), y.row(static_cast<Eigen::Index>(i)).data());
  });
  out.data = y;
  return out;
}

void RateBand::validate() const {
  if (!(min_rate > 0.0 && max_rate > min_rate)) {
    throw ValidationError("rate band: need 0 < min_rate < max_rate");
  }
}

std::vector<double> bandpass(std::span<const double> x, double sample_rate, double low, double high) {
  if (!(low > 0.0 && high > low && high < sample_rate / 2.0)) {
    throw ValidationError("bandpass: need 0 < low < high < Nyquist");
  }
  const double f0 = std::sqrt(low * high);
  const double q = f0 / (high - low);
  const double w0 = kTwoPi * f0 / sample_rate;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
  auto run = [&](std::vector<double>& v) {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& s : v) {
      const double y = b0 * s + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = s;
      y2 = y1;
      y1 = y;
      s = y;
    }
  };
  std::vector<double> v(x.begin(), x.end());
  run(v);
  std::reverse(v.begin(), v.end());
  run(v);
  std::reverse(v.begin(), v.end());
  return v;
}

PeakTrain detect_r_peaks(std::span<const double> x, double sample_rate, const RateBand& band,
                         const PeakDetectorConfig& cfg) {
  band.validate();
  const std::size_t n = x.size();
  if (n < 3) throw Error("detect_r_peaks: fewer than 3 peaks found");
  const auto y = bandpass(x, sample_rate, cfg.band_low, cfg.band_high);

  // smoothed energy, centered moving average
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.smoothing * sample_rate)));
  std::vector<double> csum(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) csum[i + 1] = csum[i] + y[i] * y[i];
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= w / 2 ? i - w / 2 : 0;
    const std::size_t hi = std::min(n, lo + w);
    e[i] = (csum[hi] - csum[lo]) / static_cast<double>(hi - lo);
  }

  // adaptive threshold: fraction of the sliding maximum
  const auto span = static_cast<std::size_t>(std::llround(cfg.threshold_span * sample_rate));
  std::vector<double> local_max(n);
  std::deque<std::size_t> dq;
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t hi = std::min(n - 1, i + span);
    while (next <= hi) {
      while (!dq.empty() && e[dq.back()] <= e[next]) dq.pop_back();
      dq.push_back(next++);
    }
    while (dq.front() + span < i) dq.pop_front();
    local_max[i] = e[dq.front()];
  }

  const auto refractory =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.6 / band.max_rate * sample_rate)));
  const std::size_t half = w / 2;
  PeakTrain out;
  std::size_t i = 0;
  while (i < n) {
    if (e[i] > cfg.threshold * local_max[i] && e[i] > 0.0) {
      const std::size_t j = std::min(n, i + refractory);
      const auto k = static_cast<std::size_t>(std::max_element(e.begin() + static_cast<std::ptrdiff_t>(i),
                                                               e.begin() + static_cast<std::ptrdiff_t>(j)) -
                                              e.begin());
      const std::size_t lo = k >= half ? k - half : 0;
      const std::size_t hi = std::min(n, k + half + 1);
      std::size_t p = lo;
      for (std::size_t t = lo; t < hi; ++t) {
        if (std::abs(y[t]) > std::abs(y[p])) p = t;
      }
      if (out.indices.empty() || p > out.indices.back()) out.indices.push_back(p);
      i = k + refractory;
    } else {
      ++i;
    }
  }
  // search-back: a gap longer than 1.66 median intervals is rescanned at half the threshold
  if (out.indices.size() >= 3) {
    std::vector<std::size_t> rr;
    for (std::size_t k = 1; k < out.indices.size(); ++k) rr.push_back(out.indices[k] - out.indices[k - 1]);
    std::nth_element(rr.begin(), rr.begin() + static_cast<std::ptrdiff_t>(rr.size() / 2), rr.end());
    const double limit = 1.66 * static_cast<double>(rr[rr.size() / 2]);
    std::vector<std::size_t> filled{out.indices.front()};
    for (std::size_t k = 1; k < out.indices.size(); ++k) {
      const std::size_t a = out.indices[k - 1], b = out.indices[k];
      if (static_cast<double>(b - a) > limit && b - a > 2 * refractory) {
        std::size_t best = a + refractory;
        for (std::size_t t = a + refractory; t < b - refractory; ++t) {
          if (e[t] > e[best]) best = t;
        }
        if (e[best] > 0.5 * cfg.threshold * local_max[best]) {
          const std::size_t lo = best >= half ? best - half : 0;
          const std::size_t hi = std::min(n, best + half + 1);
          std::size_t p = lo;
          for (std::size_t t = lo; t < hi; ++t) {
            if (std::abs(y[t]) > std::abs(y[p])) p = t;
          }
          if (p > a && p < b) filled.push_back(p);
        }
      }
      filled.push_back(b);
    }
    out.indices = std::move(filled);
  }
  if (out.indices.size() < 3) throw Error("detect_r_peaks: fewer than 3 peaks found");
  std::vector<std::size_t> iv;
  for (std::size_t k = 1; k < out.indices.size(); ++k) iv.push_back(out.indices[k] - out.indices[k - 1]);
  out.mean_interval = static_cast<double>(out.indices.back() - out.indices.front()) /
                      static_cast<double>(out.indices.size() - 1);
  std::nth_element(iv.begin(), iv.begin() + static_cast<std::ptrdiff_t>(iv.size() / 2), iv.end());
  const double median_rate = sample_rate / static_cast<double>(iv[iv.size() / 2]);
  out.plausible = median_rate >= band.min_rate && median_rate <= band.max_rate;
  return out;
}

PeakMatch match_peaks(const std::vector<std::size_t>& detected,
                      const std::vector<std::size_t>& truth, std::size_t tolerance) {
  PeakMatch m;
  std::size_t d = 0;
  for (std::size_t t : truth) {
    while (d < detected.size() && detected[d] + tolerance < t) ++d;
    if (d < detected.size() && detected[d] <= t + tolerance) {
      ++m.true_positives;
      ++d;
    }
  }
  if (m.true_positives == 0) return m;
  m.precision = static_cast<double>(m.true_positives) / static_cast<double>(detected.size());
  m.sensitivity = static_cast<double>(m.true_positives) / static_cast<double>(truth.size());
  m.f1 = 2.0 * m.precision * m.sensitivity / (m.precision + m.sensitivity);
  return m;
}

double spectral_flatness(std::span<const double> x, std::size_t segment) {
  if (x.size() < 4) throw ValidationError("spectral_flatness: signal too short");
  const std::size_t len = std::min(segment, x.size());
  const std::size_t hop = std::max<std::size_t>(1, len / 2);
  std::vector<double> window(len);
  for (std::size_t i = 0; i < len; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(len));
  }
  Eigen::FFT<double> fft;
  std::vector<double> power(len / 2, 0.0);
  std::vector<double> buf(len);
  std::vector<std::complex<double>> spec;
  std::size_t count = 0;
  for (std::size_t start = 0; start + len <= x.size(); start += hop, ++count) {
    const double mean =
        std::accumulate(x.begin() + static_cast<std::ptrdiff_t>(start),
                        x.begin() + static_cast<std::ptrdiff_t>(start + len), 0.0) /
        static_cast<double>(len);
    for (std::size_t i = 0; i < len; ++i) buf[i] = (x[start + i] - mean) * window[i];
    fft.fwd(spec, buf);
    for (std::size_t k = 1; k <= power.size(); ++k) power[k - 1] += std::norm(spec[k]);
  }
  double log_sum = 0.0, sum = 0.0;
  for (double p : power) {
    if (p <= 0.0) return 0.0;
    log_sum += std::log(p);
    sum += p;
  }
  const double nb = static_cast<double>(power.size());
  return std::exp(log_sum / nb) / (sum / nb);
}

RejectionResult reject_bad_channels(const RecordingSet& rec, const RejectionConfig& cfg) {
  rec.validate();
  const std::size_t n = rec.channels();
  const RowMatrix x = rec.data;
  std::vector<double> sd(n);
  parallel_for(n, [&](std::size_t i) { sd[i] = stddev(row_span(x, i)); });
  std::vector<double> pool;
  for (std::size_t i = 0; i < n; ++i) {
    if (rec.valid.empty() || rec.valid[i]) pool.push_back(sd[i]);
  }
  double median_sd = 0.0;
  if (!pool.empty()) {
    std::nth_element(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(pool.size() / 2), pool.end());
    median_sd = pool[pool.size() / 2];
  }
  const double floor = std::max(cfg.min_std, cfg.relative_min_std * median_sd);

  std::vector<std::string> reason(n);
  parallel_for(n, [&](std::size_t i) {
    if (!rec.valid.empty() && !rec.valid[i]) {
      reason[i] = "flagged invalid";
      return;
    }
    if (sd[i] < floor) {
      reason[i] = "near-constant";
      return;
    }
    const auto s = row_span(x, i);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const auto at_rail = std::count_if(s.begin(), s.end(), [&](double v) { return v == *lo || v == *hi; });
    if (static_cast<double>(at_rail) > cfg.rail_fraction * static_cast<double>(s.size())) {
      reason[i] = "saturated";
      return;
    }
    if (spectral_flatness(s, cfg.segment) > cfg.max_flatness) reason[i] = "spectrally flat";
  });

  RejectionResult r;
  for (std::size_t i = 0; i < n; ++i) {
    if (reason[i].empty()) {
      r.valid.push_back(i);
    } else {
      r.rejected.push_back(i);
      r.reasons.push_back(reason[i]);
    }
  }
  if (r.valid.empty()) throw Error("reject_bad_channels: all channels rejected");
  return r;
}

void apply_rejection(RecordingSet& rec, const RejectionResult& r) {
  rec.fill_defaults();
  for (auto i : r.rejected) rec.valid.at(i) = false;
}

std::vector<int> classify_channels(const RecordingSet& rec, const Matrix& refs) {
  rec.validate();
  if (refs.rows() < 1 || refs.cols() != rec.data.cols()) {
    throw ValidationError("classify_channels: references must be n x T with T matching");
  }
  const RowMatrix x = rec.data;
  const RowMatrix r = refs;
  std::vector<int> label(rec.channels(), -1);
  parallel_for(rec.channels(), [&](std::size_t i) {
    if (!rec.valid.empty() && !rec.valid[i]) return;
    double best = -1.0;
    for (Eigen::Index j = 0; j < r.rows(); ++j) {
      const double c = std::abs(pearson_correlation(row_span(x, i), row_span(r, static_cast<std::size_t>(j))));
      if (c > best) {
        best = c;
        label[i] = static_cast<int>(j);
      }
    }
  });
  return label;
}

std::string to_string(ReferenceKind k) {
  switch (k) {
    case ReferenceKind::FrankTriplet: return "frank-triplet";
    case ReferenceKind::PerChannelLocal: return "per-channel-local";
    case ReferenceKind::Fetal: return "fetal";
  }
  return "?";
}

FrankTemplates default_frank_templates(double sample_rate) {
  DipoleModelParams p = default_dipole_params();
  p.deviation_fraction = 0.0;
  HeartRhythm rhythm;
  rhythm.mean_rate = 1.2;
  const auto traj = integrate_trajectory(p, rhythm, 2.0, sample_rate, 0);
  FrankTemplates t;
  t.sample_rate = sample_rate;
  t.anchor = static_cast<std::size_t>(std::llround(0.25 * sample_rate));
  const auto len = static_cast<Eigen::Index>(std::llround(0.6 * sample_rate));
  const auto start = static_cast<Eigen::Index>(traj.r_peaks.at(0) - t.anchor);
  t.waveforms = traj.coords.middleCols(start, len);
  return t;
}

void write_frank_templates(const FrankTemplates& t, std::ostream& out) {
  out << "# sample_rate=" << format_double(t.sample_rate) << " anchor=" << t.anchor << '\n';
  write_matrix_csv(t.waveforms.transpose(), out, {"x", "y", "z"});
}

FrankTemplates read_frank_templates(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# sample_rate=", 0) != 0) {
    throw ValidationError("frank templates: first line must be '# sample_rate=<Hz> anchor=<sample>'");
  }
  FrankTemplates t;
  std::istringstream meta(line.substr(2));
  std::string field;
  while (meta >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const auto key = field.substr(0, eq);
    const auto value = field.substr(eq + 1);
    if (key == "sample_rate") t.sample_rate = parse_double(value);
    if (key == "anchor") t.anchor = static_cast<std::size_t>(parse_double(value));
  }
  const Matrix m = read_matrix_csv(in, true);
  if (m.cols() != 3) throw ValidationError("frank templates: expected three columns");
  t.waveforms = m.transpose();
  if (t.anchor >= static_cast<std::size_t>(t.waveforms.cols())) {
    throw ValidationError("frank templates: anchor outside the template");
  }
  return t;
}

std::vector<double> impulse_convolve(const std::vector<std::size_t>& peaks,
                                     std::span<const double> kernel, std::size_t anchor,
                                     std::size_t length) {
  std::vector<double> out(length, 0.0);
  for (auto p : peaks) {
    for (std::size_t k = 0; k < kernel.size(); ++k) {
      const auto t = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(k) -
                     static_cast<std::ptrdiff_t>(anchor);
      if (t >= 0 && t < static_cast<std::ptrdiff_t>(length)) out[static_cast<std::size_t>(t)] += kernel[k];
    }
  }
  return out;
}

ReferenceSet synth_frank_reference(const PeakTrain& peaks, const FrankTemplates& templates,
                                   std::size_t length, double sample_rate) {
  if (templates.waveforms.rows() != 3) throw ValidationError("synth_frank_reference: need 3 templates");
  if (std::abs(templates.sample_rate - sample_rate) > 1e-9 * sample_rate) {
    throw ValidationError("synth_frank_reference: template sample rate " +
                          format_double(templates.sample_rate) + " Hz does not match " +
                          format_double(sample_rate) + " Hz");
  }
  check_peaks_sorted(peaks.indices, "synth_frank_reference");
  const auto len = static_cast<std::size_t>(templates.waveforms.cols());
  if (peaks.indices.size() > 1 && len >= min_interval(peaks.indices)) {
    throw ValidationError("synth_frank_reference: overlapping templates (template " +
                          std::to_string(len) + " samples, min peak interval " +
                          std::to_string(min_interval(peaks.indices)) + ")");
  }
  ReferenceSet r;
  r.kind = ReferenceKind::FrankTriplet;
  r.signals.resize(3, static_cast<Eigen::Index>(length));
  const RowMatrix w = templates.waveforms;
  for (std::size_t j = 0; j < 3; ++j) {
    const auto s = impulse_convolve(peaks.indices, row_span(w, j), templates.anchor, length);
    r.signals.row(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::RowVectorXd>(s.data(), static_cast<Eigen::Index>(length));
  }
  return r;
}

TransferFit fit_transfer(const Matrix& recordings, const Matrix& vcg) {
  if (vcg.cols() != recordings.cols()) throw ValidationError("fit_transfer: sample count mismatch");
  if (vcg.rows() < 1 || vcg.cols() < vcg.rows()) throw ValidationError("fit_transfer: VCG has too few samples");
  const Matrix a = vcg.transpose();
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < vcg.rows()) throw ValidationError("fit_transfer: VCG rows are linearly dependent");
  TransferFit fit;
  fit.h = qr.solve(recordings.transpose()).transpose();
  const Matrix resid = recordings - fit.h * vcg;
  fit.residuals.resize(static_cast<std::size_t>(recordings.rows()));
  for (Eigen::Index i = 0; i < resid.rows(); ++i) fit.residuals[static_cast<std::size_t>(i)] = resid.row(i).norm();
  if (!fit.h.allFinite()) throw Error("fit_transfer: non-finite solution");
  return fit;
}

ReferenceSet local_references(const TransferFit& fit, const Matrix& vcg) {
  if (fit.h.cols() != vcg.rows()) throw ValidationError("local_references: fit and VCG dimensions differ");
  ReferenceSet r;
  r.kind = ReferenceKind::PerChannelLocal;
  r.signals = fit.h * vcg;
  return r;
}

std::vector<double> synchronous_average(std::span<const double> x, const PeakTrain& peaks,
                                        std::size_t window, std::optional<std::size_t> anchor) {
  if (window == 0) throw ValidationError("synchronous_average: window must be > 0");
  check_peaks_sorted(peaks.indices, "synchronous_average");
  if (peaks.indices.size() < 5) throw ValidationError("synchronous_average: insufficient peaks (need >= 5)");
  if (window >= min_interval(peaks.indices)) {
    throw ValidationError("synchronous_average: window must be shorter than the minimum peak interval");
  }
  const std::size_t a = anchor.value_or(window / 2);
  std::vector<double> avg(window, 0.0);
  std::size_t used = 0;
  for (auto p : peaks.indices) {
    if (p < a || p - a + window > x.size()) continue;
    for (std::size_t k = 0; k < window; ++k) avg[k] += x[p - a + k];
    ++used;
  }
  if (used < 5) throw ValidationError("synchronous_average: insufficient peaks inside the signal");
  for (auto& v : avg) v /= static_cast<double>(used);
  return avg;
}

ReferenceSet build_fetal_references(const RecordingSet& rec, const PeakTrain& fetal_peaks,
                                    std::size_t window) {
  rec.validate();
  ReferenceSet r;
  r.kind = ReferenceKind::Fetal;
  const RowMatrix x = rec.data;
  RowMatrix out = RowMatrix::Zero(x.rows(), x.cols());
  const std::size_t a = window / 2;
  // check once so per-channel workers cannot throw on shared preconditions
  (void)synchronous_average(row_span(x, 0), fetal_peaks, window, a);
  parallel_for(rec.channels(), [&](std::size_t i) {
    if (!rec.valid.empty() && !rec.valid[i]) return;
    const auto tpl = synchronous_average(row_span(x, i), fetal_peaks, window, a);
    const auto s = impulse_convolve(fetal_peaks.indices, tpl, a, rec.samples());
    std::copy(s.begin(), s.end(), out.row(static_cast<Eigen::Index>(i)).data());
  });
  r.signals = out;
  return r;
}

}  // namespace fecg
