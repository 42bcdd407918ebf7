#include "dosegen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dosegen {

namespace {

void check_aligned(const Volume& a, const Volume& b, const char* what) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

std::vector<size_t> mask_indices(const Volume& m, const char* what) {
  if (m.kind != VolKind::MASK)
    throw std::invalid_argument(std::string(what) + ": mask volume required");
  std::vector<size_t> idx;
  for (size_t i = 0; i < m.values.size(); i++)
    if (m.values[i] != 0.0) idx.push_back(i);
  if (idx.empty())
    throw std::invalid_argument(std::string(what) + ": mask is empty");
  return idx;
}

}  // namespace

double mae_masked(const Volume& u, const Volume& v, const Volume& body) {
  check_aligned(u, v, "mae");
  check_aligned(u, body, "mae");
  auto idx = mask_indices(body, "mae");
  double acc = 0.0;
  for (size_t i : idx) acc += std::abs(u.values[i] - v.values[i]);
  return acc / static_cast<double>(idx.size());
}

double psnr_masked(const Volume& u, const Volume& v, const Volume& body) {
  check_aligned(u, v, "psnr");
  check_aligned(u, body, "psnr");
  auto idx = mask_indices(body, "psnr");
  double acc = 0.0;
  for (size_t i : idx) {
    double d = u.values[i] - v.values[i];
    acc += d * d;
  }
  double mse = acc / static_cast<double>(idx.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(kMetricRange * kMetricRange / mse);
}

namespace {

// 11x11 Gaussian window, sigma 1.5, normalized to sum 1
struct SsimWindow {
  static constexpr int kHalf = 5;
  double w[11][11];
  SsimWindow() {
    double sum = 0.0;
    for (int dy = -kHalf; dy <= kHalf; dy++)
      for (int dx = -kHalf; dx <= kHalf; dx++) {
        double g = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        w[dy + kHalf][dx + kHalf] = g;
        sum += g;
      }
    for (auto& row : w)
      for (double& g : row) g /= sum;
  }
};

// SSIM map value at one in-plane position; the window is cropped at slice
// borders and its weights renormalized over the kept cells
double ssim_at(const Volume& u, const Volume& v, const SsimWindow& win, int i,
               int j, int k) {
  constexpr double c1 = (0.01 * kMetricRange) * (0.01 * kMetricRange);
  constexpr double c2 = (0.03 * kMetricRange) * (0.03 * kMetricRange);
  const int H = 5;
  double wsum = 0.0, mu = 0.0, mv = 0.0;
  for (int di = -H; di <= H; di++) {
    int ii = i + di;
    if (ii < 0 || ii >= u.ni()) continue;
    for (int dj = -H; dj <= H; dj++) {
      int jj = j + dj;
      if (jj < 0 || jj >= u.nj()) continue;
      double w = win.w[di + H][dj + H];
      size_t p = u.idx(ii, jj, k);
      wsum += w;
      mu += w * u.values[p];
      mv += w * v.values[p];
    }
  }
  mu /= wsum;
  mv /= wsum;
  double suu = 0.0, svv = 0.0, suv = 0.0;
  for (int di = -H; di <= H; di++) {
    int ii = i + di;
    if (ii < 0 || ii >= u.ni()) continue;
    for (int dj = -H; dj <= H; dj++) {
      int jj = j + dj;
      if (jj < 0 || jj >= u.nj()) continue;
      double w = win.w[di + H][dj + H] / wsum;
      size_t p = u.idx(ii, jj, k);
      double du = u.values[p] - mu;
      double dv = v.values[p] - mv;
      suu += w * du * du;
      svv += w * dv * dv;
      suv += w * du * dv;
    }
  }
  double num = (2.0 * mu * mv + c1) * (2.0 * suv + c2);
  double den = (mu * mu + mv * mv + c1) * (suu + svv + c2);
  return num / den;
}

}  // namespace

double ssim_masked(const Volume& u, const Volume& v, const Volume& body) {
  check_aligned(u, v, "ssim");
  check_aligned(u, body, "ssim");
  mask_indices(body, "ssim");  // reject empty masks up front
  static const SsimWindow win;
  double acc = 0.0;
  size_t count = 0;
  for (int k = 0; k < u.nk(); k++)
    for (int j = 0; j < u.nj(); j++)
      for (int i = 0; i < u.ni(); i++) {
        if (body.values[body.idx(i, j, k)] == 0.0) continue;
        acc += ssim_at(u, v, win, i, j, k);
        count++;
      }
  return acc / static_cast<double>(count);
}

DvhCurve dvh(const Volume& dose, const Volume& roi, double bin_gy,
             double axis_max_gy) {
  check_aligned(dose, roi, "dvh");
  if (bin_gy <= 0.0) throw std::invalid_argument("dvh: bin width must be > 0");
  auto idx = mask_indices(roi, "dvh");
  double dmax = axis_max_gy;
  std::vector<double> doses;
  doses.reserve(idx.size());
  for (size_t i : idx) {
    doses.push_back(dose.values[i]);
    dmax = std::max(dmax, dose.values[i]);
  }
  std::sort(doses.begin(), doses.end());
  int levels = static_cast<int>(std::floor(dmax / bin_gy)) + 1;
  if (levels * bin_gy <= dmax) levels++;  // curve must reach 0 past the max
  DvhCurve c;
  for (int l = 0; l <= levels; l++) {
    double d = l * bin_gy;
    // count of sorted doses >= d
    auto it = std::lower_bound(doses.begin(), doses.end(), d);
    double frac = static_cast<double>(doses.end() - it) /
                  static_cast<double>(doses.size());
    c.dose_gy.push_back(d);
    c.volume_fraction.push_back(frac);
  }
  return c;
}

DvhCurve dvh(const Volume& dose, const Volume& roi, double bin_gy) {
  return dvh(dose, roi, bin_gy, 0.0);
}

std::string metric_kind_name(RoiMetricSpec::Kind k) {
  switch (k) {
    case RoiMetricSpec::Kind::D_V: return "D_V";
    case RoiMetricSpec::Kind::D_min: return "D_min";
    case RoiMetricSpec::Kind::D_mean: return "D_mean";
    case RoiMetricSpec::Kind::D_max: return "D_max";
    case RoiMetricSpec::Kind::V_target: return "V_target";
    case RoiMetricSpec::Kind::V_oar: return "V_oar";
  }
  throw std::logic_error("unreachable metric kind");
}

RoiMetricSpec::Kind metric_kind_from_name(const std::string& s) {
  if (s == "D_V") return RoiMetricSpec::Kind::D_V;
  if (s == "D_min") return RoiMetricSpec::Kind::D_min;
  if (s == "D_mean") return RoiMetricSpec::Kind::D_mean;
  if (s == "D_max") return RoiMetricSpec::Kind::D_max;
  if (s == "V_target") return RoiMetricSpec::Kind::V_target;
  if (s == "V_oar") return RoiMetricSpec::Kind::V_oar;
  throw std::invalid_argument("unknown metric kind: " + s);
}

double dose_metric(const Volume& dose, const Volume& roi,
                   const RoiMetricSpec& spec) {
  check_aligned(dose, roi, "dose_metric");
  auto idx = mask_indices(roi, "dose_metric");
  std::vector<double> doses;
  doses.reserve(idx.size());
  for (size_t i : idx) doses.push_back(dose.values[i]);
  const auto n = static_cast<double>(doses.size());

  switch (spec.kind) {
    case RoiMetricSpec::Kind::D_V: {
      if (!(spec.v_percent > 0.0 && spec.v_percent <= 100.0))
        throw std::invalid_argument("D_V needs v_percent in (0, 100]");
      std::sort(doses.begin(), doses.end(), std::greater<>());
      // smallest count k with k/n >= V%; D_V is the k-th largest dose
      auto k = static_cast<size_t>(std::ceil(spec.v_percent * n / 100.0));
      k = std::min(std::max<size_t>(k, 1), doses.size());
      return doses[k - 1];
    }
    case RoiMetricSpec::Kind::D_min:
      return *std::min_element(doses.begin(), doses.end());
    case RoiMetricSpec::Kind::D_max:
      return *std::max_element(doses.begin(), doses.end());
    case RoiMetricSpec::Kind::D_mean: {
      double acc = 0.0;
      for (double d : doses) acc += d;
      return acc / n;
    }
    case RoiMetricSpec::Kind::V_target: {
      if (spec.prescription_gy <= 0.0)
        throw std::invalid_argument("V_target needs a positive prescription");
      double thr = spec.v_percent / 100.0 * spec.prescription_gy;
      size_t cnt = 0;
      for (double d : doses) cnt += d >= thr ? 1 : 0;
      return 100.0 * static_cast<double>(cnt) / n;
    }
    case RoiMetricSpec::Kind::V_oar: {
      size_t cnt = 0;
      for (double d : doses) cnt += d >= spec.threshold_gy ? 1 : 0;
      return 100.0 * static_cast<double>(cnt) / n;
    }
  }
  throw std::logic_error("unreachable metric kind");
}

MetricsReport score_report(const Volume& pred, const Volume& truth,
                           const std::map<std::string, Volume>& rois,
                           const std::vector<RoiMetricSpec>& specs,
                           const Volume& body) {
  MetricsReport r;
  r.mae_gy = mae_masked(pred, truth, body);
  r.ssim = ssim_masked(pred, truth, body);
  r.psnr_db = psnr_masked(pred, truth, body);

  double dose_acc = 0.0, vol_acc = 0.0;
  int dose_n = 0, vol_n = 0;
  for (const auto& s : specs) {
    auto it = rois.find(s.roi);
    if (it == rois.end())
      throw std::invalid_argument("score_report: unknown roi '" + s.roi + "'");
    SpecResult res;
    res.spec = s;
    res.pred = dose_metric(pred, it->second, s);
    res.truth = dose_metric(truth, it->second, s);
    res.delta = std::abs(res.pred - res.truth);
    bool is_volume = s.kind == RoiMetricSpec::Kind::V_target ||
                     s.kind == RoiMetricSpec::Kind::V_oar;
    (is_volume ? vol_acc : dose_acc) += res.delta;
    (is_volume ? vol_n : dose_n)++;
    r.per_spec.push_back(std::move(res));
  }
  r.dose_score_gy = dose_n ? dose_acc / dose_n : 0.0;
  r.volume_score_percent = vol_n ? vol_acc / vol_n : 0.0;

  for (const auto& [name, roi] : rois) {
    double shared_max = 0.0;
    for (size_t i = 0; i < roi.values.size(); i++)
      if (roi.values[i] != 0.0)
        shared_max =
            std::max({shared_max, pred.values[i], truth.values[i]});
    r.dvh_curves[name] = {dvh(pred, roi, 0.1, shared_max),
                          dvh(truth, roi, 0.1, shared_max)};
  }
  return r;
}

}  // namespace dosegen
