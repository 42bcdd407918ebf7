#pragma once
// Evaluation stack: body-masked image metrics (MAE, per-slice windowed SSIM,
// PSNR) and the dosimetric suite (DVH curves, D_V / V_D statistics, dose and
// volume scores). All statistics are exact 64-bit summations over voxels.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dosegen/volume.hpp"

namespace dosegen {

// dynamic range of the image metrics (paper-fixed constant)
inline constexpr double kMetricRange = 3000.0;

double mae_masked(const Volume& u, const Volume& v, const Volume& body);
double ssim_masked(const Volume& u, const Volume& v, const Volume& body);
// +infinity when the masked MSE is zero
double psnr_masked(const Volume& u, const Volume& v, const Volume& body);

struct DvhCurve {
  std::vector<double> dose_gy;
  std::vector<double> volume_fraction;  // fraction of roi receiving >= dose
};

DvhCurve dvh(const Volume& dose, const Volume& roi, double bin_gy = 0.1);
// same curve on an axis required to extend past axis_max_gy (so paired curves
// for two volumes can share one dose grid)
DvhCurve dvh(const Volume& dose, const Volume& roi, double bin_gy,
             double axis_max_gy);

struct RoiMetricSpec {
  enum class Kind { D_V, D_min, D_mean, D_max, V_target, V_oar };
  std::string roi;
  Kind kind = Kind::D_mean;
  double v_percent = 0.0;        // D_V and V_target use this
  double threshold_gy = 0.0;     // V_oar absolute threshold
  double prescription_gy = 0.0;  // V_target reference dose
};

std::string metric_kind_name(RoiMetricSpec::Kind k);
RoiMetricSpec::Kind metric_kind_from_name(const std::string& s);

double dose_metric(const Volume& dose, const Volume& roi,
                   const RoiMetricSpec& spec);

struct SpecResult {
  RoiMetricSpec spec;
  double pred = 0.0;
  double truth = 0.0;
  double delta = 0.0;  // |pred - truth|
};

struct MetricsReport {
  double mae_gy = 0.0;
  double ssim = 0.0;
  double psnr_db = 0.0;
  std::vector<SpecResult> per_spec;
  double dose_score_gy = 0.0;          // mean delta over D_* specs
  double volume_score_percent = 0.0;   // mean delta over V_* specs
  // roi name -> (predicted curve, reference curve)
  std::map<std::string, std::pair<DvhCurve, DvhCurve>> dvh_curves;
};

MetricsReport score_report(const Volume& pred, const Volume& truth,
                           const std::map<std::string, Volume>& rois,
                           const std::vector<RoiMetricSpec>& specs,
                           const Volume& body);

}  // namespace dosegen
