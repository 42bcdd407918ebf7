#include "dosegen/phantom.hpp"

#include <cmath>
#include <stdexcept>

#include "dosegen/rng.hpp"

namespace dosegen {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

double ellnorm2(const std::array<double, 3>& p, const std::array<double, 3>& c,
                const std::array<double, 3>& semi) {
  double s = 0;
  for (int a = 0; a < 3; a++) {
    double d = (p[a] - c[a]) / semi[a];
    s += d * d;
  }
  return s;
}

// Deterministic spherical Fibonacci directions for inside-body checks.
std::vector<std::array<double, 3>> unit_dirs(int n) {
  std::vector<std::array<double, 3>> dirs(n);
  const double ga = kTwoPi * 0.381966011250105;  // golden angle
  for (int i = 0; i < n; i++) {
    double z = 1.0 - 2.0 * (i + 0.5) / n;
    double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    dirs[i] = {r * std::cos(ga * i), r * std::sin(ga * i), z};
  }
  return dirs;
}

// Surface of (center, semi) stays strictly inside the body ellipsoid.
bool ellipsoid_inside_body(const std::array<double, 3>& center,
                           const std::array<double, 3>& semi,
                           const PhantomSpec& s, double margin) {
  static const auto dirs = unit_dirs(96);
  for (const auto& u : dirs) {
    std::array<double, 3> p{center[0] + semi[0] * u[0], center[1] + semi[1] * u[1],
                            center[2] + semi[2] * u[2]};
    if (ellnorm2(p, s.body_center_mm, s.body_semi_mm) >= margin) return false;
  }
  return true;
}

double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double s = 0;
  for (int i = 0; i < 3; i++) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

struct Oar {
  std::array<double, 3> center, semi;
};

std::vector<Oar> place_oars(const PhantomSpec& s, Rng& rng) {
  std::vector<Oar> oars;
  for (int o = 0; o < s.oar_count; o++) {
    bool placed = false;
    for (int attempt = 0; attempt < 800 && !placed; attempt++) {
      Oar cand;
      for (int a = 0; a < 3; a++) {
        cand.center[a] = s.body_center_mm[a] +
                         rng.uniform(-0.62, 0.62) * s.body_semi_mm[a];
        cand.semi[a] = rng.uniform(s.oar_semi_lo_mm, s.oar_semi_hi_mm);
      }
      double reach = std::max({cand.semi[0], cand.semi[1], cand.semi[2]});
      if (!ellipsoid_inside_body(cand.center, cand.semi, s, 0.97)) continue;
      if (dist3(cand.center, s.target_center_mm) <
          s.target_radius_mm + reach + 4.0)
        continue;
      bool clash = false;
      for (const auto& prev : oars) {
        double pr = std::max({prev.semi[0], prev.semi[1], prev.semi[2]});
        if (dist3(cand.center, prev.center) < reach + pr + 4.0) clash = true;
      }
      if (clash) continue;
      oars.push_back(cand);
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("phantom: could not place OAR " + std::to_string(o));
  }
  return oars;
}

}  // namespace

PhantomCase phantom_generate(const PhantomSpec& spec) {
  if (spec.gantry_deg.size() < 2)
    throw std::invalid_argument("phantom: need at least 2 beams");
  if (!(spec.prescription_gy > 0.0 && spec.prescription_gy <= 75.0))
    throw std::invalid_argument("phantom: prescription must lie in (0,75] Gy");

  // Target sphere strictly inside the body ellipsoid.
  {
    static const auto dirs = unit_dirs(96);
    for (const auto& u : dirs) {
      std::array<double, 3> p{spec.target_center_mm[0] + spec.target_radius_mm * u[0],
                              spec.target_center_mm[1] + spec.target_radius_mm * u[1],
                              spec.target_center_mm[2] + spec.target_radius_mm * u[2]};
      if (ellnorm2(p, spec.body_center_mm, spec.body_semi_mm) >= 1.0)
        throw std::invalid_argument("phantom: target outside body");
    }
  }

  Rng rng(derive_seed(spec.seed, 0x9047u));
  auto oars = place_oars(spec, rng);

  // CT texture: three axis-aligned cosines over ~35-90 mm wavelengths.
  double lam[3], phase[3];
  const double amp[3] = {12.0, 8.0, 5.0};
  for (int a = 0; a < 3; a++) {
    lam[a] = rng.uniform(35.0, 90.0);
    phase[a] = rng.uniform(0.0, kTwoPi);
  }

  PhantomCase out;
  out.body = Volume::make(spec.shape, spec.spacing_mm, VolKind::MASK);
  out.ct = Volume::make(spec.shape, spec.spacing_mm, VolKind::CT_HU, -1000.0);
  out.dose = Volume::make(spec.shape, spec.spacing_mm, VolKind::DOSE_GY);
  out.rois.push_back(Volume::make(spec.shape, spec.spacing_mm, VolKind::MASK));
  out.roi_names.push_back("roi_00_target");
  for (size_t o = 0; o < oars.size(); o++) {
    out.rois.push_back(Volume::make(spec.shape, spec.spacing_mm, VolKind::MASK));
    char buf[32];
    std::snprintf(buf, sizeof buf, "roi_%02zu_oar", o + 1);
    out.roi_names.push_back(buf);
  }

  // Beam axes through the target center, in the axial plane.
  struct Beam {
    std::array<double, 3> dir;
    double s_entry;
  };
  std::vector<Beam> beams;
  for (double deg : spec.gantry_deg) {
    Beam b;
    double th = deg * kTwoPi / 360.0;
    b.dir = {std::cos(th), std::sin(th), 0.0};
    double qa = 0, qb = 0, qc = -1.0;
    for (int a = 0; a < 3; a++) {
      double off = (spec.target_center_mm[a] - spec.body_center_mm[a]);
      double inv2 = 1.0 / (spec.body_semi_mm[a] * spec.body_semi_mm[a]);
      qa += b.dir[a] * b.dir[a] * inv2;
      qb += 2.0 * off * b.dir[a] * inv2;
      qc += off * off * inv2;
    }
    double disc = qb * qb - 4.0 * qa * qc;
    if (disc <= 0.0) throw std::logic_error("phantom: beam axis misses body");
    b.s_entry = (-qb - std::sqrt(disc)) / (2.0 * qa);
    beams.push_back(b);
  }

  const double sig2 = 2.0 * spec.beam_sigma_mm * spec.beam_sigma_mm;
  const double r2 = spec.target_radius_mm * spec.target_radius_mm;
  double target_sum = 0.0;
  size_t target_n = 0;

  for (int i = 0; i < spec.shape[0]; i++)
    for (int j = 0; j < spec.shape[1]; j++)
      for (int k = 0; k < spec.shape[2]; k++) {
        auto p = voxel_center_mm(spec, i, j, k);
        bool in_body = ellnorm2(p, spec.body_center_mm, spec.body_semi_mm) <= 1.0;
        if (!in_body) continue;
        out.body.at(i, j, k) = 1.0;

        double hu = 30.0;
        hu += amp[0] * std::cos(kTwoPi * p[0] / lam[0] + phase[0]);
        hu += amp[1] * std::cos(kTwoPi * p[1] / lam[1] + phase[1]);
        hu += amp[2] * std::cos(kTwoPi * p[2] / lam[2] + phase[2]);

        double dt2 = 0;
        for (int a = 0; a < 3; a++) {
          double d = p[a] - spec.target_center_mm[a];
          dt2 += d * d;
        }
        if (dt2 <= r2) {
          out.rois[0].at(i, j, k) = 1.0;
          hu += 130.0;
        }
        for (size_t o = 0; o < oars.size(); o++) {
          if (ellnorm2(p, oars[o].center, oars[o].semi) <= 1.0) {
            out.rois[o + 1].at(i, j, k) = 1.0;
            hu += (o % 2 == 0) ? -130.0 : 180.0;
          }
        }
        out.ct.at(i, j, k) = hu;

        double raw = 0.0;
        for (const auto& b : beams) {
          double rel[3] = {p[0] - spec.target_center_mm[0],
                           p[1] - spec.target_center_mm[1],
                           p[2] - spec.target_center_mm[2]};
          double s = rel[0] * b.dir[0] + rel[1] * b.dir[1] + rel[2] * b.dir[2];
          double perp2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2] - s * s;
          double depth = std::max(0.0, s - b.s_entry);
          raw += std::exp(-spec.mu_per_mm * depth) * std::exp(-std::max(0.0, perp2) / sig2);
        }
        out.dose.at(i, j, k) = raw;
        if (dt2 <= r2) {
          target_sum += raw;
          target_n++;
        }
      }

  if (target_n == 0)
    throw std::invalid_argument("phantom: target mask is empty on this grid");
  double scale = spec.prescription_gy * target_n / target_sum;
  for (double& d : out.dose.values) d *= scale;
  return out;
}

PhantomSpec random_spec(const PhantomProtocol& p, uint64_t dataset_seed, int case_index) {
  PhantomSpec s;
  s.seed = derive_seed(dataset_seed, 0xCA5Eu, static_cast<uint64_t>(case_index));
  s.shape = p.shape;
  s.spacing_mm = p.spacing_mm;
  s.prescription_gy = p.prescription_gy;
  s.oar_count = p.oar_count;
  s.oar_semi_lo_mm = p.oar_semi_mm[0];
  s.oar_semi_hi_mm = p.oar_semi_mm[1];
  s.beam_sigma_mm = p.beam_sigma_mm;
  s.mu_per_mm = p.mu_per_mm;
  for (int b = 0; b < p.beam_count; b++)
    s.gantry_deg.push_back(p.angle_offset_deg + 360.0 * b / p.beam_count);

  Rng rng(derive_seed(s.seed, 0x5BEC5u));
  std::array<double, 3> half;  // half-span of voxel centers
  for (int a = 0; a < 3; a++) half[a] = 0.5 * (s.shape[a] - 1) * s.spacing_mm[a];

  const std::array<std::array<double, 2>, 3> fr{p.body_frac_i, p.body_frac_j,
                                                p.body_frac_k};
  for (int attempt = 0; attempt < 400; attempt++) {
    for (int a = 0; a < 3; a++) {
      s.body_semi_mm[a] = rng.uniform(fr[a][0], fr[a][1]) * half[a];
      double jit = (a == 2) ? 0.0 : rng.uniform(-p.center_jitter_mm, p.center_jitter_mm);
      s.body_center_mm[a] = half[a] + jit;
    }
    s.target_radius_mm = rng.uniform(p.target_radius_mm[0], p.target_radius_mm[1]);
    for (int a = 0; a < 2; a++)
      s.target_center_mm[a] =
          s.body_center_mm[a] + rng.uniform(p.target_jitter_ij_mm[0], p.target_jitter_ij_mm[1]);
    s.target_center_mm[2] =
        s.body_center_mm[2] + rng.uniform(p.target_jitter_k_mm[0], p.target_jitter_k_mm[1]);

    bool ok = true;
    static const auto dirs = unit_dirs(96);
    for (const auto& u : dirs) {
      std::array<double, 3> q{s.target_center_mm[0] + s.target_radius_mm * u[0],
                              s.target_center_mm[1] + s.target_radius_mm * u[1],
                              s.target_center_mm[2] + s.target_radius_mm * u[2]};
      if (ellnorm2(q, s.body_center_mm, s.body_semi_mm) >= 0.98) ok = false;
    }
    if (ok) return s;
  }
  throw std::runtime_error("random_spec: could not fit a target inside the body");
}

}  // namespace dosegen
