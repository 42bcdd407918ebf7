#pragma once
// Procedural phantoms: an ellipsoidal body with a spherical target and
// ellipsoidal organs-at-risk, CT-like HU texture, and an analytic dose field
// built from K convergent beams (exponential depth attenuation x lateral
// Gaussian), scaled so the target-interior mean hits the prescription.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dosegen/volume.hpp"

namespace dosegen {

struct PhantomSpec {
  uint64_t seed = 0;
  std::array<int, 3> shape{64, 64, 16};
  std::array<double, 3> spacing_mm{3.0, 3.0, 5.0};

  std::array<double, 3> body_center_mm{0, 0, 0};
  std::array<double, 3> body_semi_mm{80, 70, 32};

  std::array<double, 3> target_center_mm{0, 0, 0};
  double target_radius_mm = 10.0;
  double prescription_gy = 30.0;

  int oar_count = 2;                       // placed from seed
  double oar_semi_lo_mm = 6.0, oar_semi_hi_mm = 12.0;

  std::vector<double> gantry_deg;          // K >= 2 beam angles, axial plane
  double beam_sigma_mm = 8.0;              // lateral Gaussian width
  double mu_per_mm = 0.005;                // attenuation coefficient
};

struct PhantomCase {
  Volume ct;                   // CT_HU
  Volume dose;                 // DOSE_GY
  Volume body;                 // MASK
  std::vector<Volume> rois;    // MASK; [0] target, then OARs
  std::vector<std::string> roi_names;
};

// Deterministic function of the spec (including spec.seed).
PhantomCase phantom_generate(const PhantomSpec& spec);

// Dataset protocol: geometry is randomized per case, while the beam
// arrangement and prescription stay fixed across the whole set so dose is a
// function of what the conditioning inputs can see.
struct PhantomProtocol {
  std::array<int, 3> shape{64, 64, 16};
  std::array<double, 3> spacing_mm{3.0, 3.0, 5.0};
  int beam_count = 5;
  double angle_offset_deg = 0.0;
  double beam_sigma_mm = 8.0;
  double mu_per_mm = 0.005;
  double prescription_gy = 30.0;
  int oar_count = 2;
  std::array<double, 2> oar_semi_mm{6.0, 12.0};
  std::array<double, 2> target_radius_mm{8.0, 12.0};
  // body semi-axis ranges per axis, as fractions of the half field of view
  std::array<double, 2> body_frac_i{0.72, 0.84};
  std::array<double, 2> body_frac_j{0.62, 0.74};
  std::array<double, 2> body_frac_k{0.78, 0.88};
  double center_jitter_mm = 2.0;
  std::array<double, 2> target_jitter_ij_mm{-8.0, 8.0};
  std::array<double, 2> target_jitter_k_mm{-4.0, 4.0};
};

PhantomSpec random_spec(const PhantomProtocol& p, uint64_t dataset_seed, int case_index);

// Physical coordinate of a voxel center (index * spacing).
inline std::array<double, 3> voxel_center_mm(const PhantomSpec& s, int i, int j, int k) {
  return {i * s.spacing_mm[0], j * s.spacing_mm[1], k * s.spacing_mm[2]};
}

}  // namespace dosegen
