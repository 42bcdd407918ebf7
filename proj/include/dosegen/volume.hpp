#pragma once
// Dense 3D scalar grids with physical per-axis spacing: the carrier for CT,
// dose, masks, and signed distance maps. Values are double in memory for
// numeric headroom; the on-disk payload is little-endian float32 (JSON header
// + raw blob, k-fastest index order).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dosegen {

enum class VolKind { CT_HU, DOSE_GY, MASK, SDM_DM, NORMALIZED };

const char* vol_kind_name(VolKind k);
VolKind vol_kind_from_name(const std::string& s);

struct Volume {
  std::array<int, 3> shape{0, 0, 0};           // (ni, nj, nk); k varies fastest
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  VolKind kind = VolKind::NORMALIZED;
  std::vector<double> values;

  int ni() const { return shape[0]; }
  int nj() const { return shape[1]; }
  int nk() const { return shape[2]; }
  size_t numel() const { return values.size(); }
  size_t idx(int i, int j, int k) const {
    return (static_cast<size_t>(i) * shape[1] + j) * shape[2] + k;
  }
  double& at(int i, int j, int k) { return values[idx(i, j, k)]; }
  double at(int i, int j, int k) const { return values[idx(i, j, k)]; }

  static Volume make(std::array<int, 3> shape, std::array<double, 3> spacing_mm,
                     VolKind kind, double fill = 0.0);
};

// Throws std::invalid_argument on broken invariants (non-positive extents or
// spacing; non-binary mask payload for MASK kind).
void validate_volume(const Volume& v);

// Affine [-1000,1500] HU -> [-1,1], clamping out-of-range input first.
Volume normalize_ct(const Volume& v);
// Affine [0,75] Gy -> [-1,1] (clamped) and its exact inverse.
Volume normalize_dose(const Volume& v);
Volume denormalize_dose(const Volume& v);

// Per-slice in-plane resample to (ni2, nj2). Bilinear with endpoint-aligned
// sample positions; MASK volumes use nearest-neighbor. Spacing is rescaled so
// the first-to-last sample extent is preserved.
Volume resample_inplane(const Volume& v, int ni2, int nj2);

// json_path names the header; the raw payload lands next to it with the same
// stem and a .raw suffix. Round trips are byte-exact.
void write_volume(const std::string& json_path, const Volume& v);
Volume read_volume(const std::string& json_path);

}  // namespace dosegen
