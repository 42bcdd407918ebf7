#pragma once
// Exact anisotropic Euclidean distance transforms and signed distance maps.
// The squared transform runs three 1D lower-envelope (parabola) passes, one
// per axis, each weighted by that axis's squared spacing; signed maps measure
// distance to the ROI's boundary voxel set (positive strictly inside, zero on
// the boundary, negative outside). All distance math is double precision.

#include <array>
#include <vector>

#include "dosegen/volume.hpp"

namespace dosegen {

// Squared physical distance (mm^2) from every voxel to the nearest foreground
// voxel of `mask` under the given spacing. Shape follows the mask; throws on
// an empty mask ("no foreground").
std::vector<double> edt_squared_anisotropic(const Volume& mask,
                                            std::array<double, 3> spacing_mm);
inline std::vector<double> edt_squared_anisotropic(const Volume& mask) {
  return edt_squared_anisotropic(mask, mask.spacing_mm);
}

// Foreground voxels with a 6-connected background neighbor, or foreground
// voxels on the grid border.
Volume boundary_set(const Volume& mask);

// Physical-space signed distance map in decimeters (dist_mm / 100).
Volume psdm(const Volume& mask);
// Index-space variant: unit spacing per axis, then the same /100 shrink.
Volume isdm(const Volume& mask);

// One psdm per ROI, order preserved; shapes and spacing must agree.
std::vector<Volume> build_stack(const std::vector<Volume>& rois);

}  // namespace dosegen
