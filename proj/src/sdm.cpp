#include "dosegen/sdm.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dosegen {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// One lower-envelope pass: d[i] = min_j f[j] + (w*(i-j))^2, abscissas w*i.
// Parabolas at +inf are skipped outright so infinities never mix into the
// intersection arithmetic.
void dt_pass(const double* f, double* d, int n, double w, int* v, double* z) {
  int k = -1;
  for (int q = 0; q < n; q++) {
    if (f[q] == kInf) continue;
    double xq = w * q;
    double fq = f[q] + xq * xq;
    double s = 0;
    while (k >= 0) {
      double xv = w * v[k];
      s = (fq - (f[v[k]] + xv * xv)) / (2.0 * xq - 2.0 * xv);
      if (s <= z[k]) {
        k--;
      } else {
        break;
      }
    }
    k++;
    v[k] = q;
    z[k] = (k == 0) ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {  // no finite parabola on this line
    for (int i = 0; i < n; i++) d[i] = kInf;
    return;
  }
  int j = 0;
  for (int i = 0; i < n; i++) {
    double xi = w * i;
    while (z[j + 1] < xi) j++;
    double dx = xi - w * v[j];
    d[i] = f[v[j]] + dx * dx;
  }
}

void pass_axis(std::vector<double>& grid, const std::array<int, 3>& shape,
               int axis, double spacing) {
  const int n = shape[axis];
  std::vector<double> line(n), out(n);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);

  int ni = shape[0], nj = shape[1], nk = shape[2];
  auto idx = [&](int i, int j, int k) {
    return (static_cast<size_t>(i) * nj + j) * nk + k;
  };
  if (axis == 0) {
    for (int j = 0; j < nj; j++)
      for (int k = 0; k < nk; k++) {
        for (int i = 0; i < ni; i++) line[i] = grid[idx(i, j, k)];
        dt_pass(line.data(), out.data(), n, spacing, v.data(), z.data());
        for (int i = 0; i < ni; i++) grid[idx(i, j, k)] = out[i];
      }
  } else if (axis == 1) {
    for (int i = 0; i < ni; i++)
      for (int k = 0; k < nk; k++) {
        for (int j = 0; j < nj; j++) line[j] = grid[idx(i, j, k)];
        dt_pass(line.data(), out.data(), n, spacing, v.data(), z.data());
        for (int j = 0; j < nj; j++) grid[idx(i, j, k)] = out[j];
      }
  } else {
    for (int i = 0; i < ni; i++)
      for (int j = 0; j < nj; j++) {
        size_t base = idx(i, j, 0);
        dt_pass(&grid[base], out.data(), n, spacing, v.data(), z.data());
        for (int k = 0; k < nk; k++) grid[base + k] = out[k];
      }
  }
}

}  // namespace

std::vector<double> edt_squared_anisotropic(const Volume& mask,
                                            std::array<double, 3> spacing_mm) {
  if (mask.kind != VolKind::MASK)
    throw std::invalid_argument("edt: input must be a mask volume");
  for (double s : spacing_mm)
    if (!(s > 0)) throw std::invalid_argument("edt: spacing must be positive");

  std::vector<double> grid(mask.numel());
  bool any = false;
  for (size_t i = 0; i < grid.size(); i++) {
    bool fg = mask.values[i] != 0.0;
    any |= fg;
    grid[i] = fg ? 0.0 : kInf;
  }
  if (!any) throw std::invalid_argument("edt: no foreground voxels");

  for (int axis = 0; axis < 3; axis++)
    pass_axis(grid, mask.shape, axis, spacing_mm[axis]);
  return grid;
}

Volume boundary_set(const Volume& mask) {
  if (mask.kind != VolKind::MASK)
    throw std::invalid_argument("boundary_set: input must be a mask volume");
  Volume out = Volume::make(mask.shape, mask.spacing_mm, VolKind::MASK);
  int ni = mask.ni(), nj = mask.nj(), nk = mask.nk();
  for (int i = 0; i < ni; i++)
    for (int j = 0; j < nj; j++)
      for (int k = 0; k < nk; k++) {
        if (mask.at(i, j, k) == 0.0) continue;
        bool border = i == 0 || j == 0 || k == 0 || i == ni - 1 || j == nj - 1 ||
                      k == nk - 1;
        bool bg_neighbor =
            (i > 0 && mask.at(i - 1, j, k) == 0.0) ||
            (i < ni - 1 && mask.at(i + 1, j, k) == 0.0) ||
            (j > 0 && mask.at(i, j - 1, k) == 0.0) ||
            (j < nj - 1 && mask.at(i, j + 1, k) == 0.0) ||
            (k > 0 && mask.at(i, j, k - 1) == 0.0) ||
            (k < nk - 1 && mask.at(i, j, k + 1) == 0.0);
        if (border || bg_neighbor) out.at(i, j, k) = 1.0;
      }
  return out;
}

static Volume signed_map(const Volume& mask, std::array<double, 3> spacing_mm) {
  bool any = false;
  for (double x : mask.values) any |= (x != 0.0);
  if (!any) throw std::invalid_argument("sdm: empty mask");

  Volume bnd = boundary_set(mask);
  std::vector<double> d2 = edt_squared_anisotropic(bnd, spacing_mm);

  Volume out = Volume::make(mask.shape, mask.spacing_mm, VolKind::SDM_DM);
  for (size_t i = 0; i < out.values.size(); i++) {
    double d = std::sqrt(d2[i]) / 100.0;
    out.values[i] = mask.values[i] != 0.0 ? d : -d;
  }
  return out;
}

Volume psdm(const Volume& mask) { return signed_map(mask, mask.spacing_mm); }

Volume isdm(const Volume& mask) { return signed_map(mask, {1.0, 1.0, 1.0}); }

std::vector<Volume> build_stack(const std::vector<Volume>& rois) {
  std::vector<Volume> stack;
  for (const auto& r : rois) {
    if (!stack.empty()) {
      if (r.shape != rois[0].shape || r.spacing_mm != rois[0].spacing_mm)
        throw std::invalid_argument("build_stack: ROI shape/spacing mismatch");
    }
    stack.push_back(psdm(r));
  }
  return stack;
}

}  // namespace dosegen
