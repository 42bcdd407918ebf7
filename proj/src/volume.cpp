#include "dosegen/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dosegen {

static_assert(std::endian::native == std::endian::little,
              "volume payload format assumes a little-endian host");

const char* vol_kind_name(VolKind k) {
  switch (k) {
    case VolKind::CT_HU: return "ct_hu";
    case VolKind::DOSE_GY: return "dose_gy";
    case VolKind::MASK: return "mask";
    case VolKind::SDM_DM: return "sdm_dm";
    case VolKind::NORMALIZED: return "normalized";
  }
  throw std::logic_error("unreachable volume kind");
}

VolKind vol_kind_from_name(const std::string& s) {
  if (s == "ct_hu") return VolKind::CT_HU;
  if (s == "dose_gy") return VolKind::DOSE_GY;
  if (s == "mask") return VolKind::MASK;
  if (s == "sdm_dm") return VolKind::SDM_DM;
  if (s == "normalized") return VolKind::NORMALIZED;
  throw std::invalid_argument("unknown volume kind: " + s);
}

Volume Volume::make(std::array<int, 3> shape, std::array<double, 3> spacing_mm,
                    VolKind kind, double fill) {
  Volume v;
  v.shape = shape;
  v.spacing_mm = spacing_mm;
  v.kind = kind;
  for (int e : shape)
    if (e < 1) throw std::invalid_argument("volume extents must be >= 1");
  v.values.assign(static_cast<size_t>(shape[0]) * shape[1] * shape[2], fill);
  return v;
}

void validate_volume(const Volume& v) {
  for (int e : v.shape)
    if (e < 1) throw std::invalid_argument("volume extents must be >= 1");
  for (double s : v.spacing_mm)
    if (!(s > 0.0)) throw std::invalid_argument("volume spacing must be positive");
  size_t n = static_cast<size_t>(v.shape[0]) * v.shape[1] * v.shape[2];
  if (v.values.size() != n)
    throw std::invalid_argument("volume buffer length does not match shape");
  if (v.kind == VolKind::MASK) {
    for (double x : v.values)
      if (x != 0.0 && x != 1.0)
        throw std::invalid_argument("mask volume must contain only {0,1}");
  }
}

static Volume affine_map(const Volume& v, VolKind want, VolKind out_kind,
                         double lo, double hi, const char* what) {
  if (v.kind != want)
    throw std::invalid_argument(std::string("wrong volume kind for ") + what);
  Volume out = v;
  out.kind = out_kind;
  double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  for (double& x : out.values) {
    double c = std::clamp(x, lo, hi);
    x = (c - mid) / half;
  }
  return out;
}

Volume normalize_ct(const Volume& v) {
  return affine_map(v, VolKind::CT_HU, VolKind::NORMALIZED, -1000.0, 1500.0,
                    "normalize_ct");
}

Volume normalize_dose(const Volume& v) {
  for (double x : v.values)
    if (x < 0.0) throw std::invalid_argument("dose values must be >= 0");
  return affine_map(v, VolKind::DOSE_GY, VolKind::NORMALIZED, 0.0, 75.0,
                    "normalize_dose");
}

Volume denormalize_dose(const Volume& v) {
  if (v.kind != VolKind::NORMALIZED)
    throw std::invalid_argument("wrong volume kind for denormalize_dose");
  Volume out = v;
  out.kind = VolKind::DOSE_GY;
  for (double& x : out.values) x = (std::clamp(x, -1.0, 1.0) + 1.0) * 37.5;
  return out;
}

Volume resample_inplane(const Volume& v, int ni2, int nj2) {
  if (ni2 < 2 || nj2 < 2)
    throw std::invalid_argument("resample target extents must be >= 2");
  const int ni = v.ni(), nj = v.nj(), nk = v.nk();
  Volume out;
  out.shape = {ni2, nj2, nk};
  out.kind = v.kind;
  out.spacing_mm = v.spacing_mm;
  if (ni > 1) out.spacing_mm[0] = v.spacing_mm[0] * double(ni - 1) / double(ni2 - 1);
  if (nj > 1) out.spacing_mm[1] = v.spacing_mm[1] * double(nj - 1) / double(nj2 - 1);
  out.values.resize(static_cast<size_t>(ni2) * nj2 * nk);

  const bool nearest = (v.kind == VolKind::MASK);
  const double fi = ni > 1 ? double(ni - 1) / double(ni2 - 1) : 0.0;
  const double fj = nj > 1 ? double(nj - 1) / double(nj2 - 1) : 0.0;
  for (int i2 = 0; i2 < ni2; i2++) {
    double si = i2 * fi;
    int i0 = std::min(int(si), ni - 1), i1 = std::min(i0 + 1, ni - 1);
    double wi = si - i0;
    for (int j2 = 0; j2 < nj2; j2++) {
      double sj = j2 * fj;
      int j0 = std::min(int(sj), nj - 1), j1 = std::min(j0 + 1, nj - 1);
      double wj = sj - j0;
      for (int k = 0; k < nk; k++) {
        double val;
        if (nearest) {
          val = v.at(int(std::lround(si)), int(std::lround(sj)), k);
        } else {
          double a = v.at(i0, j0, k) * (1 - wj) + v.at(i0, j1, k) * wj;
          double b = v.at(i1, j0, k) * (1 - wj) + v.at(i1, j1, k) * wj;
          val = a * (1 - wi) + b * wi;
        }
        out.values[out.idx(i2, j2, k)] = val;
      }
    }
  }
  return out;
}

static std::string raw_name_for(const std::string& json_path) {
  fs::path p(json_path);
  p.replace_extension(".raw");
  return p.filename().string();
}

void write_volume(const std::string& json_path, const Volume& v) {
  validate_volume(v);
  json header;
  header["shape"] = v.shape;
  header["spacing_mm"] = v.spacing_mm;
  header["kind"] = vol_kind_name(v.kind);
  header["dtype"] = "f32le";
  header["data_file"] = raw_name_for(json_path);

  fs::path dir = fs::path(json_path).parent_path();
  std::ofstream jf(json_path, std::ios::binary);
  if (!jf) throw std::runtime_error("cannot write " + json_path);
  jf << header.dump(2) << "\n";
  jf.close();

  std::vector<float> payload(v.values.size());
  for (size_t i = 0; i < payload.size(); i++) payload[i] = static_cast<float>(v.values[i]);
  fs::path raw_path = dir / raw_name_for(json_path);
  std::ofstream rf(raw_path, std::ios::binary);
  if (!rf) throw std::runtime_error("cannot write " + raw_path.string());
  rf.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!rf) throw std::runtime_error("short write to " + raw_path.string());
}

Volume read_volume(const std::string& json_path) {
  std::ifstream jf(json_path, std::ios::binary);
  if (!jf) throw std::runtime_error("cannot read " + json_path);
  json header = json::parse(jf);

  Volume v;
  auto shp = header.at("shape");
  auto spc = header.at("spacing_mm");
  for (int a = 0; a < 3; a++) {
    v.shape[a] = shp.at(a).get<int>();
    v.spacing_mm[a] = spc.at(a).get<double>();
  }
  v.kind = vol_kind_from_name(header.at("kind").get<std::string>());
  if (header.at("dtype").get<std::string>() != "f32le")
    throw std::runtime_error("unsupported dtype in " + json_path);

  fs::path raw_path =
      fs::path(json_path).parent_path() / header.at("data_file").get<std::string>();
  size_t n = static_cast<size_t>(v.shape[0]) * v.shape[1] * v.shape[2];
  std::vector<float> payload(n);
  std::ifstream rf(raw_path, std::ios::binary);
  if (!rf) throw std::runtime_error("cannot read " + raw_path.string());
  rf.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<size_t>(rf.gcount()) != n * sizeof(float))
    throw std::runtime_error("short read from " + raw_path.string());

  v.values.resize(n);
  for (size_t i = 0; i < n; i++) v.values[i] = payload[i];
  validate_volume(v);
  return v;
}

}  // namespace dosegen
