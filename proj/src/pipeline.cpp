#include "dosegen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dosegen/checkpoint.hpp"
#include "dosegen/diffusion.hpp"
#include "dosegen/sdm.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dosegen {

namespace {

// stream tags: batch composition, augmentation draws, noise draws
constexpr uint64_t kPickTag = 0x5E1EC7ull;
constexpr uint64_t kAugTag = 0xBA7C4ull;
constexpr uint64_t kNoiseTag = 0x4015Eull;

std::string fmt_case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03d", index);
  return buf;
}

json jnum(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

}  // namespace

std::string conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::kMask: return "mask";
    case Conditioning::kIsdm: return "isdm";
    case Conditioning::kPsdm: return "psdm";
  }
  throw std::logic_error("unreachable conditioning mode");
}

Conditioning conditioning_from_name(const std::string& s) {
  if (s == "mask") return Conditioning::kMask;
  if (s == "isdm") return Conditioning::kIsdm;
  if (s == "psdm") return Conditioning::kPsdm;
  throw std::invalid_argument("unknown conditioning mode: " + s);
}

void RunConfig::validate() const {
  if (std::abs(data.split_train + data.split_val + data.split_test - 1.0) > 1e-9)
    throw std::invalid_argument("split ratios must sum to 1");
  if (data.split_train <= 0.0)
    throw std::invalid_argument("training split must be positive");
  if (data.count < 1) throw std::invalid_argument("data count must be >= 1");
  if (training.iterations < 1)
    throw std::invalid_argument("training iterations must be >= 1");
  if (training.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (training.lr <= 0.0) throw std::invalid_argument("lr must be positive");
  if (training.weight_decay < 0.0)
    throw std::invalid_argument("weight decay must be >= 0");
  if (!(training.lr_step_decay > 0.0 && training.lr_step_decay <= 1.0))
    throw std::invalid_argument("lr_step_decay must be in (0, 1]");
  if (training.checkpoint_every < 0)
    throw std::invalid_argument("checkpoint_every must be >= 0");
  if (schedule.T < 2 || !(0.0 < schedule.alphaT && schedule.alphaT < schedule.alpha1 &&
                          schedule.alpha1 < 1.0))
    throw std::invalid_argument("invalid schedule bounds");
  if (sampler.S < 1 || sampler.S > schedule.T)
    throw std::invalid_argument("sampler steps must be in [1, T]");
  model.validate();
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["schedule"] = {{"T", c.schedule.T},
                   {"alpha1", c.schedule.alpha1},
                   {"alphaT", c.schedule.alphaT}};
  j["sampler"] = {{"S", c.sampler.S}, {"seed", c.sampler.seed}};
  j["model"] = json::parse(model_config_to_json(c.model));
  j["training"] = {{"lr", c.training.lr},
                   {"batch", c.training.batch},
                   {"iterations", c.training.iterations},
                   {"weight_decay", c.training.weight_decay},
                   {"lr_step_decay", c.training.lr_step_decay},
                   {"checkpoint_every", c.training.checkpoint_every},
                   {"loss", c.training.l2_loss ? "l2" : "l1"},
                   {"augment",
                    {{"flip", c.training.aug_flip},
                     {"rotate", c.training.aug_rotate},
                     {"zoom", c.training.aug_zoom}}},
                   {"seed", c.training.seed}};
  j["data"] = {{"root", c.data.root},
               {"count", c.data.count},
               {"split", {c.data.split_train, c.data.split_val, c.data.split_test}}};
  j["conditioning"] = conditioning_name(c.conditioning);
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j = json::parse(text);
  RunConfig c;
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    c.schedule.T = s.value("T", c.schedule.T);
    c.schedule.alpha1 = s.value("alpha1", c.schedule.alpha1);
    c.schedule.alphaT = s.value("alphaT", c.schedule.alphaT);
  }
  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    c.sampler.S = s.value("S", c.sampler.S);
    c.sampler.seed = s.value("seed", c.sampler.seed);
  }
  if (j.contains("model"))
    c.model = model_config_from_json(j["model"].dump());
  if (j.contains("training")) {
    const auto& t = j["training"];
    c.training.lr = t.value("lr", c.training.lr);
    c.training.batch = t.value("batch", c.training.batch);
    c.training.iterations = t.value("iterations", c.training.iterations);
    c.training.weight_decay = t.value("weight_decay", c.training.weight_decay);
    c.training.lr_step_decay = t.value("lr_step_decay", c.training.lr_step_decay);
    c.training.checkpoint_every =
        t.value("checkpoint_every", c.training.checkpoint_every);
    std::string loss = t.value("loss", std::string(c.training.l2_loss ? "l2" : "l1"));
    if (loss != "l1" && loss != "l2")
      throw std::invalid_argument("training.loss must be 'l1' or 'l2'");
    c.training.l2_loss = loss == "l2";
    if (t.contains("augment")) {
      const auto& a = t["augment"];
      c.training.aug_flip = a.value("flip", c.training.aug_flip);
      c.training.aug_rotate = a.value("rotate", c.training.aug_rotate);
      c.training.aug_zoom = a.value("zoom", c.training.aug_zoom);
    }
    c.training.seed = t.value("seed", c.training.seed);
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data.root = d.value("root", c.data.root);
    c.data.count = d.value("count", c.data.count);
    if (d.contains("split")) {
      auto s = d["split"].get<std::vector<double>>();
      if (s.size() != 3)
        throw std::invalid_argument("data.split must have three entries");
      c.data.split_train = s[0];
      c.data.split_val = s[1];
      c.data.split_test = s[2];
    }
  }
  if (j.contains("conditioning"))
    c.conditioning = conditioning_from_name(j["conditioning"].get<std::string>());
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

PhantomGenConfig phantom_gen_config_from_json(const std::string& text) {
  json j = json::parse(text);
  PhantomGenConfig c;
  c.count = j.value("count", c.count);
  c.seed = j.value("seed", c.seed);
  if (c.count < 1) throw std::invalid_argument("phantom count must be >= 1");
  if (j.contains("protocol")) {
    const auto& p = j["protocol"];
    PhantomProtocol& pr = c.protocol;
    auto arr3i = [&](const char* key, std::array<int, 3>& dst) {
      if (p.contains(key)) {
        auto v = p[key].get<std::vector<int>>();
        if (v.size() != 3) throw std::invalid_argument(std::string(key) + " needs 3 entries");
        std::copy(v.begin(), v.end(), dst.begin());
      }
    };
    auto arr3d = [&](const char* key, std::array<double, 3>& dst) {
      if (p.contains(key)) {
        auto v = p[key].get<std::vector<double>>();
        if (v.size() != 3) throw std::invalid_argument(std::string(key) + " needs 3 entries");
        std::copy(v.begin(), v.end(), dst.begin());
      }
    };
    auto arr2d = [&](const char* key, std::array<double, 2>& dst) {
      if (p.contains(key)) {
        auto v = p[key].get<std::vector<double>>();
        if (v.size() != 2) throw std::invalid_argument(std::string(key) + " needs 2 entries");
        std::copy(v.begin(), v.end(), dst.begin());
      }
    };
    arr3i("shape", pr.shape);
    arr3d("spacing_mm", pr.spacing_mm);
    pr.beam_count = p.value("beam_count", pr.beam_count);
    pr.angle_offset_deg = p.value("angle_offset_deg", pr.angle_offset_deg);
    pr.beam_sigma_mm = p.value("beam_sigma_mm", pr.beam_sigma_mm);
    pr.mu_per_mm = p.value("mu_per_mm", pr.mu_per_mm);
    pr.prescription_gy = p.value("prescription_gy", pr.prescription_gy);
    pr.oar_count = p.value("oar_count", pr.oar_count);
    arr2d("oar_semi_mm", pr.oar_semi_mm);
    arr2d("target_radius_mm", pr.target_radius_mm);
    arr2d("body_frac_i", pr.body_frac_i);
    arr2d("body_frac_j", pr.body_frac_j);
    arr2d("body_frac_k", pr.body_frac_k);
    pr.center_jitter_mm = p.value("center_jitter_mm", pr.center_jitter_mm);
    arr2d("target_jitter_ij_mm", pr.target_jitter_ij_mm);
    arr2d("target_jitter_k_mm", pr.target_jitter_k_mm);
  }
  return c;
}

void write_phantom_dataset(const std::string& out_dir, int count,
                           uint64_t seed, const PhantomProtocol& proto) {
  if (count < 1) throw std::invalid_argument("phantom count must be >= 1");
  fs::create_directories(out_dir);
  json ids = json::array();
  for (int i = 0; i < count; i++) {
    PhantomSpec spec = random_spec(proto, seed, i);
    PhantomCase c = phantom_generate(spec);
    std::string id = fmt_case_id(i);
    fs::path dir = fs::path(out_dir) / id;
    fs::create_directories(dir);
    write_volume((dir / "ct.json").string(), c.ct);
    write_volume((dir / "dose.json").string(), c.dose);
    write_volume((dir / "body.json").string(), c.body);
    for (size_t r = 0; r < c.rois.size(); r++)
      write_volume((dir / (c.roi_names[r] + ".json")).string(), c.rois[r]);
    ids.push_back(id);
  }
  json manifest;
  manifest["cases"] = ids;
  manifest["count"] = count;
  manifest["seed"] = seed;
  std::ofstream mf(fs::path(out_dir) / "dataset.json",
                   std::ios::binary | std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

std::vector<std::string> list_case_ids(const std::string& root) {
  fs::path mf = fs::path(root) / "dataset.json";
  std::ifstream f(mf);
  if (!f)
    throw std::runtime_error("dataset manifest not found at " + mf.string() +
                             " (generate the dataset first)");
  json manifest = json::parse(f);
  return manifest.at("cases").get<std::vector<std::string>>();
}

LoadedCase load_case(const std::string& case_dir) {
  fs::path dir(case_dir);
  if (!fs::is_directory(dir))
    throw std::runtime_error("case directory not found: " + case_dir);
  LoadedCase c;
  c.id = dir.filename().string();
  c.ct = read_volume((dir / "ct.json").string());
  c.dose = read_volume((dir / "dose.json").string());
  c.body = read_volume((dir / "body.json").string());
  std::vector<std::string> roi_files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (name.rfind("roi_", 0) == 0 && e.path().extension() == ".json")
      roi_files.push_back(e.path().string());
  }
  std::sort(roi_files.begin(), roi_files.end());
  if (roi_files.empty())
    throw std::runtime_error("case has no roi_* masks: " + case_dir);
  for (const auto& p : roi_files) {
    std::string stem = fs::path(p).stem().string();
    c.rois.emplace_back(stem, read_volume(p));
  }
  return c;
}

std::vector<Volume> build_cond_stack(const LoadedCase& c, Conditioning mode) {
  std::vector<Volume> stack;
  for (const auto& [name, roi] : c.rois) {
    switch (mode) {
      case Conditioning::kMask: stack.push_back(roi); break;
      case Conditioning::kIsdm: stack.push_back(isdm(roi)); break;
      case Conditioning::kPsdm: stack.push_back(psdm(roi)); break;
    }
  }
  return stack;
}

SplitIds split_dataset(const std::vector<std::string>& ids, const RunConfig& cfg) {
  const auto n = static_cast<double>(ids.size());
  auto n_train = static_cast<size_t>(std::floor(cfg.data.split_train * n + 1e-9));
  auto n_val = static_cast<size_t>(std::floor(cfg.data.split_val * n + 1e-9));
  n_train = std::min(n_train, ids.size());
  n_val = std::min(n_val, ids.size() - n_train);
  SplitIds s;
  s.train.assign(ids.begin(), ids.begin() + n_train);
  s.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  s.test.assign(ids.begin() + n_train + n_val, ids.end());
  if (s.train.empty())
    throw std::invalid_argument("training split is empty for this dataset size");
  return s;
}

// ---------- augmentation ----------

namespace {

void flip_j(std::vector<double>& a, int H, int W) {
  for (int i = 0; i < H; i++)
    for (int j = 0; j < W / 2; j++)
      std::swap(a[static_cast<size_t>(i) * W + j],
                a[static_cast<size_t>(i) * W + (W - 1 - j)]);
}

void rot90(std::vector<double>& a, int H, int W) {
  if (H != W)
    throw std::invalid_argument("90-degree rotation needs square slices");
  std::vector<double> out(a.size());
  for (int i = 0; i < H; i++)
    for (int j = 0; j < W; j++)
      out[static_cast<size_t>(i) * W + j] =
          a[static_cast<size_t>(j) * W + (H - 1 - i)];
  a = std::move(out);
}

enum class ZoomFill { kConst, kClamp };

std::vector<double> zoom2d(const std::vector<double>& a, int H, int W, double z,
                           bool nearest, ZoomFill mode, double fill) {
  std::vector<double> out(a.size());
  const double ci = (H - 1) / 2.0, cj = (W - 1) / 2.0;
  auto sample = [&](int i, int j) -> double {
    if (i < 0 || i >= H || j < 0 || j >= W) return fill;
    return a[static_cast<size_t>(i) * W + j];
  };
  for (int i = 0; i < H; i++)
    for (int j = 0; j < W; j++) {
      double si = ci + (i - ci) / z;
      double sj = cj + (j - cj) / z;
      double v;
      if (nearest) {
        int ii = static_cast<int>(std::lround(si));
        int jj = static_cast<int>(std::lround(sj));
        v = sample(ii, jj);
      } else {
        if (mode == ZoomFill::kClamp) {
          si = std::clamp(si, 0.0, static_cast<double>(H - 1));
          sj = std::clamp(sj, 0.0, static_cast<double>(W - 1));
        }
        int i0 = static_cast<int>(std::floor(si));
        int j0 = static_cast<int>(std::floor(sj));
        double fi = si - i0, fj = sj - j0;
        v = (1 - fi) * ((1 - fj) * sample(i0, j0) + fj * sample(i0, j0 + 1)) +
            fi * ((1 - fj) * sample(i0 + 1, j0) + fj * sample(i0 + 1, j0 + 1));
      }
      out[static_cast<size_t>(i) * W + j] = v;
    }
  return out;
}

std::vector<double> gather_slice(const Volume& v, int k) {
  std::vector<double> s(static_cast<size_t>(v.ni()) * v.nj());
  for (int i = 0; i < v.ni(); i++)
    for (int j = 0; j < v.nj(); j++)
      s[static_cast<size_t>(i) * v.nj() + j] = v.at(i, j, k);
  return s;
}

struct TrainCase {
  Volume ct_n, dose_n;        // normalized to [-1, 1]
  std::vector<Volume> cond;   // conditioning stack (masks or SDMs)
};

struct BatchSlot {
  std::vector<double> ct, dose;
  std::vector<std::vector<double>> cond;
};

// flip -> rotate -> zoom, with draws consumed in that fixed order
void augment_slot(BatchSlot& s, int H, int W, const RunConfig& cfg, Rng& rng) {
  const bool is_mask_mode = cfg.conditioning == Conditioning::kMask;
  if (cfg.training.aug_flip && rng.coin()) {
    flip_j(s.ct, H, W);
    flip_j(s.dose, H, W);
    for (auto& c : s.cond) flip_j(c, H, W);
  }
  if (cfg.training.aug_rotate && rng.coin()) {
    rot90(s.ct, H, W);
    rot90(s.dose, H, W);
    for (auto& c : s.cond) rot90(c, H, W);
  }
  if (cfg.training.aug_zoom && rng.coin()) {
    double z = rng.uniform(0.9, 1.1);
    s.ct = zoom2d(s.ct, H, W, z, false, ZoomFill::kConst, -1.0);
    s.dose = zoom2d(s.dose, H, W, z, false, ZoomFill::kConst, -1.0);
    for (auto& c : s.cond) {
      if (is_mask_mode) {
        c = zoom2d(c, H, W, z, true, ZoomFill::kConst, 0.0);
      } else {
        c = zoom2d(c, H, W, z, false, ZoomFill::kClamp, 0.0);
        for (double& v : c) v *= z;  // distances stretch with the image
      }
    }
  }
}

// AdamW with decoupled weight decay; moment math in double
void adamw_step(ParamStore<float>& ps, double lr, double wd, int step) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, step);
  const double c2 = 1.0 - std::pow(b2, step);
  for (Param<float>* p : ps.all()) {
    if (p->m.empty()) p->m.assign(p->w.size(), 0.0f);
    if (p->v.empty()) p->v.assign(p->w.size(), 0.0f);
    for (size_t i = 0; i < p->w.size(); i++) {
      double g = p->g[i];
      double m = b1 * p->m[i] + (1.0 - b1) * g;
      double v = b2 * p->v[i] + (1.0 - b2) * g * g;
      p->m[i] = static_cast<float>(m);
      p->v[i] = static_cast<float>(v);
      double update = (m / c1) / (std::sqrt(v / c2) + eps) + wd * p->w[i];
      p->w[i] = static_cast<float>(p->w[i] - lr * update);
    }
  }
}

}  // namespace

std::string run_train(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  blas_single_thread();
  auto ids = list_case_ids(cfg.data.root);
  if (static_cast<int>(ids.size()) != cfg.data.count)
    throw std::runtime_error("dataset has " + std::to_string(ids.size()) +
                             " cases but config expects " +
                             std::to_string(cfg.data.count));
  SplitIds split = split_dataset(ids, cfg);

  std::vector<TrainCase> cases;
  cases.reserve(split.train.size());
  int H = 0, W = 0, nk = 0;
  for (const auto& id : split.train) {
    LoadedCase lc = load_case((fs::path(cfg.data.root) / id).string());
    if (static_cast<int>(lc.rois.size()) != cfg.model.sdm_channels)
      throw std::runtime_error("case " + id + " has " +
                               std::to_string(lc.rois.size()) +
                               " rois but model expects " +
                               std::to_string(cfg.model.sdm_channels));
    TrainCase tc;
    tc.ct_n = normalize_ct(lc.ct);
    tc.dose_n = normalize_dose(lc.dose);
    tc.cond = build_cond_stack(lc, cfg.conditioning);
    if (cases.empty()) {
      H = tc.ct_n.ni();
      W = tc.ct_n.nj();
      nk = tc.ct_n.nk();
    } else if (tc.ct_n.ni() != H || tc.ct_n.nj() != W || tc.ct_n.nk() != nk) {
      throw std::runtime_error("case " + id + " has mismatched grid shape");
    }
    cases.push_back(std::move(tc));
  }
  if (cfg.training.aug_rotate && H != W)
    throw std::invalid_argument(
        "rotation augmentation needs square in-plane slices");

  NoiseSchedule sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.alpha1,
                                             cfg.schedule.alphaT);
  FusionDenoiser<float> model(cfg.model, cfg.training.seed);

  fs::create_directories(out_dir);
  std::string cfg_json = run_config_to_json(cfg);
  std::ofstream loss_csv(fs::path(out_dir) / "loss.csv",
                         std::ios::binary | std::ios::trunc);
  if (!loss_csv) throw std::runtime_error("cannot write loss log in " + out_dir);
  loss_csv << "iteration,loss,lr\n";

  const int B = cfg.training.batch;
  const int C = cfg.model.sdm_channels;
  const size_t hw = static_cast<size_t>(H) * W;
  const int total = cfg.training.iterations;
  const uint64_t seed = cfg.training.seed;

  std::vector<float> yt_buf(B * hw), ct_buf(B * hw), eps_buf(B * hw),
      cond_buf(static_cast<size_t>(B) * C * hw);
  std::vector<int> ts(B);

  for (int it = 1; it <= total; it++) {
    Rng pick(derive_seed(seed, kPickTag, static_cast<uint64_t>(it)));
    for (int b = 0; b < B; b++) {
      const auto ci = static_cast<size_t>(
          pick.uniform_int(0, static_cast<int64_t>(cases.size()) - 1));
      const int k = static_cast<int>(pick.uniform_int(0, nk - 1));
      const TrainCase& tc = cases[ci];

      BatchSlot slot;
      slot.ct = gather_slice(tc.ct_n, k);
      slot.dose = gather_slice(tc.dose_n, k);
      for (const auto& c : tc.cond) slot.cond.push_back(gather_slice(c, k));
      Rng aug(derive_seed(seed, kAugTag, static_cast<uint64_t>(it),
                          static_cast<uint64_t>(b)));
      augment_slot(slot, H, W, cfg, aug);

      Rng noise(derive_seed(seed, kNoiseTag, static_cast<uint64_t>(it),
                            static_cast<uint64_t>(b)));
      const int t = static_cast<int>(noise.uniform_int(1, sched.T));
      ts[b] = t;
      std::vector<double> eps(hw);
      noise.fill_normal(eps.data(), hw);
      const double sa = sched.sqrt_ab(t), sb = sched.sqrt_one_minus_ab(t);
      for (size_t i = 0; i < hw; i++) {
        yt_buf[b * hw + i] = static_cast<float>(sa * slot.dose[i] + sb * eps[i]);
        ct_buf[b * hw + i] = static_cast<float>(slot.ct[i]);
        eps_buf[b * hw + i] = static_cast<float>(eps[i]);
      }
      for (int c = 0; c < C; c++)
        for (size_t i = 0; i < hw; i++)
          cond_buf[(static_cast<size_t>(b) * C + c) * hw + i] =
              static_cast<float>(slot.cond[c][i]);
    }

    Tape<float> tape;
    auto y = tape.input({B, 1, H, W}, yt_buf, false);
    auto ct = tape.input({B, 1, H, W}, ct_buf, false);
    auto cond = tape.input({B, C, H, W}, cond_buf, false);
    auto target = tape.input({B, 1, H, W}, eps_buf, false);
    auto eps_hat = model.forward(tape, y, ct, cond, ts, /*train=*/true);
    auto diff = sub(eps_hat, target);
    auto loss = cfg.training.l2_loss ? mean_all(mul(diff, diff))
                                     : mean_all(abs_val(diff));
    const double loss_val = loss.v()[0];
    if (!std::isfinite(loss_val))
      throw std::runtime_error("training diverged: non-finite loss at iteration " +
                               std::to_string(it));
    model.params().zero_grad();
    tape.backward(loss);

    // step decay at 40% and 80% of the run
    int stage = (5 * it > 2 * total ? 1 : 0) + (5 * it > 4 * total ? 1 : 0);
    const double lr = cfg.training.lr * std::pow(cfg.training.lr_step_decay, stage);
    adamw_step(model.params(), lr, cfg.training.weight_decay, it);

    char line[96];
    std::snprintf(line, sizeof(line), "%d,%.10g,%.10g\n", it, loss_val, lr);
    loss_csv << line;

    if (cfg.training.checkpoint_every > 0 && it % cfg.training.checkpoint_every == 0 &&
        it < total) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_%06d.json", it);
      save_checkpoint((fs::path(out_dir) / name).string(), cfg.model, it,
                      model.params(), true, cfg_json);
    }
  }
  loss_csv.close();

  std::string final_path = (fs::path(out_dir) / "ckpt_final.json").string();
  save_checkpoint(final_path, cfg.model, total, model.params(), true, cfg_json);
  return final_path;
}

Volume run_predict(const std::string& ckpt_path, const std::string& case_dir,
                   int steps, uint64_t seed, int threads) {
  blas_single_thread();
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  if (ckpt.run_config_json.empty())
    throw std::runtime_error("checkpoint lacks a run configuration snapshot");
  RunConfig cfg = run_config_from_json(ckpt.run_config_json);

  LoadedCase lc = load_case(case_dir);
  if (static_cast<int>(lc.rois.size()) != ckpt.config.sdm_channels)
    throw std::runtime_error("case " + lc.id + " has " +
                             std::to_string(lc.rois.size()) +
                             " rois but model expects " +
                             std::to_string(ckpt.config.sdm_channels));
  Volume ct_n = normalize_ct(lc.ct);
  std::vector<Volume> cond = build_cond_stack(lc, cfg.conditioning);

  NoiseSchedule sched = make_linear_schedule(cfg.schedule.T, cfg.schedule.alpha1,
                                             cfg.schedule.alphaT);
  DdimPlan plan = make_tau(steps, sched);

  const int H = ct_n.ni(), W = ct_n.nj(), nk = ct_n.nk();
  const int C = ckpt.config.sdm_channels;
  const size_t hw = static_cast<size_t>(H) * W;
  Volume out = Volume::make(ct_n.shape, ct_n.spacing_mm, VolKind::NORMALIZED);
  FusionDenoiser<float>& model = *ckpt.model;

  std::string slice_error;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(std::max(1, threads))
#endif
  for (int k = 0; k < nk; k++) {
    try {
      std::vector<double> ct2d = gather_slice(ct_n, k);
      std::vector<double> cond2d;
      cond2d.reserve(C * hw);
      for (const auto& c : cond) {
        auto s = gather_slice(c, k);
        cond2d.insert(cond2d.end(), s.begin(), s.end());
      }
      std::vector<float> ctf(ct2d.begin(), ct2d.end());
      std::vector<float> condf(cond2d.begin(), cond2d.end());
      EpsModel fn = [&](const std::vector<double>& y_t,
                        const std::vector<double>&, const std::vector<double>&,
                        int t) {
        std::vector<float> yf(y_t.begin(), y_t.end());
        std::vector<float> ef = model.eval(yf, ctf, condf, t, H, W);
        return std::vector<double>(ef.begin(), ef.end());
      };
      uint64_t slice_seed =
          derive_seed(seed, hash_str(lc.id), static_cast<uint64_t>(k));
      std::vector<double> y0 = sample(fn, ct2d, cond2d, plan, sched, slice_seed);
      for (int i = 0; i < H; i++)
        for (int j = 0; j < W; j++)
          out.at(i, j, k) = y0[static_cast<size_t>(i) * W + j];
    } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (slice_error.empty())
        slice_error = "slice " + std::to_string(k) + ": " + e.what();
    }
  }
  if (!slice_error.empty()) throw std::runtime_error(slice_error);

  Volume dose = denormalize_dose(out);
  for (size_t i = 0; i < dose.values.size(); i++)
    if (lc.body.values[i] == 0.0) dose.values[i] = 0.0;
  return dose;
}

std::vector<RoiMetricSpec> load_metric_specs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open specs " + path);
  json j = json::parse(f);
  std::vector<RoiMetricSpec> specs;
  for (const auto& e : j) {
    RoiMetricSpec s;
    s.roi = e.at("roi").get<std::string>();
    s.kind = metric_kind_from_name(e.at("kind").get<std::string>());
    s.v_percent = e.value("v_percent", 0.0);
    s.threshold_gy = e.value("threshold_gy", 0.0);
    s.prescription_gy = e.value("prescription_gy", 0.0);
    specs.push_back(s);
  }
  if (specs.empty()) throw std::invalid_argument("specs file lists no metrics");
  return specs;
}

namespace {

json spec_result_to_json(const SpecResult& r) {
  json j;
  j["roi"] = r.spec.roi;
  j["kind"] = metric_kind_name(r.spec.kind);
  j["v_percent"] = r.spec.v_percent;
  j["threshold_gy"] = r.spec.threshold_gy;
  j["prescription_gy"] = r.spec.prescription_gy;
  j["pred"] = jnum(r.pred);
  j["truth"] = jnum(r.truth);
  j["delta"] = jnum(r.delta);
  return j;
}

json aggregate_stat(std::vector<double> vals) {
  json j;
  bool all_finite = true;
  for (double v : vals) all_finite = all_finite && std::isfinite(v);
  if (!all_finite) {
    bool all_inf = true;
    for (double v : vals)
      all_inf = all_inf && std::isinf(v) && v > 0;
    j["mean"] = "inf";
    j["std"] = all_inf ? json(0.0) : json("inf");
    return j;
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  if (vals.size() > 1) {
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size() - 1);
  }
  j["mean"] = mean;
  j["std"] = std::sqrt(var);
  return j;
}

void write_dvh_csv(const fs::path& path, const DvhCurve& pred,
                   const DvhCurve& truth) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "dose_gy,fraction_pred,fraction_truth\n";
  for (size_t i = 0; i < pred.dose_gy.size(); i++) {
    char line[96];
    std::snprintf(line, sizeof(line), "%.10g,%.10g,%.10g\n", pred.dose_gy[i],
                  pred.volume_fraction[i], truth.volume_fraction[i]);
    f << line;
  }
}

}  // namespace

EvaluateResult run_evaluate(const std::string& pred_dir,
                            const std::string& truth_root,
                            const std::string& specs_path,
                            const std::string& report_path) {
  auto specs = load_metric_specs(specs_path);

  std::vector<std::string> pred_ids;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    // a stored volume is a .json header with a sibling .raw payload
    fs::path raw = e.path();
    raw.replace_extension(".raw");
    if (e.path().extension() == ".json" && fs::exists(raw))
      pred_ids.push_back(e.path().stem().string());
  }
  std::sort(pred_ids.begin(), pred_ids.end());
  if (pred_ids.empty())
    throw std::runtime_error("no predicted volumes in " + pred_dir);

  std::vector<std::string> missing;
  for (const auto& id : pred_ids)
    if (!fs::is_directory(fs::path(truth_root) / id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "predictions without matching truth cases:";
    for (const auto& id : missing) msg += " " + id;
    throw std::runtime_error(msg);
  }

  EvaluateResult result;
  json cases_json;
  std::vector<double> v_mae, v_ssim, v_psnr, v_dose, v_vol;
  fs::path report_dir = fs::path(report_path).parent_path();
  if (!report_dir.empty()) fs::create_directories(report_dir);

  for (const auto& id : pred_ids) {
    Volume pred = read_volume((fs::path(pred_dir) / (id + ".json")).string());
    LoadedCase truth = load_case((fs::path(truth_root) / id).string());
    if (pred.shape != truth.dose.shape)
      throw std::runtime_error("case " + id + ": prediction grid mismatch");
    std::map<std::string, Volume> rois(truth.rois.begin(), truth.rois.end());
    MetricsReport r = score_report(pred, truth.dose, rois, specs, truth.body);

    json cj;
    cj["mae_gy"] = jnum(r.mae_gy);
    cj["ssim"] = jnum(r.ssim);
    cj["psnr_db"] = jnum(r.psnr_db);
    cj["dose_score_gy"] = jnum(r.dose_score_gy);
    cj["volume_score_percent"] = jnum(r.volume_score_percent);
    json sj = json::array();
    for (const auto& sr : r.per_spec) sj.push_back(spec_result_to_json(sr));
    cj["specs"] = sj;
    cases_json[id] = cj;

    for (const auto& [roi, curves] : r.dvh_curves) {
      fs::path csv = report_dir / ("dvh_" + id + "_" + roi + ".csv");
      write_dvh_csv(csv, curves.first, curves.second);
    }

    v_mae.push_back(r.mae_gy);
    v_ssim.push_back(r.ssim);
    v_psnr.push_back(r.psnr_db);
    v_dose.push_back(r.dose_score_gy);
    v_vol.push_back(r.volume_score_percent);
    result.per_case[id] = std::move(r);
  }
  result.case_count = static_cast<int>(pred_ids.size());

  json report;
  report["cases"] = cases_json;
  json agg;
  agg["mae_gy"] = aggregate_stat(v_mae);
  agg["ssim"] = aggregate_stat(v_ssim);
  agg["psnr_db"] = aggregate_stat(v_psnr);
  agg["dose_score_gy"] = aggregate_stat(v_dose);
  agg["volume_score_percent"] = aggregate_stat(v_vol);
  agg["case_count"] = result.case_count;
  report["aggregate"] = agg;

  std::ofstream rf(report_path, std::ios::binary | std::ios::trunc);
  if (!rf) throw std::runtime_error("cannot write report " + report_path);
  rf << report.dump(2) << "\n";
  return result;
}

}  // namespace dosegen
