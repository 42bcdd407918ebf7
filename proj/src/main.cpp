#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "dosegen/pipeline.hpp"
#include "dosegen/sdm.hpp"
#include "dosegen/tensor.hpp"

namespace fs = std::filesystem;
using namespace dosegen;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int cmd_phantom_gen(const std::string& config_path, const std::string& out_dir) {
  PhantomGenConfig cfg;
  if (!config_path.empty())
    cfg = phantom_gen_config_from_json(read_text(config_path));
  write_phantom_dataset(out_dir, cfg.count, cfg.seed, cfg.protocol);
  std::cout << "wrote " << cfg.count << " cases to " << out_dir << "\n";
  return 0;
}

int cmd_make_sdm(const std::string& rois_dir, const std::string& spacing,
                 const std::string& out_dir) {
  if (spacing != "auto" && spacing != "unit")
    throw std::invalid_argument("--spacing must be 'auto' or 'unit'");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(rois_dir)) {
    fs::path raw = e.path();
    raw.replace_extension(".raw");
    if (e.path().extension() == ".json" && fs::exists(raw))
      files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(out_dir);
  int written = 0;
  for (const auto& p : files) {
    Volume v = read_volume(p);
    if (v.kind != VolKind::MASK) {
      std::cerr << "skipping non-mask volume " << p << "\n";
      continue;
    }
    Volume s = spacing == "auto" ? psdm(v) : isdm(v);
    std::string stem = fs::path(p).stem().string();
    write_volume((fs::path(out_dir) / (stem + ".json")).string(), s);
    written++;
  }
  if (written == 0)
    throw std::runtime_error("no mask volumes found in " + rois_dir);
  std::cout << "wrote " << written << " signed distance maps to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = load_run_config(config_path);
  std::string final_path = run_train(cfg, out_dir);
  std::cout << "final checkpoint: " << final_path << "\n";
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& case_dir, int steps,
                uint64_t seed, const std::string& out_path, bool deterministic) {
  int threads = 1;
#ifdef _OPENMP
  if (!deterministic) threads = omp_get_max_threads();
#endif
  Volume dose = run_predict(ckpt, case_dir, steps, seed, threads);
  write_volume(out_path, dose);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& truth_root,
                 const std::string& specs, const std::string& report) {
  EvaluateResult r = run_evaluate(pred_dir, truth_root, specs, report);
  std::cout << "evaluated " << r.case_count << " cases; report at " << report
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  blas_single_thread();

  CLI::App app{"dose prediction on synthetic phantoms: dataset synthesis, "
               "signed distance maps, diffusion training, sampling, metrics"};
  app.require_subcommand(1);
  app.fallthrough();
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic,
               "single-lane execution for bit-stable outputs");

  auto* gen = app.add_subcommand("phantom-gen", "synthesize a phantom dataset");
  std::string gen_config, gen_out;
  gen->add_option("--config", gen_config, "generator config JSON");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  auto* sdm = app.add_subcommand("make-sdm", "signed distance maps from masks");
  std::string sdm_rois, sdm_spacing = "auto", sdm_out;
  sdm->add_option("--rois", sdm_rois, "directory of mask volumes")->required();
  sdm->add_option("--spacing", sdm_spacing,
                  "'auto' (stored mm spacing) or 'unit' (index space)");
  sdm->add_option("--out", sdm_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the denoiser");
  std::string train_config, train_out;
  train->add_option("--config", train_config, "run config JSON")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();

  auto* predict = app.add_subcommand("predict", "sample a dose volume");
  std::string pr_ckpt, pr_case, pr_out;
  int pr_steps = 8;
  uint64_t pr_seed = 0;
  predict->add_option("--ckpt", pr_ckpt, "checkpoint manifest")->required();
  predict->add_option("--case", pr_case, "case directory")->required();
  predict->add_option("--steps", pr_steps, "sampling steps");
  predict->add_option("--seed", pr_seed, "sampling seed");
  predict->add_option("--out", pr_out, "output volume path")->required();

  auto* eval = app.add_subcommand("evaluate", "score predictions against truth");
  std::string ev_pred, ev_truth, ev_specs, ev_out;
  eval->add_option("--pred", ev_pred, "directory of predicted volumes")->required();
  eval->add_option("--truth", ev_truth, "dataset root with truth cases")->required();
  eval->add_option("--specs", ev_specs, "metric specs JSON")->required();
  eval->add_option("--out", ev_out, "report JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_phantom_gen(gen_config, gen_out);
    if (sdm->parsed()) return cmd_make_sdm(sdm_rois, sdm_spacing, sdm_out);
    if (train->parsed()) return cmd_train(train_config, train_out);
    if (predict->parsed())
      return cmd_predict(pr_ckpt, pr_case, pr_steps, pr_seed, pr_out,
                         deterministic);
    if (eval->parsed()) return cmd_evaluate(ev_pred, ev_truth, ev_specs, ev_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
