#pragma once
// Orchestration: dataset synthesis on disk, run configuration, the training
// loop (AdamW + augmentation + checkpointing), slice-wise volume prediction,
// and batch evaluation with report/DVH export.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dosegen/metrics.hpp"
#include "dosegen/net.hpp"
#include "dosegen/phantom.hpp"
#include "dosegen/volume.hpp"

namespace dosegen {

enum class Conditioning { kMask, kIsdm, kPsdm };
std::string conditioning_name(Conditioning c);
Conditioning conditioning_from_name(const std::string& s);

struct RunConfig {
  struct Schedule {
    int T = 1000;
    double alpha1 = 0.9999;
    double alphaT = 0.08;
  } schedule;
  struct Sampler {
    int S = 8;
    uint64_t seed = 0;
  } sampler;
  ModelConfig model;
  struct Training {
    double lr = 1e-4;
    int batch = 8;
    int iterations = 20000;
    double weight_decay = 0.01;
    double lr_step_decay = 0.5;  // applied at 40% and 80% of the run
    int checkpoint_every = 5000;
    bool l2_loss = false;
    bool aug_flip = true;
    bool aug_rotate = true;
    bool aug_zoom = true;
    uint64_t seed = 0;
  } training;
  struct Data {
    std::string root;
    int count = 128;
    double split_train = 0.7;
    double split_val = 0.1;
    double split_test = 0.2;
  } data;
  Conditioning conditioning = Conditioning::kPsdm;

  void validate() const;
};

std::string run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

// dataset synthesis: case_### directories plus a dataset.json manifest
void write_phantom_dataset(const std::string& out_dir, int count,
                           uint64_t seed, const PhantomProtocol& proto);

struct LoadedCase {
  std::string id;
  Volume ct, dose, body;
  std::vector<std::pair<std::string, Volume>> rois;  // target first
};

std::vector<std::string> list_case_ids(const std::string& root);
LoadedCase load_case(const std::string& case_dir);

// conditioning stack: roi masks as-is, or signed distance maps per mode
std::vector<Volume> build_cond_stack(const LoadedCase& c, Conditioning mode);

struct SplitIds {
  std::vector<std::string> train, val, test;
};
SplitIds split_dataset(const std::vector<std::string>& ids, const RunConfig& cfg);

// training entry point; writes loss.csv and checkpoints into out_dir and
// returns the path of the final checkpoint manifest
std::string run_train(const RunConfig& cfg, const std::string& out_dir);

// full-volume prediction in Gy (body-masked, range-clamped)
Volume run_predict(const std::string& ckpt_path, const std::string& case_dir,
                   int steps, uint64_t seed, int threads = 1);

struct EvaluateResult {
  std::map<std::string, MetricsReport> per_case;
  int case_count = 0;
};

// pred_dir holds <case_id>.json volumes; truth_root holds case directories.
// Writes report_path (JSON) and per-roi DVH CSVs next to it.
EvaluateResult run_evaluate(const std::string& pred_dir,
                            const std::string& truth_root,
                            const std::string& specs_path,
                            const std::string& report_path);

std::vector<RoiMetricSpec> load_metric_specs(const std::string& path);

// phantom-gen config file: {"count", "seed"} plus optional protocol overrides
struct PhantomGenConfig {
  int count = 128;
  uint64_t seed = 0;
  PhantomProtocol protocol;
};
PhantomGenConfig phantom_gen_config_from_json(const std::string& text);

}  // namespace dosegen
