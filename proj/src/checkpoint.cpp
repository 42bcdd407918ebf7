#include "dosegen/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace dosegen {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace {

using nlohmann::json;

std::filesystem::path blob_path(const std::string& json_path) {
  std::filesystem::path p(json_path);
  p.replace_extension(".raw");
  return p;
}

json cfg_to_json_obj(const ModelConfig& c) {
  json j;
  j["base_channels"] = c.base_channels;
  j["levels"] = c.levels;
  j["res_blocks_per_level"] = c.res_blocks_per_level;
  j["sdm_channels"] = c.sdm_channels;
  j["timestep_embed_dim"] = c.timestep_embed_dim;
  j["norm_groups"] = c.norm_groups;
  j["channel_mult"] = c.channel_mult;
  j["multi_scale_fusion"] = c.multi_scale_fusion;
  j["fusion_former"] = c.fusion_former;
  j["swap_query_key"] = c.swap_query_key;
  j["scale_attention_logits"] = c.scale_attention_logits;
  return j;
}

ModelConfig cfg_from_json_obj(const json& j) {
  ModelConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.levels = j.value("levels", c.levels);
  c.res_blocks_per_level = j.value("res_blocks_per_level", c.res_blocks_per_level);
  c.sdm_channels = j.value("sdm_channels", c.sdm_channels);
  c.timestep_embed_dim = j.value("timestep_embed_dim", c.timestep_embed_dim);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.channel_mult = j.value("channel_mult", c.channel_mult);
  c.multi_scale_fusion = j.value("multi_scale_fusion", c.multi_scale_fusion);
  c.fusion_former = j.value("fusion_former", c.fusion_former);
  c.swap_query_key = j.value("swap_query_key", c.swap_query_key);
  c.scale_attention_logits = j.value("scale_attention_logits", c.scale_attention_logits);
  c.validate();
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) {
  return cfg_to_json_obj(c).dump(2) + "\n";
}

ModelConfig model_config_from_json(const std::string& text) {
  return cfg_from_json_obj(json::parse(text));
}

void save_checkpoint(const std::string& json_path, const ModelConfig& cfg,
                     int iteration, ParamStore<float>& params,
                     bool include_optimizer, const std::string& run_config_json) {
  json manifest;
  manifest["config"] = cfg_to_json_obj(cfg);
  manifest["iteration"] = iteration;
  manifest["data_file"] = blob_path(json_path).filename().string();
  if (!run_config_json.empty())
    manifest["run_config"] = json::parse(run_config_json);

  std::vector<float> blob;
  json tensors = json::array();
  auto append = [&](const std::string& name, const Shape& shape,
                    const std::vector<float>& data) {
    json e;
    e["name"] = name;
    e["shape"] = shape;
    e["offset"] = blob.size();
    e["len"] = data.size();
    tensors.push_back(e);
    blob.insert(blob.end(), data.begin(), data.end());
  };
  auto all = params.all();
  for (auto* p : all) append(p->name, p->shape, p->w);
  if (include_optimizer) {
    for (auto* p : all)
      if (!p->m.empty()) append("opt.m." + p->name, p->shape, p->m);
    for (auto* p : all)
      if (!p->v.empty()) append("opt.v." + p->name, p->shape, p->v);
  }
  manifest["tensors"] = tensors;

  std::ofstream raw(blob_path(json_path), std::ios::binary | std::ios::trunc);
  if (!raw) throw std::runtime_error("cannot write " + blob_path(json_path).string());
  raw.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!raw) throw std::runtime_error("short write to checkpoint blob");
  raw.close();

  std::ofstream mf(json_path, std::ios::binary | std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write " + json_path);
  mf << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& json_path) {
  std::ifstream mf(json_path, std::ios::binary);
  if (!mf) throw std::runtime_error("cannot open " + json_path);
  json manifest = json::parse(mf);

  LoadedCheckpoint out;
  out.config = cfg_from_json_obj(manifest.at("config"));
  out.iteration = manifest.value("iteration", 0);
  if (manifest.contains("run_config"))
    out.run_config_json = manifest["run_config"].dump();
  out.model = std::make_unique<FusionDenoiser<float>>(out.config, /*seed=*/0);

  std::filesystem::path raw_path =
      std::filesystem::path(json_path).parent_path() /
      manifest.at("data_file").get<std::string>();
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw std::runtime_error("cannot open " + raw_path.string());
  raw.seekg(0, std::ios::end);
  auto bytes = static_cast<size_t>(raw.tellg());
  raw.seekg(0);
  if (bytes % sizeof(float) != 0)
    throw std::runtime_error("checkpoint blob not float32-aligned");
  std::vector<float> blob(bytes / sizeof(float));
  raw.read(reinterpret_cast<char*>(blob.data()),
           static_cast<std::streamsize>(bytes));
  if (!raw) throw std::runtime_error("short read from checkpoint blob");

  auto& ps = out.model->params();
  for (const auto& e : manifest.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    size_t offset = e.at("offset").get<size_t>();
    size_t len = e.at("len").get<size_t>();
    if (offset + len > blob.size())
      throw std::runtime_error("tensor '" + name + "' overruns checkpoint blob");
    std::vector<float>* dst = nullptr;
    std::string base = name;
    if (name.rfind("opt.m.", 0) == 0) {
      base = name.substr(6);
      dst = &ps.get(base).m;
      out.has_optimizer = true;
    } else if (name.rfind("opt.v.", 0) == 0) {
      base = name.substr(6);
      dst = &ps.get(base).v;
      out.has_optimizer = true;
    } else {
      dst = &ps.get(base).w;
    }
    Param<float>& p = ps.get(base);
    if (e.at("shape").get<std::vector<int>>() != p.shape)
      throw std::runtime_error("tensor '" + name + "' shape mismatch");
    if (len != static_cast<size_t>(p.numel()))
      throw std::runtime_error("tensor '" + name + "' length mismatch");
    dst->assign(blob.begin() + offset, blob.begin() + offset + len);
  }
  return out;
}

}  // namespace dosegen
