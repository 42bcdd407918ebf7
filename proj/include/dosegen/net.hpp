#pragma once
// Conditional denoiser: three UNet encoders (noisy dose, CT, distance-map
// stack) with per-level additive fusion feeding the decoder skips, a
// token-attention fusion block at the lowest resolution, and AdaGN timestep
// conditioning in every res block. Templated on scalar type so the same graph
// runs in float for training and double for finite-difference verification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dosegen/rng.hpp"
#include "dosegen/tensor.hpp"

namespace dosegen {

struct ModelConfig {
  int base_channels = 32;
  int levels = 4;  // number of stride-2 downsamplings (and matching ups)
  int res_blocks_per_level = 2;
  int sdm_channels = 3;
  int timestep_embed_dim = 128;
  int norm_groups = 8;
  std::vector<int> channel_mult;  // per-level multiplier; defaulted when empty
  bool multi_scale_fusion = true;
  bool fusion_former = true;
  bool swap_query_key = false;        // key<->query assignment of CT vs SDM
  bool scale_attention_logits = false;  // optional 1/sqrt(d) on logits

  std::vector<int> mults() const {
    if (!channel_mult.empty()) {
      if (static_cast<int>(channel_mult.size()) != levels)
        throw std::invalid_argument("channel_mult length must equal levels");
      return channel_mult;
    }
    static const std::vector<int> pattern = {1, 2, 2, 4};
    std::vector<int> m;
    for (int l = 0; l < levels; l++)
      m.push_back(l < static_cast<int>(pattern.size()) ? pattern[l] : pattern.back());
    return m;
  }

  void validate() const {
    if (base_channels < 2 || base_channels % 2 != 0)
      throw std::invalid_argument("base_channels must be even and >= 2");
    if (levels < 1) throw std::invalid_argument("levels must be >= 1");
    if (res_blocks_per_level < 1)
      throw std::invalid_argument("res_blocks_per_level must be >= 1");
    if (sdm_channels < 1) throw std::invalid_argument("sdm_channels must be >= 1");
    if (timestep_embed_dim < 2)
      throw std::invalid_argument("timestep_embed_dim must be >= 2");
    if (norm_groups < 1) throw std::invalid_argument("norm_groups must be >= 1");
    for (int m : mults())
      if (m < 1 || (base_channels * m) % norm_groups != 0)
        throw std::invalid_argument(
            "norm_groups must divide every level's channel count");
  }
};

// JSON bridge lives in checkpoint.cpp
std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

// sinusoidal position code of an integer timestep; dim must be even
inline std::vector<double> timestep_sinusoid(int t, int dim) {
  if (t < 1) throw std::invalid_argument("timestep must be >= 1");
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument("sinusoid dim must be even and >= 2");
  const int half = dim / 2;
  std::vector<double> e(dim);
  for (int i = 0; i < half; i++) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

template <class T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : seed_(seed) {}

  // Gaussian init with the given std; a fresh stream per name keeps the init
  // independent of registration order.
  Param<T>& create(const std::string& name, Shape shape, double stddev) {
    Param<T>& p = register_param(name, std::move(shape));
    Rng rng(derive_seed(seed_, hash_str(name.c_str())));
    for (auto& w : p.w) w = static_cast<T>(stddev * rng.normal());
    return p;
  }

  Param<T>& create_const(const std::string& name, Shape shape, double value) {
    Param<T>& p = register_param(name, std::move(shape));
    for (auto& w : p.w) w = static_cast<T>(value);
    return p;
  }

  Param<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return *params_[it->second];
  }

  std::vector<Param<T>*> all() {
    std::vector<Param<T>*> v;
    for (auto& p : params_) v.push_back(p.get());
    return v;
  }
  int64_t total_numel() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) std::fill(p->g.begin(), p->g.end(), T(0));
  }

 private:
  Param<T>& register_param(const std::string& name, Shape shape) {
    if (index_.count(name))
      throw std::logic_error("duplicate parameter: " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->shape = std::move(shape);
    p->w.assign(static_cast<size_t>(shape_numel(p->shape)), T(0));
    p->g.assign(p->w.size(), T(0));
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  uint64_t seed_;
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::map<std::string, size_t> index_;
};

namespace netdetail {

// binds parameters onto the active tape; inference skips gradient buffers
template <class T>
struct Ctx {
  Tape<T>* tp;
  bool train;
  Tensor<T> operator()(Param<T>& p) {
    return train ? tp->leaf(p) : tp->input(p.shape, p.w, false);
  }
};

constexpr double kSmallInit = 0.1;  // residual/head tails start near zero

inline double conv_std(int cin, int k) { return std::sqrt(2.0 / (cin * k * k)); }
inline double lin_std(int in) { return std::sqrt(1.0 / in); }

}  // namespace netdetail

// GN -> SiLU -> conv3x3 -> AdaGN(e_t) -> SiLU -> conv3x3, plus residual
// (1x1 conv on the skip when channel counts change)
template <class T>
struct ResBlock {
  int cin = 0, cout = 0, groups = 0;
  Param<T>*gn1_g, *gn1_b, *c1_w, *c1_b;
  Param<T>*ada_g, *ada_b, *proj_w, *proj_b;
  Param<T>*c2_w, *c2_b;
  Param<T>*sk_w = nullptr, *sk_b = nullptr;

  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& prefix, int cin_, int cout_,
           int groups_, int emb_dim) {
    cin = cin_;
    cout = cout_;
    groups = groups_;
    using namespace netdetail;
    gn1_g = &ps.create_const(prefix + ".gn1.g", {cin}, 1.0);
    gn1_b = &ps.create_const(prefix + ".gn1.b", {cin}, 0.0);
    c1_w = &ps.create(prefix + ".conv1.w", {cout, cin, 3, 3}, conv_std(cin, 3));
    c1_b = &ps.create_const(prefix + ".conv1.b", {cout}, 0.0);
    ada_g = &ps.create_const(prefix + ".ada.gn.g", {cout}, 1.0);
    ada_b = &ps.create_const(prefix + ".ada.gn.b", {cout}, 0.0);
    proj_w = &ps.create(prefix + ".ada.proj.w", {2 * cout, emb_dim},
                        lin_std(emb_dim));
    // scale half starts at 1, shift half at 0 so modulation opens as identity
    {
      Param<T>& pb = ps.create_const(prefix + ".ada.proj.b", {2 * cout}, 0.0);
      for (int c = 0; c < cout; c++) pb.w[c] = T(1);
      proj_b = &pb;
    }
    c2_w = &ps.create(prefix + ".conv2.w", {cout, cout, 3, 3},
                      kSmallInit * conv_std(cout, 3));
    c2_b = &ps.create_const(prefix + ".conv2.b", {cout}, 0.0);
    if (cin != cout) {
      sk_w = &ps.create(prefix + ".skip.w", {cout, cin, 1, 1}, conv_std(cin, 1));
      sk_b = &ps.create_const(prefix + ".skip.b", {cout}, 0.0);
    }
  }

  Tensor<T> apply(netdetail::Ctx<T>& c, Tensor<T> x, Tensor<T> emb) const {
    const T eps = static_cast<T>(1e-5);
    auto h = group_norm(x, groups, c(*gn1_g), c(*gn1_b), eps);
    h = silu(h);
    h = bias_c(conv2d(h, c(*c1_w), 1, 1), c(*c1_b));
    // AdaGN: per-sample channel modulation from the timestep embedding
    auto se = linear(silu(emb), c(*proj_w), c(*proj_b));
    auto s = slice_cols(se, 0, cout);
    auto b = slice_cols(se, cout, cout);
    h = scale_shift_nc(group_norm(h, groups, c(*ada_g), c(*ada_b), eps), s, b);
    h = silu(h);
    h = bias_c(conv2d(h, c(*c2_w), 1, 1), c(*c2_b));
    Tensor<T> skip = x;
    if (sk_w != nullptr) skip = bias_c(conv2d(x, c(*sk_w), 1, 0), c(*sk_b));
    return add(h, skip);
  }
};

// token attention over 2x2 patches of the bottleneck maps:
// f_att = Softmax(beta(q_tokens) gamma(k_tokens)^T) delta(v_tokens) + delta(v_tokens)
// f_ffb = MLP(LN(f_att)) + f_att, then a linear back to token dim
template <class T>
struct FusionFormer {
  int dim = 0;  // token dim = 4 * bottleneck channels
  bool scale_logits = false;
  Param<T>*q_w, *q_b, *q_g, *q_bb;
  Param<T>*k_w, *k_b, *k_g, *k_bb;
  Param<T>*v_w, *v_b, *v_g, *v_bb;
  Param<T>*ln2_g, *ln2_b, *m1_w, *m1_b, *m2_w, *m2_b, *out_w, *out_b;

  FusionFormer() = default;
  FusionFormer(ParamStore<T>& ps, const std::string& prefix, int dim_,
               bool scale_logits_) {
    dim = dim_;
    scale_logits = scale_logits_;
    using namespace netdetail;
    auto embed = [&](const char* nm, Param<T>*& w, Param<T>*& b, Param<T>*& g,
                     Param<T>*& bb) {
      w = &ps.create(prefix + "." + nm + ".lin.w", {dim, dim}, lin_std(dim));
      b = &ps.create_const(prefix + "." + nm + ".lin.b", {dim}, 0.0);
      g = &ps.create_const(prefix + "." + nm + ".ln.g", {dim}, 1.0);
      bb = &ps.create_const(prefix + "." + nm + ".ln.b", {dim}, 0.0);
    };
    embed("q", q_w, q_b, q_g, q_bb);
    embed("k", k_w, k_b, k_g, k_bb);
    embed("v", v_w, v_b, v_g, v_bb);
    ln2_g = &ps.create_const(prefix + ".ln2.g", {dim}, 1.0);
    ln2_b = &ps.create_const(prefix + ".ln2.b", {dim}, 0.0);
    m1_w = &ps.create(prefix + ".mlp.l1.w", {4 * dim, dim}, lin_std(dim));
    m1_b = &ps.create_const(prefix + ".mlp.l1.b", {4 * dim}, 0.0);
    m2_w = &ps.create(prefix + ".mlp.l2.w", {dim, 4 * dim}, lin_std(4 * dim));
    m2_b = &ps.create_const(prefix + ".mlp.l2.b", {dim}, 0.0);
    out_w = &ps.create(prefix + ".out.w", {dim, dim}, lin_std(dim));
    out_b = &ps.create_const(prefix + ".out.b", {dim}, 0.0);
  }

  // q_src/k_src/v_src: [N, C, h, w] with h, w even
  Tensor<T> apply(netdetail::Ctx<T>& c, Tensor<T> q_src, Tensor<T> k_src,
                  Tensor<T> v_src) const {
    const Shape& s = v_src.shape();
    const int h = s[2], w = s[3];
    if (h % 2 != 0 || w % 2 != 0)
      throw std::invalid_argument(
          "fusion block needs even bottleneck extents (2x2 patching)");
    const T eps = static_cast<T>(1e-5);
    auto fq = layer_norm(linear(patchify2(q_src), c(*q_w), c(*q_b)), c(*q_g),
                         c(*q_bb), eps);
    auto fk = layer_norm(linear(patchify2(k_src), c(*k_w), c(*k_b)), c(*k_g),
                         c(*k_bb), eps);
    auto fv = layer_norm(linear(patchify2(v_src), c(*v_w), c(*v_b)), c(*v_g),
                         c(*v_bb), eps);
    auto logits = bmm_nt(fq, fk);
    if (scale_logits)
      logits = scale(logits, static_cast<T>(1.0 / std::sqrt(double(dim))));
    auto att = softmax_last(logits);
    auto f_att = add(bmm(att, fv), fv);
    auto hmid = linear(layer_norm(f_att, c(*ln2_g), c(*ln2_b), eps), c(*m1_w),
                       c(*m1_b));
    auto f_ffb = add(linear(silu(hmid), c(*m2_w), c(*m2_b)), f_att);
    auto out = linear(f_ffb, c(*out_w), c(*out_b));
    return unpatchify2(out, h, w);
  }
};

template <class T>
class FusionDenoiser {
 public:
  FusionDenoiser(const ModelConfig& cfg, uint64_t seed)
      : cfg_(cfg), ps_(derive_seed(seed, 0x30DE1ull)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }

  // y_t, ct: [N,1,H,W]; sdm: [N,sdm_channels,H,W]; ts: one timestep per sample
  Tensor<T> forward(Tape<T>& tape, Tensor<T> y_t, Tensor<T> ct, Tensor<T> sdm,
                    const std::vector<int>& ts, bool train) {
    check_inputs(y_t, ct, sdm, ts);
    netdetail::Ctx<T> c{&tape, train};
    const int n = y_t.shape()[0];
    const int H = y_t.shape()[2], W = y_t.shape()[3];

    // timestep embedding: sinusoid -> linear -> SiLU -> linear
    std::vector<T> sin_buf(static_cast<size_t>(n) * cfg_.base_channels);
    for (int i = 0; i < n; i++) {
      auto e = timestep_sinusoid(ts[i], cfg_.base_channels);
      for (int j = 0; j < cfg_.base_channels; j++)
        sin_buf[static_cast<size_t>(i) * cfg_.base_channels + j] =
            static_cast<T>(e[j]);
    }
    auto emb0 = tape.input({n, cfg_.base_channels}, sin_buf, false);
    auto emb = linear(silu(linear(emb0, c(*te1_w_), c(*te1_b_))), c(*te2_w_),
                      c(*te2_b_));

    const int L = cfg_.levels;
    std::vector<Tensor<T>> skips(L);
    Tensor<T> bott_y, bott_ct, bott_sdm;

    if (cfg_.multi_scale_fusion) {
      std::vector<Tensor<T>> taps_y, taps_ct, taps_sdm;
      bott_y = run_encoder(c, enc_y_, y_t, emb, taps_y);
      bott_ct = run_encoder(c, enc_ct_, ct, emb, taps_ct);
      bott_sdm = run_encoder(c, enc_sdm_, sdm, emb, taps_sdm);
      for (int l = 0; l < L; l++)
        skips[l] = add(add(taps_y[l], taps_ct[l]), taps_sdm[l]);
    } else {
      auto x = concat_c(std::vector<Tensor<T>>{y_t, ct, sdm});
      std::vector<Tensor<T>> taps;
      bott_y = run_encoder(c, enc_y_, x, emb, taps);
      for (int l = 0; l < L; l++) skips[l] = taps[l];
    }

    Tensor<T> h = bott_y;
    if (cfg_.fusion_former) {
      if (cfg_.multi_scale_fusion) {
        Tensor<T> q = cfg_.swap_query_key ? bott_sdm : bott_ct;
        Tensor<T> k = cfg_.swap_query_key ? bott_ct : bott_sdm;
        h = ff_.apply(c, q, k, bott_y);
      } else {
        h = ff_.apply(c, bott_y, bott_y, bott_y);
      }
    }
    for (const auto& rb : mid_) h = rb.apply(c, h, emb);

    for (int l = L - 1; l >= 0; l--) {
      h = bias_c(conv2d(upsample_nearest2(h), c(*dec_[l].up_w), 1, 1),
                 c(*dec_[l].up_b));
      h = concat_c(h, skips[l]);
      for (const auto& rb : dec_[l].blocks) h = rb.apply(c, h, emb);
    }

    // The normalized head rescales every group to unit variance, so on its
    // own the output cannot track the amplitude of y_t; the zero-initialized
    // linear tap restores that degree of freedom.
    const T eps = static_cast<T>(1e-5);
    auto lin = bias_c(conv2d(h, c(*head_lw_), 1, 0), c(*head_lb_));
    h = silu(group_norm(h, cfg_.norm_groups, c(*head_g_), c(*head_b_), eps));
    h = bias_c(conv2d(h, c(*head_w_), 1, 1), c(*head_bb_));
    h = add(h, lin);
    if (h.shape() != Shape({n, 1, H, W}))
      throw std::logic_error("denoiser output shape drifted");
    return h;
  }

  // single-slice inference without a caller-managed tape
  std::vector<T> eval(const std::vector<T>& y, const std::vector<T>& ct,
                      const std::vector<T>& sdm, int t, int H, int W) {
    Tape<T> tape;
    auto yt = tape.input({1, 1, H, W}, y, false);
    auto ctt = tape.input({1, 1, H, W}, ct, false);
    auto sdt = tape.input({1, cfg_.sdm_channels, H, W}, sdm, false);
    auto out = forward(tape, yt, ctt, sdt, {t}, false);
    return out.v();
  }

 private:
  struct Encoder {
    Param<T>*stem_w, *stem_b;
    struct Level {
      std::vector<ResBlock<T>> blocks;
      Param<T>*down_w, *down_b;
    };
    std::vector<Level> levels;
  };
  struct DecLevel {
    Param<T>*up_w, *up_b;
    std::vector<ResBlock<T>> blocks;
  };

  void build() {
    using namespace netdetail;
    const auto mult = cfg_.mults();
    const int B = cfg_.base_channels;
    const int emb = cfg_.timestep_embed_dim;
    const int rb = cfg_.res_blocks_per_level;
    const int L = cfg_.levels;
    const int cb = B * mult[L - 1];  // bottleneck channels

    te1_w_ = &ps_.create("temb.l1.w", {emb, B}, lin_std(B));
    te1_b_ = &ps_.create_const("temb.l1.b", {emb}, 0.0);
    te2_w_ = &ps_.create("temb.l2.w", {emb, emb}, lin_std(emb));
    te2_b_ = &ps_.create_const("temb.l2.b", {emb}, 0.0);

    auto make_encoder = [&](Encoder& e, const std::string& nm, int in_ch) {
      e.stem_w = &ps_.create(nm + ".stem.w", {B * mult[0], in_ch, 3, 3},
                             conv_std(in_ch, 3));
      e.stem_b = &ps_.create_const(nm + ".stem.b", {B * mult[0]}, 0.0);
      e.levels.resize(L);
      for (int l = 0; l < L; l++) {
        int cin = B * mult[l == 0 ? 0 : l - 1];
        int cout = B * mult[l];
        for (int r = 0; r < rb; r++) {
          e.levels[l].blocks.emplace_back(
              ps_, nm + ".l" + std::to_string(l) + ".rb" + std::to_string(r),
              r == 0 ? cin : cout, cout, cfg_.norm_groups, emb);
        }
        e.levels[l].down_w = &ps_.create(nm + ".l" + std::to_string(l) + ".down.w",
                                         {cout, cout, 3, 3}, conv_std(cout, 3));
        e.levels[l].down_b = &ps_.create_const(
            nm + ".l" + std::to_string(l) + ".down.b", {cout}, 0.0);
      }
    };

    if (cfg_.multi_scale_fusion) {
      make_encoder(enc_y_, "enc_yt", 1);
      make_encoder(enc_ct_, "enc_ct", 1);
      make_encoder(enc_sdm_, "enc_sdm", cfg_.sdm_channels);
    } else {
      make_encoder(enc_y_, "enc_in", 2 + cfg_.sdm_channels);
    }

    if (cfg_.fusion_former)
      ff_ = FusionFormer<T>(ps_, "ff", 4 * cb, cfg_.scale_attention_logits);

    for (int r = 0; r < rb; r++)
      mid_.emplace_back(ps_, "mid.rb" + std::to_string(r), cb, cb,
                        cfg_.norm_groups, emb);

    dec_.resize(L);
    for (int l = L - 1; l >= 0; l--) {
      int ch = B * mult[l == L - 1 ? L - 1 : l + 1];  // channels arriving from below
      int cskip = B * mult[l];
      int cout = B * mult[l];
      dec_[l].up_w = &ps_.create("dec.l" + std::to_string(l) + ".up.w",
                                 {ch, ch, 3, 3}, conv_std(ch, 3));
      dec_[l].up_b =
          &ps_.create_const("dec.l" + std::to_string(l) + ".up.b", {ch}, 0.0);
      for (int r = 0; r < rb; r++)
        dec_[l].blocks.emplace_back(
            ps_, "dec.l" + std::to_string(l) + ".rb" + std::to_string(r),
            r == 0 ? ch + cskip : cout, cout, cfg_.norm_groups, emb);
    }

    head_g_ = &ps_.create_const("head.gn.g", {B * mult[0]}, 1.0);
    head_b_ = &ps_.create_const("head.gn.b", {B * mult[0]}, 0.0);
    head_w_ = &ps_.create("head.conv.w", {1, B * mult[0], 3, 3},
                          kSmallInit * conv_std(B * mult[0], 3));
    head_bb_ = &ps_.create_const("head.conv.b", {1}, 0.0);
    head_lw_ = &ps_.create_const("head.lin.w", {1, B * mult[0], 1, 1}, 0.0);
    head_lb_ = &ps_.create_const("head.lin.b", {1}, 0.0);
  }

  Tensor<T> run_encoder(netdetail::Ctx<T>& c, Encoder& e, Tensor<T> x,
                        Tensor<T> emb, std::vector<Tensor<T>>& taps) {
    auto h = bias_c(conv2d(x, c(*e.stem_w), 1, 1), c(*e.stem_b));
    taps.clear();
    for (auto& lvl : e.levels) {
      for (const auto& rb : lvl.blocks) h = rb.apply(c, h, emb);
      taps.push_back(h);
      h = bias_c(conv2d(h, c(*lvl.down_w), 2, 1), c(*lvl.down_b));
    }
    return h;
  }

  void check_inputs(const Tensor<T>& y, const Tensor<T>& ct,
                    const Tensor<T>& sdm, const std::vector<int>& ts) const {
    const Shape& s = y.shape();
    if (s.size() != 4 || s[1] != 1)
      throw std::invalid_argument("denoiser: y_t must be [N,1,H,W]");
    if (ct.shape() != s)
      throw std::invalid_argument("denoiser: ct must match y_t shape");
    Shape want = s;
    want[1] = cfg_.sdm_channels;
    if (sdm.shape() != want)
      throw std::invalid_argument("denoiser: sdm stack has wrong channel count");
    if (static_cast<int>(ts.size()) != s[0])
      throw std::invalid_argument("denoiser: one timestep per batch sample");
    for (int t : ts)
      if (t < 1) throw std::invalid_argument("denoiser: timesteps must be >= 1");
    const int div = 1 << cfg_.levels;
    if (s[2] % div != 0 || s[3] % div != 0)
      throw std::invalid_argument(
          "denoiser: spatial extents must be divisible by 2^levels");
    if (cfg_.fusion_former &&
        ((s[2] / div) % 2 != 0 || (s[3] / div) % 2 != 0))
      throw std::invalid_argument(
          "denoiser: bottleneck extents must be even for 2x2 patching");
  }

  ModelConfig cfg_;
  ParamStore<T> ps_;
  Param<T>*te1_w_, *te1_b_, *te2_w_, *te2_b_;
  Encoder enc_y_, enc_ct_, enc_sdm_;
  FusionFormer<T> ff_;
  std::vector<ResBlock<T>> mid_;
  std::vector<DecLevel> dec_;
  Param<T>*head_g_, *head_b_, *head_w_, *head_bb_;
  Param<T>*head_lw_, *head_lb_;
};

}  // namespace dosegen
