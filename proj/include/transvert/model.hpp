#pragma once

// The TransVert generator (two 2-D encoders, per-view anisotropic lifting,
// 3-D decoder), its ablation variants, and the spectral-normalized
// discriminator.
//
// Tensor axes are (N, C, D, H, W) with (D, H, W) = (x, y, z). A sagittal
// patch therefore enters as (1, C, 1, 64, 64) — the left-right axis is
// collapsed — and a coronal patch as (1, C, 64, 1, 64). Lifting expands
// exactly the collapsed axis of its view.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "transvert/drr.hpp"
#include "transvert/nn.hpp"
#include "transvert/volume.hpp"

namespace transvert::model {

using ad::Dims3;
using ad::Shape5;
using nn::Graph;
using nn::Mode;

/// Labels are divided by this at the network boundary (and multiplied back
/// on output) so activations and discriminator inputs stay in [0, 1].
inline constexpr float kLabelScale = float(kLabelMax);

enum class Variant { Full, NoAdversarial, NoAttention, NaiveOuterProduct, SagittalOnly };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoAdversarial: return "no_adversarial";
    case Variant::NoAttention: return "no_attention";
    case Variant::NaiveOuterProduct: return "naive_outer_product";
    case Variant::SagittalOnly: return "sagittal_only";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_adversarial") return Variant::NoAdversarial;
  if (s == "no_attention") return Variant::NoAttention;
  if (s == "naive_outer_product") return Variant::NaiveOuterProduct;
  if (s == "sagittal_only") return Variant::SagittalOnly;
  throw DataError("unknown model variant: " + s);
}

inline bool uses_attention(Variant v) {
  return v == Variant::Full || v == Variant::NoAdversarial;
}
inline bool uses_adversarial(Variant v) { return v == Variant::Full; }
inline bool uses_coronal(Variant v) { return v != Variant::SagittalOnly; }
inline bool uses_outer_product(Variant v) { return v == Variant::NaiveOuterProduct; }

inline constexpr std::array<Variant, 5> kAllVariants{
    Variant::Full, Variant::NoAdversarial, Variant::NoAttention,
    Variant::NaiveOuterProduct, Variant::SagittalOnly};

struct ModelConfig {
  int patch = 64;
  int enc_downsamples = 3;
  int fuse_layers = 4;
  int fuse_doublings = 3;
  int dec_upsamples = 3;
  std::array<int, 4> base_channels{8, 8, 16, 32};
  int residual_blocks = 4;
  int out_channels = 1;

  int bottleneck() const { return patch >> enc_downsamples; }

  void validate() const {
    if (patch <= 0 || patch % (1 << enc_downsamples) != 0)
      throw DataError("model config: patch must be divisible by 2^enc_downsamples");
    if ((1 << fuse_doublings) != bottleneck())
      throw DataError("model config: 2^fuse_doublings must equal patch / 2^enc_downsamples");
    if (fuse_doublings > fuse_layers)
      throw DataError("model config: fuse_doublings cannot exceed fuse_layers");
    if ((bottleneck() << dec_upsamples) != patch)
      throw DataError("model config: decoder upsamples must return to patch size");
    if (residual_blocks < 1 || out_channels < 1)
      throw DataError("model config: counts must be positive");
    for (int c : base_channels)
      if (c <= 0) throw DataError("model config: channels must be positive");
  }
};

/// Axis index (into D,H,W) that the view collapses: x for sagittal,
/// y for coronal.
inline int collapsed_axis(drr::View v) { return v == drr::View::Sagittal ? 0 : 1; }

namespace detail {

inline Dims3 inplane_stride2(drr::View v) {
  Dims3 s{2, 2, 2};
  s[std::size_t(collapsed_axis(v))] = 1;
  return s;
}

inline Dims3 collapsed_only(drr::View v, int on, int off) {
  Dims3 s{off, off, off};
  s[std::size_t(collapsed_axis(v))] = on;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder: 64x64 in-plane -> 32 channels at bottleneck x bottleneck, with
// the view's collapsed axis staying singleton throughout.
// ---------------------------------------------------------------------------

struct Encoder {
  drr::View view = drr::View::Sagittal;
  bool attention = true;
  nn::Conv3dLayer stem_img, stem_ann;
  nn::BatchNorm3dLayer stem_img_bn, stem_ann_bn;
  nn::AttentionGateLayer gate;
  std::vector<nn::Conv3dLayer> down;
  std::vector<nn::BatchNorm3dLayer> down_bn;
  std::vector<nn::ResidualBlock3d> res;

  void init(const std::string& prefix, const ModelConfig& cfg, drr::View v,
            bool with_attention, Rng& rng) {
    view = v;
    attention = with_attention;
    const int c0 = cfg.base_channels[0];
    const int stem_in = attention ? 1 : 2;  // image alone, or image+annotation
    stem_img.init(prefix + ".stem_img", stem_in, c0, {7, 7, 7}, {1, 1, 1}, {0, 0, 0},
                  rng);
    stem_img_bn.init(prefix + ".stem_img_bn", c0);
    if (attention) {
      stem_ann.init(prefix + ".stem_ann", 1, c0, {7, 7, 7}, {1, 1, 1}, {0, 0, 0}, rng);
      stem_ann_bn.init(prefix + ".stem_ann_bn", c0);
      gate.init(prefix + ".gate", c0, rng);
    }
    down.resize(std::size_t(cfg.enc_downsamples));
    down_bn.resize(std::size_t(cfg.enc_downsamples));
    int ic = c0;
    for (int i = 0; i < cfg.enc_downsamples; ++i) {
      const int oc = cfg.base_channels[std::size_t(i + 1)];
      down[std::size_t(i)].init(prefix + ".down" + std::to_string(i), ic, oc, {7, 7, 7},
                                detail::inplane_stride2(view), {3, 3, 3}, rng);
      down_bn[std::size_t(i)].init(prefix + ".down" + std::to_string(i) + "_bn", oc);
      ic = oc;
    }
    res.resize(std::size_t(cfg.residual_blocks));
    for (int i = 0; i < cfg.residual_blocks; ++i)
      res[std::size_t(i)].init(prefix + ".res" + std::to_string(i), ic, rng);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> img, ad::Tensor<float> ann,
                            const Mode& m) {
    ad::Tensor<float> x;
    if (attention) {
      auto fi = ad::relu(stem_img_bn.forward(
          g, stem_img.forward(g, ad::replication_pad3d(img, {3, 3, 3}), m), m));
      auto fa = ad::relu(stem_ann_bn.forward(
          g, stem_ann.forward(g, ad::replication_pad3d(ann, {3, 3, 3}), m), m));
      x = gate.forward(g, fi, fa, m);
    } else {
      auto both = ad::concat(img, ann, 1);
      x = ad::relu(stem_img_bn.forward(
          g, stem_img.forward(g, ad::replication_pad3d(both, {3, 3, 3}), m), m));
    }
    for (std::size_t i = 0; i < down.size(); ++i)
      x = ad::relu(down_bn[i].forward(g, down[i].forward(g, x, m), m));
    for (auto& r : res) x = r.forward(g, x, m);
    return x;
  }

  void collect(std::vector<nn::Parameter*>& ps, std::vector<nn::Buffer*>& bs) {
    stem_img.collect(ps, bs);
    stem_img_bn.collect(ps, bs);
    if (attention) {
      stem_ann.collect(ps, bs);
      stem_ann_bn.collect(ps, bs);
      gate.collect(ps, bs);
    }
    for (auto& l : down) l.collect(ps, bs);
    for (auto& l : down_bn) l.collect(ps, bs);
    for (auto& r : res) r.collect(ps, bs);
  }
};

// ---------------------------------------------------------------------------
// Lift: transpose convolutions that stride only along the view's collapsed
// axis; fuse_doublings of them double that axis, the remainder refine.
// ---------------------------------------------------------------------------

struct Lift {
  drr::View view = drr::View::Sagittal;
  std::vector<nn::ConvTranspose3dLayer> ups;
  std::vector<nn::BatchNorm3dLayer> bns;

  void init(const std::string& prefix, const ModelConfig& cfg, drr::View v, Rng& rng) {
    view = v;
    const int c = cfg.base_channels[3];
    ups.resize(std::size_t(cfg.fuse_layers));
    bns.resize(std::size_t(cfg.fuse_layers));
    for (int i = 0; i < cfg.fuse_layers; ++i) {
      const bool doubling = i < cfg.fuse_doublings;
      ups[std::size_t(i)].init(
          prefix + ".up" + std::to_string(i), c, c, {3, 3, 3},
          doubling ? detail::collapsed_only(view, 2, 1) : Dims3{1, 1, 1}, {1, 1, 1},
          doubling ? detail::collapsed_only(view, 1, 0) : Dims3{0, 0, 0}, rng);
      bns[std::size_t(i)].init(prefix + ".up" + std::to_string(i) + "_bn", c);
    }
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    if (x.shape()[std::size_t(2 + collapsed_axis(view))] != 1)
      throw DataError("lift: collapsed axis must be singleton");
    for (std::size_t i = 0; i < ups.size(); ++i)
      x = ad::relu(bns[i].forward(g, ups[i].forward(g, x, m), m));
    return x;
  }

  void collect(std::vector<nn::Parameter*>& ps, std::vector<nn::Buffer*>& bs) {
    for (auto& l : ups) l.collect(ps, bs);
    for (auto& l : bns) l.collect(ps, bs);
  }
};

// ---------------------------------------------------------------------------
// Decoder: fused 64-channel cube -> residual stack -> isotropic upsampling
// -> 1-channel regression head (no normalization or activation on output).
// ---------------------------------------------------------------------------

struct Decoder {
  std::vector<nn::ResidualBlock3d> res;
  std::vector<nn::ConvTranspose3dLayer> ups;
  std::vector<nn::BatchNorm3dLayer> up_bns;
  nn::Conv3dLayer head;

  void init(const std::string& prefix, const ModelConfig& cfg, Rng& rng) {
    const int fused = 2 * cfg.base_channels[3];
    res.resize(std::size_t(cfg.residual_blocks));
    for (int i = 0; i < cfg.residual_blocks; ++i)
      res[std::size_t(i)].init(prefix + ".res" + std::to_string(i), fused, rng);
    const std::array<int, 4> chain{fused, cfg.base_channels[3], cfg.base_channels[2],
                                   cfg.base_channels[2]};
    ups.resize(std::size_t(cfg.dec_upsamples));
    up_bns.resize(std::size_t(cfg.dec_upsamples));
    for (int i = 0; i < cfg.dec_upsamples; ++i) {
      ups[std::size_t(i)].init(prefix + ".up" + std::to_string(i), chain[std::size_t(i)],
                               chain[std::size_t(i + 1)], {3, 3, 3}, {2, 2, 2},
                               {1, 1, 1}, {1, 1, 1}, rng);
      up_bns[std::size_t(i)].init(prefix + ".up" + std::to_string(i) + "_bn",
                                  chain[std::size_t(i + 1)]);
    }
    head.init(prefix + ".head", chain[3], cfg.out_channels, {7, 7, 7}, {1, 1, 1},
              {0, 0, 0}, rng);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    for (auto& r : res) x = r.forward(g, x, m);
    for (std::size_t i = 0; i < ups.size(); ++i)
      x = ad::relu(up_bns[i].forward(g, ups[i].forward(g, x, m), m));
    return head.forward(g, ad::replication_pad3d(x, {3, 3, 3}), m);
  }

  void collect(std::vector<nn::Parameter*>& ps, std::vector<nn::Buffer*>& bs) {
    for (auto& r : res) r.collect(ps, bs);
    for (auto& l : ups) l.collect(ps, bs);
    for (auto& l : up_bns) l.collect(ps, bs);
    head.collect(ps, bs);
  }
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct TransVert {
  ModelConfig cfg;
  Variant variant = Variant::Full;
  Encoder enc_sag;
  std::optional<Encoder> enc_cor;
  std::optional<Lift> lift_sag;
  std::optional<Lift> lift_cor;
  Decoder decoder;

  TransVert(const ModelConfig& c, Variant v, Rng& rng) : cfg(c), variant(v) {
    cfg.validate();
    const bool attn = uses_attention(v);
    enc_sag.init("g.enc_sag", cfg, drr::View::Sagittal, attn, rng);
    if (uses_coronal(v)) {
      enc_cor.emplace();
      enc_cor->init("g.enc_cor", cfg, drr::View::Coronal, attn, rng);
    }
    if (!uses_outer_product(v)) {
      lift_sag.emplace();
      lift_sag->init("g.lift_sag", cfg, drr::View::Sagittal, rng);
      if (uses_coronal(v)) {
        lift_cor.emplace();
        lift_cor->init("g.lift_cor", cfg, drr::View::Coronal, rng);
      }
    }
    decoder.init("g.dec", cfg, rng);
  }

  /// Inputs: sagittal image/annotation as (1,1,1,P,P), coronal as
  /// (1,1,P,1,P). Output: (1,1,P,P,P) in label-scaled units.
  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x_s, ad::Tensor<float> y_s,
                            ad::Tensor<float> x_c, ad::Tensor<float> y_c,
                            const Mode& m) {
    const int bt = cfg.bottleneck();
    const int c = cfg.base_channels[3];
    const Shape5 cube{1, c, bt, bt, bt};
    ad::Tensor<float> half_a, half_b;
    auto f_s = enc_sag.forward(g, x_s, y_s, m);
    if (uses_outer_product(variant)) {
      auto f_c = enc_cor->forward(g, x_c, y_c, m);
      half_a = ad::mul_broadcast(f_s, f_c);  // (1,C,1,b,b) x (1,C,b,1,b)
      half_b = g.tape.constant_fill(cube, 0.0f);
    } else {
      half_a = lift_sag->forward(g, f_s, m);
      if (uses_coronal(variant)) {
        auto f_c = enc_cor->forward(g, x_c, y_c, m);
        half_b = lift_cor->forward(g, f_c, m);
      } else {
        half_b = g.tape.constant_fill(cube, 0.0f);
      }
    }
    return decoder.forward(g, ad::concat(half_a, half_b, 1), m);
  }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    collect(ps, bs);
    return ps;
  }

  std::vector<nn::Buffer*> buffers() {
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    collect(ps, bs);
    return bs;
  }

  void collect(std::vector<nn::Parameter*>& ps, std::vector<nn::Buffer*>& bs) {
    enc_sag.collect(ps, bs);
    if (enc_cor) enc_cor->collect(ps, bs);
    if (lift_sag) lift_sag->collect(ps, bs);
    if (lift_cor) lift_cor->collect(ps, bs);
    decoder.collect(ps, bs);
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (nn::Parameter* p : parameters()) n += std::int64_t(p->value.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Discriminator: 4 spectral-normalized stride-2 k4 convs (patch -> patch/16
// spatial), 4 spectral-normalized stride-1 k4 convs, sigmoid head; per-patch
// scores in (0,1). ReLU between convolutions, no batch norm.
// ---------------------------------------------------------------------------

struct Discriminator {
  std::vector<nn::SpectralConv3dLayer> convs;
  int channels = 64;

  Discriminator(Rng& rng, int ch = 64) : channels(ch) {
    convs.resize(8);
    // Stride-1 k4 convolutions need padding >= 2 for a positive output
    // size at a 4^3 bottleneck; pad 2 grows each axis by one per layer.
    for (int i = 0; i < 8; ++i) {
      const bool strided = i < 4;
      convs[std::size_t(i)].init("d.conv" + std::to_string(i), i == 0 ? 1 : channels,
                                 channels, {4, 4, 4},
                                 strided ? Dims3{2, 2, 2} : Dims3{1, 1, 1},
                                 strided ? Dims3{1, 1, 1} : Dims3{2, 2, 2}, rng);
    }
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      x = convs[i].forward(g, x, m);
      if (i + 1 < convs.size()) x = ad::relu(x);
    }
    return ad::sigmoid(x);
  }

  std::vector<nn::Parameter*> parameters() {
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    collect(ps, bs);
    return ps;
  }

  std::vector<nn::Buffer*> buffers() {
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    collect(ps, bs);
    return bs;
  }

  void collect(std::vector<nn::Parameter*>& ps, std::vector<nn::Buffer*>& bs) {
    for (auto& c : convs) c.collect(ps, bs);
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (nn::Parameter* p : parameters()) n += std::int64_t(p->value.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Image / volume <-> tensor conversion
// ---------------------------------------------------------------------------

/// Embed a 2-D patch as a 5-D activation with the view's collapsed axis
/// singleton. Image (u,v) maps to (y,z) for sagittal and (x,z) for coronal.
inline ad::Tensor<float> image_to_tensor(Graph& g, const Image2D& img, drr::View view) {
  const int nu = img.shape[0], nv = img.shape[1];
  std::vector<float> data(std::size_t(nu) * std::size_t(nv));
  // Tensor (D,H,W): sagittal -> (1, u, v); coronal -> (u, 1, v). In both
  // cases flat index = u * nv + v.
  for (int u = 0; u < nu; ++u)
    for (int v = 0; v < nv; ++v)
      data[std::size_t(u) * std::size_t(nv) + std::size_t(v)] = img.at(u, v);
  const Shape5 shape = view == drr::View::Sagittal ? Shape5{1, 1, 1, nu, nv}
                                                   : Shape5{1, 1, nu, 1, nv};
  return g.tape.constant(shape, std::move(data));
}

/// Flatten a volume (x-fastest) into (1,1,nx,ny,nz) tensor data (z fastest),
/// applying a scale factor.
inline std::vector<float> volume_to_tensor_data(const Volume& vol, float scl) {
  const int nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
  std::vector<float> data(std::size_t(nx) * std::size_t(ny) * std::size_t(nz));
  std::size_t o = 0;
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z, ++o) {
        const std::size_t vi = vol.index(x, y, z);
        data[o] = scl * (vol.dtype == VolumeDtype::U8 ? float(vol.u8[vi]) : vol.f32[vi]);
      }
  return data;
}

/// Inverse of volume_to_tensor_data for a (1,1,nx,ny,nz) tensor.
inline Volume tensor_to_volume(const std::vector<float>& data, const Shape5& shape,
                               const Vec3& spacing, const Vec3& origin, float scl) {
  if (shape[0] != 1 || shape[1] != 1)
    throw DataError("tensor_to_volume: expected a single-channel tensor");
  Volume vol = Volume::zeros({shape[2], shape[3], shape[4]}, spacing, origin,
                             VolumeDtype::F32);
  std::size_t o = 0;
  for (int x = 0; x < shape[2]; ++x)
    for (int y = 0; y < shape[3]; ++y)
      for (int z = 0; z < shape[4]; ++z, ++o)
        vol.f32[vol.index(x, y, z)] = scl * data[o];
  return vol;
}

}  // namespace transvert::model
