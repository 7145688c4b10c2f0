#pragma once

// Adversarial + l1 training: the two LSGAN objectives, the alternating
// one-discriminator-step / one-generator-step update, seeded sample
// ordering, CSV loss logging, and bitwise-resumable checkpoints.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "transvert/dataset.hpp"
#include "transvert/model.hpp"
#include "transvert/nn.hpp"

namespace transvert::train {

using model::Variant;
using nn::Graph;
using nn::Mode;

struct TrainConfig {
  float alpha_g = 10.0f;
  float alpha_d = 0.1f;
  float lr = 1e-4f;
  std::int64_t steps = 0;
  int batch = 1;
  std::uint64_t seed = 1;
  Variant variant = Variant::Full;
  drr::AnnotationType annotation = drr::AnnotationType::C2V;
  std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
  int d_channels = 64;
  std::string out_dir = ".";

  void validate() const {
    if (alpha_g < 0 || alpha_d < 0) throw DataError("loss weights must be >= 0");
    if (lr <= 0) throw DataError("learning rate must be positive");
    if (batch < 1) throw DataError("batch must be >= 1");
    if (steps < 0) throw DataError("steps must be >= 0");
    if (d_channels < 1) throw DataError("discriminator channels must be >= 1");
  }

  bool adversarial() const { return model::uses_adversarial(variant) && alpha_d > 0; }
};

/// alpha_g * mean|y - pred| + alpha_d * mean((d_score - 1)^2); the
/// adversarial term is dropped when no score is given or alpha_d is 0.
template <typename T>
ad::Tensor<T> generator_loss(ad::Tensor<T> pred, ad::Tensor<T> y,
                             std::optional<ad::Tensor<T>> d_score, T alpha_g,
                             T alpha_d) {
  ad::Tensor<T> l1 = ad::l1_loss(pred, y);
  if (!d_score.has_value() || alpha_d == T(0)) return ad::scale(l1, alpha_g);
  return ad::add(ad::scale(l1, alpha_g),
                 ad::scale(ad::squared_error(*d_score, T(1)), alpha_d));
}

/// mean((d_real - 1)^2) + mean(d_fake^2).
template <typename T>
ad::Tensor<T> discriminator_loss(ad::Tensor<T> d_real, ad::Tensor<T> d_fake) {
  return ad::add(ad::squared_error(d_real, T(1)), ad::squared_error(d_fake, T(0)));
}

struct StepLosses {
  float loss_g = 0, loss_d = 0, l1_term = 0, adv_term = 0;
};

namespace detail {

struct SampleTensors {
  ad::Tensor<float> x_s, y_s, x_c, y_c, y_scaled;
};

inline SampleTensors bind_sample(Graph& g, const data::Sample& s) {
  SampleTensors t;
  t.x_s = model::image_to_tensor(g, s.x_s, drr::View::Sagittal);
  t.y_s = model::image_to_tensor(g, s.y_s, drr::View::Sagittal);
  t.x_c = model::image_to_tensor(g, s.x_c, drr::View::Coronal);
  t.y_c = model::image_to_tensor(g, s.y_c, drr::View::Coronal);
  const int p = s.y.shape[0];
  t.y_scaled = g.tape.constant(
      ad::Shape5{1, 1, p, p, p},
      model::volume_to_tensor_data(s.y, 1.0f / model::kLabelScale));
  return t;
}

inline void check_finite(float v, const char* what, std::int64_t step,
                         const std::string& sample_id) {
  if (!std::isfinite(v))
    throw NumericError(std::string("non-finite ") + what + " at step " +
                       std::to_string(step) + " on sample " + sample_id);
}

}  // namespace detail

/// Generator + optional discriminator with their optimizer states; the unit
/// that train_step advances and checkpoints capture.
struct Trainer {
  TrainConfig cfg;
  model::ModelConfig mcfg;
  model::TransVert g;
  std::optional<model::Discriminator> d;
  nn::AdamState adam_g, adam_d;
  std::int64_t step = 0;

  Trainer(const TrainConfig& tc, const model::ModelConfig& mc)
      : cfg(tc), mcfg(mc), g(make_generator(tc, mc)) {
    cfg.validate();
    if (cfg.adversarial()) {
      Rng rd(derive_seed(cfg.seed, "d_init"));
      d.emplace(rd, cfg.d_channels);
    }
  }

  static model::TransVert make_generator(const TrainConfig& tc,
                                         const model::ModelConfig& mc) {
    Rng r(derive_seed(tc.seed, "g_init"));
    return model::TransVert(mc, tc.variant, r);
  }

  /// One optimizer step on a batch: a discriminator update on the losses
  /// against real targets and detached generator output, then a generator
  /// update through the (already updated) discriminator. Gradients of a
  /// batch are averaged; the generator forward runs once per sample.
  StepLosses train_step(const std::vector<const data::Sample*>& batch) {
    if (batch.empty()) throw DataError("train_step: empty batch");
    const float invb = 1.0f / float(batch.size());
    const Mode train_grad{true, true};

    struct PerSample {
      Graph graph;
      ad::Tensor<float> fake, y_scaled;
    };
    std::vector<PerSample> per(batch.size());

    StepLosses out;
    std::vector<nn::Parameter*> gp = g.parameters();

    // Phase A: generator forwards; discriminator update on detached fakes.
    if (cfg.adversarial()) nn::zero_grads(d->parameters());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Graph& gr = per[i].graph;
      const data::Sample& s = *batch[i];
      auto ts = detail::bind_sample(gr, s);
      per[i].fake = g.forward(gr, ts.x_s, ts.y_s, ts.x_c, ts.y_c, train_grad);
      per[i].y_scaled = ts.y_scaled;
      if (!cfg.adversarial()) continue;
      ad::Tensor<float> fake_det =
          gr.tape.constant(per[i].fake.shape(), per[i].fake.value());
      ad::Tensor<float> d_real = d->forward(gr, ts.y_scaled, train_grad);
      ad::Tensor<float> d_fake = d->forward(gr, fake_det, train_grad);
      ad::Tensor<float> loss_d = discriminator_loss(d_real, d_fake);
      detail::check_finite(loss_d.value()[0], "discriminator loss", step, s.id);
      gr.tape.backward(loss_d);
      gr.pull_grads(invb);
      gr.tape.zero_grad();
      out.loss_d += invb * loss_d.value()[0];
    }
    if (cfg.adversarial()) {
      auto dp = d->parameters();
      nn::adam_step(dp, adam_d, {cfg.lr});
      nn::zero_grads(dp);
    }

    // Phase B: generator update through the updated discriminator.
    nn::zero_grads(gp);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Graph& gr = per[i].graph;
      const data::Sample& s = *batch[i];
      std::optional<ad::Tensor<float>> d_score;
      if (cfg.adversarial())
        d_score = d->forward(gr, per[i].fake, Mode{true, false});
      ad::Tensor<float> l1 = ad::l1_loss(per[i].fake, per[i].y_scaled);
      ad::Tensor<float> loss_g =
          cfg.adversarial()
              ? ad::add(ad::scale(l1, cfg.alpha_g),
                        ad::scale(ad::squared_error(*d_score, 1.0f), cfg.alpha_d))
              : ad::scale(l1, cfg.alpha_g);
      detail::check_finite(loss_g.value()[0], "generator loss", step, s.id);
      gr.tape.backward(loss_g);
      gr.pull_grads(invb);
      out.loss_g += invb * loss_g.value()[0];
      out.l1_term += invb * l1.value()[0];
      if (cfg.adversarial()) {
        double acc = 0.0;
        for (float v : d_score->value()) {
          const double e = double(v) - 1.0;
          acc += e * e;
        }
        out.adv_term += invb * float(acc / double(d_score->value().size()));
      }
    }
    nn::adam_step(gp, adam_g, {cfg.lr});
    nn::zero_grads(gp);

    step += 1;
    return out;
  }

  void save(const std::string& path) {
    nn::CheckpointWriter w;
    w.meta["format"] = "transvert-trainer";
    w.meta["step"] = std::to_string(step);
    w.meta["seed"] = std::to_string(cfg.seed);
    w.meta["variant"] = model::variant_name(cfg.variant);
    w.meta["annotation"] = drr::annotation_name(cfg.annotation);
    w.meta["adam_g_t"] = std::to_string(adam_g.t);
    w.meta["adam_d_t"] = std::to_string(adam_d.t);
    w.meta["generator_param_count"] = std::to_string(g.parameter_count());
    w.meta["discriminator_param_count"] =
        std::to_string(d ? d->parameter_count() : 0);
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    g.collect(ps, bs);
    if (d) d->collect(ps, bs);
    for (nn::Parameter* p : ps) {
      w.add(p->name, p->shape, &p->value);
      w.add(p->name + ".adam_m", p->shape, &p->m);
      w.add(p->name + ".adam_v", p->shape, &p->v);
    }
    for (nn::Buffer* b : bs) w.add_flat(b->name, &b->value);
    w.save(path);
  }

  void load(const std::string& path) {
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    auto meta = [&](const std::string& k) -> std::string {
      auto it = ck.meta.find(k);
      if (it == ck.meta.end()) throw DataError("checkpoint is missing meta key: " + k);
      return it->second;
    };
    if (meta("variant") != model::variant_name(cfg.variant))
      throw DataError("checkpoint variant '" + meta("variant") +
                      "' does not match configured variant");
    if (std::stoull(meta("seed")) != cfg.seed)
      throw DataError("checkpoint seed does not match configured seed");
    step = std::stoll(meta("step"));
    adam_g.t = std::stoll(meta("adam_g_t"));
    adam_d.t = std::stoll(meta("adam_d_t"));
    std::vector<nn::Parameter*> ps;
    std::vector<nn::Buffer*> bs;
    g.collect(ps, bs);
    if (d) d->collect(ps, bs);
    for (nn::Parameter* p : ps) {
      p->value = ck.get(p->name);
      p->m = ck.get(p->name + ".adam_m");
      p->v = ck.get(p->name + ".adam_v");
    }
    for (nn::Buffer* b : bs) {
      const auto& v = ck.get(b->name);
      if (v.size() != b->value.size())
        throw DataError("checkpoint buffer size mismatch: " + b->name);
      b->value = v;
    }
  }
};

/// Eval-mode forward of one sample; returns the prediction as an f32 volume
/// in label units, carrying the target patch's geometry.
inline Volume infer_volume(model::TransVert& g, const data::Sample& s) {
  Graph gr;
  auto ts = detail::bind_sample(gr, s);
  ad::Tensor<float> pred =
      g.forward(gr, ts.x_s, ts.y_s, ts.x_c, ts.y_c, Mode{false, false});
  return model::tensor_to_volume(pred.value(), pred.shape(), s.y.spacing_mm,
                                 s.y.origin_mm, model::kLabelScale);
}

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_log_path;
};

/// Sample index for a global position q: a fresh seeded permutation of the
/// dataset per epoch, derivable from (seed, epoch) alone so a resumed run
/// continues the identical order.
inline std::size_t sample_index_at(std::uint64_t seed, std::int64_t q, std::size_t n) {
  const std::int64_t epoch = q / std::int64_t(n);
  const std::size_t pos = std::size_t(q % std::int64_t(n));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng r(derive_seed(seed, "order", std::uint64_t(epoch)));
  r.shuffle(perm);
  return perm[pos];
}

/// Run tr.step .. total_steps-1, logging one CSV row per step and writing
/// periodic + final checkpoints under cfg.out_dir.
inline TrainResult train_loop(Trainer& tr, const std::vector<data::Sample>& dataset,
                              std::int64_t total_steps,
                              bool echo_progress = false) {
  if (dataset.empty()) throw DataError("train_loop: empty dataset");
  namespace fs = std::filesystem;
  fs::create_directories(tr.cfg.out_dir);
  const std::string log_path = tr.cfg.out_dir + "/loss_log.csv";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write loss log: " + log_path);
  log << "step,loss_g,loss_d,l1_term,adv_term\n";

  char row[256];
  for (std::int64_t s = tr.step; s < total_steps; ++s) {
    std::vector<const data::Sample*> batch;
    batch.reserve(std::size_t(tr.cfg.batch));
    for (int j = 0; j < tr.cfg.batch; ++j) {
      const std::int64_t q = s * tr.cfg.batch + j;
      batch.push_back(&dataset[sample_index_at(tr.cfg.seed, q, dataset.size())]);
    }
    const StepLosses l = tr.train_step(batch);
    std::snprintf(row, sizeof(row), "%" PRId64 ",%.9g,%.9g,%.9g,%.9g\n", s + 1,
                  double(l.loss_g), double(l.loss_d), double(l.l1_term),
                  double(l.adv_term));
    log << row;
    log.flush();
    if (echo_progress && ((s + 1) % 25 == 0 || s + 1 == total_steps))
      std::fprintf(stderr, "step %" PRId64 "/%" PRId64 " loss_g=%.4f l1=%.4f\n",
                   s + 1, total_steps, double(l.loss_g), double(l.l1_term));
    if (tr.cfg.checkpoint_every > 0 && (s + 1) % tr.cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "/ck_%06" PRId64 ".ckpt", s + 1);
      tr.save(tr.cfg.out_dir + name);
    }
  }
  const std::string final_path = tr.cfg.out_dir + "/ck_final.ckpt";
  tr.save(final_path);
  return {final_path, log_path};
}

}  // namespace transvert::train
