#pragma once

// Flat key = value run configuration: UTF-8 text files with # comments,
// a fixed registry of known keys (unknown keys are rejected), typed
// getters, and a resolved dump written next to every run's outputs.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transvert/dataset.hpp"
#include "transvert/model.hpp"
#include "transvert/train.hpp"

namespace transvert::config {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline const std::map<std::string, std::string>& default_values() {
  static const std::map<std::string, std::string> kDefaults = {
      {"seed", "1"},
      {"out_dir", "out"},
      {"threads", "1"},
      // phantom generation
      {"phantom.n", "6"},
      {"phantom.n_vertebrae", "5"},
      {"phantom.curvature_mm", "6"},
      {"phantom.gap_mm", "4"},
      {"phantom.canvas_xy", "96"},
      // cone-beam geometry and rendering
      {"geometry.sdd_mm", "1800"},
      {"geometry.sod_mm", "1500"},
      {"geometry.detector_spacing_mm", "1.2"},
      {"render.patch", "64"},
      // data locations
      {"data.phantoms", ""},
      {"data.samples", ""},
      // model architecture
      {"model.patch", "64"},
      {"model.enc_downsamples", "3"},
      {"model.fuse_layers", "4"},
      {"model.fuse_doublings", "3"},
      {"model.dec_upsamples", "3"},
      {"model.base_channels", "8,8,16,32"},
      {"model.residual_blocks", "4"},
      // training
      {"train.alpha_g", "10"},
      {"train.alpha_d", "0.1"},
      {"train.lr", "0.0001"},
      {"train.steps", "600"},
      {"train.batch", "1"},
      {"train.checkpoint_every", "0"},
      {"train.variant", "full"},
      {"train.annotation", "c2v"},
      {"train.d_channels", "64"},
      // inference / evaluation
      {"infer.checkpoint", ""},
      {"infer.filter", ""},
      {"eval.split", "val"},
      {"eval.cloud_points", "2048"},
      // ablation harness
      {"ablate.variants", "full,no_adversarial,no_attention,naive_outer_product,sagittal_only"},
      {"ablate.annotations", "none,c2v,b2v,v2v"},
      {"ablate.steps", "200"},
      {"ablate.checkpoints", ""},
      // assembly
      {"assemble.centroids", ""},
      {"assemble.preds", ""},
      {"assemble.out", "spine.vhdr"},
      {"assemble.canvas", "96,96,424"},
      {"assemble.spacing_mm", "1"},
  };
  return kDefaults;
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() : values_(detail::default_values()) {}

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw DataError("unknown config key: " + key);
    it->second = value;
  }

  /// Parse `key = value` lines; '#' starts a comment, blank lines ignored.
  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      lineno += 1;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": expected key = value");
      set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
  }

  /// Apply a `key=value` override (the --set form).
  void set_pair(const std::string& pair) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos)
      throw DataError("override must be key=value: " + pair);
    set(detail::trim(pair.substr(0, eq)), detail::trim(pair.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw DataError("unknown config key: " + key);
    return it->second;
  }

  std::int64_t integer(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t pos = 0;
      const std::int64_t out = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw DataError("config key " + key + " is not an integer: '" + v + "'");
    }
  }

  std::uint64_t unsigned_integer(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t pos = 0;
      const std::uint64_t out = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw DataError("config key " + key + " is not an unsigned integer: '" + v + "'");
    }
  }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    try {
      std::size_t pos = 0;
      const double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw DataError("config key " + key + " is not a number: '" + v + "'");
    }
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    for (const std::string& s : list(key)) {
      try {
        out.push_back(std::stoi(s));
      } catch (const std::exception&) {
        throw DataError("config key " + key + " holds a non-integer item: '" + s + "'");
      }
    }
    return out;
  }

  /// Write every key (sorted) so a run can be reproduced from its dump.
  void dump(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write resolved config: " + path);
    for (const auto& [k, v] : values_) f << k << " = " << v << "\n";
  }

 private:
  std::map<std::string, std::string> values_;
};

inline model::ModelConfig make_model_config(const RunConfig& rc) {
  model::ModelConfig mc;
  mc.patch = int(rc.integer("model.patch"));
  mc.enc_downsamples = int(rc.integer("model.enc_downsamples"));
  mc.fuse_layers = int(rc.integer("model.fuse_layers"));
  mc.fuse_doublings = int(rc.integer("model.fuse_doublings"));
  mc.dec_upsamples = int(rc.integer("model.dec_upsamples"));
  mc.residual_blocks = int(rc.integer("model.residual_blocks"));
  const std::vector<int> ch = rc.int_list("model.base_channels");
  if (ch.size() != mc.base_channels.size())
    throw DataError("model.base_channels must list exactly " +
                    std::to_string(mc.base_channels.size()) + " channel counts");
  std::copy(ch.begin(), ch.end(), mc.base_channels.begin());
  mc.validate();
  return mc;
}

inline train::TrainConfig make_train_config(const RunConfig& rc) {
  train::TrainConfig tc;
  tc.alpha_g = float(rc.real("train.alpha_g"));
  tc.alpha_d = float(rc.real("train.alpha_d"));
  tc.lr = float(rc.real("train.lr"));
  tc.steps = rc.integer("train.steps");
  tc.batch = int(rc.integer("train.batch"));
  tc.seed = rc.unsigned_integer("seed");
  tc.variant = model::variant_from_string(rc.str("train.variant"));
  tc.annotation = drr::annotation_from_string(rc.str("train.annotation"));
  tc.checkpoint_every = rc.integer("train.checkpoint_every");
  tc.d_channels = int(rc.integer("train.d_channels"));
  tc.out_dir = rc.str("out_dir");
  tc.validate();
  return tc;
}

inline data::RenderOptions make_render_options(const RunConfig& rc) {
  data::RenderOptions opts;
  opts.sdd_mm = rc.real("geometry.sdd_mm");
  opts.sod_mm = rc.real("geometry.sod_mm");
  const double ds = rc.real("geometry.detector_spacing_mm");
  opts.detector_spacing_mm = {ds, ds};
  opts.patch = int(rc.integer("render.patch"));
  return opts;
}

}  // namespace transvert::config
