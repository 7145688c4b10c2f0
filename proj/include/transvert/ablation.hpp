#pragma once

// Ablation harness: train or load one model per requested architecture
// variant / annotation type, evaluate each on a sample set, and emit a CSV
// with one row per cell alongside static reference metrics quoted from the
// original clinical-data experiments for context.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "transvert/dataset.hpp"
#include "transvert/metrics.hpp"
#include "transvert/train.hpp"

namespace transvert::ablate {

struct ReferenceEntry {
  double dice_pct = 0;
  double hausdorff_mm = 0;
};

/// Published clinical-data results for the architecture ablation, kept as
/// context metadata only; desk-scale phantom runs are not expected to
/// reproduce them.
inline ReferenceEntry variant_reference(model::Variant v) {
  switch (v) {
    case model::Variant::SagittalOnly: return {88.40, 7.43};
    case model::Variant::NaiveOuterProduct: return {92.59, 6.45};
    case model::Variant::NoAttention: return {94.75, 5.75};
    case model::Variant::NoAdversarial: return {95.31, 5.27};
    case model::Variant::Full: return {95.52, 5.11};
  }
  throw DataError("unknown variant");
}

/// Published clinical-data results for the annotation ablation (run there
/// on the non-adversarial model), kept as context metadata only.
inline ReferenceEntry annotation_reference(drr::AnnotationType a) {
  switch (a) {
    case drr::AnnotationType::None: return {76.44, 14.74};
    case drr::AnnotationType::V2V: return {96.24, 4.18};
    case drr::AnnotationType::B2V: return {95.67, 4.95};
    case drr::AnnotationType::C2V: return {95.31, 5.27};
  }
  throw DataError("unknown annotation type");
}

struct AblationCell {
  std::string kind;  // "variant" or "annotation"
  std::string name;
  model::Variant variant = model::Variant::Full;
  drr::AnnotationType annotation = drr::AnnotationType::C2V;
  std::int64_t steps = 0;
  int n_eval = 0;
  double mean_dice = 0;
  double mean_hausdorff_mm = 0;
  ReferenceEntry reference;
};

struct AblationReport {
  std::vector<AblationCell> cells;

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write ablation csv: " + path);
    f << "kind,name,variant,annotation,steps,n_eval,mean_dice,"
         "mean_hausdorff_mm,reference_dice_pct,reference_hausdorff_mm\n";
    char line[512];
    for (const AblationCell& c : cells) {
      std::snprintf(line, sizeof(line), "%s,%s,%s,%s,%lld,%d,%.9g,%.9g,%.9g,%.9g\n",
                    c.kind.c_str(), c.name.c_str(), model::variant_name(c.variant),
                    drr::annotation_name(c.annotation),
                    static_cast<long long>(c.steps), c.n_eval, c.mean_dice,
                    c.mean_hausdorff_mm, c.reference.dice_pct,
                    c.reference.hausdorff_mm);
      f << line;
    }
  }
};

struct AblationConfig {
  train::TrainConfig base;      // seed, lr, weights, batch, out_dir
  model::ModelConfig model;
  std::int64_t steps_per_cell = 0;
  std::string checkpoint_dir;   // nonempty: load <kind>_<name>.ckpt per cell
  int cloud_points = 2048;
  bool echo_progress = false;
};

namespace detail {

inline std::vector<data::Sample> load_set(const std::vector<data::SampleRef>& refs,
                                          drr::AnnotationType ann) {
  std::vector<data::Sample> out;
  out.reserve(refs.size());
  for (const data::SampleRef& r : refs) out.push_back(data::load_sample(r, ann));
  return out;
}

inline void run_cell(AblationCell& cell, const std::vector<data::SampleRef>& train_refs,
                     const std::vector<data::SampleRef>& eval_refs,
                     const AblationConfig& cfg) {
  train::TrainConfig tc = cfg.base;
  tc.variant = cell.variant;
  tc.annotation = cell.annotation;
  tc.steps = cfg.steps_per_cell;
  tc.out_dir = cfg.base.out_dir + "/" + cell.kind + "_" + cell.name;
  train::Trainer tr(tc, cfg.model);

  if (!cfg.checkpoint_dir.empty()) {
    const std::string ck =
        cfg.checkpoint_dir + "/" + cell.kind + "_" + cell.name + ".ckpt";
    if (!std::ifstream(ck).good())
      throw DataError("ablation: missing checkpoint " + ck);
    tr.load(ck);
  } else {
    const std::vector<data::Sample> train_set = detail::load_set(train_refs, tc.annotation);
    train::train_loop(tr, train_set, cfg.steps_per_cell, cfg.echo_progress);
  }
  cell.steps = tr.step;

  std::filesystem::create_directories(tc.out_dir);
  metrics::MetricsReport report;
  for (const data::SampleRef& ref : eval_refs) {
    const data::Sample s = data::load_sample(ref, tc.annotation);
    const Volume pred = train::infer_volume(tr.g, s);
    report.rows.push_back(metrics::evaluate_sample(
        s.id, pred, s.y, s.label, derive_seed(cfg.base.seed, s.id),
        cfg.cloud_points));
  }
  report.write_csv(tc.out_dir + "/metrics.csv");
  cell.n_eval = int(report.rows.size());
  cell.mean_dice = report.aggregate(&metrics::MetricsRow::dice).mean;
  cell.mean_hausdorff_mm =
      report.aggregate(&metrics::MetricsRow::hausdorff_mm).mean;
}

}  // namespace detail

/// One row per requested variant (trained with the base annotation) and one
/// per requested annotation (trained on the non-adversarial variant, as in
/// the original annotation ablation).
inline AblationReport run_ablation(const std::vector<data::SampleRef>& train_refs,
                                   const std::vector<data::SampleRef>& eval_refs,
                                   const std::vector<model::Variant>& variants,
                                   const std::vector<drr::AnnotationType>& annotations,
                                   const AblationConfig& cfg) {
  AblationReport report;
  for (model::Variant v : variants) {
    AblationCell cell;
    cell.kind = "variant";
    cell.name = model::variant_name(v);
    cell.variant = v;
    cell.annotation = cfg.base.annotation;
    cell.reference = variant_reference(v);
    detail::run_cell(cell, train_refs, eval_refs, cfg);
    report.cells.push_back(cell);
  }
  for (drr::AnnotationType a : annotations) {
    AblationCell cell;
    cell.kind = "annotation";
    cell.name = drr::annotation_name(a);
    cell.variant = model::Variant::NoAdversarial;
    cell.annotation = a;
    cell.reference = annotation_reference(a);
    detail::run_cell(cell, train_refs, eval_refs, cfg);
    report.cells.push_back(cell);
  }
  return report;
}

}  // namespace transvert::ablate
