// transvert: command-line front end for the phantom/render/train/infer/eval/
// ablate/assemble pipeline. All behavior is driven by a flat key=value run
// config; dedicated flags are shorthands that overwrite config keys, and
// every run writes its fully-resolved config next to its outputs.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "transvert/transvert.hpp"

namespace fs = std::filesystem;
using namespace transvert;

namespace {

constexpr const char* kPhantomManifest = "phantoms.txt";
constexpr const char* kSamplesManifest = "samples.txt";

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;  // 0 = unset
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value run config file");
  cmd->add_option("--set", args.overrides, "override a config key (key=value)")
      ->take_all();
  cmd->add_option("--threads", args.threads,
                  "worker threads (render/eval only; others run on 1)");
}

config::RunConfig resolve(const CommonArgs& args) {
  config::RunConfig rc;
  if (!args.config_path.empty()) rc.load_file(args.config_path);
  for (const std::string& kv : args.overrides) rc.set_pair(kv);
  if (args.threads > 0) rc.set("threads", std::to_string(args.threads));
  return rc;
}

/// --threads flag beats config; TRANSVERT_THREADS is the fallback when
/// neither is given. Only render and eval may use more than one thread.
void apply_threads(const config::RunConfig& rc, bool parallel_allowed) {
  int threads = int(rc.integer("threads"));
  if (threads == 1) {
    if (const char* env = std::getenv("TRANSVERT_THREADS")) {
      try {
        threads = std::stoi(env);
      } catch (const std::exception&) {
        throw UsageError("TRANSVERT_THREADS is not an integer");
      }
    }
  }
  if (threads < 1) throw UsageError("thread count must be >= 1");
  if (threads > 1 && !parallel_allowed) {
    std::cerr << "warning: this subcommand runs single-threaded; ignoring "
                 "threads="
              << threads << "\n";
    threads = 1;
  }
  set_thread_count(threads);
}

std::string out_dir_of(const config::RunConfig& rc) {
  const std::string out = rc.str("out_dir");
  fs::create_directories(out);
  return out;
}

void dump_config(const config::RunConfig& rc, const std::string& dir) {
  rc.dump(dir + "/resolved_config.cfg");
}

std::string spine_dir_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "spine_%03d", index);
  return buf;
}

std::string sample_dir_name(const std::string& spine, int label) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_l%02d", label);
  return spine + buf;
}

phantom::SpineParams spine_params_from(const config::RunConfig& rc) {
  phantom::SpineParams sp;
  sp.n_vertebrae = int(rc.integer("phantom.n_vertebrae"));
  sp.curvature_mm = rc.real("phantom.curvature_mm");
  sp.gap_mm = rc.real("phantom.gap_mm");
  sp.canvas_xy = int(rc.integer("phantom.canvas_xy"));
  return sp;
}

// ---------------------------------------------------------------- phantom --

int cmd_phantom(const config::RunConfig& rc) {
  apply_threads(rc, false);
  const std::string out = out_dir_of(rc);
  const int n = int(rc.integer("phantom.n"));
  if (n < 1) throw UsageError("phantom.n must be >= 1");
  const std::uint64_t seed = rc.unsigned_integer("seed");
  const phantom::SpineParams base = spine_params_from(rc);

  // Mirror the 5:1 split when there are enough spines; below that every
  // spine lands in the training split.
  std::vector<bool> is_val(std::size_t(n), false);
  if (n >= 6) {
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "split"));
    rng.shuffle(order);
    for (std::size_t i = 0; i < std::size_t(n / 6); ++i) is_val[order[i]] = true;
  }

  std::vector<data::SpineRef> refs;
  for (int i = 0; i < n; ++i) {
    const phantom::SpinePhantom spine = phantom::varied_spine(i, seed, base);
    const std::string dir = out + "/" + spine_dir_name(i);
    data::save_spine(dir, spine);
    refs.push_back({dir, is_val[std::size_t(i)] ? "val" : "train"});
    std::cerr << "wrote " << dir << " (" << spine.centroids.size()
              << " vertebrae, " << refs.back().split << ")\n";
  }
  data::write_phantom_manifest(out + "/" + kPhantomManifest, refs);
  dump_config(rc, out);
  return 0;
}

// ----------------------------------------------------------------- render --

int cmd_render(const config::RunConfig& rc) {
  apply_threads(rc, true);
  const std::string out = out_dir_of(rc);
  const std::string phantoms = rc.str("data.phantoms");
  if (phantoms.empty()) throw DataError("data.phantoms (or --phantoms) is required");
  const data::RenderOptions opts = config::make_render_options(rc);

  const std::vector<data::SpineRef> spines =
      data::read_phantom_manifest(phantoms + "/" + kPhantomManifest);
  std::vector<data::SampleRef> refs;
  for (const data::SpineRef& sref : spines) {
    const phantom::SpinePhantom spine = data::load_spine(sref.dir);
    const std::string spine_name = fs::path(sref.dir).filename().string();
    const std::vector<data::RenderedSample> rendered =
        data::render_samples(spine, opts);

    const drr::ConeBeamGeometry g_s =
        data::geometry_for(drr::View::Sagittal, opts, spine.density);
    const drr::ConeBeamGeometry g_c =
        data::geometry_for(drr::View::Coronal, opts, spine.density);
    std::vector<assemble::AssemblyInput> centroids2d;
    for (const data::RenderedSample& r : rendered) {
      const std::string dir = out + "/" + sample_dir_name(spine_name, r.label);
      data::save_sample(dir, r);
      refs.push_back({dir, r.label, sref.split});
      centroids2d.push_back({r.label, drr::project_point(g_s, r.centroid_mm),
                             drr::project_point(g_c, r.centroid_mm)});
    }
    assemble::write_assembly_csv(out + "/" + spine_name + "_centroids2d.csv",
                                 centroids2d);
    std::cerr << "rendered " << spine_name << ": " << rendered.size()
              << " samples\n";
  }
  data::write_samples_manifest(out + "/" + kSamplesManifest, refs);
  dump_config(rc, out);
  return 0;
}

// ------------------------------------------------------------------ train --

std::vector<data::SampleRef> manifest_refs(const config::RunConfig& rc) {
  const std::string samples = rc.str("data.samples");
  if (samples.empty()) throw DataError("data.samples (or --samples) is required");
  return data::read_samples_manifest(samples + "/" + kSamplesManifest);
}

std::vector<data::SampleRef> refs_in_split(const std::vector<data::SampleRef>& refs,
                                           const std::string& split) {
  std::vector<data::SampleRef> out;
  for (const data::SampleRef& r : refs)
    if (split == "all" || r.split == split) out.push_back(r);
  return out;
}

int cmd_train(const config::RunConfig& rc, const std::string& resume) {
  apply_threads(rc, false);
  const std::string out = out_dir_of(rc);
  const train::TrainConfig tc = config::make_train_config(rc);
  const model::ModelConfig mc = config::make_model_config(rc);

  const std::vector<data::SampleRef> refs =
      refs_in_split(manifest_refs(rc), "train");
  if (refs.empty()) throw DataError("no training samples in manifest");
  std::vector<data::Sample> samples;
  samples.reserve(refs.size());
  for (const data::SampleRef& r : refs)
    samples.push_back(data::load_sample(r, tc.annotation));

  train::Trainer trainer(tc, mc);
  if (!resume.empty()) trainer.load(resume);
  dump_config(rc, out);
  const train::TrainResult res =
      train::train_loop(trainer, samples, tc.steps, /*echo_progress=*/true);
  std::cout << "checkpoint " << res.checkpoint_path << "\n"
            << "loss_log " << res.loss_log_path << "\n";
  return 0;
}

// ------------------------------------------------------------ infer / eval --

train::Trainer trainer_from_checkpoint(const config::RunConfig& rc,
                                       const std::string& ck_path) {
  if (ck_path.empty()) throw DataError("a checkpoint path is required");
  const nn::Checkpoint ck = nn::load_checkpoint(ck_path);
  auto meta = [&](const std::string& k) {
    auto it = ck.meta.find(k);
    if (it == ck.meta.end()) throw DataError("checkpoint is missing meta key: " + k);
    return it->second;
  };
  train::TrainConfig tc = config::make_train_config(rc);
  tc.variant = model::variant_from_string(meta("variant"));
  tc.annotation = drr::annotation_from_string(meta("annotation"));
  tc.seed = std::stoull(meta("seed"));
  if (std::stoll(meta("discriminator_param_count")) == 0) tc.alpha_d = 0;
  train::Trainer trainer(tc, config::make_model_config(rc));
  trainer.load(ck_path);
  return trainer;
}

bool id_matches(const std::string& id, const std::string& filter) {
  return filter.empty() || id.find(filter) != std::string::npos;
}

int cmd_infer(const config::RunConfig& rc) {
  apply_threads(rc, false);
  const std::string out = out_dir_of(rc);
  train::Trainer trainer = trainer_from_checkpoint(rc, rc.str("infer.checkpoint"));
  const std::string filter = rc.str("infer.filter");
  const std::string split = rc.str("eval.split");

  std::vector<data::SampleRef> refs = refs_in_split(manifest_refs(rc), split);
  std::vector<int> label_count(kLabelMax + 1, 0);
  int done = 0;
  for (const data::SampleRef& r : refs) {
    const std::string id = fs::path(r.dir).filename().string();
    if (!id_matches(id, filter)) continue;
    label_count[std::size_t(r.label)] += 1;
  }
  for (const data::SampleRef& r : refs) {
    const std::string id = fs::path(r.dir).filename().string();
    if (!id_matches(id, filter)) continue;
    const data::Sample s = data::load_sample(r, trainer.cfg.annotation);
    const Volume pred = train::infer_volume(trainer.g, s);
    const Volume mask = metrics::binarize(pred, s.label);
    fs::create_directories(out + "/" + id);
    write_volume(pred, out + "/" + id + "/pred.vhdr");
    write_volume(mask, out + "/" + id + "/mask.vhdr");
    // Flat per-label masks for `assemble`, valid when labels are unique
    // within the filtered set (e.g. the samples of one spine).
    if (label_count[std::size_t(s.label)] == 1) {
      char name[32];
      std::snprintf(name, sizeof(name), "/mask_%02d.vhdr", s.label);
      write_volume(mask, out + name);
    }
    done += 1;
  }
  if (done == 0) throw DataError("no samples matched the requested split/filter");
  dump_config(rc, out);
  std::cout << "inferred " << done << " samples into " << out << "\n";
  return 0;
}

int cmd_eval(const config::RunConfig& rc) {
  apply_threads(rc, true);
  const std::string out = out_dir_of(rc);
  train::Trainer trainer = trainer_from_checkpoint(rc, rc.str("infer.checkpoint"));
  const std::string split = rc.str("eval.split");
  const int cloud_points = int(rc.integer("eval.cloud_points"));

  std::vector<data::SampleRef> refs = refs_in_split(manifest_refs(rc), split);
  if (refs.empty()) throw DataError("no samples in split '" + split + "'");
  metrics::MetricsReport report;
  for (const data::SampleRef& r : refs) {
    const data::Sample s = data::load_sample(r, trainer.cfg.annotation);
    const Volume pred = train::infer_volume(trainer.g, s);
    report.rows.push_back(metrics::evaluate_sample(
        s.id, pred, s.y, s.label, derive_seed(trainer.cfg.seed, s.id),
        cloud_points));
  }
  report.write_csv(out + "/metrics.csv");
  report.write_summary(out + "/metrics_summary.txt");
  dump_config(rc, out);
  const metrics::Aggregate d = report.aggregate(&metrics::MetricsRow::dice);
  const metrics::Aggregate h = report.aggregate(&metrics::MetricsRow::hausdorff_mm);
  std::printf("samples %zu dice %.4f +- %.4f hausdorff_mm %.3f +- %.3f\n",
              report.rows.size(), d.mean, d.stddev, h.mean, h.stddev);
  return 0;
}

// ----------------------------------------------------------------- ablate --

int cmd_ablate(const config::RunConfig& rc) {
  apply_threads(rc, false);
  const std::string out = out_dir_of(rc);

  ablate::AblationConfig ac;
  ac.base = config::make_train_config(rc);
  ac.model = config::make_model_config(rc);
  ac.steps_per_cell = rc.integer("ablate.steps");
  ac.checkpoint_dir = rc.str("ablate.checkpoints");
  ac.cloud_points = int(rc.integer("eval.cloud_points"));
  ac.echo_progress = true;

  std::vector<model::Variant> variants;
  for (const std::string& s : rc.list("ablate.variants"))
    variants.push_back(model::variant_from_string(s));
  std::vector<drr::AnnotationType> annotations;
  for (const std::string& s : rc.list("ablate.annotations"))
    annotations.push_back(drr::annotation_from_string(s));

  const std::vector<data::SampleRef> refs = manifest_refs(rc);
  const std::vector<data::SampleRef> train_refs = refs_in_split(refs, "train");
  std::vector<data::SampleRef> eval_refs = refs_in_split(refs, "val");
  if (eval_refs.empty()) eval_refs = train_refs;  // overfit-style datasets
  if (train_refs.empty()) throw DataError("no training samples in manifest");

  const ablate::AblationReport report =
      ablate::run_ablation(train_refs, eval_refs, variants, annotations, ac);
  report.write_csv(out + "/ablation.csv");
  dump_config(rc, out);
  for (const ablate::AblationCell& c : report.cells)
    std::printf("%s %s: dice %.4f hausdorff_mm %.3f (reference %.2f%% / %.2f mm)\n",
                c.kind.c_str(), c.name.c_str(), c.mean_dice, c.mean_hausdorff_mm,
                c.reference.dice_pct, c.reference.hausdorff_mm);
  return 0;
}

// --------------------------------------------------------------- assemble --

int cmd_assemble(const config::RunConfig& rc) {
  apply_threads(rc, false);
  const std::string out = out_dir_of(rc);
  const std::string centroids_path = rc.str("assemble.centroids");
  const std::string preds_dir = rc.str("assemble.preds");
  if (centroids_path.empty()) throw DataError("assemble.centroids (or --centroids) is required");
  if (preds_dir.empty()) throw DataError("assemble.preds (or --preds) is required");

  const data::RenderOptions opts = config::make_render_options(rc);
  drr::ConeBeamGeometry g_s, g_c;
  g_s.view = drr::View::Sagittal;
  g_c.view = drr::View::Coronal;
  for (drr::ConeBeamGeometry* g : {&g_s, &g_c}) {
    g->sdd_mm = opts.sdd_mm;
    g->sod_mm = opts.sod_mm;
    g->detector_spacing_mm = opts.detector_spacing_mm;
    g->detector_shape = {3, 3};  // fusion uses detector mm only
  }

  const std::vector<int> canvas = rc.int_list("assemble.canvas");
  if (canvas.size() != 3) throw DataError("assemble.canvas must be three integers");
  const double sp = rc.real("assemble.spacing_mm");

  std::vector<std::pair<Volume, int>> preds;
  std::vector<Vec3> centroids;
  std::vector<std::string> warnings;
  for (const assemble::AssemblyInput& row :
       assemble::read_assembly_csv(centroids_path)) {
    char name[32];
    std::snprintf(name, sizeof(name), "/mask_%02d.vhdr", row.label);
    preds.emplace_back(read_volume(preds_dir + name), row.label);
    centroids.push_back(
        assemble::fuse_centroids(row.c_sag, row.c_cor, g_s, g_c, &warnings));
  }
  const assemble::SpineModel model = assemble::stack_spine(
      preds, centroids, {canvas[0], canvas[1], canvas[2]}, Vec3{sp, sp, sp});
  for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
  for (const std::string& w : model.warnings) std::cerr << "warning: " << w << "\n";

  const std::string canvas_path = rc.str("assemble.out");
  write_volume(model.canvas, canvas_path);
  assemble::write_placed_csv(out + "/placements.csv", model.placed);
  dump_config(rc, out);
  std::cout << "assembled " << model.placed.size() << " vertebrae into "
            << canvas_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-spine lab: phantoms, cone-beam DRRs, 2D-to-3D "
               "vertebra synthesis, metrics, and spine assembly"};
  app.require_subcommand(1);

  CommonArgs common[7];
  std::string resume, flag_out, flag_phantoms, flag_samples, flag_checkpoint;
  std::string flag_centroids, flag_preds, flag_assemble_out, flag_split, flag_filter;
  long long flag_n = -1, flag_steps = -1;
  long long flag_seed = -1;

  CLI::App* c_phantom = app.add_subcommand("phantom", "Generate spine phantoms");
  add_common(c_phantom, common[0]);
  c_phantom->add_option("--n", flag_n, "number of spines (phantom.n)");
  c_phantom->add_option("--seed", flag_seed, "master seed (seed)");
  c_phantom->add_option("--out", flag_out, "output directory (out_dir)");

  CLI::App* c_render = app.add_subcommand("render", "Render DRR sample patches");
  add_common(c_render, common[1]);
  c_render->add_option("--phantoms", flag_phantoms, "phantom directory (data.phantoms)");
  c_render->add_option("--out", flag_out, "output directory (out_dir)");

  CLI::App* c_train = app.add_subcommand("train", "Train the synthesis model");
  add_common(c_train, common[2]);
  c_train->add_option("--samples", flag_samples, "sample directory (data.samples)");
  c_train->add_option("--steps", flag_steps, "optimizer steps (train.steps)");
  c_train->add_option("--seed", flag_seed, "master seed (seed)");
  c_train->add_option("--out", flag_out, "output directory (out_dir)");
  c_train->add_option("--resume", resume, "checkpoint to resume from");

  CLI::App* c_infer = app.add_subcommand("infer", "Predict vertebra volumes");
  add_common(c_infer, common[3]);
  c_infer->add_option("--checkpoint", flag_checkpoint, "trained checkpoint (infer.checkpoint)");
  c_infer->add_option("--samples", flag_samples, "sample directory (data.samples)");
  c_infer->add_option("--split", flag_split, "train|val|all (eval.split)");
  c_infer->add_option("--filter", flag_filter, "substring filter on sample ids");
  c_infer->add_option("--out", flag_out, "output directory (out_dir)");

  CLI::App* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(c_eval, common[4]);
  c_eval->add_option("--checkpoint", flag_checkpoint, "trained checkpoint (infer.checkpoint)");
  c_eval->add_option("--samples", flag_samples, "sample directory (data.samples)");
  c_eval->add_option("--split", flag_split, "train|val|all (eval.split)");
  c_eval->add_option("--out", flag_out, "output directory (out_dir)");

  CLI::App* c_ablate = app.add_subcommand("ablate", "Run the ablation grid");
  add_common(c_ablate, common[5]);
  c_ablate->add_option("--samples", flag_samples, "sample directory (data.samples)");
  c_ablate->add_option("--steps", flag_steps, "steps per cell (ablate.steps)");
  c_ablate->add_option("--seed", flag_seed, "master seed (seed)");
  c_ablate->add_option("--out", flag_out, "output directory (out_dir)");

  CLI::App* c_assemble = app.add_subcommand("assemble", "Fuse centroids and stack a spine");
  add_common(c_assemble, common[6]);
  c_assemble->add_option("--centroids", flag_centroids, "2D centroid csv (assemble.centroids)");
  c_assemble->add_option("--preds", flag_preds, "directory of mask_NN.vhdr files (assemble.preds)");
  c_assemble->add_option("--canvas-out", flag_assemble_out, "output volume path (assemble.out)");
  c_assemble->add_option("--out", flag_out, "output directory (out_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    auto with_flags = [&](const CommonArgs& args) {
      config::RunConfig rc = resolve(args);
      if (flag_seed >= 0) rc.set("seed", std::to_string(flag_seed));
      if (flag_n >= 0) rc.set("phantom.n", std::to_string(flag_n));
      if (!flag_out.empty()) rc.set("out_dir", flag_out);
      if (!flag_phantoms.empty()) rc.set("data.phantoms", flag_phantoms);
      if (!flag_samples.empty()) rc.set("data.samples", flag_samples);
      if (!flag_checkpoint.empty()) rc.set("infer.checkpoint", flag_checkpoint);
      if (!flag_split.empty()) rc.set("eval.split", flag_split);
      if (!flag_filter.empty()) rc.set("infer.filter", flag_filter);
      if (!flag_centroids.empty()) rc.set("assemble.centroids", flag_centroids);
      if (!flag_preds.empty()) rc.set("assemble.preds", flag_preds);
      if (!flag_assemble_out.empty()) rc.set("assemble.out", flag_assemble_out);
      return rc;
    };
    if (c_phantom->parsed()) return cmd_phantom(with_flags(common[0]));
    if (c_render->parsed()) return cmd_render(with_flags(common[1]));
    if (c_train->parsed()) {
      config::RunConfig rc = with_flags(common[2]);
      if (flag_steps >= 0) rc.set("train.steps", std::to_string(flag_steps));
      return cmd_train(rc, resume);
    }
    if (c_infer->parsed()) return cmd_infer(with_flags(common[3]));
    if (c_eval->parsed()) return cmd_eval(with_flags(common[4]));
    if (c_ablate->parsed()) {
      config::RunConfig rc = with_flags(common[5]);
      if (flag_steps >= 0) rc.set("ablate.steps", std::to_string(flag_steps));
      return cmd_ablate(rc);
    }
    if (c_assemble->parsed()) return cmd_assemble(with_flags(common[6]));
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
