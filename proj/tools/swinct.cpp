/*
 * Copyright 2026 The swinct Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line surface: prepare | train | eval | count | bench.
//
// Every command is deterministic given (--config, --seed); only bench wall
// times vary between runs. Outputs are written atomically. Exit codes:
// 0 ok, 2 usage, 3 data/format, 4 numeric, 5 internal. SWINCT_THREADS caps
// the prepare worker pool.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "swinct/bench.hpp"
#include "swinct/driver.hpp"
#include "swinct/metrics.hpp"
#include "swinct/runconfig.hpp"

namespace {

using namespace swinct;

std::string with_commas(std::uint64_t v) {
  std::string raw = std::to_string(v);
  std::string out;
  int run = 0;
  for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
    if (run && run % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++run;
  }
  return std::string(out.rbegin(), out.rend());
}

const char* head_name(HeadKind k) {
  switch (k) {
    case HeadKind::none: return "none";
    case HeadKind::classifier: return "classifier";
    default: return "segmentation";
  }
}

void print_prepare_summary(const PrepareResult& res, const std::string& out) {
  std::printf("dataset written to %s\n", out.c_str());
  for (const char* s : {"train", "val", "test"}) {
    const auto& js = res.report.at("splits").at(s);
    std::printf("  %-5s %5llu records", s,
                static_cast<unsigned long long>(
                    js.at("records").get<std::uint64_t>()));
    if (js.contains("positives"))
      std::printf("  (%llu pos, %llu neg)",
                  static_cast<unsigned long long>(
                      js.at("positives").get<std::uint64_t>()),
                  static_cast<unsigned long long>(
                      js.at("negatives").get<std::uint64_t>()));
    if (js.contains("pos_neg_achieved"))
      std::printf("  pos:neg %.3g", js.at("pos_neg_achieved").get<double>());
    if (js.contains("fraction_achieved"))
      std::printf("  fraction %.3g",
                  js.at("fraction_achieved").get<double>());
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "swinct: shifted-window transformer toolkit for lung-CT slices.\n"
      "Deterministic given (--config, --seed); SWINCT_THREADS caps worker "
      "pools."};
  app.require_subcommand(1);

  std::string g_config, g_out;
  std::uint64_t g_seed = 0;
  bool g_json = false;
  auto* o_config =
      app.add_option("--config", g_config, "JSON run configuration file");
  auto* o_seed = app.add_option("--seed", g_seed, "Seed (overrides config)");
  auto* o_out =
      app.add_option("--out", g_out, "Output directory (overrides config)");
  app.add_flag("--json", g_json, "Machine-readable stdout");

  auto load_rc = [&]() -> RunConfig {
    RunConfig rc;
    if (o_config->count()) rc = load_run_config(g_config);
    if (o_seed->count()) rc.seed = g_seed;
    if (o_out->count()) rc.out = g_out;
    return rc;
  };
  auto require_out = [](const RunConfig& rc, const char* cmd) {
    if (rc.out.empty())
      throw usage_error(std::string(cmd) +
                        ": an output directory is required (--out)");
  };

  // ---- prepare -----------------------------------------------------------
  auto* prep = app.add_subcommand(
      "prepare", "Build a slice dataset from volumes or phantoms");
  prep->fallthrough();
  std::size_t p_phantom = 0, p_phantom_size = 0, p_crop = 0, p_img = 0,
              p_expand = 0, p_negpv = 0;
  double p_prob = 0, p_negfrac = 0;
  std::string p_task, p_ratio, p_volumes, p_annotations, p_masks;
  bool p_paper = false;
  auto* po_phantom = prep->add_option("--phantom", p_phantom,
                                      "Generate N synthetic volumes");
  auto* po_psize = prep->add_option("--phantom-size", p_phantom_size,
                                    "Phantom volume side, voxels");
  auto* po_prob = prep->add_option("--nodule-prob", p_prob,
                                   "Phantom nodule probability");
  auto* po_task = prep->add_option("--task", p_task,
                                   "classification | segmentation");
  auto* po_ratio = prep->add_option(
      "--ratio", p_ratio, "Split proportions a:b:c (e.g. 8:1:1)");
  auto* po_paper = prep->add_flag(
      "--paper-splits", p_paper,
      "Slice-level segmentation splits without the volume leakage guard");
  auto* po_img = prep->add_option("--img-size", p_img,
                                  "Resize slices to this extent (0 = native)");
  auto* po_crop = prep->add_option("--crop", p_crop,
                                   "Nodule cube side for classification");
  auto* po_expand = prep->add_option(
      "--expand", p_expand, "Records per positive (1 = no augmentation)");
  auto* po_negfrac = prep->add_option("--neg-fraction", p_negfrac,
                                      "Subsample the negative pool");
  auto* po_negpv = prep->add_option("--neg-per-volume", p_negpv,
                                    "Candidate negative crops per volume");
  auto* po_volumes =
      prep->add_option("--volumes", p_volumes, "Directory of .swv volumes");
  auto* po_ann = prep->add_option("--annotations", p_annotations,
                                  "JSONL nodule annotations");
  auto* po_masks =
      prep->add_option("--masks", p_masks, "Directory of .swv voxel masks");
  prep->callback([&] {
    RunConfig rc = load_rc();
    PrepareOptions opt = rc.pipeline;
    opt.seed = rc.seed;
    if (po_phantom->count()) opt.phantom = p_phantom;
    if (po_psize->count()) opt.phantom_size = p_phantom_size;
    if (po_prob->count()) opt.nodule_prob = p_prob;
    if (po_task->count()) opt.task = p_task;
    if (po_ratio->count()) opt.ratio = parse_ratio(p_ratio);
    if (po_paper->count()) opt.paper_splits = p_paper;
    if (po_img->count()) opt.img_size = p_img;
    if (po_crop->count()) opt.crop = p_crop;
    if (po_expand->count()) opt.expand = p_expand;
    if (po_negfrac->count()) opt.neg_fraction = p_negfrac;
    if (po_negpv->count()) opt.neg_per_volume = p_negpv;
    if (po_volumes->count()) opt.volumes = p_volumes;
    if (po_ann->count()) opt.annotations = p_annotations;
    if (po_masks->count()) opt.masks = p_masks;
    if (opt.task != "classification" && opt.task != "segmentation")
      throw usage_error("prepare: task must be classification or "
                        "segmentation");
    require_out(rc, "prepare");
    if (opt.phantom == 0 && opt.volumes.empty())
      throw usage_error("prepare: give --phantom N or --volumes DIR");
    VolumeSet set =
        opt.phantom > 0
            ? phantom_volume_set(opt.seed, opt.phantom, opt.phantom_size,
                                 opt.nodule_prob)
            : load_volume_set(opt.volumes, opt.annotations, opt.masks);
    if (opt.task == "classification" && set.annotations.empty())
      throw data_error("prepare: classification needs nodule annotations");
    PrepareResult res = prepare_dataset(set, opt, rc.out);
    if (g_json)
      std::cout << res.report.dump(2) << "\n";
    else
      print_prepare_summary(res, rc.out);
  });

  // ---- train -------------------------------------------------------------
  auto* tr = app.add_subcommand("train",
                                "Train a model on a prepared dataset");
  tr->fallthrough();
  std::string t_data, t_recipe, t_variant, t_init, t_precision, t_schedule;
  std::size_t t_epochs = 0, t_iters = 0, t_batch = 0, t_img = 0,
              t_classes = 0, t_decoder = 0, t_evalevery = 0, t_warm_ep = 0,
              t_warm_it = 0;
  double t_lr = 0, t_wd = 0, t_dp = 0, t_clip = 0, t_minlr = 0,
         t_emadecay = 0;
  bool t_curves = false, t_ema = false;
  auto* to_data =
      tr->add_option("--data", t_data, "Prepared dataset directory");
  auto* to_recipe = tr->add_option(
      "--recipe", t_recipe, "regular | finetune | segmentation (preset)");
  auto* to_variant = tr->add_option("--variant", t_variant,
                                    "swin-t | swin-s | swin-b | swin-b-384");
  auto* to_img = tr->add_option("--img-size", t_img,
                                "Model input extent (0 = from dataset)");
  auto* to_classes =
      tr->add_option("--classes", t_classes, "Number of classes");
  auto* to_decoder = tr->add_option("--decoder-dim", t_decoder,
                                    "Segmentation decoder width");
  auto* to_epochs = tr->add_option("--epochs", t_epochs, "Training epochs");
  auto* to_warm_ep =
      tr->add_option("--warmup-epochs", t_warm_ep, "Warmup epochs");
  auto* to_iters =
      tr->add_option("--iterations", t_iters, "Training iterations");
  auto* to_warm_it = tr->add_option("--warmup-iterations", t_warm_it,
                                    "Warmup iterations");
  auto* to_batch = tr->add_option("--batch", t_batch, "Batch size");
  auto* to_lr = tr->add_option("--lr", t_lr, "Base learning rate");
  auto* to_minlr =
      tr->add_option("--min-lr", t_minlr, "Cosine floor learning rate");
  auto* to_wd = tr->add_option("--wd", t_wd, "Weight decay");
  auto* to_schedule = tr->add_option("--schedule", t_schedule,
                                     "cosine | linear | constant");
  auto* to_dp = tr->add_option("--drop-path", t_dp, "Stochastic depth rate");
  auto* to_clip =
      tr->add_option("--clip-norm", t_clip, "Gradient clip norm (0 = off)");
  auto* to_ema = tr->add_flag("--ema", t_ema, "Keep an EMA of the weights");
  auto* to_emadecay =
      tr->add_option("--ema-decay", t_emadecay, "EMA decay factor");
  auto* to_evalevery = tr->add_option(
      "--eval-every", t_evalevery, "Evaluation period for iteration recipes");
  auto* to_init = tr->add_option(
      "--init", t_init, "Warm-start checkpoint (must match the model)");
  auto* to_precision =
      tr->add_option("--precision", t_precision, "f32 | f64");
  tr->add_flag("--curves", t_curves, "Also emit SVG curve plots");
  tr->callback([&] {
    RunConfig rc = load_rc();
    if (to_variant->count()) rc.model = swin_variant(t_variant);
    if (to_img->count()) rc.model.img_size = t_img;
    if (to_recipe->count()) rc.recipe = recipe_by_name(t_recipe);
    if (to_epochs->count()) rc.recipe.epochs = t_epochs;
    if (to_warm_ep->count()) rc.recipe.warmup_epochs = t_warm_ep;
    if (to_iters->count()) rc.recipe.iterations = t_iters;
    if (to_warm_it->count()) rc.recipe.warmup_iterations = t_warm_it;
    if (to_batch->count()) rc.recipe.batch_size = t_batch;
    if (to_lr->count()) rc.recipe.lr = t_lr;
    if (to_minlr->count()) rc.recipe.min_lr = t_minlr;
    if (to_wd->count()) rc.recipe.weight_decay = t_wd;
    if (to_schedule->count()) rc.recipe.schedule = schedule_kind(t_schedule);
    if (to_dp->count()) rc.recipe.drop_path = t_dp;
    if (to_clip->count()) rc.recipe.clip_norm = t_clip;
    if (to_ema->count()) rc.recipe.use_ema = t_ema;
    if (to_emadecay->count()) {
      rc.recipe.ema_decay = t_emadecay;
      rc.recipe.use_ema = true;
    }
    if (to_evalevery->count()) rc.recipe.eval_every = t_evalevery;
    if (to_classes->count()) rc.head.num_classes = t_classes;
    if (to_decoder->count()) rc.head.decoder_dim = t_decoder;
    if (to_precision->count()) rc.precision = t_precision;
    if (!to_data->count())
      throw usage_error("train: a prepared dataset is required (--data)");
    require_out(rc, "train");

    TrainSpec spec;
    spec.model = rc.model;
    spec.num_classes = rc.head.num_classes;
    spec.decoder_dim = rc.head.decoder_dim;
    spec.recipe = rc.recipe;
    spec.seed = rc.seed;
    spec.precision = rc.precision;
    spec.init_dir = t_init;
    spec.curves = t_curves;
    TrainOutcome out = train_on_dataset(t_data, spec, rc.out);

    if (g_json) {
      nlohmann::json j;
      j["task"] = out.task;
      j["steps"] = out.result.steps_run;
      if (out.result.has_best) {
        j["best_metric"] = out.result.best_metric;
        j["best_step"] = out.result.best_step;
      }
      if (!out.result.curve.empty())
        j["final_train_loss"] = out.result.curve.back().train_loss;
      j["files"] = out.files;
      std::cout << j.dump(2) << "\n";
    } else {
      std::printf("trained %zu steps on %s data\n", out.result.steps_run,
                  out.task.c_str());
      if (out.result.has_best)
        std::printf("best validation metric %.6f at step %zu\n",
                    out.result.best_metric, out.result.best_step + 1);
      for (const auto& f : out.files) std::printf("  wrote %s\n", f.c_str());
    }
  });

  // ---- eval --------------------------------------------------------------
  auto* ev = app.add_subcommand("eval",
                                "Score a checkpoint on one dataset split");
  ev->fallthrough();
  std::string e_data, e_ckpt, e_split = "test";
  auto* eo_data =
      ev->add_option("--data", e_data, "Prepared dataset directory");
  auto* eo_ckpt =
      ev->add_option("--checkpoint", e_ckpt, "Checkpoint directory");
  ev->add_option("--split", e_split, "train | val | test (default test)");
  ev->callback([&] {
    RunConfig rc = load_rc();
    if (!eo_data->count())
      throw usage_error("eval: a prepared dataset is required (--data)");
    if (!eo_ckpt->count())
      throw usage_error("eval: a checkpoint is required (--checkpoint)");
    nlohmann::json report = evaluate_checkpoint(e_data, e_ckpt, e_split);
    if (!rc.out.empty()) {
      atomic_write_file(rc.out + "/metrics.json", report.dump(2) + "\n");
      if (!g_json)
        std::printf("wrote %s/metrics.json\n", rc.out.c_str());
    }
    if (g_json) {
      std::cout << report.dump(2) << "\n";
    } else {
      std::printf("%s / %s split: %llu records\n",
                  report.at("task").get<std::string>().c_str(),
                  e_split.c_str(),
                  static_cast<unsigned long long>(
                      report.at("samples").get<std::uint64_t>()));
      for (const char* k : {"top1", "top5", "miou", "macc", "aacc"})
        std::printf("  %-5s %.6f\n", k, report.at(k).get<double>());
      std::printf("  params %s, flops %s\n",
                  with_commas(report.at("params").get<std::uint64_t>()).c_str(),
                  with_commas(report.at("flops").get<std::uint64_t>()).c_str());
    }
  });

  // ---- count -------------------------------------------------------------
  auto* ct = app.add_subcommand(
      "count", "Analytic parameter and FLOP counts for a model");
  ct->fallthrough();
  std::string c_variant, c_head = "classifier";
  std::size_t c_res = 0, c_classes = 1000, c_decoder = kDefaultDecoderDim;
  auto* co_variant = ct->add_option("--variant", c_variant,
                                    "swin-t | swin-s | swin-b | swin-b-384");
  auto* co_res = ct->add_option("--res", c_res, "Input resolution");
  ct->add_option("--classes", c_classes, "Head classes (default 1000)");
  ct->add_option("--head", c_head, "none | classifier | segmentation");
  ct->add_option("--decoder-dim", c_decoder, "Segmentation decoder width");
  ct->callback([&] {
    RunConfig rc = load_rc();
    SwinConfig cfg = rc.model;
    if (co_variant->count()) cfg = swin_variant(c_variant);
    if (cfg.variant == "custom" && !o_config->count() && !co_variant->count())
      cfg = SwinConfig::swin_t();
    std::size_t res = co_res->count() ? c_res
                      : cfg.img_size  ? cfg.img_size
                                      : 224;
    HeadKind hk = head_kind(c_head);
    ComplexityReport rep = count_model(cfg, hk, c_classes, res, c_decoder);

    // analytic attention cost per stage: the windowed form each block pays
    // versus what one global layer at that stage geometry would cost
    nlohmann::json stages = nlohmann::json::array();
    std::uint64_t wtotal = 0, gtotal = 0;
    std::size_t grid = res / cfg.patch_size;
    for (std::size_t st = 0; st < 4; ++st) {
      std::size_t r = grid >> st;
      std::size_t d = cfg.embed_dim << st;
      std::size_t m = std::min(cfg.window_size, r);
      std::uint64_t w = flops_wmsa(r, r, d, m) * cfg.depths[st];
      std::uint64_t g = flops_msa(r, r, d) * cfg.depths[st];
      wtotal += w;
      gtotal += g;
      stages.push_back({{"stage", st},
                        {"grid", r},
                        {"dim", d},
                        {"blocks", cfg.depths[st]},
                        {"windowed_flops", w},
                        {"global_flops", g}});
    }

    if (g_json) {
      nlohmann::json j;
      j["variant"] = cfg.variant;
      j["resolution"] = res;
      j["classes"] = c_classes;
      j["head"] = head_name(hk);
      if (hk == HeadKind::segmentation) j["decoder_dim"] = c_decoder;
      j["params"] = rep.params_total;
      j["flops"] = rep.macs_total;
      nlohmann::json mods = nlohmann::json::array();
      for (const auto& m : rep.modules)
        mods.push_back(
            {{"name", m.name}, {"params", m.params}, {"flops", m.macs}});
      j["modules"] = mods;
      j["attention"] = {{"stages", stages},
                        {"windowed_total", wtotal},
                        {"global_total", gtotal}};
      std::cout << j.dump(2) << "\n";
    } else {
      std::printf("%s at %zu^2, %s head, %zu classes\n", cfg.variant.c_str(),
                  res, head_name(hk), c_classes);
      std::printf("  %-28s %14s %16s\n", "module", "params", "flops");
      for (const auto& m : rep.modules)
        std::printf("  %-28s %14s %16s\n", m.name.c_str(),
                    with_commas(m.params).c_str(), with_commas(m.macs).c_str());
      std::printf("  %-28s %14s %16s\n", "total",
                  with_commas(rep.params_total).c_str(),
                  with_commas(rep.macs_total).c_str());
      std::printf("attention cost, windowed vs global:\n");
      for (const auto& s : stages)
        std::printf("  stage %llu: grid %3llu, dim %4llu, %llu blocks: "
                    "%s vs %s\n",
                    s.at("stage").get<unsigned long long>(),
                    s.at("grid").get<unsigned long long>(),
                    s.at("dim").get<unsigned long long>(),
                    s.at("blocks").get<unsigned long long>(),
                    with_commas(s.at("windowed_flops").get<std::uint64_t>())
                        .c_str(),
                    with_commas(s.at("global_flops").get<std::uint64_t>())
                        .c_str());
      std::printf("  windowed total %s, global total %s (%.1fx)\n",
                  with_commas(wtotal).c_str(), with_commas(gtotal).c_str(),
                  gtotal > 0 && wtotal > 0
                      ? static_cast<double>(gtotal) /
                            static_cast<double>(wtotal)
                      : 0.0);
    }
  });

  // ---- bench -------------------------------------------------------------
  auto* bn = app.add_subcommand(
      "bench", "Time windowed vs global attention over a size sweep");
  bn->fallthrough();
  std::vector<std::size_t> b_sweep;
  std::size_t b_dim = 96, b_window = 7;
  double b_minms = 25.0;
  bn->add_option("--sweep", b_sweep,
                 "Feature-map sides, e.g. 14,28,56,112 (default)")
      ->delimiter(',');
  bn->add_option("--dim", b_dim, "Channel count C");
  bn->add_option("--window", b_window, "Window side M");
  bn->add_option("--min-ms", b_minms, "Minimum time per measurement");
  bn->callback([&] {
    RunConfig rc = load_rc();
    std::vector<std::size_t> sides =
        b_sweep.empty() ? std::vector<std::size_t>{14, 28, 56, 112} : b_sweep;
    BenchResult res = bench_attention(sides, b_dim, b_window, rc.seed,
                                      b_minms);
    std::string csv = bench_csv(res);
    if (!rc.out.empty()) {
      atomic_write_file(rc.out + "/bench.csv", csv);
      if (!g_json) std::printf("wrote %s/bench.csv\n", rc.out.c_str());
    }
    if (g_json) {
      nlohmann::json j;
      j["dim"] = res.dim;
      j["window"] = res.window;
      j["windowed_slope"] = res.windowed_slope;
      j["global_slope"] = res.global_slope;
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& r : res.rows)
        rows.push_back({{"side", r.side},
                        {"tokens", r.tokens},
                        {"windowed_ms", r.windowed_ms},
                        {"global_ms", r.global_ms},
                        {"analytic_wmsa_flops", r.analytic_wmsa},
                        {"analytic_msa_flops", r.analytic_msa}});
      j["rows"] = rows;
      std::cout << j.dump(2) << "\n";
    } else {
      std::fputs(csv.c_str(), stdout);
      std::printf("windowed slope %.3f (linear in tokens)\n",
                  res.windowed_slope);
      std::printf("global slope %.3f (quadratic in tokens)\n",
                  res.global_slope);
    }
  });

  try {
    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const usage_error& e) {
    std::fprintf(stderr, "swinct: %s\n", e.what());
    return 2;
  } catch (const data_error& e) {
    std::fprintf(stderr, "swinct: %s\n", e.what());
    return 3;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "swinct: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "swinct: internal error: %s\n", e.what());
    return 5;
  }
}
