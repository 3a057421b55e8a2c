#include "mtuda/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI/CLI.hpp>
#include <nlohmann/json.hpp>

#include "mtuda/aalp.hpp"
#include "mtuda/checkpoint.hpp"
#include "mtuda/config.hpp"
#include "mtuda/error.hpp"
#include "mtuda/png_io.hpp"
#include "mtuda/report.hpp"

#ifndef MTUDA_CODE_VERSION
#define MTUDA_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtuda {

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json environment() {
  return {{"torch", std::to_string(TORCH_VERSION_MAJOR) + "." + std::to_string(TORCH_VERSION_MINOR) + "." +
                        std::to_string(TORCH_VERSION_PATCH)},
          {"threads", torch::get_num_threads()},
          {"compiler", __VERSION__},
          {"device", "cpu"}};
}

json record_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"seg", r.seg}, {"consistency", r.consistency}, {"pro", r.pro}, {"aalp", r.aalp},
          {"contrast", r.contrast}, {"selection_score", r.selection_score},
          {"source_val_metric", r.source_val_metric}, {"pseudo_metric", r.pseudo_metric}};
}

TrainConfig config_from_file(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  return TrainConfig::from_json(load_config_file(path));
}

std::string eval_table(const std::map<std::string, EvalReport>& reports) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-8s %7s %10s %10s %10s\n", "domain", "images", "fg_iou", "mean_dice",
                "fg_dice");
  out << line;
  for (const auto& [domain, r] : reports) {
    const double fg_dice = r.per_class_dice.size() > 1 ? r.per_class_dice[1] : r.per_class_dice.front();
    std::snprintf(line, sizeof(line), "%-8s %7zu %10.4f %10.4f %10.4f\n", domain.c_str(), r.images, r.foreground_iou,
                  r.mean_dice, fg_dice);
    out << line;
  }
  return out.str();
}

// Loads what train() sees for a given mode. Target masks are never loaded here.
TrainData training_data(TrainMode mode, const std::string& source_dir, const std::string& target_dir) {
  TrainData data;
  if (mode == TrainMode::supervised) {
    require(!target_dir.empty(), ErrorKind::invalid_argument, "--supervised needs --target");
    data.source = load_dataset(target_dir, Domain::target, MaskLoad::load);
    require(!data.source.empty(), ErrorKind::format, target_dir + ": no target-domain images");
    return data;
  }
  require(!source_dir.empty(), ErrorKind::invalid_argument, "--source is required");
  data.source = load_dataset(source_dir, Domain::source, MaskLoad::load);
  require(!data.source.empty(), ErrorKind::format, source_dir + ": no source-domain images");
  if (!target_dir.empty()) {
    data.target = load_dataset(target_dir, Domain::target, MaskLoad::skip);
    require(!data.target.empty(), ErrorKind::format, target_dir + ": no target-domain images");
  }
  return data;
}

int exit_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::config: return exit_usage;
    case ErrorKind::divergence: return exit_divergence;
    default: return exit_data;
  }
}

Grid<png::Rgb> patch_overlay(const Image& image, const SaliencyMap& sal, const PatchSelection& sel, int scale) {
  const std::size_t H = image.rows() * scale, W = image.cols() * scale;
  Grid<png::Rgb> out(H, W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double v = image(r / scale, c / scale);
      const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      const std::size_t sr = r / scale * sal.values.rows() / image.rows();
      const std::size_t sc = c / scale * sal.values.cols() / image.cols();
      png::Rgb px{g, g, g};
      if (sal.values(sr, sc) > sal.mean_value) px[0] = static_cast<std::uint8_t>(std::min(255, g / 2 + 128));
      out(r, c) = px;
    }
  const auto& b = sel.bounds;
  const std::size_t r0 = b.row * scale, c0 = b.col * scale, r1 = (b.row + b.height) * scale - 1,
                    c1 = (b.col + b.width) * scale - 1;
  for (std::size_t r = r0; r <= r1; ++r) out(r, c0) = out(r, c1) = png::Rgb{0, 255, 0};
  for (std::size_t c = c0; c <= c1; ++c) out(r0, c) = out(r1, c) = png::Rgb{0, 255, 0};
  return out;
}

}  // namespace

std::string epoch_csv_header() {
  return "epoch,seg,consistency,pro,aalp,contrast,selection_score,source_val_metric\n";
}

std::string epoch_csv_row(const EpochRecord& r) {
  return std::to_string(r.epoch) + "," + num(r.seg) + "," + num(r.consistency) + "," + num(r.pro) + "," +
         num(r.aalp) + "," + num(r.contrast) + "," + num(r.selection_score) + "," + num(r.source_val_metric) + "\n";
}

TrainResult train_run(const TrainConfig& cfg, const TrainData& data, std::uint64_t seed, const fs::path& run_dir,
                      const std::string& label) {
  fs::create_directories(run_dir);
  write_file_atomic(run_dir / "config.toml", format_config_text(cfg.to_json()));
  std::ofstream csv(run_dir / "epochs.csv", std::ios::trunc);
  csv << epoch_csv_header() << std::flush;

  json manifest = {{"label", label},
                   {"mode", to_string(cfg.mode)},
                   {"config", cfg.to_json()},
                   {"config_hash", cfg.hash()},
                   {"code_version", MTUDA_CODE_VERSION},
                   {"seed", seed},
                   {"started", utc_now()},
                   {"environment", environment()},
                   {"epochs", json::array()}};
  RunSplits splits = make_splits(data, cfg.val_fraction, seed);
  manifest["splits"] = splits.to_json();

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& rec, const TrainState& state, bool best) {
    csv << epoch_csv_row(rec) << std::flush;
    manifest["epochs"].push_back(record_json(rec));
    if (best) {
      CheckpointMeta meta{cfg, seed, splits, {{"label", label}, {"selection", record_json(rec)}}};
      save_checkpoint(run_dir / "best.ckpt", state, meta);
      manifest["best"] = record_json(rec);
    }
  };
  try {
    auto result = train(cfg, data, seed, hooks);
    manifest["status"] = "completed";
    manifest["finished"] = utc_now();
    write_file_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
  } catch (const Error& e) {
    manifest["status"] = e.kind() == ErrorKind::divergence ? "diverged" : "failed";
    manifest["error"] = e.what();
    manifest["finished"] = utc_now();
    write_file_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
    throw;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mean-teacher domain adaptation for segmentation", "mtuda"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic source/target dataset pair");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config, "Config file ([synthetic] section)")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output dataset root")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");

  // train
  auto* tr = app.add_subcommand("train", "Train one run (or every configured seed)");
  std::string tr_config, tr_source, tr_target, tr_out, tr_label;
  std::uint64_t tr_seed = 0;
  bool tr_supervised = false, tr_source_only = false, tr_all_seeds = false;
  tr->add_option("--config", tr_config, "Config file")->check(CLI::ExistingFile);
  tr->add_option("--source", tr_source, "Dataset root holding the source domain");
  tr->add_option("--target", tr_target, "Dataset root holding the target domain");
  tr->add_option("--out", tr_out, "Run directory")->required();
  auto* seed_opt = tr->add_option("--seed", tr_seed, "Seed (default: first configured seed)");
  tr->add_flag("--all-seeds", tr_all_seeds, "Run every configured seed into <out>/seed_<n>")->excludes(seed_opt);
  auto* sup = tr->add_flag("--supervised", tr_supervised, "Train on labeled target images");
  tr->add_flag("--source-only", tr_source_only, "Source supervision only, no adaptation")->excludes(sup);
  tr->add_option("--label", tr_label, "Row label used by report (default: the mode)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on labeled data");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", ev_out, "Also write the JSON report here");

  // style-demo
  auto* sd = app.add_subcommand("style-demo", "Render a stylized image");
  std::string sd_src, sd_tgt, sd_method = "fft", sd_out = "stylized.png";
  double sd_beta = 0.04;
  sd->add_option("--src", sd_src, "Content image")->required()->check(CLI::ExistingFile);
  sd->add_option("--tgt", sd_tgt, "Style image")->required()->check(CLI::ExistingFile);
  sd->add_option("--beta", sd_beta, "Low-frequency window")->check(CLI::Range(0.0, 1.0));
  sd->add_option("--method", sd_method, "fft or histogram")->check(CLI::IsMember({"fft", "histogram"}));
  sd->add_option("--out", sd_out, "Output PNG");

  // patch-demo
  auto* pd = app.add_subcommand("patch-demo", "Saliency overlay and selected patch");
  std::string pd_ckpt, pd_image, pd_out = "patch";
  pd->add_option("--checkpoint", pd_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  pd->add_option("--image", pd_image, "Grayscale PNG")->required()->check(CLI::ExistingFile);
  pd->add_option("--out", pd_out, "Output prefix (<out>.png and <out>.json)");

  // report
  auto* rp = app.add_subcommand("report", "Aggregate runs into mean ± std tables");
  std::vector<std::string> rp_runs;
  std::string rp_json;
  rp->add_option("--runs", rp_runs, "Run directories")->required()->expected(1, -1);
  rp->add_option("--json", rp_json, "Also write the JSON report here");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*gen) {
      SyntheticConfig sc;
      if (!gen_config.empty()) {
        const auto tree = load_config_file(gen_config);
        if (tree.contains("synthetic")) sc = synthetic_from_json(tree.at("synthetic"));
      }
      sc.validate();
      const auto domains = gen_synthetic_domains(sc, gen_seed);
      std::vector<LabeledImage> all = domains.source;
      all.insert(all.end(), domains.target.begin(), domains.target.end());
      save_dataset(all, gen_out);
      out << "wrote " << domains.source.size() << " source and " << domains.target.size() << " target slices to "
          << gen_out << "\n";
      return exit_ok;
    }

    if (*tr) {
      TrainConfig cfg = config_from_file(tr_config);
      if (tr_supervised) cfg.mode = TrainMode::supervised;
      if (tr_source_only) cfg.mode = TrainMode::source_only;
      const TrainData data = training_data(cfg.mode, tr_source, tr_target);
      require(cfg.mode != TrainMode::uda || !data.target.empty(), ErrorKind::invalid_argument,
              "adaptation needs --target");
      const std::string label = tr_label.empty() ? to_string(cfg.mode) : tr_label;
      std::vector<std::pair<std::uint64_t, fs::path>> runs;
      if (tr_all_seeds) {
        for (auto s : cfg.seeds) runs.emplace_back(s, fs::path(tr_out) / ("seed_" + std::to_string(s)));
      } else {
        runs.emplace_back(tr->count("--seed") ? tr_seed : cfg.seeds.front(), fs::path(tr_out));
      }
      std::vector<fs::path> dirs;
      for (const auto& [seed, dir] : runs) {
        const auto result = train_run(cfg, data, seed, dir, label);
        const auto& best = result.history[static_cast<std::size_t>(result.best_epoch)];
        out << "seed " << seed << ": best epoch " << result.best_epoch << ", selection score "
            << num(best.selection_score) << ", source val " << num(best.source_val_metric) << " -> " << dir.string()
            << "\n";
        dirs.push_back(dir);
      }
      if (dirs.size() > 1) out << aggregate_runs(dirs).to_table();
      return exit_ok;
    }

    if (*ev) {
      const auto ck = load_checkpoint(ev_ckpt);
      const auto& cfg = ck.meta.config;
      torch::set_num_threads(cfg.threads);
      const auto all = load_dataset(ev_data);
      require(!all.empty(), ErrorKind::format, ev_data + ": no images");
      TrainData data;
      std::vector<std::string> held_out = ck.meta.splits.source.val;
      held_out.insert(held_out.end(), ck.meta.splits.target.val.begin(), ck.meta.splits.target.val.end());
      std::map<std::string, std::vector<const LabeledImage*>> per_domain;
      for (const auto& im : all) {
        const bool in_source = cfg.mode == TrainMode::supervised ? im.domain == Domain::target
                                                                   : im.domain == Domain::source;
        if (in_source) data.source.push_back(im);
        else if (cfg.mode != TrainMode::supervised) data.target.push_back(im);
      }
      for (const auto& im : all) {
        if (!im.has_mask()) continue;
        const bool held = std::find(held_out.begin(), held_out.end(), im.case_id) != held_out.end();
        if (held) per_domain[to_string(im.domain)].push_back(&im);
      }
      // a domain without held-out cases was never trained on; evaluate all of it
      for (const Domain d : {Domain::source, Domain::target}) {
        const auto name = to_string(d);
        if (per_domain.count(name)) continue;
        for (const auto& im : all)
          if (im.domain == d && im.has_mask()) per_domain[name].push_back(&im);
        if (per_domain[name].empty()) per_domain.erase(name);
      }
      TrainState state = ck.state;
      const auto sel = selection_for(state, cfg, data, ck.meta.splits);
      std::map<std::string, EvalReport> reports;
      json report = json::object();
      for (const auto& [domain, images] : per_domain) {
        auto r = evaluate(state.teacher, images, cfg.network.num_classes);
        r.epoch = state.epoch - 1;
        r.seed = ck.meta.seed;
        r.selection_score = sel.score;
        report[domain] = r.to_json();
        reports[domain] = r;
      }
      report["selection"] = {{"score", sel.score}, {"source_metric", sel.source_metric},
                             {"pseudo_metric", sel.pseudo_metric}};
      report["checkpoint"] = ev_ckpt;
      out << report.dump(2) << "\n" << eval_table(reports);
      if (!ev_out.empty()) write_file_atomic(ev_out, report.dump(2) + "\n");
      return exit_ok;
    }

    if (*sd) {
      const Image src = png::read_gray(sd_src), tgt = png::read_gray(sd_tgt);
      require_same_shape(src, tgt, "style-demo");
      const Image styled = sd_method == "fft" ? fft_style_transfer(src, tgt, sd_beta) : histogram_match(src, tgt);
      png::write_gray16(sd_out, styled);
      out << "wrote " << sd_out << "\n";
      return exit_ok;
    }

    if (*pd) {
      const auto ck = load_checkpoint(pd_ckpt);
      const Image image = png::read_gray(pd_image);
      auto teacher = ck.state.teacher;
      const auto& cfg = ck.meta.config;
      torch::NoGradGuard no_grad;
      const auto x = images_to_tensor({&image}, teacher->parameters().front().scalar_type());
      const auto fwd = teacher->forward(x, {.capture_attention = true});
      std::vector<torch::Tensor> maps;
      for (const auto& a : fwd.attention) maps.push_back(a[0]);
      const auto sal = fuse_attention(maps, static_cast<std::size_t>(fwd.token_rows),
                                      static_cast<std::size_t>(fwd.token_cols));
      const auto stride = cfg.network.total_stride();
      auto side = [&](std::size_t n) {
        const auto cells = std::max<long>(1, std::lround(static_cast<double>(n) * cfg.patch_fraction / stride));
        return std::min<std::size_t>(n, static_cast<std::size_t>(cells * stride));
      };
      const auto sel = select_patch(sal, image.rows(), image.cols(), side(image.rows()), side(image.cols()));
      png::write_rgb(pd_out + ".png", patch_overlay(image, sal, sel, 4));
      json grid = json::array();
      for (std::size_t r = 0; r < sal.values.rows(); ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < sal.values.cols(); ++c) row.push_back(sal.values(r, c));
        grid.push_back(row);
      }
      const json side_car = {
          {"bounds", {{"row", sel.bounds.row}, {"col", sel.bounds.col}, {"height", sel.bounds.height},
                      {"width", sel.bounds.width}}},
          {"component_size", sel.component_size},
          {"component_sizes", sel.component_sizes},
          {"fallback", sel.fallback},
          {"saliency_mean", sal.mean_value},
          {"saliency", grid}};
      write_file_atomic(pd_out + ".json", side_car.dump(2) + "\n");
      out << side_car.dump(2) << "\n";
      return exit_ok;
    }

    if (*rp) {
      std::vector<fs::path> dirs(rp_runs.begin(), rp_runs.end());
      const auto report = aggregate_runs(dirs);
      out << report.to_table();
      if (!rp_json.empty()) write_file_atomic(rp_json, report.to_json().dump(2) + "\n");
      return exit_ok;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_data;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const c10::Error& e) {
    err << "error: " << e.what_without_backtrace() << "\n";
    return exit_data;
  }
  return exit_usage;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace mtuda
