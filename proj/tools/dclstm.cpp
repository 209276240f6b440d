#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dclstm/gradcheck.hpp"
#include "dclstm/log.hpp"
#include "dclstm/train.hpp"

// Subcommands: synth (write a synthetic corpus), train, eval, gradcheck,
// ablate (deformable vs plain ConvLSTM over seeds), inspect. All randomness
// flows from --seed flags; --threads 1 is the byte-reproducible mode.

namespace fs = std::filesystem;
using namespace dclstm;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::string manifest_of(const std::string& data_dir) {
  const fs::path p = fs::path(data_dir) / "manifest.tsv";
  if (!fs::exists(p)) throw std::runtime_error("no manifest.tsv under " + data_dir);
  return p.string();
}

struct SynthArgs {
  std::string out;
  int64_t clips = 200;
  int64_t classes = 4;
  int64_t frames = 16;
  std::string size = "32x32";
  uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  const auto x = a.size.find('x');
  if (x == std::string::npos) throw std::runtime_error("--size must look like HxW");
  const int64_t h = std::stoll(a.size.substr(0, x));
  const int64_t w = std::stoll(a.size.substr(x + 1));
  fs::create_directories(a.out);
  auto clips = synth_dataset(a.clips, a.classes, a.frames, h, w, a.seed);
  std::vector<ManifestEntry> entries;
  for (size_t i = 0; i < clips.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "clip_%05zu.vclp", i);
    save_clip(clips[i], (fs::path(a.out) / name).string());
    entries.push_back({name, clips[i].label, clips[i].source_id});
  }
  write_manifest(entries, (fs::path(a.out) / "manifest.tsv").string());
  std::printf("clips: %zu\nclasses: %lld\nout: %s\n", clips.size(), static_cast<long long>(a.classes),
              a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data, config, out;
  bool baseline = false;
  int threads = 1;
};

int run_train(const TrainArgs& a) {
  const std::string cfg_text = read_file(a.config);
  ModelConfig mcfg = ModelConfig::parse(cfg_text);
  TrainConfig tcfg = TrainConfig::parse(cfg_text);
  if (cfg_text.find("train_seed=") == std::string::npos) tcfg.seed = mcfg.seed;
  tcfg.threads = a.threads;
  if (a.baseline) mcfg.deform_per_quartile = 0;
  const std::string ckpt = a.out.empty() ? tcfg.checkpoint_path : a.out;
  if (ckpt.empty()) throw std::runtime_error("no checkpoint path (--out or checkpoint_path=)");
  const std::string log_path = tcfg.log_path.empty() ? ckpt + ".log" : tcfg.log_path;

  auto clips = load_corpus(manifest_of(a.data));
  Rng split_rng(tcfg.seed);
  auto [train_idx, val_idx] = train_val_split(clips, tcfg.val_fraction, split_rng);
  log_info("[train] model=" + std::string(mcfg.deformable() ? "deformable" : "baseline") +
           " train_clips=" + std::to_string(train_idx.size()) +
           " val_clips=" + std::to_string(val_idx.size()));

  auto mp = build<float>(mcfg);
  auto history = train_loop(mp, clips, train_idx, val_idx, tcfg, log_path);
  save_checkpoint(mp, ckpt);
  std::printf("checkpoint: %s\nlog: %s\nfinal_val_acc: %.6f\n", ckpt.c_str(), log_path.c_str(),
              history.empty() ? 0.0 : history.back().val_acc);
  return 0;
}

int run_eval(const std::string& data, const std::string& ckpt, int threads) {
  auto mp = load_checkpoint<float>(ckpt);
  auto clips = load_corpus(manifest_of(data));
  const Metrics m = evaluate(mp, clips, threads);
  std::printf("clips: %lld\naccuracy: %.6f\nmean_loss: %.6f\nconfusion:\n",
              static_cast<long long>(m.total), m.accuracy, m.mean_loss);
  for (int64_t t = 0; t < m.num_classes; ++t) {
    std::printf("row_%lld:", static_cast<long long>(t));
    for (int64_t p = 0; p < m.num_classes; ++p)
      std::printf(" %lld", static_cast<long long>(m.at(t, p)));
    std::printf("\n");
  }
  return 0;
}

int run_gradcheck(const std::string& kernel, int trials, uint64_t seed) {
  std::vector<GradCheckResult> results;
  if (kernel == "all") {
    results = gradcheck_all(trials, seed);
  } else {
    results.push_back(gradcheck_kernel(kernel, trials, seed));
  }
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("kernel: %s\nmax_rel_err_f32: %.3e\nmax_rel_err_f64: %.3e\npass: %s\n", r.kernel.c_str(),
                r.max_rel_err_f32, r.max_rel_err_f64, r.pass ? "yes" : "no");
    all_pass = all_pass && r.pass;
  }
  std::printf("thresholds: f32<%.0e f64<%.0e\nall_pass: %s\n", kGradTol32, kGradTol64,
              all_pass ? "yes" : "no");
  return all_pass ? 0 : 1;
}

struct AblateArgs {
  std::string data, config, seeds = "1,2,3";
  int threads = 1;
};

int run_ablate(const AblateArgs& a) {
  const std::string cfg_text = read_file(a.config);
  const ModelConfig base_cfg = ModelConfig::parse(cfg_text);
  TrainConfig tcfg = TrainConfig::parse(cfg_text);
  tcfg.threads = a.threads;

  std::vector<uint64_t> seeds;
  std::istringstream ss(a.seeds);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) seeds.push_back(std::stoull(item));
  if (seeds.empty()) throw std::runtime_error("--seeds must name at least one seed");

  auto clips = load_corpus(manifest_of(a.data));
  std::vector<double> acc_base, acc_deform;
  for (uint64_t seed : seeds) {
    for (bool deformable : {false, true}) {
      ModelConfig mcfg = base_cfg;
      mcfg.seed = seed;
      if (!deformable) mcfg.deform_per_quartile = 0;
      TrainConfig t = tcfg;
      t.seed = seed;
      Rng split_rng(t.seed);
      auto [train_idx, val_idx] = train_val_split(clips, t.val_fraction, split_rng);
      auto mp = build<float>(mcfg);
      log_info("[ablate] seed=" + std::to_string(seed) +
               " model=" + (deformable ? "deformable" : "baseline"));
      auto history = train_loop(mp, clips, train_idx, val_idx, t);
      const double acc = history.back().val_acc;
      (deformable ? acc_deform : acc_base).push_back(acc);
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto print_row = [&](const char* name, const std::vector<double>& v) {
    std::printf("%s", name);
    for (double x : v) std::printf("\t%.4f", x);
    std::printf("\t%.4f\n", mean(v));
  };
  std::printf("model");
  for (uint64_t s : seeds) std::printf("\tseed_%llu", static_cast<unsigned long long>(s));
  std::printf("\tmean\n");
  print_row("normal_convlstm", acc_base);
  print_row("deformable_convlstm", acc_deform);
  std::printf("deformable_minus_baseline: %.4f\n", mean(acc_deform) - mean(acc_base));
  return 0;
}

int run_inspect(const std::string& ckpt) {
  auto mp = load_checkpoint<float>(ckpt);
  std::printf("config:\n");
  std::istringstream is(mp.config.serialize());
  std::string line;
  while (std::getline(is, line)) std::printf("  %s\n", line.c_str());
  std::printf("parameters:\n");
  for (const auto& name : mp.store.names()) {
    const auto& t = mp.store.value(name);
    std::printf("  %s %s %lld\n", name.c_str(), t.shape().str().c_str(),
                static_cast<long long>(t.numel()));
  }
  std::printf("param_count: %lld\n", static_cast<long long>(param_count(mp)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deformable ConvLSTM video classification"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (1 = deterministic mode)");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic clip corpus");
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--clips", synth_args.clips, "number of clips");
  synth->add_option("--classes", synth_args.classes, "number of classes");
  synth->add_option("--frames", synth_args.frames, "frames per clip");
  synth->add_option("--size", synth_args.size, "frame size HxW");
  synth->add_option("--seed", synth_args.seed, "corpus seed");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train on a corpus");
  train->add_option("--data", train_args.data, "corpus directory")->required();
  train->add_option("--config", train_args.config, "key=value config file")->required();
  train->add_option("--out", train_args.out, "checkpoint output path");
  train->add_flag("--baseline", train_args.baseline, "empty deformable schedule (plain ConvLSTM)");

  std::string eval_data, eval_ckpt;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", eval_data, "corpus directory")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();

  std::string gc_kernel = "all";
  int gc_trials = 3;
  uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--kernel", gc_kernel, "kernel name or 'all'");
  gradcheck->add_option("--trials", gc_trials, "random instances per kernel");
  gradcheck->add_option("--seed", gc_seed, "seed");

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "deformable vs plain ConvLSTM over seeds");
  ablate->add_option("--data", ablate_args.data, "corpus directory")->required();
  ablate->add_option("--config", ablate_args.config, "key=value config file")->required();
  ablate->add_option("--seeds", ablate_args.seeds, "comma-separated seeds");

  std::string inspect_ckpt;
  auto* inspect = app.add_subcommand("inspect", "print checkpoint config and parameters");
  inspect->add_option("--ckpt", inspect_ckpt, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    train_args.threads = threads;
    ablate_args.threads = threads;
    if (synth->parsed()) return run_synth(synth_args);
    if (train->parsed()) return run_train(train_args);
    if (eval_cmd->parsed()) return run_eval(eval_data, eval_ckpt, threads);
    if (gradcheck->parsed()) return run_gradcheck(gc_kernel, gc_trials, gc_seed);
    if (ablate->parsed()) return run_ablate(ablate_args);
    if (inspect->parsed()) return run_inspect(inspect_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
