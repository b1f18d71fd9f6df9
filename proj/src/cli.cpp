#include "aelab/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "aelab/checkpoint.hpp"
#include "aelab/errors.hpp"
#include "aelab/evaluator.hpp"
#include "aelab/image_io.hpp"
#include "aelab/server.hpp"
#include "aelab/trainer.hpp"

namespace aelab {
namespace {

namespace fs = std::filesystem;

/// Thrown for flag combinations CLI11 cannot check by itself.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// `key=value` lines become `--key=value` arguments. Blank lines and lines
/// starting with '#' are skipped.
std::vector<std::string> read_config_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::vector<std::string> args;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(number) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const auto key = trim(line.substr(0, eq));
    if (key == "config") throw UsageError(path.string() + ": config files cannot nest");
    args.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

/// argv with the `--config` file's entries appended, so they win over flags.
std::vector<std::string> expand_config(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> extra;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      extra = read_config_args(args[i + 1]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      extra = read_config_args(args[i].substr(9));
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

Split load_or_draw_split(const DatasetIndex& index, const std::string& manifest, double ratio,
                         std::uint64_t seed) {
  if (!manifest.empty()) return read_split_manifest(manifest, index);
  return split(index, ratio, seed);
}

std::vector<LoadedCheckpoint> load_all(const std::vector<std::string>& paths) {
  std::vector<LoadedCheckpoint> out;
  for (const auto& p : paths) out.push_back(load_checkpoint(p));
  return out;
}

/// Family names, or checkpoint stems when two checkpoints share a family.
std::vector<std::string> model_ids(const std::vector<LoadedCheckpoint>& ckpts,
                                   const std::vector<std::string>& paths) {
  std::vector<std::string> ids;
  for (const auto& c : ckpts) ids.push_back(family_name(c.model->spec().family));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (std::count(ids.begin(), ids.end(), ids[i]) > 1) {
      std::vector<std::string> stems;
      for (const auto& p : paths) stems.push_back(fs::path(p).stem().string());
      return stems;
    }
  }
  return ids;
}

/// Rows are items, columns the original then each model, 2 px white gutters.
void write_grid(const fs::path& path, const ExportManifest& manifest, const fs::path& img_dir,
                const std::vector<std::string>& columns) {
  const std::size_t h = manifest.height, w = manifest.width, gap = 2;
  std::vector<std::string> originals;
  for (const auto& e : manifest.entries) {
    if (e.model.empty()) originals.push_back(e.file);
  }
  const std::size_t gw = columns.size() * (w + gap) + gap, gh = originals.size() * (h + gap) + gap;
  std::vector<std::uint8_t> rgb(gw * gh * 3, 255);
  for (std::size_t row = 0; row < originals.size(); ++row) {
    for (std::size_t col = 0; col < columns.size(); ++col) {
      std::string file;
      for (const auto& e : manifest.entries) {
        if (e.original_file == originals[row] && e.model == columns[col]) file = e.file;
      }
      const auto image = read_image(img_dir / file);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t gy = gap + row * (h + gap) + y, gx = gap + col * (w + gap) + x;
          for (std::size_t c = 0; c < 3; ++c) {
            rgb[(gy * gw + gx) * 3 + c] = static_cast<std::uint8_t>(image.at(y, x, c));
          }
        }
      }
    }
  }
  write_png(path, gw, gh, rgb);
}

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct Flags {
  std::uint64_t seed = 0;
  std::string data;
  std::string out;
  std::string split_file;
  double ratio = 0.2;
  std::size_t cap = 0;

  // synth
  std::size_t classes = 29;
  std::size_t per_class = 20;
  std::size_t size = 32;

  // train
  std::string model;
  int epochs = 10;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::size_t latent = 64;
  std::string init;
  std::size_t extra_blocks = 0;
  int timesteps = 100;
  double noise_weight = LossWeights{}.noise;
  double kl_weight = LossWeights{}.kl;

  // eval / reconstruct / rating
  std::vector<std::string> checkpoints;
  std::size_t count = 4;
  std::string export_dir;
  std::string log;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t items = 0;
  std::string ui;
  bool json = false;
};

std::optional<std::size_t> optional_cap(std::size_t cap) {
  return cap == 0 ? std::nullopt : std::optional<std::size_t>(cap);
}

int cmd_synth(const Flags& f, std::ostream& out) {
  make_synthetic(f.out, SyntheticOptions{f.classes, f.per_class, f.size, f.seed});
  out << "wrote " << f.classes * f.per_class << " images in " << f.classes << " classes to " << f.out << '\n';
  return kExitOk;
}

int cmd_prepare(const Flags& f, std::ostream& out, std::ostream& err) {
  const auto index = scan(f.data, optional_cap(f.cap));
  for (const auto& w : index.warnings) err << "warning: " << w << '\n';
  const auto sp = split(index, f.ratio, f.seed);
  for (const auto& w : sp.warnings) err << "warning: " << w << '\n';
  write_split_manifest(f.out, index, sp);
  out << index.classes.size() << " classes, " << index.size() << " images -> " << sp.train.size()
      << " train / " << sp.val.size() << " val, manifest " << f.out << '\n';
  return kExitOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  TrainConfig config;
  config.spec = ModelSpec::defaults(parse_family(f.model), f.size, f.size);
  config.spec.latent_dim = f.latent;
  config.spec.diffusion.extra_blocks = f.extra_blocks;
  config.spec.diffusion.timesteps = f.timesteps;
  if (!f.init.empty()) config.spec.init = parse_init_scheme(f.init);
  config.epochs = f.epochs;
  config.batch_size = f.batch;
  config.lr = f.lr;
  config.seed = f.seed;
  config.weights = LossWeights{f.noise_weight, f.kl_weight};
  config.data_root = f.data;
  config.per_class_cap = optional_cap(f.cap);
  config.split_ratio = f.ratio;
  if (!f.split_file.empty()) config.split_manifest = fs::path(f.split_file);
  config.output_dir = fs::path(f.out);
  config.validate();

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << "/" << f.epochs << "  train_loss " << std::setprecision(6)
        << r.train_loss << "  val_mse " << r.val_mse << std::endl;
  };
  const auto result = train(config, hooks);
  out << "checkpoint " << result.checkpoint->string() << '\n';
  return kExitOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  const auto ckpts = load_all(f.checkpoints);
  const auto ids = model_ids(ckpts, f.checkpoints);
  const auto index = scan(f.data, optional_cap(f.cap));
  const auto sp = load_or_draw_split(index, f.split_file, f.ratio, f.seed);
  std::vector<EvalReport> reports;
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    auto report = evaluate_mse(*ckpts[i].model, index, sp, f.batch);
    report.model = ids[i];
    report.checkpoint = f.checkpoints[i];
    reports.push_back(std::move(report));
  }
  const fs::path csv = f.out;
  write_eval_csv(csv, reports);
  const auto per_class = csv.parent_path() / (csv.stem().string() + "_per_class.csv");
  write_per_class_csv(per_class, reports);
  out << std::left << std::setw(16) << "Method" << "MSE\n";
  for (const auto& r : reports) {
    out << std::setw(16) << r.model << std::fixed << std::setprecision(5) << r.mean_mse << '\n';
  }
  out << "wrote " << csv.string() << " and " << per_class.string() << '\n';
  return kExitOk;
}

int cmd_reconstruct(const Flags& f, std::ostream& out) {
  const auto ckpts = load_all(f.checkpoints);
  const auto ids = model_ids(ckpts, f.checkpoints);
  const auto index = scan(f.data, optional_cap(f.cap));
  const auto sp = load_or_draw_split(index, f.split_file, f.ratio, f.seed);
  auto pool = sp.val;
  Rng rng(f.seed);
  rng.shuffle(pool);
  pool.resize(std::min(pool.size(), f.count));
  if (pool.empty()) throw ConfigError("reconstruct: validation subset is empty");

  std::vector<NamedModel> named;
  for (std::size_t i = 0; i < ckpts.size(); ++i) named.push_back({ids[i], ckpts[i].model.get()});
  const fs::path dir = f.out;
  const auto manifest = export_reconstructions(named, index, pool, dir, f.seed);
  std::vector<std::string> columns = {""};
  columns.insert(columns.end(), ids.begin(), ids.end());
  write_grid(dir / "grid.png", manifest, dir / "img", columns);
  out << "exported " << manifest.entries.size() << " images for " << pool.size() << " items to "
      << (dir / "img").string() << '\n';
  out << "grid columns: original";
  for (const auto& id : ids) out << ", " << id;
  out << '\n';
  return kExitOk;
}

fs::path log_path(const Flags& f) {
  return f.log.empty() ? fs::path(f.export_dir) / "ratings.jsonl" : fs::path(f.log);
}

int cmd_rate_serve(const Flags& f, std::ostream& out) {
  const auto manifest = read_export_manifest(f.export_dir);
  RatingServiceOptions options;
  options.seed = f.seed;
  if (f.items > 0) options.items_per_session = f.items;
  RatingService service(rating_items(manifest), log_path(f), options);
  RatingServerOptions server_options;
  server_options.host = f.host;
  server_options.image_dir = fs::path(f.export_dir) / "img";
  if (!f.ui.empty()) server_options.ui_dir = fs::path(f.ui);
  RatingServer server(service, server_options);
  const int port = server.bind(f.port);

  g_stop = false;
  const auto previous_int = std::signal(SIGINT, on_signal);
  const auto previous_term = std::signal(SIGTERM, on_signal);
  server.start();
  out << "listening on http://" << f.host << ":" << port << "  (" << service.items().size()
      << " items, log " << service.log_path().string() << ")" << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  std::signal(SIGINT, previous_int);
  std::signal(SIGTERM, previous_term);
  out << "stopped" << std::endl;
  return kExitOk;
}

int cmd_mos_report(const Flags& f, std::ostream& out) {
  const auto items = rating_items(read_export_manifest(f.export_dir));
  const auto records = read_rating_log(log_path(f));
  const auto report = compute_mos(records, items);
  if (f.json) {
    out << mos_report_json(report) << '\n';
  } else {
    out << format_mos_table(report);
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Autoencoder reconstruction lab: train, evaluate and rate image autoencoders."};
  app.name("aelab");
  app.require_subcommand(1, 1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Flags f;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", f.seed, "Seed for every random choice")->capture_default_str();
    sub->add_option("--config", "key=value file; its entries override flags")->check(CLI::ExistingFile);
  };
  const auto data_flags = [&](CLI::App* sub) {
    sub->add_option("--data", f.data, "Dataset root with one folder per class")
        ->envname("AE_LAB_DATA")
        ->required();
    sub->add_option("--cap", f.cap, "Keep the first N images per class (0 keeps all)")->capture_default_str();
  };
  const auto split_flags = [&](CLI::App* sub) {
    sub->add_option("--split", f.split_file, "Split manifest to reuse")->check(CLI::ExistingFile);
    sub->add_option("--ratio", f.ratio, "Validation fraction when drawing a split")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
  };

  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset");
  common(synth);
  synth->add_option("--out", f.out, "Output root")->required();
  synth->add_option("--classes", f.classes)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--per-class", f.per_class)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--size", f.size, "Image side in pixels")->check(CLI::PositiveNumber)->capture_default_str();

  auto* prepare = app.add_subcommand("prepare", "Scan a dataset and write a split manifest");
  common(prepare);
  data_flags(prepare);
  prepare->add_option("--ratio", f.ratio, "Validation fraction")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  prepare->add_option("--out", f.out, "Manifest path")->required();

  auto* train_cmd = app.add_subcommand("train", "Train one model family");
  common(train_cmd);
  data_flags(train_cmd);
  split_flags(train_cmd);
  train_cmd->add_option("--model", f.model, "ff, conv or diff")
      ->required()
      ->check(CLI::IsMember({"ff", "conv", "diff", "feedforward", "convolutional", "diffusion"}));
  train_cmd->add_option("--out", f.out, "Output directory")->default_val("runs");
  train_cmd->add_option("--epochs", f.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--batch", f.batch)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr", f.lr)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--size", f.size, "Input side in pixels")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--latent", f.latent)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--init", f.init, "fan-in-uniform or he-uniform (default depends on the family)")
      ->check(CLI::IsMember({"fan-in-uniform", "he-uniform"}));
  train_cmd->add_option("--extra-blocks", f.extra_blocks, "Extra denoiser hidden blocks")->capture_default_str();
  train_cmd->add_option("--timesteps", f.timesteps)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--noise-weight", f.noise_weight)->check(CLI::NonNegativeNumber)->capture_default_str();
  train_cmd->add_option("--kl-weight", f.kl_weight)->check(CLI::NonNegativeNumber)->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Validation MSE of one or more checkpoints");
  common(eval);
  data_flags(eval);
  split_flags(eval);
  eval->add_option("--checkpoint", f.checkpoints, "Checkpoint file (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->check(CLI::ExistingFile);
  eval->add_option("--out", f.out, "CSV path; per-class rows go next to it")->default_val("eval.csv");
  eval->add_option("--batch", f.batch)->check(CLI::PositiveNumber)->capture_default_str();

  auto* recon = app.add_subcommand("reconstruct", "Export originals and reconstructions for rating");
  common(recon);
  data_flags(recon);
  split_flags(recon);
  recon->add_option("--checkpoint", f.checkpoints, "Checkpoint file (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->check(CLI::ExistingFile);
  recon->add_option("--count", f.count, "Validation items to export")->check(CLI::PositiveNumber)->capture_default_str();
  recon->add_option("--out", f.out, "Export directory")->required();

  auto* serve = app.add_subcommand("rate-serve", "Serve the blinded rating study over HTTP");
  common(serve);
  serve->add_option("--export", f.export_dir, "Directory written by reconstruct")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", f.port, "TCP port, 0 picks a free one")->check(CLI::Range(0, 65535))->capture_default_str();
  serve->add_option("--host", f.host)->capture_default_str();
  serve->add_option("--items", f.items, "Items per session (0 rates everything)")->capture_default_str();
  serve->add_option("--log", f.log, "Rating log (default <export>/ratings.jsonl)");
  serve->add_option("--ui", f.ui, "Static UI directory mounted at /")->check(CLI::ExistingDirectory);

  auto* mos = app.add_subcommand("mos-report", "Print mean opinion scores from a rating log");
  common(mos);
  mos->add_option("--export", f.export_dir, "Directory written by reconstruct")->required()->check(CLI::ExistingDirectory);
  mos->add_option("--log", f.log, "Rating log (default <export>/ratings.jsonl)");
  mos->add_flag("--json", f.json, "Print JSON instead of a table");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(f, out);
    if (prepare->parsed()) return cmd_prepare(f, out, err);
    if (train_cmd->parsed()) return cmd_train(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (recon->parsed()) return cmd_reconstruct(f, out);
    if (serve->parsed()) return cmd_rate_serve(f, out);
    if (mos->parsed()) return cmd_mos_report(f, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace aelab
