// gala: training, sweeps, evaluation, stimuli, the game server and export.
//
// Exit codes: 0 success, 1 usage or invalid config, 2 data error, 3 numeric failure.
// Every flag can also be set through a GALA_<NAME> environment variable
// (GALA_CONFIG, GALA_SEED, GALA_LAMBDA, ...); flags win over the environment.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "gala/checkpoint.hpp"
#include "gala/dataset.hpp"
#include "gala/experiment.hpp"
#include "gala/game.hpp"
#include "gala/metrics.hpp"
#include "gala/server.hpp"
#include "gala/stimulus.hpp"
#include "gala/synthetic.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace gala;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << text;
  if (!os) throw DataError("cannot write '" + path.string() + "'");
}

/// Shortest decimal form: 1, 3.2, 31.6, 100.
std::string fraction_label(double f) {
  std::ostringstream os;
  os << std::setprecision(6) << f;
  return os.str();
}

std::vector<std::string> label_names(const fs::path& data_dir, std::size_t count) {
  std::vector<std::string> names;
  const fs::path p = data_dir / "labels.json";
  if (fs::exists(p)) {
    std::ifstream in(p);
    try {
      names = nlohmann::json::parse(in).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("'" + p.string() + "': " + e.what());
    }
  }
  for (std::size_t i = names.size(); i < count; ++i) names.push_back(std::to_string(i));
  return names;
}

std::vector<CatalogImage> catalog_from(const fs::path& data_dir) {
  const Dataset data = load_dataset(data_dir);
  std::size_t max_label = 0;
  for (const auto& s : data) max_label = std::max(max_label, s.label);
  const auto names = label_names(data_dir, max_label + 1);
  std::vector<CatalogImage> out;
  for (const auto& s : data) out.push_back({s.id, s.image, s.label, names[s.label]});
  return out;
}

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<std::size_t> epochs;
};

/// Overrides the epoch count and stretches the decay schedule with it.
void set_epochs(TrainConfig& t, std::size_t epochs) {
  if (epochs == 0) throw UsageError("--epochs must be positive");
  std::vector<std::size_t> decays;
  for (auto d : t.decay_epochs) {
    const auto scaled = static_cast<std::size_t>(std::llround(static_cast<double>(d) * epochs / t.epochs));
    if (scaled > 0 && scaled < epochs && (decays.empty() || scaled > decays.back())) decays.push_back(scaled);
  }
  t.epochs = epochs;
  t.decay_epochs = decays;
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.lambda) cfg.train.lambda = *c.lambda;
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.epochs) set_epochs(cfg.train, *c.epochs);
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("--config", c.config, "JSON run config (data, model, train)")->envname("GALA_CONFIG");
  cmd->add_option("--out", c.out, "output directory")->envname("GALA_OUT");
  cmd->add_option("--seed", c.seed, "training seed")->envname("GALA_SEED");
  if (training) {
    cmd->add_option("--lambda", c.lambda, "attention-loss weight")->envname("GALA_LAMBDA");
    cmd->add_option("--epochs", c.epochs, "epoch count (decay schedule scales with it)")->envname("GALA_EPOCHS");
  }
}

void print_epoch(const EpochRecord& e) {
  std::cerr << "epoch " << e.epoch << "  lr " << e.learning_rate << "  loss " << e.train_loss << "  ce " << e.train_ce
            << "  map " << e.train_map_loss << "  train_err " << e.train_error << "  val_err " << e.val_error
            << "  val_ev " << e.val_explained_variability << '\n';
}

// ----------------------------------------------------------------- commands

int cmd_make_toy(const Common& c) {
  if (c.out.empty()) throw UsageError("make-toy needs --out");
  RunConfig cfg = resolve_config(c);
  if (cfg.data.source != "synthetic") throw UsageError("make-toy needs data.source = synthetic");
  if (c.seed) cfg.data.synthetic.seed = *c.seed;
  Splits s = load_splits(cfg.data);
  const fs::path root = c.out;
  write_dataset(root / "train", s.train);
  if (!s.val.empty()) write_dataset(root / "val", s.val);
  write_dataset(root / "test", s.test);
  const nlohmann::json names(std::vector<std::string>(kShapeNames.begin(), kShapeNames.end()));
  for (const char* split : {"train", "val", "test"})
    if (fs::exists(root / split)) write_text(root / split / "labels.json", names.dump() + "\n");
  write_text(root / "synthetic.json", cfg.data.synthetic.to_json().dump(2) + "\n");
  std::cout << nlohmann::json{{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}}.dump() << '\n';
  return 0;
}

int cmd_train(const Common& c, bool dump) {
  const RunConfig cfg = resolve_config(c);
  if (dump) {
    std::cout << cfg.to_json().dump(2) << '\n';
    return 0;
  }
  if (c.out.empty()) throw UsageError("train needs --out");
  const Splits splits = load_splits(cfg.data);
  const fs::path out = c.out;
  fs::create_directories(out);
  write_text(out / "config.json", cfg.to_json().dump(2) + "\n");
  auto run = run_training(cfg, splits, print_epoch);
  save_model(out / "model.ckpt", run.model, {{"train", cfg.train.to_json()}});
  nlohmann::json report = run.result.report.to_json();
  report["test"] = run.result.to_json();
  write_text(out / "report.json", report.dump(2) + "\n");
  std::cout << run.result.to_json().dump() << '\n';
  return 0;
}

int cmd_sweep(const Common& c, const std::vector<double>& lambdas, std::size_t repeats) {
  if (c.out.empty()) throw UsageError("sweep needs --out");
  if (lambdas.size() < 2) throw UsageError("sweep needs at least two --lambdas values");
  if (repeats == 0) throw UsageError("--repeats must be positive");
  const RunConfig cfg = resolve_config(c);
  const Splits splits = load_splits(cfg.data);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < repeats; ++i) seeds.push_back(cfg.train.seed + i);
  const fs::path out = c.out;
  fs::create_directories(out);
  std::ofstream runs(out / "runs.ndjson");
  const auto sweep = run_sweep(cfg, splits, lambdas, seeds, [&](const RunResult& r) {
    runs << r.to_json().dump() << '\n';
    runs.flush();
    std::cerr << "lambda " << r.lambda << " seed " << r.seed << ": accuracy " << r.accuracy() << " ev "
              << r.explained_variability << " iou " << r.iou << '\n';
  });
  std::ofstream table(out / "sweep.ndjson");
  for (const auto& row : sweep.rows) {
    table << row.to_json().dump() << '\n';
    std::cout << row.to_json().dump() << '\n';
  }
  write_text(out / "sweep.csv", sweep.csv());
  const auto best = sweep.selected_lambda();
  write_text(out / "selected.json",
             nlohmann::json{{"selected_lambda", best ? nlohmann::json(*best) : nlohmann::json(nullptr)}}.dump() + "\n");
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, std::vector<std::string> metrics,
             const std::string& out) {
  if (checkpoint.empty() || data_dir.empty()) throw UsageError("eval needs --checkpoint and --data");
  static const std::vector<std::string> known{"top1_error", "top5_error", "explained_variability", "map_loss", "iou"};
  if (metrics.empty()) metrics = known;
  for (const auto& m : metrics)
    if (std::find(known.begin(), known.end(), m) == known.end()) throw UsageError("unknown metric '" + m + "'");
  std::ifstream is(checkpoint, std::ios::binary);
  const auto file = read_named_tensors(is);
  TrainConfig tc;
  if (file.manifest.contains("train")) tc = TrainConfig::from_json(file.manifest["train"]);
  const Model model = load_model(checkpoint);
  const Dataset data = load_dataset(data_dir);
  const Evaluation ev = evaluate(model, data, tc);
  const double iou = model.config().gala_layers.empty() ? std::nan("") : mean_attention_iou(ev, data);
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  std::string text;
  for (const auto& m : metrics) {
    const double v = m == "top1_error"  ? ev.error
                     : m == "top5_error" ? ev.top5_error
                     : m == "map_loss"   ? ev.map_loss
                     : m == "iou"        ? iou
                                         : ev.explained_variability;
    text += nlohmann::json{{"metric", m}, {"value", num(v)}, {"samples", data.size()}}.dump() + "\n";
  }
  std::cout << text;
  if (!out.empty()) write_text(fs::path(out) / "metrics.ndjson", text);
  return 0;
}

int cmd_stimuli(const std::string& images_dir, const std::string& maps_dir, std::size_t steps, const Common& c,
                double beta, double temperature) {
  if (images_dir.empty() || maps_dir.empty() || c.out.empty()) throw UsageError("stimuli needs --images, --maps and --out");
  const std::uint64_t seed = c.seed.value_or(0);
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.path().extension() == ".png") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  if (images.empty()) throw DataError("no PNG images in '" + images_dir + "'");
  const fs::path out = c.out;
  fs::create_directories(out);
  std::ofstream manifest(out / "manifest.ndjson");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string id = images[i].stem().string();
    const fs::path map_path = fs::path(maps_dir) / (id + ".png");
    if (!fs::exists(map_path)) throw DataError("no map for image '" + id + "' in '" + maps_dir + "'");
    const Image img = read_png(images[i]);
    const Grid<double> map = read_gray_png(map_path);
    StimulusOptions opts;
    opts.ladder_steps = steps;
    opts.flood = {beta, temperature, seed + i};
    opts.scramble_seed = seed + i;
    const auto stim = make_stimulus(id, img, map, opts);
    nlohmann::json files = nlohmann::json::array();
    for (double f : stim.fractions) {
      const std::string name = id + "_" + fraction_label(f) + ".png";
      write_png(out / id / name, compose_reveal(img, stim, f));
      files.push_back({{"fraction", f}, {"path", id + "/" + name}, {"pixels", reveal_count(f, img.height * img.width)}});
    }
    manifest << nlohmann::json{{"image_id", id}, {"seed", seed + i}, {"stimuli", files}}.dump() << '\n';
  }
  return 0;
}

GameServer* g_server = nullptr;

int cmd_serve(unsigned short port, const std::string& partner_path, const std::string& data_dir, const std::string& store,
              const std::string& address) {
  if (partner_path.empty() || data_dir.empty() || store.empty()) {
    throw UsageError("serve needs --partner, --data and --store");
  }
  ModelPartner partner(load_model(partner_path));
  GameEngine engine({store}, catalog_from(data_dir));
  GameServer server(engine, partner, {address, port});
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::cerr << "serving on " << address << ":" << server.port() << '\n';
  server.run();
  g_server = nullptr;
  return 0;
}

int cmd_export(const std::string& store, const std::string& data_dir, const std::string& out) {
  if (store.empty() || data_dir.empty() || out.empty()) throw UsageError("export needs --store, --data and --out");
  GameEngine engine({store}, catalog_from(data_dir));
  const std::size_t n = engine.export_dataset(out);
  std::cout << nlohmann::json{{"records", n}, {"out", out}}.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GALA attention toolkit"};
  app.require_subcommand(1);

  Common make_toy, train, sweep, stimuli;
  auto* c_make = app.add_subcommand("make-toy", "write the synthetic shapes dataset (train/val/test folders)");
  add_common(c_make, make_toy, false);

  bool dump_config = false;
  auto* c_train = app.add_subcommand("train", "train one model; writes model.ckpt and report.json");
  add_common(c_train, train, true);
  c_train->add_flag("--dump-config", dump_config, "print the resolved config with all defaults and exit");

  std::vector<double> lambdas;
  std::size_t repeats = 3;
  auto* c_sweep = app.add_subcommand("sweep", "train every lambda x seed; writes runs.ndjson, sweep.ndjson, sweep.csv");
  add_common(c_sweep, sweep, true);
  c_sweep->add_option("--lambdas", lambdas, "lambda values")->delimiter(',')->required()->envname("GALA_LAMBDAS");
  c_sweep->add_option("--repeats", repeats, "seeds per lambda (seed, seed+1, ...)")->envname("GALA_REPEATS");

  std::string checkpoint, eval_data, eval_out;
  std::vector<std::string> metrics;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset folder");
  c_eval->add_option("--checkpoint", checkpoint, "model checkpoint")->envname("GALA_CHECKPOINT");
  c_eval->add_option("--data", eval_data, "dataset folder")->envname("GALA_DATA");
  c_eval->add_option("--metrics", metrics, "subset of top1_error,top5_error,explained_variability,map_loss,iou")
      ->delimiter(',');
  c_eval->add_option("--out", eval_out, "also write metrics.ndjson here")->envname("GALA_OUT");

  std::string images_dir, maps_dir;
  std::size_t steps = 5;
  double beta = FloodFillOptions{}.beta, temperature = FloodFillOptions{}.temperature;
  auto* c_stim = app.add_subcommand("stimuli", "reveal-ladder stimuli on phase-scrambled backgrounds");
  c_stim->add_option("--images", images_dir, "folder of PNG images")->envname("GALA_IMAGES");
  c_stim->add_option("--maps", maps_dir, "folder of grayscale PNG maps named like the images")->envname("GALA_MAPS");
  c_stim->add_option("--steps", steps, "ladder steps")->envname("GALA_STEPS");
  c_stim->add_option("--beta", beta, "flood-fill distance penalty")->envname("GALA_BETA");
  c_stim->add_option("--temperature", temperature, "flood-fill softmax temperature (0: greedy)")
      ->envname("GALA_TEMPERATURE");
  c_stim->add_option("--out", stimuli.out, "output directory")->envname("GALA_OUT");
  c_stim->add_option("--seed", stimuli.seed, "seed")->envname("GALA_SEED");

  unsigned short port = 8080;
  std::string partner, serve_data, store, address = "127.0.0.1";
  auto* c_serve = app.add_subcommand("serve", "run the game server");
  c_serve->add_option("--port", port, "TCP port (0: any free port)")->envname("GALA_PORT");
  c_serve->add_option("--address", address, "bind address")->envname("GALA_ADDRESS");
  c_serve->add_option("--partner", partner, "partner model checkpoint")->envname("GALA_PARTNER");
  c_serve->add_option("--data", serve_data, "image catalog (dataset folder)")->envname("GALA_DATA");
  c_serve->add_option("--store", store, "game store (event log, maps)")->envname("GALA_STORE");

  std::string export_store, export_data, export_out;
  auto* c_export = app.add_subcommand("export", "write collected maps as a dataset folder");
  c_export->add_option("--store", export_store, "game store")->envname("GALA_STORE");
  c_export->add_option("--data", export_data, "image catalog (dataset folder)")->envname("GALA_DATA");
  c_export->add_option("--out", export_out, "output dataset folder")->envname("GALA_OUT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*c_make) return cmd_make_toy(make_toy);
    if (*c_train) return cmd_train(train, dump_config);
    if (*c_sweep) return cmd_sweep(sweep, lambdas, repeats);
    if (*c_eval) return cmd_eval(checkpoint, eval_data, metrics, eval_out);
    if (*c_stim) return cmd_stimuli(images_dir, maps_dir, steps, stimuli, beta, temperature);
    if (*c_serve) return cmd_serve(port, partner, serve_data, store, address);
    if (*c_export) return cmd_export(export_store, export_data, export_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
