// malnet: train / eval / predict / serve.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime error.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "malnet/malnet.hpp"

namespace fs = std::filesystem;
using namespace malnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", c.overrides, "Override, section.key=value (repeatable; wins over the file)");
}

RunConfig resolve(const Common& c, const std::vector<std::string>& extra) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  for (const auto& o : extra) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

void echo(const RunConfig& cfg, std::ostream& os) {
  os << "# resolved config\n" << to_ini(cfg) << std::flush;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

fs::path checkpoint_path(const std::string& flag, const RunConfig& cfg, const std::string& out) {
  if (!flag.empty()) return flag;
  if (!cfg.serve.checkpoint.empty()) return cfg.serve.checkpoint;
  return fs::path(out) / "checkpoint.mckp";
}

DatasetIndex scan_root(const RunConfig& cfg) {
  if (cfg.data.root.empty()) throw DatasetError("no data root given (set data.root or --data-root)");
  return scan_dataset(cfg.data.root);
}

int cmd_train(const RunConfig& cfg, const std::string& out_dir) {
  echo(cfg, std::cout);
  const DatasetIndex index = scan_root(cfg);
  const DatasetSplit split = split_dataset(index, cfg.split_spec());
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  write_text(out / "split.csv", split_manifest_csv(index, split));
  std::printf("data: %zu images, split %zu/%zu/%zu\n", index.size(), split.train.size(), split.val.size(),
              split.test.size());

  const TrainConfig tc = cfg.train_config();
  ModelGraph<float> model(cfg.model, cfg.data.seed);
  model.metadata() = {{"train", to_json_value(tc)},
                      {"split", {{"seed", cfg.data.seed},
                                 {"train_fraction", cfg.data.train_fraction},
                                 {"val_fraction", cfg.data.val_fraction}}}};
  std::printf("model: %zu trainable parameters\n", model.parameter_count());

  History history;
  const fs::path history_path = out / "history.csv";
  const FitSummary s = fit<float>(model, split.train, split.val, tc, history, {}, [&](const HistoryRow& r) {
    std::printf("epoch %zu: loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %g\n", r.epoch, r.train_loss,
                r.train_acc, r.val_loss, r.val_acc, r.lr);
    std::fflush(stdout);
    write_text(history_path, history_csv(history));
  });
  write_text(history_path, history_csv(history));
  save_checkpoint(model, out / "checkpoint.mckp");
  std::printf("done: %zu epochs, best epoch %zu (val_loss %.4f)%s\n", s.epochs_run, s.best_epoch, s.best_val_loss,
              s.stopped_early ? ", stopped early" : "");
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& out_dir, const std::string& ckpt_flag,
             const std::string& split_name, const std::string& manifest_flag) {
  echo(cfg, std::cout);
  const SplitName which = parse_split_name(split_name);
  const ModelGraph<float> model = load_checkpoint<float>(checkpoint_path(ckpt_flag, cfg, out_dir));
  DatasetSplit split;
  const fs::path manifest = manifest_flag.empty() ? fs::path(out_dir) / "split.csv" : fs::path(manifest_flag);
  if (!manifest_flag.empty() || (cfg.data.root.empty() && fs::exists(manifest))) {
    std::ifstream in(manifest);
    if (!in) throw DatasetError("cannot read split manifest " + manifest.string());
    split = parse_split_manifest({std::istreambuf_iterator<char>(in), {}}, model.class_names());
  } else {
    split = split_dataset(scan_root(cfg), cfg.split_spec());
  }
  const DatasetIndex& index = split.get(which);
  if (index.empty()) throw DatasetError(std::string("split '") + to_string(which) + "' is empty");
  const ClassificationReport r = evaluate(model, index, cfg.train.batch_size);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "report.json", to_json(r).dump(2) + "\n");
  std::cout << render_table(r);
  return kOk;
}

int cmd_predict(const RunConfig& cfg, const std::string& out_dir, const std::string& ckpt_flag,
                const std::string& image) {
  echo(cfg, std::cerr);  // stdout carries only the prediction
  const Predictor predictor = Predictor::from_file(checkpoint_path(ckpt_flag, cfg, out_dir));
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(image);
  } catch (const DatasetError& e) {
    std::cout << error_body("not_found", e.what()).dump() << "\n";
    return kData;
  }
  try {
    std::cout << to_json(predictor.predict(bytes)).dump() << "\n";
  } catch (const ServeError& e) {
    std::cout << error_body(e.code(), e.what()).dump() << "\n";
    return e.code() == "model_unavailable" ? kRuntime : kData;
  }
  return kOk;
}

int cmd_serve(const RunConfig& cfg, const std::string& out_dir, const std::string& ckpt_flag) {
  echo(cfg, std::cout);
  const auto [host, port] = parse_bind(cfg.serve.bind);
  const fs::path ckpt = checkpoint_path(ckpt_flag, cfg, out_dir);
  Service service(Predictor::from_file(ckpt), ServiceOptions{cfg.serve.cors});
  const int bound = service.bind(host, port);
  std::printf("serving %s on http://%s:%d (model %s)\n", ckpt.string().c_str(), host.c_str(), bound,
              service.predictor().model_version().c_str());
  std::fflush(stdout);

  // SIGINT/SIGTERM are blocked in every thread and collected here.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    std::printf("signal %d, shutting down\n", sig);
    std::fflush(stdout);
    service.stop();
  });
  service.listen();
  waiter.join();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Block before any thread starts so only the serve waiter sees the signals.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);

  CLI::App app{"Malaria cell classifier: train, evaluate, predict and serve."};
  app.require_subcommand(1);

  Common common;
  std::string data_root, checkpoint, split_name = "test", manifest, image, bind, cors;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;

  auto* train = app.add_subcommand("train", "Scan, split, fit and save a checkpoint");
  add_common(train, common);
  train->add_option("-o,--out", common.out, "Artifact directory");
  train->add_option("--data-root", data_root, "Dataset root with one directory per class");
  train->add_option("--seed", seed, "Seed for split, initialisation and training");
  train->add_option("--epochs", epochs, "Maximum epochs");
  train->add_option("--lr", lr, "Initial learning rate");
  train->add_option("--batch-size", batch_size, "Batch size");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_common(eval, common);
  eval->add_option("-o,--out", common.out, "Artifact directory");
  eval->add_option("--data-root", data_root, "Dataset root");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/checkpoint.mckp)");
  eval->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--manifest", manifest, "Split manifest CSV to evaluate instead of re-splitting");
  eval->add_option("--seed", seed, "Split seed");

  auto* predict = app.add_subcommand("predict", "Classify one image and print the prediction as JSON");
  add_common(predict, common);
  predict->add_option("-o,--out", common.out, "Artifact directory");
  predict->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/checkpoint.mckp)");
  predict->add_option("image", image, "PNG image")->required();

  auto* serve = app.add_subcommand("serve", "Run the HTTP prediction service");
  add_common(serve, common);
  serve->add_option("-o,--out", common.out, "Artifact directory");
  serve->add_option("--checkpoint", checkpoint, "Checkpoint (default serve.checkpoint or <out>/checkpoint.mckp)");
  serve->add_option("--bind", bind, "host:port");
  serve->add_option("--cors", cors, "Access-Control-Allow-Origin value; empty disables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  std::vector<std::string> extra;
  if (!data_root.empty()) extra.push_back("data.root=" + data_root);
  if (seed) extra.push_back("data.seed=" + std::to_string(*seed));
  if (epochs) extra.push_back("train.epochs=" + std::to_string(*epochs));
  if (batch_size) extra.push_back("train.batch_size=" + std::to_string(*batch_size));
  if (lr) extra.push_back("train.lr=" + detail::format_double(*lr));
  if (!bind.empty()) extra.push_back("serve.bind=" + bind);
  if (serve->count("--cors")) extra.push_back("serve.cors=" + cors);

  try {
    const RunConfig cfg = resolve(common, extra);
    if (*train) return cmd_train(cfg, common.out);
    if (*eval) return cmd_eval(cfg, common.out, checkpoint, split_name, manifest);
    if (*predict) return cmd_predict(cfg, common.out, checkpoint, image);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);
    return cmd_serve(cfg, common.out, checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DatasetError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DecodeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
