// Command-line front end: train, eval, predict, inspect, bench, gradcheck.
//
// Exit codes: 0 success, 1 runtime failure (corrupt model file, non-finite
// loss, I/O failure mid-run), 2 usage or validation error (bad flags,
// missing input files).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "fastnet/cifar.hpp"
#include "fastnet/gradcheck.hpp"
#include "fastnet/model_io.hpp"
#include "fastnet/network.hpp"
#include "fastnet/training.hpp"

namespace fs = std::filesystem;
using namespace fastnet;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

CifarVariant parse_variant(const std::string& name) {
  if (name == "c10" || name == "cifar10") return CifarVariant::c10;
  if (name == "c100" || name == "cifar100") return CifarVariant::c100;
  throw UsageError("unknown dataset '" + name + "' (want c10 or c100)");
}

// The specs a CLI-built model can have; load is attempted against each.
std::vector<ArchitectureSpec> candidate_specs() {
  std::vector<ArchitectureSpec> specs;
  for (const int classes : {10, 100}) {
    for (const bool plain : {false, true}) {
      auto spec = ArchitectureSpec::fastnet(classes);
      spec.first_cell_plain_conv = plain;
      specs.push_back(spec);
    }
  }
  return specs;
}

ModelState<float> load_model_any(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("model file not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  for (const auto& spec : candidate_specs()) {
    try {
      return load_model(bytes, spec);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::fingerprint_mismatch) throw;
    }
  }
  fail(ErrorCode::fingerprint_mismatch,
       "model fingerprint matches no reference architecture (10/100 classes)");
}

std::string metrics_json(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "{\"epoch\":%d,\"lr\":%.8g,\"train_loss\":%.6f,\"train_acc\":%.6f,"
                "\"test_acc\":%.6f,\"seconds\":%.3f}",
                m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc, m.seconds);
  return buf;
}

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (...) {
      throw UsageError(std::string("bad ") + what + " list: " + csv);
    }
    if (out.back() < 1) throw UsageError(std::string(what) + " entries must be >= 1");
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what + " list");
  return out;
}

int cmd_train(const std::string& dataset, const fs::path& data_dir, int epochs, int batch_size, double lr,
              double decay_factor, const std::string& milestones_csv, std::uint64_t seed, std::size_t limit,
              std::size_t test_limit, bool augment, bool plain_first, const fs::path& out_path,
              const fs::path& metrics_path, double stop_train_acc) {
  const CifarVariant variant = parse_variant(dataset);
  if (!fs::exists(data_dir)) throw UsageError("data directory not found: " + data_dir.string());

  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch_size;
  cfg.lr0 = lr;
  cfg.decay_factor = decay_factor;
  cfg.seed = seed;
  cfg.augment = augment;
  if (!milestones_csv.empty()) {
    cfg.milestones.clear();
    for (int m : parse_int_list(milestones_csv, "milestone")) cfg.milestones.push_back(m);
  }
  std::erase_if(cfg.milestones, [&](int m) { return m >= cfg.epochs; });
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }

  const auto train_records = load_cifar_split(data_dir, variant, true, limit);
  const auto test_records = load_cifar_split(data_dir, variant, false, test_limit);
  const auto stats = compute_channel_stats(train_records);

  auto spec = ArchitectureSpec::fastnet(cifar_num_classes(variant));
  spec.first_cell_plain_conv = plain_first;
  auto model = build_model<float>(spec, Rng(seed));
  for (int c = 0; c < 3; ++c) {
    model.input_mean[static_cast<std::size_t>(c)] = stats.mean[static_cast<std::size_t>(c)];
    model.input_std[static_cast<std::size_t>(c)] = stats.stddev[static_cast<std::size_t>(c)];
  }

  std::ofstream metrics_file;
  if (!metrics_path.empty()) {
    metrics_file.open(metrics_path, std::ios::trunc);
    if (!metrics_file) throw UsageError("cannot open metrics file " + metrics_path.string());
  }
  fit(model, train_records, test_records, stats, cfg, [&](const EpochMetrics& m) {
    const std::string line = metrics_json(m);
    std::cout << line << "\n" << std::flush;
    if (metrics_file) metrics_file << line << "\n" << std::flush;
    return !(stop_train_acc > 0.0 && m.train_acc >= stop_train_acc);
  });
  save_model_file(model, out_path);
  return 0;
}

int cmd_eval(const fs::path& model_path, const std::string& dataset, const fs::path& data_dir,
             std::size_t limit, const std::string& split) {
  const CifarVariant variant = parse_variant(dataset);
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  if (!fs::exists(data_dir)) throw UsageError("data directory not found: " + data_dir.string());
  const auto model = load_model_any(model_path);
  if (model.spec.num_classes != cifar_num_classes(variant))
    throw UsageError("model classes do not match dataset " + dataset);
  const auto records = load_cifar_split(data_dir, variant, split == "train", limit);
  ChannelStats stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[static_cast<std::size_t>(c)] = model.input_mean[static_cast<std::size_t>(c)];
    stats.stddev[static_cast<std::size_t>(c)] = model.input_std[static_cast<std::size_t>(c)];
  }
  std::printf("%.4f\n", evaluate(model, records, stats));
  return 0;
}

int cmd_predict(const fs::path& model_path, const fs::path& image_path) {
  const auto model = load_model_any(model_path);
  if (!fs::exists(image_path)) throw UsageError("image file not found: " + image_path.string());
  const auto bytes = read_file_bytes(image_path);
  CifarRecord record;
  if (bytes.size() == kCifarImageBytes) {
    std::copy(bytes.begin(), bytes.end(), record.pixels.begin());
  } else if (bytes.size() == 3073) {
    record = parse_cifar(bytes.data(), bytes.size(), CifarVariant::c10)[0];
  } else if (bytes.size() == 3074) {
    record = parse_cifar(bytes.data(), bytes.size(), CifarVariant::c100)[0];
  } else {
    throw UsageError("image must be 3072 raw bytes or a single 3073/3074-byte record, got " +
                     std::to_string(bytes.size()));
  }
  ChannelStats stats;
  for (int c = 0; c < 3; ++c) {
    stats.mean[static_cast<std::size_t>(c)] = model.input_mean[static_cast<std::size_t>(c)];
    stats.stddev[static_cast<std::size_t>(c)] = model.input_std[static_cast<std::size_t>(c)];
  }
  const TensorF img = normalize(record, stats);
  TensorF batch({1, 3, kCifarHw, kCifarHw});
  std::copy(img.data(), img.data() + img.size(), batch.data());
  const TensorF logits = infer_forward(model, batch);

  const int c = logits.extent(1);
  double mx = logits[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(logits[static_cast<std::size_t>(j)]));
  std::vector<double> probs(static_cast<std::size_t>(c));
  double sum = 0.0;
  for (int j = 0; j < c; ++j) {
    probs[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(logits[static_cast<std::size_t>(j)]) - mx);
    sum += probs[static_cast<std::size_t>(j)];
  }
  std::vector<int> order(static_cast<std::size_t>(c));
  for (int j = 0; j < c; ++j) order[static_cast<std::size_t>(j)] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
  const int top = std::min(5, c);
  for (int r = 0; r < top; ++r) {
    const int j = order[static_cast<std::size_t>(r)];
    std::printf("class=%d prob=%.6f\n", j, probs[static_cast<std::size_t>(j)] / sum);
  }
  return 0;
}

int cmd_inspect(int classes, const std::string& format) {
  if (classes < 2) throw UsageError("--classes must be >= 2");
  if (format != "csv" && format != "text") throw UsageError("--format must be csv or text");
  const auto report = inspect_report(ArchitectureSpec::fastnet(classes));
  if (format == "csv") {
    std::cout << report.csv();
    return 0;
  }
  std::printf("%-8s %-16s %-12s %12s %14s\n", "layer", "type", "out_shape", "params", "macs");
  for (const auto& row : report.rows)
    std::printf("%-8s %-16s %-12s %12lld %14lld\n", row.layer.c_str(), row.type.c_str(),
                row.out_shape.c_str(), row.params, row.macs);
  std::printf("%-8s %-16s %-12s %12lld %14lld\n", "total", "", "", report.total_params, report.total_macs);
  std::printf("params are %.1f M\n", static_cast<double>(report.total_params) / 1e6);
  return 0;
}

int cmd_bench(const fs::path& model_path, int classes, const std::string& batch_csv,
              const std::string& threads_csv, double seconds, std::uint64_t seed) {
  if (!(seconds > 0.0)) throw UsageError("--seconds must be positive");
  ModelState<float> model = model_path.empty()
                                ? build_model<float>(ArchitectureSpec::fastnet(classes), Rng(seed))
                                : load_model_any(model_path);
  std::vector<int> batches = parse_int_list(batch_csv, "batch");
  std::vector<int> workers_list = parse_int_list(threads_csv, "threads");
  std::sort(workers_list.begin(), workers_list.end());
  workers_list.erase(std::unique(workers_list.begin(), workers_list.end()), workers_list.end());

  // Workers are the unit of parallelism here; keep kernels single-threaded.
  const unsigned saved_pool = worker_threads();
  worker_threads() = 1;

  std::printf("batch,threads,images_per_sec,p50_ms,p95_ms\n");
  for (const int batch : batches) {
    for (const int workers : workers_list) {
      std::vector<std::vector<double>> latencies(static_cast<std::size_t>(workers));
      std::atomic<bool> go{false};
      std::atomic<bool> stop{false};
      std::atomic<int> warmed{0};
      std::atomic<long long> images{0};
      // Warmup batches run before the measurement window opens and are
      // excluded from both the clock and the counts. Every worker measures
      // at least two batches even if the window closes first.
      auto worker_fn = [&](int wid) {
        Rng rng(seed ^ (0x9E37ULL * static_cast<std::uint64_t>(wid + 1)));
        TensorF input({batch, 3, kCifarHw, kCifarHw});
        for (std::size_t i = 0; i < input.size(); ++i) input[i] = static_cast<float>(rng.next_normal());
        for (int warm = 0; warm < 3; ++warm) infer_forward(model, input);
        warmed.fetch_add(1);
        while (!go.load(std::memory_order_acquire)) std::this_thread::yield();
        int measured = 0;
        while (!stop.load(std::memory_order_relaxed) || measured < 2) {
          const auto t0 = std::chrono::steady_clock::now();
          infer_forward(model, input);
          const double ms =
              std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
          latencies[static_cast<std::size_t>(wid)].push_back(ms);
          images.fetch_add(batch, std::memory_order_relaxed);
          ++measured;
        }
      };
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(worker_fn, w);
      while (warmed.load() < workers) std::this_thread::yield();
      const auto window_start = std::chrono::steady_clock::now();
      go.store(true, std::memory_order_release);
      std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
      stop.store(true);
      for (auto& t : pool) t.join();
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - window_start).count();

      std::vector<double> all;
      for (const auto& v : latencies) all.insert(all.end(), v.begin(), v.end());
      std::sort(all.begin(), all.end());
      const auto pct = [&](double q) {
        if (all.empty()) return 0.0;
        const std::size_t idx = static_cast<std::size_t>(q * (static_cast<double>(all.size()) - 1));
        return all[idx];
      };
      std::printf("%d,%d,%.2f,%.3f,%.3f\n", batch, workers,
                  static_cast<double>(images.load()) / wall, pct(0.50), pct(0.95));
      std::fflush(stdout);
    }
  }
  worker_threads() = saved_pool;
  return 0;
}

int cmd_gradcheck(double tolerance, std::uint64_t seed) {
  if (!(tolerance > 0.0)) throw UsageError("--tolerance must be positive");
  const auto reports = run_gradcheck_suite(seed);
  bool ok = true;
  for (const auto& r : reports) {
    const bool pass = r.max_rel_err < tolerance;
    ok = ok && pass;
    std::printf("%-24s max_rel_err=%.3e  %s\n", r.name.c_str(), r.max_rel_err, pass ? "ok" : "FAIL");
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPU training and inference for the FastNet reference CNN"};
  app.require_subcommand(1);

  unsigned threads = default_worker_threads();
  bool fast = false;
  app.add_option("--threads", threads, "worker threads for layer kernels")->capture_default_str();
  app.add_flag("--fast", fast, "allow thread-count-dependent reduction chunking (default: deterministic)");

  // train
  auto* train = app.add_subcommand("train", "train a model and write a model file");
  std::string dataset = "c10";
  fs::path data_dir = "data";
  int epochs = 200;
  int batch_size = 128;
  double lr = 1e-3;
  double decay_factor = 0.1;
  std::string milestones = "80,120,160,180";
  std::uint64_t seed = 0;
  std::size_t limit = 0, test_limit = 0;
  bool no_augment = false;
  bool plain_first = false;
  double stop_train_acc = 0.0;
  fs::path out_path = "model.fstn";
  fs::path metrics_path;
  train->add_option("--dataset", dataset, "c10 or c100")->capture_default_str();
  train->add_option("--data-dir", data_dir, "directory with the extracted CIFAR binaries")->capture_default_str();
  train->add_option("--epochs", epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--batch-size", batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", lr, "initial learning rate")->capture_default_str();
  train->add_option("--decay-factor", decay_factor, "milestone decay factor")->capture_default_str();
  train->add_option("--milestones", milestones, "epochs at which lr is divided")->capture_default_str();
  train->add_option("--seed", seed)->capture_default_str();
  train->add_option("--limit", limit, "cap on training records (0 = all)")->capture_default_str();
  train->add_option("--test-limit", test_limit, "cap on test records (0 = all)")->capture_default_str();
  train->add_flag("--no-augment", no_augment, "disable pad-crop-flip augmentation");
  train->add_flag("--plain-first-cell", plain_first, "plain conv (no BN/ReLU) for the first layer");
  train->add_option("--stop-train-acc", stop_train_acc, "stop early at this train accuracy (0 = off)")
      ->capture_default_str();
  train->add_option("--out", out_path, "output model file")->capture_default_str();
  train->add_option("--metrics", metrics_path, "also write JSON-lines metrics here");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "accuracy of a model on a dataset split");
  fs::path model_path;
  std::string split = "test";
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--dataset", dataset, "c10 or c100")->capture_default_str();
  eval_cmd->add_option("--data-dir", data_dir)->capture_default_str();
  eval_cmd->add_option("--limit", limit, "cap on records (0 = all)")->capture_default_str();
  eval_cmd->add_option("--split", split, "train or test")->capture_default_str();

  // predict
  auto* predict = app.add_subcommand("predict", "top-5 classes for one image");
  fs::path image_path;
  predict->add_option("--model", model_path)->required();
  predict->add_option("--image", image_path, "3072-byte raw image or single CIFAR record")->required();

  // inspect
  auto* inspect = app.add_subcommand("inspect", "per-layer parameter and MAC table");
  int classes = 10;
  std::string format = "csv";
  inspect->add_option("--classes", classes, "10 or 100")->capture_default_str();
  inspect->add_option("--format", format, "csv or text")->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "CPU inference throughput");
  std::string batch_csv = "1,32";
  std::string threads_csv = "1," + std::to_string(default_worker_threads());
  double seconds = 3.0;
  bench->add_option("--model", model_path, "model file (fresh seeded model when omitted)");
  bench->add_option("--classes", classes, "classes for the fresh model")->capture_default_str();
  bench->add_option("--batch", batch_csv, "comma list of batch sizes")->capture_default_str();
  bench->add_option("--bench-threads", threads_csv, "comma list of worker counts")->capture_default_str();
  bench->add_option("--seconds", seconds, "measurement time per combination")->capture_default_str();
  bench->add_option("--seed", seed)->capture_default_str();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every backward kernel");
  double tolerance = 1e-4;
  gradcheck->add_option("--tolerance", tolerance)->capture_default_str();
  gradcheck->add_option("--seed", seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  worker_threads() = threads == 0 ? 1 : threads;
  fast_mode() = fast;

  try {
    if (train->parsed())
      return cmd_train(dataset, data_dir, epochs, batch_size, lr, decay_factor, milestones, seed, limit,
                       test_limit, !no_augment, plain_first, out_path, metrics_path, stop_train_acc);
    if (eval_cmd->parsed()) return cmd_eval(model_path, dataset, data_dir, limit, split);
    if (predict->parsed()) return cmd_predict(model_path, image_path);
    if (inspect->parsed()) return cmd_inspect(classes, format);
    if (bench->parsed()) return cmd_bench(model_path, classes, batch_csv, threads_csv, seconds, seed);
    if (gradcheck->parsed()) return cmd_gradcheck(tolerance, seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
