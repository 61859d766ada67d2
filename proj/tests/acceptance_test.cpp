// Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//
// Data-dependent criteria use the real CIFAR-10 binaries when present
// (FASTNET_DATA_DIR or ./data); otherwise they run on a deterministic
// synthetic dataset written in the exact CIFAR-10 record format, and say so.
//
// The scaled runs (criteria 7 and 8) are sized as specified and take tens
// of minutes to hours on a single core; they are registered as separate
// ctest entries with their own timeouts.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fastnet/gradcheck.hpp"
#include "fastnet/model_io.hpp"
#include "fastnet/network.hpp"
#include "fastnet/training.hpp"
#include "support/reference_kernels.hpp"
#include "support/synthetic_cifar.hpp"

namespace fastnet {
namespace {

namespace fs = std::filesystem;

struct DataContext {
  fs::path dir;
  bool real = false;
  std::vector<CifarRecord> train;
  std::vector<CifarRecord> test;
  ChannelStats stats;
};

const DataContext& cifar10_context() {
  static const DataContext ctx = [] {
    DataContext c;
    auto [dir, real] = testing::locate_cifar10(fs::temp_directory_path() / "fastnet_acceptance");
    c.dir = dir;
    c.real = real;
    c.train = load_cifar_split(dir, CifarVariant::c10, true, 8000);
    c.test = load_cifar_split(dir, CifarVariant::c10, false, 2000);
    c.stats = compute_channel_stats(c.train);
    std::printf("[data] %s CIFAR-10 from %s (%zu train / %zu test records)\n",
                real ? "real" : "SYNTHETIC stand-in (real archives not present)", dir.string().c_str(),
                c.train.size(), c.test.size());
    return c;
  }();
  return ctx;
}

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[CRITERION %02d] %s - %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  EXPECT_TRUE(pass) << "criterion " << criterion << ": " << detail;
}

// Independent layer-by-layer enumeration of the reference parameter count,
// written before the library's counter and kept separate from it.
long long enumeration_oracle_params(int num_classes) {
  struct Row {
    int cin, cout, k;
  };
  const Row rows[15] = {
      {3, 64, 3},    {64, 128, 3},  {128, 128, 3}, {128, 128, 3},
      {128, 128, 3}, {128, 128, 3}, {128, 128, 3},
      {128, 128, 3}, {128, 128, 3}, {128, 128, 3},
      {128, 128, 3}, {128, 128, 3},
      {128, 128, 1}, {128, 128, 1}, {128, num_classes, 1},
  };
  long long total = 0;
  for (const auto& r : rows)
    total += static_cast<long long>(r.cout) * r.cin * r.k * r.k + r.cout + 2LL * r.cin;
  return total;
}

struct CmdResult {
  int exit_code = -1;
  std::string out;
};

CmdResult run_cli(const std::string& args) {
  const char* cli = std::getenv("FASTNET_CLI");
  if (!cli) return {};
  const std::string cmd = std::string(cli) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  CmdResult res;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) res.out.append(buf, n);
  const int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

TEST(Acceptance, Criterion01ParameterCount) {
  const long long oracle = enumeration_oracle_params(100);
  const auto res = run_cli("inspect --classes 100 --format csv");
  bool pass = res.exit_code == 0;
  std::string totals_line;
  std::stringstream ss(res.out);
  std::string line;
  while (std::getline(ss, line))
    if (line.rfind("total,", 0) == 0) totals_line = line;
  long long cli_total = -1;
  if (pass) pass = std::sscanf(totals_line.c_str(), "total,,,%lld,", &cli_total) == 1;
  pass = pass && cli_total == oracle;
  const double millions = static_cast<double>(cli_total) / 1e6;
  pass = pass && std::fabs(millions - 1.6) < 0.05;  // rounds to 1.6 M
  report(1, pass,
         "inspect --classes 100 totals " + std::to_string(cli_total) + " == enumeration oracle " +
             std::to_string(oracle) + ", rounds to 1.6 M");
}

TEST(Acceptance, Criterion02ArchitectureShape) {
  const auto spec = ArchitectureSpec::fastnet(10);
  const auto defs = spec.layers();
  bool pass = defs.size() == 15;
  int three = 0;
  std::vector<int> pools;
  for (std::size_t i = 0; i < defs.size(); ++i) {
    if (defs[i].kernel == 3) ++three;
    if (defs[i].pool_after) pools.push_back(static_cast<int>(i) + 1);
  }
  pass = pass && three == 12 && pools == std::vector<int>({4, 7, 10, 12});

  auto model = build_model<float>(spec, Rng(3));
  TensorF batch({2, 3, 32, 32}, 0.1f);
  ForwardCache<float> cache;
  const TensorF logits = network_forward(model, batch, Mode::train, &cache);
  pass = pass && logits.shape() == Shape{2, 10};
  // spatial trace 32 -> 16 -> 8 -> 4 -> 2: pool inputs are 32,16,8,4 and
  // the global pooling sees 2x2
  const int want_pre[4] = {32, 16, 8, 4};
  for (int p = 0; p < 4; ++p)
    pass = pass && cache.pools[static_cast<std::size_t>(p)].in_shape[2] == want_pre[p] &&
           cache.pools[static_cast<std::size_t>(p)].in_shape[3] == want_pre[p];
  pass = pass && cache.gap_in_shape[2] == 2 && cache.gap_in_shape[3] == 2;
  report(2, pass, "15 conv layers (12 of them 3x3), pools after 4/7/10/12, trace 32-16-8-4-2, logits Nx10");
}

TEST(Acceptance, Criterion03GradientSuite) {
  const auto reports = run_gradcheck_suite();
  bool pass = reports.size() == 9;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : reports) {
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
    pass = pass && r.max_rel_err < 1e-4;
  }
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "every layer backward + end-to-end tiny network < 1e-4 (worst %.3e in %s)", worst,
                worst_name.c_str());
  report(3, pass, detail);
}

TEST(Acceptance, Criterion04ConvOracleEquivalence) {
  const double worst = testing::conv_oracle_max_diff(100, 20240601);
  char detail[120];
  std::snprintf(detail, sizeof(detail), "100 random cases, im2col vs direct loop, max abs diff %.3e < 1e-5",
                worst);
  report(4, worst < 1e-5, detail);
}

TEST(Acceptance, Criterion05BatchNormSelfNormalization) {
  Rng root(606);
  bool pass = true;
  double worst_mean = 0.0, worst_var = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    Rng rng = root.split(static_cast<std::uint64_t>(rep));
    const int n = 2 + static_cast<int>(rng.next_below(4));
    const int c = 1 + static_cast<int>(rng.next_below(8));
    const int hw = 2 + 2 * static_cast<int>(rng.next_below(4));
    TensorF x({n, c, hw, hw});
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] = 1.5f * static_cast<float>(rng.next_normal()) + static_cast<float>(rng.next_below(5));
    BatchNormParams<float> p = BatchNormParams<float>::make(c);
    const TensorF y = batchnorm_forward(x, p, Mode::train);
    const std::size_t plane = static_cast<std::size_t>(hw) * hw;
    for (int ch = 0; ch < c; ++ch) {
      double sum = 0.0, sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const float* v = y.data() + (static_cast<std::size_t>(i) * c + static_cast<std::size_t>(ch)) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          sum += v[j];
          sq += static_cast<double>(v[j]) * v[j];
        }
      }
      const double m = sum / (n * static_cast<double>(plane));
      const double var = sq / (n * static_cast<double>(plane)) - m * m;
      worst_mean = std::max(worst_mean, std::fabs(m));
      worst_var = std::max(worst_var, std::fabs(var - 1.0));
      pass = pass && std::fabs(m) < 1e-5 && std::fabs(var - 1.0) < 1e-3;
    }
  }
  char detail[140];
  std::snprintf(detail, sizeof(detail), "train-mode gamma=1 beta=0: worst |mean| %.2e < 1e-5, worst |var-1| %.2e < 1e-3",
                worst_mean, worst_var);
  report(5, pass, detail);
}

TEST(Acceptance, Criterion06LossSanity) {
  const auto& data = cifar10_context();
  auto model = build_fastnet<float>(10, Rng(7));
  BatchOptions opts;
  opts.batch_size = 128;
  double first_loss = -1.0;
  bool got = false;
  for_each_batch(data.train, data.stats, opts, [&](const Batch& b) {
    if (got) return;
    const TensorF logits = network_forward(model, b.images, Mode::train);
    first_loss = softmax_cross_entropy(logits, b.labels).loss;
    got = true;
  });
  const double ln10 = std::log(10.0);
  const bool loss_in_band = std::fabs(first_loss - ln10) <= 0.1;

  // Shift invariance of the stable softmax.
  Rng rng(8);
  TensorF logits({4, 10}), shifted({4, 10});
  for (int i = 0; i < 4; ++i) {
    const float shift = 3.f * static_cast<float>(i) - 5.f;
    for (int j = 0; j < 10; ++j) {
      const float v = 2.f * static_cast<float>(rng.next_normal());
      logits.at(i, j) = v;
      shifted.at(i, j) = v + shift;
    }
  }
  const std::vector<int> labels = {1, 0, 9, 5};
  const auto a = softmax_cross_entropy(logits, labels);
  const auto b = softmax_cross_entropy(shifted, labels);
  double shift_diff = std::fabs(a.loss - b.loss);
  for (std::size_t i = 0; i < a.d_logits.size(); ++i)
    shift_diff = std::max(shift_diff, static_cast<double>(std::fabs(a.d_logits[i] - b.d_logits[i])));
  const bool shift_ok = shift_diff < 1e-6;

  char detail[240];
  std::snprintf(detail, sizeof(detail),
                "first-batch loss %.4f vs ln10 %.4f (band +/-0.1)%s; shift invariance %.1e < 1e-6",
                first_loss, ln10,
                loss_in_band ? "" : " - out of band: he_normal+BN init yields logit spread sigma~0.5-0.9, "
                                    "lifting E[loss] ~0.15-0.35 above ln10 for any seed (see ledger)",
                shift_diff);
  report(6, loss_in_band && shift_ok, detail);
}

TEST(Acceptance, Criterion07OverfitOracle) {
  const auto& data = cifar10_context();
  std::vector<CifarRecord> subset(data.train.begin(), data.train.begin() + 128);
  auto model = build_fastnet<float>(10, Rng(11));
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 16;  // 8 steps/epoch warms the BN running stats early
  cfg.lr0 = 1e-3;
  cfg.milestones = {};  // constant lr 0.001 for the whole run
  cfg.seed = 11;
  cfg.augment = false;
  double best = 0.0;
  int epochs_run = 0;
  std::vector<double> losses;
  fit(model, subset, subset, data.stats, cfg, [&](const EpochMetrics& m) {
    best = std::max(best, m.train_acc);
    epochs_run = m.epoch + 1;
    losses.push_back(m.train_loss);
    if (m.epoch % 10 == 0)
      std::printf("[criterion 7] epoch %d train_acc %.4f loss %.4f\n", m.epoch, m.train_acc, m.train_loss);
    return best < 0.99;
  });
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "128-image subset (%s), augment off: train accuracy %.4f >= 0.99 after %d epochs (<=200)",
                data.real ? "real CIFAR-10" : "synthetic", best, epochs_run);
  report(7, best >= 0.99, detail);

  // Loop smoke invariant on the same run: epoch loss is non-increasing over
  // 20-epoch windows after epoch 20, with at most 2 violations.
  int violations = 0;
  for (std::size_t e = 20; e + 20 < losses.size(); ++e)
    if (losses[e + 20] > losses[e]) ++violations;
  EXPECT_LE(violations, 2) << "20-epoch loss windows increased " << violations << " times";
}

TEST(Acceptance, Criterion08ScaledTraining) {
  const auto& data = cifar10_context();
  ASSERT_GE(data.train.size(), 5000u);
  std::vector<CifarRecord> subset(data.train.begin(), data.train.begin() + 5000);
  std::vector<CifarRecord> test_subset(data.test.begin(),
                                       data.test.begin() + std::min<std::size_t>(data.test.size(), 2000));
  auto model = build_fastnet<float>(10, Rng(21));
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 128;
  cfg.lr0 = 1e-3;
  cfg.milestones = {};
  cfg.seed = 21;
  cfg.augment = true;
  double final_test = 0.0;
  fit(model, subset, test_subset, data.stats, cfg, [&](const EpochMetrics& m) {
    final_test = m.test_acc;
    std::printf("[criterion 8] epoch %d loss %.4f train_acc %.4f test_acc %.4f (%.0fs)\n", m.epoch,
                m.train_loss, m.train_acc, m.test_acc, m.seconds);
    std::fflush(stdout);
    return true;
  });
  char detail[200];
  std::snprintf(detail, sizeof(detail),
                "5000-image subset (%s), 15 epochs, augment on: test accuracy %.4f >= 0.40 on %zu held-out records",
                data.real ? "real CIFAR-10" : "synthetic", final_test, test_subset.size());
  report(8, final_test >= 0.40, detail);
}

TEST(Acceptance, Criterion09Determinism) {
  const auto& data = cifar10_context();
  std::vector<CifarRecord> subset(data.train.begin(), data.train.begin() + 256);
  std::vector<CifarRecord> test_subset(data.test.begin(), data.test.begin() + 128);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.milestones = {};
  cfg.seed = 99;
  cfg.augment = true;

  auto run_once = [&](std::vector<double>& losses) {
    auto model = build_fastnet<float>(10, Rng(99));
    fit(model, subset, test_subset, data.stats, cfg, [&](const EpochMetrics& m) {
      losses.push_back(m.train_loss);
      return true;
    });
    return save_model(model);
  };
  std::vector<double> l1, l2;
  const auto b1 = run_once(l1);
  const auto b2 = run_once(l2);
  const bool pass = l1 == l2 && b1 == b2;
  report(9, pass, "two seeded runs: per-epoch loss sequences and saved model bytes bit-identical");
}

TEST(Acceptance, Criterion10Serialization) {
  auto model = build_fastnet<float>(10, Rng(31));
  Rng rng(5);
  TensorF batch({4, 3, 32, 32});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = static_cast<float>(rng.next_normal());
  network_forward(model, batch, Mode::train);  // non-trivial running stats
  const TensorF want = infer_forward(model, batch);
  const auto bytes = save_model(model);
  const auto loaded = load_model(bytes, ArchitectureSpec::fastnet(10));
  const TensorF got = infer_forward(loaded, batch);
  bool pass = got.size() == want.size();
  for (std::size_t i = 0; pass && i < got.size(); ++i) pass = got[i] == want[i];
  const bool roundtrip = pass;

  auto expect_code = [&](std::vector<std::uint8_t> mutated, ErrorCode code, bool fix_crc) {
    if (fix_crc) {
      const std::uint32_t crc = detail::crc32(mutated.data() + 4, mutated.size() - 8);
      for (int i = 0; i < 4; ++i)
        mutated[mutated.size() - 4 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF);
    }
    try {
      load_model(mutated, ArchitectureSpec::fastnet(10));
      return false;
    } catch (const Error& e) {
      return e.code() == code;
    }
  };
  auto flip_payload = bytes;
  flip_payload[flip_payload.size() / 2] ^= 0x20;
  auto magic = bytes;
  magic[1] = 'Q';
  auto version = bytes;
  version[4] = 9;
  auto truncated = bytes;
  truncated.resize(truncated.size() - 64);
  bool fixtures = expect_code(magic, ErrorCode::bad_magic, false) &&
                  expect_code(flip_payload, ErrorCode::bad_crc, false) &&
                  expect_code(version, ErrorCode::bad_version, true) &&
                  expect_code(truncated, ErrorCode::bad_layout, true);
  try {
    load_model(bytes, ArchitectureSpec::fastnet(100));
    fixtures = false;
  } catch (const Error& e) {
    fixtures = fixtures && e.code() == ErrorCode::fingerprint_mismatch;
  }
  report(10, roundtrip && fixtures,
         "save/load round trip bit-identical logits; magic/CRC/version/truncation/fingerprint fixtures raise "
         "their designated errors");
}

TEST(Acceptance, Criterion11ReceptiveField) {
  Rng rng(67);
  auto make_conv = [&](int cout, int cin) {
    Rng r(rng.next_u64());
    return ConvParams<float>::make(cout, cin, 3, true, r);
  };
  auto c1 = make_conv(2, 1);
  auto c2 = make_conv(1, 2);
  TensorF x({1, 1, 11, 11});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.next_normal());
  const TensorF h = conv2d_forward(x, c1);
  TensorF dz({1, 1, 11, 11});
  dz.at(0, 0, 5, 5) = 1.f;
  const auto g2 = conv2d_backward(h, c2, dz);
  const auto g1 = conv2d_backward(x, c1, g2.input);
  int inside = 0, outside = 0;
  for (int y = 0; y < 11; ++y)
    for (int xx = 0; xx < 11; ++xx) {
      const bool in_window = y >= 3 && y <= 7 && xx >= 3 && xx <= 7;
      if (g1.input.at(0, 0, y, xx) != 0.f) (in_window ? inside : outside)++;
    }
  report(11, inside == 25 && outside == 0,
         "gradient support of one output pixel through two stacked 3x3 convs is exactly a 5x5 window");
}

TEST(Acceptance, Criterion12BenchHarness) {
  const unsigned hw = default_worker_threads();
  const std::string thread_list = hw > 1 ? "1," + std::to_string(hw) : "1";
  const std::string args = "bench --batch 1,32 --bench-threads " + thread_list + " --seconds 2 --seed 17";
  const auto r1 = run_cli(args);
  const auto r2 = run_cli(args);
  bool pass = r1.exit_code == 0 && r2.exit_code == 0;

  auto parse_rows = [](const std::string& out) {
    std::vector<std::array<double, 5>> rows;
    std::stringstream ss(out);
    std::string line;
    std::getline(ss, line);
    if (line != "batch,threads,images_per_sec,p50_ms,p95_ms") return rows;
    while (std::getline(ss, line)) {
      std::array<double, 5> row{};
      if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &row[0], &row[1], &row[2], &row[3], &row[4]) == 5)
        rows.push_back(row);
    }
    return rows;
  };
  const auto rows1 = parse_rows(r1.out);
  const auto rows2 = parse_rows(r2.out);
  const std::size_t want_rows = 2 * (hw > 1 ? 2 : 1);  // batch {1,32} x thread list
  pass = pass && rows1.size() == want_rows && rows2.size() == want_rows;
  double worst_ratio = 1.0;
  for (std::size_t i = 0; pass && i < rows1.size(); ++i) {
    const double a = rows1[i][2], b = rows2[i][2];
    pass = pass && a > 0 && b > 0;
    const double ratio = a > b ? a / b : b / a;
    worst_ratio = std::max(worst_ratio, ratio);
  }
  pass = pass && worst_ratio <= 1.25;

  // Report-only: per-image latency at batch 32 vs batch 1 (im2col
  // amortization usually favors the larger batch; machine-dependent).
  if (rows1.size() >= 2) {
    const double per_image_b1 = rows1.front()[3];
    const double per_image_b32 = rows1.back()[3] / 32.0;
    std::printf("[criterion 12 note] per-image p50: batch 1 %.3f ms, batch 32 %.3f ms%s\n", per_image_b1,
                per_image_b32, per_image_b32 <= per_image_b1 ? "" : " (batch 32 slower on this machine)");
  }
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "CSV for batch {1,32} x threads {%s}; repeated runs within 25%% (worst ratio %.3f)",
                thread_list.c_str(), worst_ratio);
  report(12, pass, detail);
}

}  // namespace
}  // namespace fastnet
