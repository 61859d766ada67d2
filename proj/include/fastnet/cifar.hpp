#pragma once

// CIFAR-10/100 binary ingestion, per-channel normalization, training-time
// augmentation (pad 4, random 32x32 crop, horizontal flip), and seeded
// batching.
//
// Record layouts (byte-oriented, endianness-free):
//   CIFAR-10:  3073 bytes per record, [1 label][1024 R][1024 G][1024 B]
//   CIFAR-100: 3074 bytes per record, [1 coarse][1 fine][3072 pixels]
// Each 1024-byte plane is a 32x32 image row-major.
//
// Augmentation randomness is drawn from streams keyed by
// (seed, epoch, record index) and shuffling from (seed, epoch), so batch
// contents never depend on evaluation order or thread scheduling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fastnet/bytes.hpp"
#include "fastnet/error.hpp"
#include "fastnet/rng.hpp"
#include "fastnet/tensor.hpp"

namespace fastnet {

enum class CifarVariant { c10, c100 };

inline int cifar_record_size(CifarVariant v) { return v == CifarVariant::c10 ? 3073 : 3074; }
inline int cifar_num_classes(CifarVariant v) { return v == CifarVariant::c10 ? 10 : 100; }

constexpr int kCifarImageBytes = 3072;
constexpr int kCifarHw = 32;

struct CifarRecord {
  std::uint8_t fine_label = 0;
  std::int16_t coarse_label = -1;  // CIFAR-100 only, -1 otherwise
  std::array<std::uint8_t, kCifarImageBytes> pixels{};
};

inline std::vector<CifarRecord> parse_cifar(const std::uint8_t* data, std::size_t len, CifarVariant variant) {
  const std::size_t rec = static_cast<std::size_t>(cifar_record_size(variant));
  if (len % rec != 0)
    fail(ErrorCode::parse_error, "cifar: byte length " + std::to_string(len) +
                                     " is not a multiple of the record size " + std::to_string(rec));
  std::vector<CifarRecord> out(len / rec);
  const int classes = cifar_num_classes(variant);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* p = data + i * rec;
    CifarRecord& r = out[i];
    if (variant == CifarVariant::c10) {
      r.fine_label = p[0];
      p += 1;
    } else {
      if (p[0] >= 20) fail(ErrorCode::parse_error, "cifar: coarse label out of range in record " + std::to_string(i));
      r.coarse_label = static_cast<std::int16_t>(p[0]);
      r.fine_label = p[1];
      p += 2;
    }
    if (r.fine_label >= classes)
      fail(ErrorCode::parse_error, "cifar: label " + std::to_string(r.fine_label) + " out of range in record " +
                                       std::to_string(i));
    std::copy(p, p + kCifarImageBytes, r.pixels.begin());
  }
  return out;
}

inline void serialize_record(const CifarRecord& r, CifarVariant variant, std::vector<std::uint8_t>& out) {
  if (variant == CifarVariant::c100) out.push_back(r.coarse_label < 0 ? 0 : static_cast<std::uint8_t>(r.coarse_label));
  out.push_back(r.fine_label);
  out.insert(out.end(), r.pixels.begin(), r.pixels.end());
}

// Load a split from the standard extracted archives. The directory may be
// the archive directory itself or a parent containing
// cifar-10-batches-bin / cifar-100-binary. limit == 0 loads everything.
inline std::vector<CifarRecord> load_cifar_split(const std::filesystem::path& dir, CifarVariant variant,
                                                 bool train, std::size_t limit = 0) {
  namespace fs = std::filesystem;
  std::vector<fs::path> roots = {dir};
  roots.push_back(dir / (variant == CifarVariant::c10 ? "cifar-10-batches-bin" : "cifar-100-binary"));
  std::vector<std::string> names;
  if (variant == CifarVariant::c10) {
    if (train)
      names = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
               "data_batch_5.bin"};
    else
      names = {"test_batch.bin"};
  } else {
    names = {train ? "train.bin" : "test.bin"};
  }
  for (const auto& root : roots) {
    if (!fs::exists(root / names.front())) continue;
    std::vector<CifarRecord> records;
    for (const auto& name : names) {
      const auto bytes = read_file_bytes(root / name);
      auto part = parse_cifar(bytes.data(), bytes.size(), variant);
      records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      if (limit && records.size() >= limit) break;
    }
    if (limit && records.size() > limit) records.resize(limit);
    return records;
  }
  fail(ErrorCode::io_error, "cifar: no " + names.front() + " under " + dir.string() +
                                " (expected the extracted binary archive)");
}

struct ChannelStats {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> stddev{1.f, 1.f, 1.f};
};

// Per-channel mean and population std of pixels scaled to [0,1], over the
// whole training split. std is floored at 1e-6 to guard degenerate data.
inline ChannelStats compute_channel_stats(const std::vector<CifarRecord>& records) {
  if (records.empty()) fail(ErrorCode::invalid_argument, "channel stats: empty record set");
  ChannelStats stats;
  const double inv_count = 1.0 / (static_cast<double>(records.size()) * 1024.0);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0, sum_sq = 0.0;
    for (const auto& r : records) {
      const std::uint8_t* p = r.pixels.data() + c * 1024;
      for (int i = 0; i < 1024; ++i) {
        const double v = static_cast<double>(p[i]) / 255.0;
        sum += v;
        sum_sq += v * v;
      }
    }
    const double mean = sum * inv_count;
    double var = sum_sq * inv_count - mean * mean;
    if (var < 0.0) var = 0.0;
    double sd = std::sqrt(var);
    if (sd < 1e-6) sd = 1e-6;
    stats.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    stats.stddev[static_cast<std::size_t>(c)] = static_cast<float>(sd);
  }
  return stats;
}

// (pixel/255 - mean_c) / std_c
inline TensorF normalize(const CifarRecord& record, const ChannelStats& stats) {
  TensorF img({3, kCifarHw, kCifarHw});
  for (int c = 0; c < 3; ++c) {
    const std::uint8_t* p = record.pixels.data() + c * 1024;
    float* out = img.data() + static_cast<std::size_t>(c) * 1024;
    const float mean = stats.mean[static_cast<std::size_t>(c)];
    const float inv_sd = 1.0f / stats.stddev[static_cast<std::size_t>(c)];
    for (int i = 0; i < 1024; ++i) out[i] = (static_cast<float>(p[i]) / 255.0f - mean) * inv_sd;
  }
  return img;
}

// Crop a 32x32 window at offset (dy, dx) in [0,8]^2 out of the image
// zero-padded by 4 on every side. (4,4) is the identity window.
inline TensorF pad4_crop(const TensorF& img, int dy, int dx) {
  if (dy < 0 || dy > 8 || dx < 0 || dx > 8) fail(ErrorCode::invalid_argument, "pad4_crop: offset out of [0,8]");
  TensorF out({3, kCifarHw, kCifarHw});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < kCifarHw; ++y) {
      const int sy = y + dy - 4;
      for (int x = 0; x < kCifarHw; ++x) {
        const int sx = x + dx - 4;
        const bool inside = sy >= 0 && sy < kCifarHw && sx >= 0 && sx < kCifarHw;
        out.at(c, y, x) = inside ? img.at(c, sy, sx) : 0.0f;
      }
    }
  }
  return out;
}

inline TensorF hflip(const TensorF& img) {
  TensorF out(img.shape());
  const int h = img.extent(1), w = img.extent(2);
  for (int c = 0; c < img.extent(0); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y, w - 1 - x);
  return out;
}

// Random pad-4 crop (81 positions, uniform) then horizontal flip with
// probability 1/2. Draw order: dy, dx, flip.
inline TensorF augment(const TensorF& img, Rng& rng) {
  const int dy = static_cast<int>(rng.next_below(9));
  const int dx = static_cast<int>(rng.next_below(9));
  TensorF out = pad4_crop(img, dy, dx);
  if (rng.next_bool()) out = hflip(out);
  return out;
}

struct Batch {
  TensorF images;           // (N, 3, 32, 32)
  std::vector<int> labels;  // fine labels
};

struct BatchOptions {
  int batch_size = 128;
  bool shuffle = false;
  bool augment = false;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
};

// Stream batches in order; the final partial batch is kept. Shuffling is a
// seeded Fisher-Yates keyed by (seed, epoch); augmentation streams are keyed
// by (seed, epoch, original record index).
inline void for_each_batch(const std::vector<CifarRecord>& records, const ChannelStats& stats,
                           const BatchOptions& opts, const std::function<void(const Batch&)>& fn) {
  if (opts.batch_size < 1) fail(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (records.empty()) return;
  std::vector<std::uint32_t> order(records.size());
  std::iota(order.begin(), order.end(), 0u);
  const Rng root(opts.seed);
  if (opts.shuffle) {
    Rng shuffle_rng = root.split(opts.epoch, ~0ULL);
    for (std::size_t i = records.size() - 1; i > 0; --i) {
      const std::size_t j = shuffle_rng.next_below(i + 1);
      std::swap(order[i], order[j]);
    }
  }
  const std::size_t image_size = 3u * kCifarHw * kCifarHw;
  for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(opts.batch_size)) {
    const std::size_t n = std::min(records.size() - start, static_cast<std::size_t>(opts.batch_size));
    Batch batch;
    batch.images = TensorF({static_cast<int>(n), 3, kCifarHw, kCifarHw});
    batch.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t ri = order[start + i];
      const CifarRecord& rec = records[ri];
      TensorF img = normalize(rec, stats);
      if (opts.augment) {
        Rng r = root.split(opts.epoch, ri);
        img = augment(img, r);
      }
      std::copy(img.data(), img.data() + image_size, batch.images.data() + i * image_size);
      batch.labels[i] = rec.fine_label;
    }
    fn(batch);
  }
}

}  // namespace fastnet
