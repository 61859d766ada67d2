#include "fastnet/model_io.hpp"

#include <gtest/gtest.h>

#include <cstring>

#include "fastnet/rng.hpp"

namespace fastnet {
namespace {

// Recompute the trailer CRC after byte surgery so only the intended defect
// remains.
void refresh_crc(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = detail::crc32(bytes.data() + 4, bytes.size() - 8);
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + static_cast<std::size_t>(i)] =
      static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF);
}

ArchitectureSpec tiny_spec() {
  ArchitectureSpec spec;
  spec.num_classes = 4;
  spec.conv_groups = {{6}};
  spec.head_widths = {};
  return spec;
}

TEST(Crc32, KnownCheckValue) {
  const char* s = "123456789";
  EXPECT_EQ(detail::crc32(reinterpret_cast<const std::uint8_t*>(s), 9), 0xCBF43926u);
}

TEST(SaveModel, ByteDeterministic) {
  const auto m = build_model<float>(tiny_spec(), Rng(5));
  EXPECT_EQ(save_model(m), save_model(m));
}

TEST(SaveModel, ReferenceModelSizeUnderSevenMb) {
  const auto m = build_fastnet<float>(10, Rng(1));
  const auto bytes = save_model(m);
  // ~4 bytes per scalar: params + running stats + input stats, plus headers.
  const std::size_t scalars = 1589264 + 2 * 1731 + 6;
  EXPECT_GT(bytes.size(), 4 * scalars);
  EXPECT_LT(bytes.size(), 7u * 1024 * 1024);
}

TEST(SaveModel, EmptyModelIsHeaderStatsTrailerOnly) {
  ModelState<float> m;
  m.spec = ArchitectureSpec{};
  const auto bytes = save_model(m);
  // magic + version + fingerprint + count + two 3-float input-stat tensors
  // (2 + name + 1 + 4 + 12 bytes each) + crc
  const std::size_t stat_block = 2 + std::strlen("input.mean") + 1 + 4 + 12;
  const std::size_t stat_block2 = 2 + std::strlen("input.std") + 1 + 4 + 12;
  EXPECT_EQ(bytes.size(), 4u + 4 + 8 + 4 + stat_block + stat_block2 + 4);
  const auto back = load_model(bytes, ArchitectureSpec{});
  EXPECT_TRUE(back.layers.empty());
}

TEST(LoadModel, RoundTripBitIdenticalLogits) {
  auto model = build_model<float>(tiny_spec(), Rng(9));
  Rng rng(4);
  TensorF batch({3, 3, 8, 8});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = static_cast<float>(rng.next_normal());
  // Exercise non-trivial running stats before saving.
  network_forward(model, batch, Mode::train);
  const TensorF want = infer_forward(model, batch);

  const auto bytes = save_model(model);
  const auto loaded = load_model(bytes, tiny_spec());
  const TensorF got = infer_forward(loaded, batch);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], want[i]);

  // save -> load -> save is byte-identical
  EXPECT_EQ(save_model(loaded), bytes);
}

TEST(LoadModel, CorruptionFixtures) {
  const auto model = build_model<float>(tiny_spec(), Rng(9));
  const auto good = save_model(model);

  {  // bad magic
    auto bytes = good;
    bytes[0] = 'X';
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::bad_magic);
    }
  }
  {  // flipped payload byte fails the CRC
    auto bytes = good;
    bytes[bytes.size() / 2] ^= 0x40;
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::bad_crc);
    }
  }
  {  // version bump with a valid CRC
    auto bytes = good;
    bytes[4] = 2;
    refresh_crc(bytes);
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::bad_version);
    }
  }
  {  // wrong expected architecture
    try {
      load_model(good, ArchitectureSpec::fastnet(10));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::fingerprint_mismatch);
    }
  }
  {  // truncation (CRC recomputed over the shorter stream)
    auto bytes = good;
    bytes.resize(bytes.size() - 100);
    refresh_crc(bytes);
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::bad_layout);
    }
  }
  {  // non-finite payload value
    auto bytes = good;
    // first tensor payload starts after: magic(4) version(4) fp(8) count(4)
    // name_len(2) + "input.mean"(10) + rank(1) + extent(4)
    const std::size_t payload = 4 + 4 + 8 + 4 + 2 + 10 + 1 + 4;
    const std::uint32_t inf = 0x7F800000u;
    for (int i = 0; i < 4; ++i) bytes[payload + static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>((inf >> (8 * i)) & 0xFF);
    refresh_crc(bytes);
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::non_finite);
    }
  }
  {  // too short to be a model file at all
    std::vector<std::uint8_t> bytes = {'F', 'S', 'T', 'N', 1, 0};
    try {
      load_model(bytes, tiny_spec());
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::bad_layout);
    }
  }
}

TEST(LoadModel, FileRoundTrip) {
  namespace fs = std::filesystem;
  const auto model = build_model<float>(tiny_spec(), Rng(31));
  const fs::path path = fs::temp_directory_path() / "fastnet_model_io_test.fstn";
  const std::size_t written = save_model_file(model, path);
  EXPECT_EQ(written, fs::file_size(path));
  const auto loaded = load_model_file(path, tiny_spec());
  EXPECT_EQ(save_model(loaded), save_model(model));
  fs::remove(path);
  EXPECT_THROW(load_model_file(path, tiny_spec()), Error);
}

}  // namespace
}  // namespace fastnet
