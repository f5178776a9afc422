#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace tsvit;
using namespace tsvit::support;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

FormatError::Kind load_error(const std::filesystem::path& p, const std::optional<TsvitConfig>& expected = {}) {
  try {
    load_checkpoint(p, expected);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load succeeded";
  return FormatError::Kind::io;
}

TsvitModel<float> trained_looking_model() {
  TsvitConfig c = tiny_config();
  c.encoder_dropout = 0.1f;
  Rng rng(77);
  auto model = init_model<float>(c, rng);
  randomize(model, rng);
  return model;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto dir = scratch_dir("ckpt_roundtrip");
  auto model = trained_looking_model();
  save_checkpoint(model, dir / "a.tsvm");
  auto loaded = load_checkpoint(dir / "a.tsvm", model.config);
  EXPECT_EQ(loaded.config, model.config);
  EXPECT_EQ(loaded.seed, model.seed);
  EXPECT_EQ(loaded.params.fingerprint(), model.params.fingerprint());
  save_checkpoint(loaded, dir / "b.tsvm");
  EXPECT_EQ(slurp(dir / "a.tsvm"), slurp(dir / "b.tsvm"));
  EXPECT_FALSE(std::filesystem::exists(dir / "b.tsvm.partial"));
}

TEST(Checkpoint, LayoutSize) {
  auto model = trained_looking_model();
  const std::string bytes = encode_checkpoint(model);
  // magic, version, 8 extents, 2 probabilities, 2 flags, name length + name, seed
  const std::size_t header = 4 + 4 + 8 * 4 + 2 * 4 + 2 * 4 + 1 + Rng::algorithm.size() + 8;
  EXPECT_EQ(bytes.size(), header + 4 * count_params(model.config));
  EXPECT_EQ(bytes.substr(0, 4), "TSVM");
}

TEST(Checkpoint, BadMagicRejected) {
  auto dir = scratch_dir("ckpt_magic");
  std::string bytes = encode_checkpoint(trained_looking_model());
  bytes[0] = 'X';
  spit(dir / "bad.tsvm", bytes);
  EXPECT_EQ(load_error(dir / "bad.tsvm"), FormatError::Kind::bad_magic);
}

TEST(Checkpoint, VersionChecked) {
  auto dir = scratch_dir("ckpt_version");
  std::string bytes = encode_checkpoint(trained_looking_model());
  bytes[4] = 9;
  spit(dir / "v.tsvm", bytes);
  EXPECT_EQ(load_error(dir / "v.tsvm"), FormatError::Kind::bad_version);
}

TEST(Checkpoint, ClassCountMismatchIsExplicit) {
  auto dir = scratch_dir("ckpt_classes");
  auto model = trained_looking_model();
  save_checkpoint(model, dir / "m.tsvm");
  TsvitConfig other = model.config;
  other.num_classes = 10;
  try {
    load_checkpoint(dir / "m.tsvm", other);
    FAIL() << "mismatch accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("N_c 3 vs 10"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncationAndTrailingBytes) {
  auto dir = scratch_dir("ckpt_trunc");
  const std::string bytes = encode_checkpoint(trained_looking_model());
  spit(dir / "short.tsvm", bytes.substr(0, bytes.size() - 4));
  EXPECT_EQ(load_error(dir / "short.tsvm"), FormatError::Kind::truncated);
  spit(dir / "header.tsvm", bytes.substr(0, 20));
  EXPECT_EQ(load_error(dir / "header.tsvm"), FormatError::Kind::truncated);
  spit(dir / "long.tsvm", bytes + "x");
  EXPECT_EQ(load_error(dir / "long.tsvm"), FormatError::Kind::trailing_data);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.tsvm"), FormatError);
}
