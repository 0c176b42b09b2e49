#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cvig/checkpoint.hpp"
#include "oracles.hpp"

using namespace cvig;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / ("cvig_" + stem + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + ".ckpt");
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Re-encodes the header after `edit` has changed the manifest.
std::string rewrite_manifest(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 12, 8);
  auto manifest = nlohmann::json::parse(bytes.substr(20, len));
  edit(manifest);
  const std::string text = manifest.dump();
  std::string out = bytes.substr(0, 12);
  const std::uint64_t n = text.size();
  out.append(reinterpret_cast<const char*>(&n), 8);
  return out + text + bytes.substr(20 + len);
}

}  // namespace

TEST(Checkpoint, ModelRoundTripIsBitwise) {
  const auto cfg = preset("tiny");
  const auto model = init_model<float>(cfg, 3);
  const auto path = temp_file("roundtrip");
  save_checkpoint(path.string(), to_checkpoint(model));
  const auto back = model_from_checkpoint<float>(load_checkpoint(path.string()), cfg);
  ASSERT_EQ(back.params.size(), model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    EXPECT_EQ(back.params.entries()[i].spec.name, model.params.entries()[i].spec.name);
    EXPECT_TRUE(bitwise_equal(back.params.entries()[i].var->value, model.params.entries()[i].var->value));
  }
  const auto image = oracle::random_tensor<float>({2, 32, 32, 3}, 4);
  EXPECT_TRUE(bitwise_equal(model_forward(model, image), model_forward(back, image)));
  fs::remove(path);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto model = init_model<double>(preset("tiny"), 5);
  const auto a = temp_file("a"), b = temp_file("b");
  save_checkpoint(a.string(), to_checkpoint(model));
  save_checkpoint(b.string(), load_checkpoint(a.string()));
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, SpecialValuesSurvive) {
  Checkpoint ck;
  ck.add("f", Tensor<float>::vector({-0.0f, std::numeric_limits<float>::infinity(), 1e-45f, 3.5f}));
  ck.add("d", Tensor<double>::matrix({{std::numeric_limits<double>::quiet_NaN(), -1e308}}));
  const auto back = parse_checkpoint(serialize(ck));
  EXPECT_TRUE(bitwise_equal(std::get<Tensor<float>>(back.entries[0].tensor), std::get<Tensor<float>>(ck.entries[0].tensor)));
  EXPECT_TRUE(bitwise_equal(std::get<Tensor<double>>(back.entries[1].tensor), std::get<Tensor<double>>(ck.entries[1].tensor)));
  EXPECT_EQ(back.entries[1].name, "d");
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.add("x", Tensor<float>::vector({1.0f}));
  const auto bytes = serialize(ck);
  EXPECT_EQ(bytes.substr(0, 8), "CVIGCKPT");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 12, 8);
  EXPECT_EQ(bytes.size(), 20 + len + 4);
  const auto manifest = nlohmann::json::parse(bytes.substr(20, len));
  EXPECT_EQ(manifest[0]["name"], "x");
  EXPECT_EQ(manifest[0]["dtype"], "f32");
  EXPECT_EQ(manifest[0]["offset"], 0);
}

TEST(Checkpoint, TruncatedPayloadRejected) {
  const auto bytes = serialize(to_checkpoint(init_model<float>(preset("tiny"), 1)));
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), TruncatedPayloadError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10)), TruncatedPayloadError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 40)), TruncatedPayloadError);
}

TEST(Checkpoint, EditedManifestShapeRejected) {
  const auto cfg = preset("tiny");
  const auto bytes = serialize(to_checkpoint(init_model<float>(cfg, 1)));
  const auto edited = rewrite_manifest(bytes, [](nlohmann::json& m) {
    for (auto& e : m)
      if (e["name"] == "head.fc.weight") e["shape"] = {3, 16};
  });
  const auto ck = parse_checkpoint(edited);
  try {
    model_from_checkpoint<float>(ck, cfg);
    FAIL() << "expected a shape mismatch";
  } catch (const ShapeMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("head.fc.weight"), std::string::npos);
  }
  auto other = cfg;
  other.c_iso = 8;
  other.stem = stem_for(8, other.stem.k_h);
  EXPECT_THROW(model_from_checkpoint<float>(parse_checkpoint(bytes), other), ShapeMismatchError);
  Checkpoint partial = parse_checkpoint(bytes);
  partial.entries.pop_back();
  EXPECT_THROW(model_from_checkpoint<float>(partial, cfg), ShapeMismatchError);
}

TEST(Checkpoint, CorruptManifestRejected) {
  const auto bytes = serialize(to_checkpoint(init_model<float>(preset("tiny"), 1)));
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 12, 8);
  auto broken = bytes;
  broken[20] = '{';
  broken[21] = '}';
  broken[22] = ']';
  EXPECT_THROW(parse_checkpoint(broken), CorruptManifestError);
  EXPECT_THROW(parse_checkpoint(rewrite_manifest(bytes, [](nlohmann::json& m) { m[1]["offset"] = 4; })),
               CorruptManifestError);
  EXPECT_THROW(parse_checkpoint(rewrite_manifest(bytes, [](nlohmann::json& m) { m[0]["dtype"] = "f16"; })),
               CorruptManifestError);
  EXPECT_THROW(parse_checkpoint(rewrite_manifest(bytes, [](nlohmann::json& m) { m[0].erase("shape"); })),
               CorruptManifestError);
  EXPECT_THROW(parse_checkpoint(bytes + "xx"), CorruptManifestError);
}

TEST(Checkpoint, ErrorsAreDistinct) {
  auto bytes = serialize(to_checkpoint(init_model<float>(preset("tiny"), 1)));
  bytes[0] = 'X';
  try {
    parse_checkpoint(bytes);
    FAIL();
  } catch (const CorruptManifestError&) {
    FAIL() << "bad magic reported as manifest corruption";
  } catch (const TruncatedPayloadError&) {
    FAIL() << "bad magic reported as truncation";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), CheckpointError);
}

TEST(Checkpoint, DtypeConversionOnLoad) {
  const auto cfg = preset("tiny");
  const auto model = init_model<double>(cfg, 2);
  const auto as_float = model_from_checkpoint<float>(parse_checkpoint(serialize(to_checkpoint(model))), cfg);
  for (std::size_t i = 0; i < model.params.size(); ++i)
    EXPECT_TRUE(bitwise_equal(as_float.params.entries()[i].var->value, model.params.entries()[i].var->value.cast<float>()));
  EXPECT_EQ(as_float.params.trainable_count(), parameter_count(cfg));
}
