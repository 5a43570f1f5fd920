#include <cstring>
#include <filesystem>
#include <fstream>

#include "covmerge/rng.hpp"
#include "covmerge/tensor_store.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace covmerge;
namespace fs = std::filesystem;

namespace {

std::vector<std::byte> make_file(const nlohmann::json& header, const std::vector<std::byte>& data) {
  const std::string text = header.dump();
  std::vector<std::byte> bytes;
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::byte>((n >> (8 * i)) & 0xff));
  for (char c : text) bytes.push_back(static_cast<std::byte>(c));
  bytes.insert(bytes.end(), data.begin(), data.end());
  return bytes;
}

// Values are multiples of 2^-10, exact in both storage dtypes, so sums and
// differences of them stay exact and the bit-level checks are meaningful.
double grid_value(Rng& rng) { return std::round(rng.uniform(-1.0, 1.0) * 1024.0) / 1024.0; }

Checkpoint random_checkpoint(Rng& rng, int index) {
  Checkpoint c;
  c.name = "ckpt-" + std::to_string(index);
  const auto n_tensors = 1 + rng.integer(4);
  for (std::uint64_t t = 0; t < n_tensors; ++t) {
    std::vector<std::size_t> shape;
    for (std::uint64_t d = 0, nd = rng.integer(4); d < nd; ++d) shape.push_back(rng.integer(6));
    Tensor tensor = Tensor::zeros(shape, rng.integer(2) == 0 ? Dtype::f32 : Dtype::f64);
    std::vector<double> values(tensor.element_count());
    for (double& v : values) v = grid_value(rng);
    tensor.assign_f64(values);
    c.tensors.emplace("t" + std::to_string(t), std::move(tensor));
  }
  return c;
}

}  // namespace

TEST_CASE("zero tensor loads back as zeros") {
  Checkpoint c;
  c.tensors.emplace("w", Tensor::zeros({2, 2}, Dtype::f32));
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  const auto values = back.tensors.at("w").to_f64();
  REQUIRE(values.size() == 4);
  for (double v : values) CHECK(v == 0.0);
}

TEST_CASE("round-trip is bit-exact over random checkpoints") {
  Rng rng(42);
  for (int i = 0; i < 100; ++i) {
    const Checkpoint c = random_checkpoint(rng, i);
    CHECK(parse_checkpoint(serialize_checkpoint(c)) == c);
  }
}

TEST_CASE("file round-trip through disk") {
  Rng rng(7);
  const fs::path path = fs::temp_directory_path() / "covmerge_roundtrip.ckpt.st";
  for (int i = 0; i < 5; ++i) {
    const Checkpoint c = random_checkpoint(rng, i);
    save_checkpoint(c, path);
    CHECK(load_checkpoint(path) == c);
  }
  fs::remove(path);
}

TEST_CASE("saving twice produces identical bytes") {
  Rng rng(3);
  const Checkpoint c = random_checkpoint(rng, 0);
  CHECK(serialize_checkpoint(c) == serialize_checkpoint(c));
}

TEST_CASE("empty checkpoint serializes to an empty header map") {
  const Checkpoint c;
  const auto bytes = serialize_checkpoint(c);
  REQUIRE(bytes.size() == 10);
  const std::string header(reinterpret_cast<const char*>(bytes.data()) + 8, 2);
  CHECK(header == "{}");
  CHECK(parse_checkpoint(bytes) == c);
}

TEST_CASE("header length beyond file size is a truncated header") {
  std::vector<std::byte> bytes(8, std::byte{0});
  bytes[0] = std::byte{200};  // declares 200 header bytes, none present
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("truncated header"),
                       FormatError);
}

TEST_CASE("files shorter than the length field are rejected") {
  CHECK_THROWS_WITH_AS(parse_checkpoint(std::vector<std::byte>(3, std::byte{0})),
                       doctest::Contains("truncated header"), FormatError);
}

TEST_CASE("malformed JSON reports the byte position") {
  std::vector<std::byte> bytes;
  const std::string text = "{not json";
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::byte>((n >> (8 * i)) & 0xff));
  for (char c : text) bytes.push_back(static_cast<std::byte>(c));
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("malformed header at byte"),
                       FormatError);
}

TEST_CASE("unknown dtype is rejected by name") {
  nlohmann::json header = {
      {"w", {{"dtype", "F16"}, {"shape", {2}}, {"data_offsets", {0, 4}}}}};
  const auto bytes = make_file(header, std::vector<std::byte>(4, std::byte{0}));
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("unknown dtype \"F16\""),
                       FormatError);
}

TEST_CASE("overlapping offsets are rejected") {
  nlohmann::json header = {
      {"a", {{"dtype", "F32"}, {"shape", {2}}, {"data_offsets", {0, 8}}}},
      {"b", {{"dtype", "F32"}, {"shape", {2}}, {"data_offsets", {4, 12}}}}};
  const auto bytes = make_file(header, std::vector<std::byte>(12, std::byte{0}));
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("overlapping offsets"),
                       FormatError);
}

TEST_CASE("offsets past the data section are truncated data") {
  nlohmann::json header = {
      {"a", {{"dtype", "F64"}, {"shape", {4}}, {"data_offsets", {0, 32}}}}};
  const auto bytes = make_file(header, std::vector<std::byte>(16, std::byte{0}));
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("truncated data"), FormatError);
}

TEST_CASE("offsets inconsistent with the shape are rejected") {
  nlohmann::json header = {
      {"a", {{"dtype", "F32"}, {"shape", {3}}, {"data_offsets", {0, 8}}}}};
  const auto bytes = make_file(header, std::vector<std::byte>(8, std::byte{0}));
  CHECK_THROWS_WITH_AS(parse_checkpoint(bytes), doctest::Contains("length mismatch"), FormatError);
}

TEST_CASE("bytes in gaps between tensors are never read") {
  nlohmann::json header = {
      {"a", {{"dtype", "F32"}, {"shape", {1}}, {"data_offsets", {0, 4}}}},
      {"b", {{"dtype", "F32"}, {"shape", {1}}, {"data_offsets", {8, 12}}}}};
  std::vector<std::byte> data(12, std::byte{0});
  data[4] = std::byte{0xde};  // garbage inside the gap
  data[5] = std::byte{0xad};
  const Checkpoint c = parse_checkpoint(make_file(header, data));
  CHECK(c.tensors.at("a").to_f64()[0] == 0.0);
  CHECK(c.tensors.at("b").to_f64()[0] == 0.0);
}

TEST_CASE("task vector of identical checkpoints is zero") {
  Rng rng(11);
  const Checkpoint c = random_checkpoint(rng, 0);
  const TaskVector tv = compute_task_vector(c, c, "t");
  for (const auto& [name, delta] : tv.deltas) {
    for (double v : delta.to_f64()) CHECK(v == 0.0);
  }
}

TEST_CASE("task vector from a zero pretrained equals the fine-tuned weights") {
  Rng rng(12);
  Checkpoint fine = random_checkpoint(rng, 0);
  Checkpoint zero = fine;
  for (auto& [name, t] : zero.tensors) {
    t = Tensor::zeros(t.shape, t.dtype);
  }
  const TaskVector tv = compute_task_vector(zero, fine, "t");
  for (const auto& [name, delta] : tv.deltas) {
    CHECK(delta.to_f64() == fine.tensors.at(name).to_f64());
  }
}

TEST_CASE("adding the deltas back reconstructs the fine-tuned checkpoint exactly") {
  Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    const Checkpoint pre = random_checkpoint(rng, i);
    Checkpoint fine = pre;
    fine.name = "fine";
    for (auto& [name, t] : fine.tensors) {
      std::vector<double> values(t.element_count());
      for (double& v : values) v = grid_value(rng);
      t.assign_f64(values);
    }
    const TaskVector tv = compute_task_vector(pre, fine, "t");
    for (const auto& [name, delta] : tv.deltas) {
      const auto p = pre.tensors.at(name).to_f64();
      const auto d = delta.to_f64();
      const auto f = fine.tensors.at(name).to_f64();
      for (std::size_t j = 0; j < p.size(); ++j) CHECK(p[j] + d[j] == f[j]);
    }
  }
}

TEST_CASE("architecture mismatches list the offending tensors") {
  Checkpoint a, b;
  a.tensors.emplace("shared", Tensor::zeros({2}, Dtype::f64));
  a.tensors.emplace("only_a", Tensor::zeros({2}, Dtype::f64));
  b.tensors.emplace("shared", Tensor::zeros({3}, Dtype::f64));
  CHECK_THROWS_WITH_AS(compute_task_vector(a, b, "t"), doctest::Contains("only_a"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(compute_task_vector(a, b, "t"), doctest::Contains("shared"),
                       std::invalid_argument);
}

TEST_CASE("metadata and name round-trip through the container") {
  Checkpoint c;
  c.name = "named";
  c.metadata["source"] = "unit-test";
  c.tensors.emplace("w", Tensor::from_values({2}, {1.5, -2.5}));
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(c));
  CHECK(back.name == "named");
  CHECK(back.metadata.at("source") == "unit-test");
  CHECK(back == c);
}

TEST_CASE("float32 storage rounds to nearest on write-back") {
  Tensor t = Tensor::zeros({1}, Dtype::f32);
  t.assign_f64({0.1});
  CHECK(t.to_f64()[0] == doctest::Approx(0.1).epsilon(1e-7));
  CHECK(t.to_f64()[0] == static_cast<double>(0.1f));
}
