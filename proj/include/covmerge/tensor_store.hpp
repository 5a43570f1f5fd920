#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "covmerge/errors.hpp"
#include "covmerge/linalg.hpp"

namespace covmerge {

enum class Dtype : std::uint8_t { f32, f64 };

std::size_t dtype_width(Dtype d);
std::string dtype_string(Dtype d);  // "F32" / "F64"

// Dense row-major tensor. The raw byte buffer is canonical so that files
// round-trip bit-exactly; numeric work converts to float64 and writes back
// in the stored dtype with round-to-nearest.
struct Tensor {
  std::vector<std::size_t> shape;
  Dtype dtype = Dtype::f64;
  std::vector<std::byte> data;

  static Tensor zeros(std::vector<std::size_t> shape, Dtype dtype = Dtype::f64);
  static Tensor from_values(std::vector<std::size_t> shape, const std::vector<double>& values,
                            Dtype dtype = Dtype::f64);
  static Tensor from_matrix(const Matrix& m, Dtype dtype = Dtype::f64);

  std::size_t element_count() const;
  bool is_2d() const { return shape.size() == 2; }

  std::vector<double> to_f64() const;
  void assign_f64(const std::vector<double>& values);
  Matrix to_matrix() const;  // requires is_2d()

  bool operator==(const Tensor& other) const = default;
};

struct Checkpoint {
  std::string name;
  std::map<std::string, std::string> metadata;  // extra header metadata
  std::map<std::string, Tensor> tensors;        // name-ordered

  bool operator==(const Checkpoint& other) const = default;
};

struct TaskVector {
  std::string task_id;
  std::map<std::string, Tensor> deltas;
};

// Container layout: 8-byte little-endian header length N, then N bytes of a
// JSON object mapping tensor name -> {"dtype", "shape", "data_offsets"},
// then the raw row-major data. Checkpoint name and metadata live under the
// reserved "__metadata__" key. Canonical extension: .ckpt.st
Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Same container, parsed from / serialized to an in-memory buffer.
Checkpoint parse_checkpoint(const std::vector<std::byte>& bytes);
std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt);

// Returns an empty list when the checkpoints are architecture-compatible
// (identical name sets, shapes and element types), otherwise one message per
// offending tensor.
std::vector<std::string> architecture_mismatches(const Checkpoint& a, const Checkpoint& b);

// deltas[k] = fine_tuned[k] - pretrained[k], computed in float64 and stored
// in the input dtype. Throws std::invalid_argument listing offending tensor
// names when the checkpoints are not architecture-compatible.
TaskVector compute_task_vector(const Checkpoint& pretrained, const Checkpoint& fine_tuned,
                               const std::string& task_id);

}  // namespace covmerge
