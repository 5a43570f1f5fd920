#include "covmerge/tensor_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace covmerge {

using json = nlohmann::json;

std::size_t dtype_width(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

std::string dtype_string(Dtype d) { return d == Dtype::f32 ? "F32" : "F64"; }

namespace {

constexpr const char* kMetadataKey = "__metadata__";

std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
  std::size_t count = 1;
  for (std::size_t extent : shape) {
    if (extent != 0 && count > std::numeric_limits<std::size_t>::max() / extent) {
      throw FormatError("tensor shape overflows element count");
    }
    count *= extent;
  }
  return count;
}

std::size_t checked_byte_count(const std::vector<std::size_t>& shape, Dtype dtype) {
  const std::size_t count = checked_element_count(shape);
  const std::size_t width = dtype_width(dtype);
  if (count > std::numeric_limits<std::size_t>::max() / width) {
    throw FormatError("tensor shape overflows byte count");
  }
  return count * width;
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, Dtype dtype) {
  Tensor t;
  t.shape = std::move(shape);
  t.dtype = dtype;
  t.data.assign(checked_element_count(t.shape) * dtype_width(dtype), std::byte{0});
  return t;
}

Tensor Tensor::from_values(std::vector<std::size_t> shape, const std::vector<double>& values,
                           Dtype dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  t.assign_f64(values);
  return t;
}

Tensor Tensor::from_matrix(const Matrix& m, Dtype dtype) {
  Tensor t = zeros({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, dtype);
  std::vector<double> v(m.data(), m.data() + m.size());
  t.assign_f64(v);
  return t;
}

std::size_t Tensor::element_count() const { return checked_element_count(shape); }

std::vector<double> Tensor::to_f64() const {
  const std::size_t count = element_count();
  std::vector<double> out(count);
  if (dtype == Dtype::f64) {
    std::memcpy(out.data(), data.data(), count * sizeof(double));
  } else {
    std::vector<float> tmp(count);
    std::memcpy(tmp.data(), data.data(), count * sizeof(float));
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(tmp[i]);
  }
  return out;
}

void Tensor::assign_f64(const std::vector<double>& values) {
  const std::size_t count = element_count();
  if (values.size() != count) {
    throw std::invalid_argument("tensor assign: value count does not match shape");
  }
  data.resize(count * dtype_width(dtype));
  if (dtype == Dtype::f64) {
    std::memcpy(data.data(), values.data(), count * sizeof(double));
  } else {
    std::vector<float> tmp(count);
    for (std::size_t i = 0; i < count; ++i) tmp[i] = static_cast<float>(values[i]);
    std::memcpy(data.data(), tmp.data(), count * sizeof(float));
  }
}

Matrix Tensor::to_matrix() const {
  if (!is_2d()) throw std::invalid_argument("tensor is not 2D");
  const auto values = to_f64();
  Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt) {
  json header = json::object();
  if (!ckpt.name.empty() || !ckpt.metadata.empty()) {
    json meta = json::object();
    if (!ckpt.name.empty()) meta["name"] = ckpt.name;
    for (const auto& [k, v] : ckpt.metadata) meta[k] = v;
    header[kMetadataKey] = meta;
  }
  std::size_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name == kMetadataKey) {
      throw std::invalid_argument("tensor name '__metadata__' is reserved");
    }
    const std::size_t expected = tensor.element_count() * dtype_width(tensor.dtype);
    if (tensor.data.size() != expected) {
      throw std::invalid_argument("tensor '" + name + "' buffer length does not match shape");
    }
    header[name] = {{"dtype", dtype_string(tensor.dtype)},
                    {"shape", tensor.shape},
                    {"data_offsets", {offset, offset + tensor.data.size()}}};
    offset += tensor.data.size();
  }
  const std::string text = header.dump();

  std::vector<std::byte> out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<std::byte>((n >> (8 * i)) & 0xff));
  }
  const auto* htext = reinterpret_cast<const std::byte*>(text.data());
  out.insert(out.end(), htext, htext + text.size());
  for (const auto& [name, tensor] : ckpt.tensors) {
    out.insert(out.end(), tensor.data.begin(), tensor.data.end());
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::byte>& bytes) {
  if (bytes.size() < 8) {
    throw FormatError("truncated header: file has " + std::to_string(bytes.size()) +
                      " bytes, need an 8-byte header length at byte 0");
  }
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) {
    header_len |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[i])) << (8 * i);
  }
  if (header_len > bytes.size() - 8) {
    throw FormatError("truncated header: declared length " + std::to_string(header_len) +
                      " at byte 0 exceeds the " + std::to_string(bytes.size() - 8) +
                      " bytes after the length field");
  }

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed header at byte " + std::to_string(8 + e.byte) + ": " + e.what());
  }
  if (!header.is_object()) {
    throw FormatError("malformed header at byte 8: top-level value is not an object");
  }

  const std::size_t data_begin = 8 + header_len;
  const std::size_t data_size = bytes.size() - data_begin;

  Checkpoint ckpt;
  struct Span {
    std::size_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;

  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) {
        throw FormatError("malformed header at byte 8: __metadata__ is not an object");
      }
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) {
          throw FormatError("malformed header at byte 8: __metadata__ values must be strings");
        }
        if (mk == "name") {
          ckpt.name = mv.get<std::string>();
        } else {
          ckpt.metadata[mk] = mv.get<std::string>();
        }
      }
      continue;
    }
    if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
        !value.contains("data_offsets")) {
      throw FormatError("malformed header at byte 8: tensor \"" + key +
                        "\" is missing dtype, shape or data_offsets");
    }

    Tensor t;
    const std::string dt = value["dtype"].is_string() ? value["dtype"].get<std::string>() : "";
    if (dt == "F32") {
      t.dtype = Dtype::f32;
    } else if (dt == "F64") {
      t.dtype = Dtype::f64;
    } else {
      throw FormatError("unknown dtype \"" + dt + "\" for tensor \"" + key +
                        "\" (header begins at byte 8)");
    }

    if (!value["shape"].is_array()) {
      throw FormatError("malformed header at byte 8: shape of tensor \"" + key +
                        "\" is not an array");
    }
    for (const auto& extent : value["shape"]) {
      if (!extent.is_number_unsigned()) {
        throw FormatError("malformed header at byte 8: shape of tensor \"" + key +
                          "\" has a non-unsigned extent");
      }
      t.shape.push_back(extent.get<std::size_t>());
    }

    const auto& offs = value["data_offsets"];
    if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
        !offs[1].is_number_unsigned()) {
      throw FormatError("malformed header at byte 8: data_offsets of tensor \"" + key +
                        "\" must be two unsigned integers");
    }
    const std::size_t begin = offs[0].get<std::size_t>();
    const std::size_t end = offs[1].get<std::size_t>();
    if (begin > end || end > data_size) {
      throw FormatError("truncated data for tensor \"" + key + "\": data_offsets [" +
                        std::to_string(begin) + ", " + std::to_string(end) +
                        ") exceed the " + std::to_string(data_size) +
                        "-byte data section beginning at byte " + std::to_string(data_begin));
    }
    const std::size_t expected = checked_byte_count(t.shape, t.dtype);
    if (end - begin != expected) {
      throw FormatError("length mismatch for tensor \"" + key + "\": shape implies " +
                        std::to_string(expected) + " bytes but data_offsets span " +
                        std::to_string(end - begin) + " (data begins at byte " +
                        std::to_string(data_begin + begin) + ")");
    }
    t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_begin + begin),
                  bytes.begin() + static_cast<std::ptrdiff_t>(data_begin + end));
    spans.push_back({begin, end, key});
    ckpt.tensors.emplace(key, std::move(t));
  }

  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].end > spans[i].begin) {
      throw FormatError("overlapping offsets: tensor \"" + spans[i - 1].name + "\" [" +
                        std::to_string(spans[i - 1].begin) + ", " + std::to_string(spans[i - 1].end) +
                        ") overlaps tensor \"" + spans[i].name + "\" [" +
                        std::to_string(spans[i].begin) + ", " + std::to_string(spans[i].end) +
                        ") (data begins at byte " + std::to_string(data_begin) + ")");
    }
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint file: " + path.string());
  std::vector<std::byte> bytes;
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  bytes.resize(static_cast<std::size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw FormatError("read failure on checkpoint file: " + path.string());
  return parse_checkpoint(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open output file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw std::runtime_error("write failure on output file: " + path.string());
}

std::vector<std::string> architecture_mismatches(const Checkpoint& a, const Checkpoint& b) {
  std::vector<std::string> issues;
  for (const auto& [name, ta] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) {
      issues.push_back("tensor \"" + name + "\" missing from \"" + b.name + "\"");
      continue;
    }
    if (ta.shape != it->second.shape) {
      issues.push_back("shape mismatch for tensor \"" + name + "\"");
    } else if (ta.dtype != it->second.dtype) {
      issues.push_back("dtype mismatch for tensor \"" + name + "\"");
    }
  }
  for (const auto& [name, tb] : b.tensors) {
    if (!a.tensors.contains(name)) {
      issues.push_back("tensor \"" + name + "\" missing from \"" + a.name + "\"");
    }
  }
  return issues;
}

TaskVector compute_task_vector(const Checkpoint& pretrained, const Checkpoint& fine_tuned,
                               const std::string& task_id) {
  const auto issues = architecture_mismatches(pretrained, fine_tuned);
  if (!issues.empty()) {
    std::ostringstream oss;
    oss << "checkpoints are not architecture-compatible:";
    for (const auto& m : issues) oss << " " << m << ";";
    throw std::invalid_argument(oss.str());
  }
  TaskVector tv;
  tv.task_id = task_id;
  for (const auto& [name, pre] : pretrained.tensors) {
    const Tensor& fin = fine_tuned.tensors.at(name);
    const auto a = pre.to_f64();
    const auto b = fin.to_f64();
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = b[i] - a[i];
    tv.deltas.emplace(name, Tensor::from_values(pre.shape, d, pre.dtype));
  }
  return tv;
}

}  // namespace covmerge
