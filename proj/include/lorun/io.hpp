#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "lorun/tensor.hpp"

namespace lorun {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

/// A tensor as stored on disk. Values are held in double, which represents
/// every f32 exactly, so either dtype round-trips bit for bit.
struct StoredTensor {
  DType dtype = DType::F64;
  TensorD values;

  template <typename Scalar>
  static StoredTensor from(const Tensor<Scalar>& t) {
    return {std::is_same_v<Scalar, float> ? DType::F32 : DType::F64, t.template cast<double>()};
  }

  template <typename Scalar>
  Tensor<Scalar> as() const {
    return values.template cast<Scalar>();
  }

  friend bool operator==(const StoredTensor& a, const StoredTensor& b) {
    return a.dtype == b.dtype && a.values == b.values;
  }
};

/// Sequential little-endian reader over an in-memory buffer. Failures report
/// the byte offset at which they occurred.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::size_t base = 0) : data_(data), base_(base) {}

  std::size_t offset() const { return base_ + pos_; }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::string_view bytes(std::size_t n, const char* what);
  std::uint8_t u8(const char* what);
  std::uint32_t u32(const char* what);
  std::uint64_t u64(const char* what);
  float f32(const char* what);
  double f64(const char* what);

 private:
  std::string_view data_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

void put_u8(std::string& out, std::uint8_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);

// TensorFile: "LRTN", version u8 (1), dtype u8, ndim u8, u32 dims, LE payload.
std::string encode_tensor(const StoredTensor& t);
StoredTensor read_tensor(ByteReader& in);
StoredTensor decode_tensor(std::string_view bytes);
void save_tensor(const std::string& path, const StoredTensor& t);
StoredTensor load_tensor(const std::string& path);

enum class Phase : std::uint8_t { Pretrain = 0, Finetune = 1, Baseline = 2, Merged = 3 };
const char* to_string(Phase p);

inline constexpr std::uint32_t kCheckpointSchema = 1;

/// Named tensors plus a header: schema version, denoiser digest, phase and
/// the run configuration that produced them.
struct Checkpoint {
  std::uint32_t schema = kCheckpointSchema;
  std::uint64_t digest = 0;
  Phase phase = Phase::Pretrain;
  std::string config;
  std::map<std::string, StoredTensor> entries;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.schema == b.schema && a.digest == b.digest && a.phase == b.phase && a.config == b.config &&
           a.entries == b.entries;
  }
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

std::string read_file(const std::string& path);
/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::string& path, std::string_view bytes);

/// Binary (P5) or ASCII (P2) graymap, normalized to [0, 1] as a 1 x H x W tensor.
TensorF decode_pgm(std::string_view bytes);
TensorF read_pgm(const std::string& path);
/// Writes an H x W or 1 x H x W image (clamped to [0, 1]) as 8-bit P5.
std::string encode_pgm(const TensorF& image);
void write_pgm(const std::string& path, const TensorF& image);

/// Shortest text that reads back to the same float ("%.9g"; inf/nan spelled out).
std::string format_number(double v);
std::string csv_row(const std::vector<std::string>& cells);
/// Rows of a CSV file split on commas (no quoting).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

/// Raw values as CSV plus an 8-bit PGM rendering (min -> 0, max -> 255). The
/// tensor is viewed as shape[0] x (size / shape[0]).
void export_heatmap(const TensorD& values, const std::string& csv_path, const std::string& pgm_path);
TensorD heatmap_matrix(const TensorD& values);
std::vector<std::uint8_t> heatmap_levels(const TensorD& matrix);

}  // namespace lorun
