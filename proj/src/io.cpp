#include "lorun/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "lorun/errors.hpp"

namespace lorun {

namespace {

constexpr char kTensorMagic[] = "LRTN";
constexpr char kCheckpointMagic[] = "LRCK";
constexpr std::uint8_t kTensorVersion = 1;

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

}  // namespace

std::string_view ByteReader::bytes(std::size_t n, const char* what) {
  if (remaining() < n)
    throw ParseError(std::string("truncated input reading ") + what + ": need " + std::to_string(n) + " bytes, have " +
                         std::to_string(remaining()),
                     offset());
  std::string_view out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint8_t ByteReader::u8(const char* what) { return static_cast<std::uint8_t>(bytes(1, what)[0]); }

std::uint32_t ByteReader::u32(const char* what) {
  std::uint32_t v;
  std::memcpy(&v, bytes(4, what).data(), 4);
  return v;
}

std::uint64_t ByteReader::u64(const char* what) {
  std::uint64_t v;
  std::memcpy(&v, bytes(8, what).data(), 8);
  return v;
}

float ByteReader::f32(const char* what) {
  float v;
  std::memcpy(&v, bytes(4, what).data(), 4);
  return v;
}

double ByteReader::f64(const char* what) {
  double v;
  std::memcpy(&v, bytes(8, what).data(), 8);
  return v;
}

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::string encode_tensor(const StoredTensor& t) {
  const Shape& shape = t.values.shape();
  if (shape.size() > 255) throw ContractError("tensor file: too many dimensions");
  std::string out(kTensorMagic, 4);
  put_u8(out, kTensorVersion);
  put_u8(out, static_cast<std::uint8_t>(t.dtype));
  put_u8(out, static_cast<std::uint8_t>(shape.size()));
  for (Index d : shape) {
    if (d < 0 || d > static_cast<Index>(UINT32_MAX)) throw ContractError("tensor file: dimension out of range");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  const Index n = t.values.size();
  if (t.dtype == DType::F32) {
    out.reserve(out.size() + static_cast<std::size_t>(n) * 4);
    for (Index i = 0; i < n; ++i) {
      const auto f = static_cast<float>(t.values[i]);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  } else {
    out.append(reinterpret_cast<const char*>(t.values.data()), static_cast<std::size_t>(n) * 8);
  }
  return out;
}

StoredTensor read_tensor(ByteReader& in) {
  const std::size_t start = in.offset();
  if (in.bytes(4, "tensor magic") != std::string_view(kTensorMagic, 4)) throw ParseError("not a tensor file (bad magic)", start);
  const std::size_t vpos = in.offset();
  if (const auto v = in.u8("tensor version"); v != kTensorVersion)
    throw ParseError("unsupported tensor file version " + std::to_string(v), vpos);
  const std::size_t dpos = in.offset();
  const auto dtype = in.u8("tensor dtype");
  if (dtype > 1) throw ParseError("unknown tensor dtype " + std::to_string(dtype), dpos);
  const auto ndim = in.u8("tensor rank");
  Shape shape;
  for (int i = 0; i < ndim; ++i) shape.push_back(static_cast<Index>(in.u32("tensor dimension")));
  const std::size_t width = dtype == 0 ? 4 : 8;
  const std::size_t ppos = in.offset();
  const auto count = static_cast<std::size_t>(shape_size(shape));
  if (in.remaining() / width < count)
    throw ParseError("tensor payload shorter than " + shape_str(shape) + " requires", ppos);
  StoredTensor t{static_cast<DType>(dtype), TensorD(shape)};
  const std::string_view payload = in.bytes(count * width, "tensor payload");
  if (dtype == 0) {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + 4 * i, 4);
      t.values[static_cast<Index>(i)] = f;
    }
  } else {
    std::memcpy(t.values.data(), payload.data(), count * 8);
  }
  return t;
}

StoredTensor decode_tensor(std::string_view bytes) {
  ByteReader in(bytes);
  StoredTensor t = read_tensor(in);
  if (!in.at_end()) throw ParseError("trailing bytes after tensor payload", in.offset());
  return t;
}

void save_tensor(const std::string& path, const StoredTensor& t) { write_file_atomic(path, encode_tensor(t)); }

StoredTensor load_tensor(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_tensor(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

const char* to_string(Phase p) {
  switch (p) {
    case Phase::Pretrain: return "pretrain";
    case Phase::Finetune: return "finetune";
    case Phase::Baseline: return "baseline";
    case Phase::Merged: return "merged";
  }
  return "?";
}

// LRCK | schema u32 | digest u64 | phase u8 | config (u32 len + bytes) | count u32 |
// count x (name u32 len + bytes, TensorFile)
std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, c.schema);
  put_u64(out, c.digest);
  put_u8(out, static_cast<std::uint8_t>(c.phase));
  put_u32(out, static_cast<std::uint32_t>(c.config.size()));
  out += c.config;
  put_u32(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& [name, t] : c.entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out += encode_tensor(t);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader in(bytes);
  if (in.bytes(4, "checkpoint magic") != std::string_view(kCheckpointMagic, 4)) throw ParseError("not a checkpoint (bad magic)", 0);
  Checkpoint c;
  const std::size_t spos = in.offset();
  c.schema = in.u32("schema version");
  if (c.schema != kCheckpointSchema)
    throw ParseError("unsupported checkpoint schema " + std::to_string(c.schema), spos);
  c.digest = in.u64("config digest");
  const std::size_t ppos = in.offset();
  const auto phase = in.u8("phase");
  if (phase > 3) throw ParseError("unknown checkpoint phase " + std::to_string(phase), ppos);
  c.phase = static_cast<Phase>(phase);
  c.config = std::string(in.bytes(in.u32("config length"), "config text"));
  const auto count = in.u32("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t npos = in.offset();
    std::string name(in.bytes(in.u32("entry name length"), "entry name"));
    if (name.empty()) throw ParseError("empty tensor name", npos);
    StoredTensor t = read_tensor(in);
    if (!c.entries.emplace(std::move(name), std::move(t)).second) throw ParseError("duplicate tensor name", npos);
  }
  if (!in.at_end()) throw ParseError("trailing bytes after last checkpoint entry", in.offset());
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) { write_file_atomic(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("error reading " + path);
  return ss.str();
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path() && !fs::exists(target.parent_path()))
    throw IoError("output directory does not exist: " + target.parent_path().string());
  const fs::path tmp = target.string() + ".tmp" + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("error writing " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place at " + path);
  }
}

namespace {

struct PgmScanner {
  std::string_view s;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < s.size()) {
      if (s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  long integer(const char* what) {
    skip_space();
    const std::size_t start = pos;
    long v = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      v = v * 10 + (s[pos] - '0');
      if (v > 1L << 30) throw ParseError(std::string("pgm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("pgm: expected ") + what, start);
    return v;
  }
};

}  // namespace

TensorF decode_pgm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '2'))
    throw ParseError("pgm: expected P5 or P2 magic", 0);
  const bool binary = bytes[1] == '5';
  PgmScanner sc{bytes, 2};
  const long width = sc.integer("width");
  const long height = sc.integer("height");
  const std::size_t mpos = sc.pos;
  const long maxval = sc.integer("maxval");
  if (width < 1 || height < 1) throw ParseError("pgm: empty image", mpos);
  if (maxval < 1 || maxval > 65535) throw ParseError("pgm: maxval must be in 1..65535", mpos);
  TensorF img({1, height, width});
  const auto n = static_cast<std::size_t>(width * height);
  const float scale = 1.0f / static_cast<float>(maxval);
  if (binary) {
    if (sc.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[sc.pos])))
      throw ParseError("pgm: expected whitespace before raster", sc.pos);
    ++sc.pos;
    const std::size_t bpp = maxval < 256 ? 1 : 2;
    if (bytes.size() - sc.pos < n * bpp)
      throw ParseError("pgm: raster truncated (need " + std::to_string(n * bpp) + " bytes)", bytes.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t at = sc.pos + i * bpp;
      long v = static_cast<unsigned char>(bytes[at]);
      if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(bytes[at + 1]);
      if (v > maxval) throw ParseError("pgm: sample exceeds maxval", at);
      img[static_cast<Index>(i)] = static_cast<float>(v) * scale;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t at = sc.pos;
      const long v = sc.integer("sample");
      if (v > maxval) throw ParseError("pgm: sample exceeds maxval", at);
      img[static_cast<Index>(i)] = static_cast<float>(v) * scale;
    }
  }
  return img;
}

TensorF read_pgm(const std::string& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_pgm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

std::string encode_pgm(const TensorF& image) {
  if (!(image.ndim() == 2 || (image.ndim() == 3 && image.dim(0) == 1)))
    throw DimensionError("pgm: expected H x W or 1 x H x W, got " + shape_str(image.shape()));
  const Index h = image.dim(image.ndim() - 2), w = image.dim(image.ndim() - 1);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (Index i = 0; i < image.size(); ++i) {
    const float v = std::clamp(image[i], 0.0f, 1.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
  }
  return out;
}

void write_pgm(const std::string& path, const TensorF& image) { write_file_atomic(path, encode_pgm(image)); }

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string csv_row(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  out += '\n';
  return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string> cells;
    std::size_t c = 0;
    while (true) {
      const std::size_t comma = line.find(',', c);
      cells.emplace_back(line.substr(c, comma == std::string_view::npos ? std::string_view::npos : comma - c));
      if (comma == std::string_view::npos) break;
      c = comma + 1;
    }
    rows.push_back(std::move(cells));
    pos = eol + 1;
  }
  return rows;
}

TensorD heatmap_matrix(const TensorD& values) {
  if (values.empty()) throw ContractError("heatmap: empty tensor");
  const Index rows = values.ndim() >= 2 ? values.dim(0) : 1;
  return values.reshaped({rows, values.size() / rows});
}

std::vector<std::uint8_t> heatmap_levels(const TensorD& matrix) {
  const double lo = matrix.vec().minCoeff(), hi = matrix.vec().maxCoeff();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(matrix.size()), 0);
  if (hi > lo)
    for (Index i = 0; i < matrix.size(); ++i)
      out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround((matrix[i] - lo) / (hi - lo) * 255.0));
  return out;
}

void export_heatmap(const TensorD& values, const std::string& csv_path, const std::string& pgm_path) {
  const TensorD m = heatmap_matrix(values);
  const Index rows = m.dim(0), cols = m.dim(1);
  std::string csv;
  for (Index i = 0; i < rows; ++i) {
    std::vector<std::string> cells;
    for (Index j = 0; j < cols; ++j) cells.push_back(format_number(m(i, j)));
    csv += csv_row(cells);
  }
  write_file_atomic(csv_path, csv);
  const auto levels = heatmap_levels(m);
  std::string pgm = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  pgm.append(reinterpret_cast<const char*>(levels.data()), levels.size());
  write_file_atomic(pgm_path, pgm);
}

}  // namespace lorun
