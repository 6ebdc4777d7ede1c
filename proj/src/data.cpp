#include "lorun/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "lorun/errors.hpp"
#include "lorun/io.hpp"
#include "lorun/random.hpp"

namespace lorun {

namespace {

constexpr std::string_view kSyntheticPrefix = "synthetic:";

Index parse_index(std::string_view key, std::string_view v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || out < 1)
    throw ConfigError("synthetic spec: " + std::string(key) + " must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<Index>(out);
}

// Smooth per-shape spectrum in [0.2, 1].
std::vector<double> spectrum(CounterRng& rng, Index channels) {
  std::vector<double> s(static_cast<std::size_t>(channels), 1.0);
  if (channels == 1) return s;
  const double freq = rng.uniform(0.2, 1.5), phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (Index c = 0; c < channels; ++c) {
    const double t = static_cast<double>(c) / static_cast<double>(channels - 1);
    s[static_cast<std::size_t>(c)] = 0.6 + 0.4 * std::cos(std::numbers::pi * freq * t + phase);
  }
  return s;
}

TensorF clamp_unit(TensorF t) {
  t.vec() = t.vec().cwiseMax(0.0f).cwiseMin(1.0f);
  return t;
}

void append_tensor(std::vector<ImageSample>& out, const TensorF& t, const std::string& id) {
  switch (t.ndim()) {
    case 2: out.push_back({clamp_unit(t.reshaped({1, t.dim(0), t.dim(1)})), id}); break;
    case 3: out.push_back({clamp_unit(t), id}); break;
    case 4: {
      const Shape one{t.dim(1), t.dim(2), t.dim(3)};
      const Index n = shape_size(one);
      for (Index i = 0; i < t.dim(0); ++i)
        out.push_back({clamp_unit(TensorF(one, t.vec().segment(i * n, n))), id + "#" + std::to_string(i)});
      break;
    }
    default: throw DimensionError("tensor file " + id + ": expected 2-4 dimensions, got " + shape_str(t.shape()));
  }
}

Layout layout_of(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" ? Layout::Pgm : Layout::TensorFile;
}

void load_file(std::vector<ImageSample>& out, const std::filesystem::path& p, Layout layout) {
  const std::string id = p.filename().string();
  if (layout == Layout::Pgm)
    out.push_back({clamp_unit(read_pgm(p.string())), id});
  else
    append_tensor(out, load_tensor(p.string()).as<float>(), id);
}

}  // namespace

bool is_synthetic_spec(std::string_view source) { return source.substr(0, kSyntheticPrefix.size()) == kSyntheticPrefix; }

SyntheticSpec parse_synthetic(std::string_view source) {
  if (!is_synthetic_spec(source)) throw ConfigError("not a synthetic spec: " + std::string(source));
  SyntheticSpec spec;
  std::string_view rest = source.substr(kSyntheticPrefix.size());
  while (!rest.empty()) {
    const std::size_t comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    if (item.empty()) continue;
    const std::size_t eq = item.find('=');
    if (eq == std::string_view::npos) throw ConfigError("synthetic spec: expected key=value, got '" + std::string(item) + "'");
    const std::string_view key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "count") spec.count = parse_index(key, val);
    else if (key == "size") spec.height = spec.width = parse_index(key, val);
    else if (key == "height") spec.height = parse_index(key, val);
    else if (key == "width") spec.width = parse_index(key, val);
    else if (key == "channels") spec.channels = parse_index(key, val);
    else if (key == "seed") {
      unsigned long long s = 0;
      auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), s);
      if (ec != std::errc() || p != val.data() + val.size()) throw ConfigError("synthetic spec: bad seed '" + std::string(val) + "'");
      spec.seed = s;
    } else {
      throw ConfigError("synthetic spec: unknown key '" + std::string(key) + "'");
    }
  }
  return spec;
}

std::vector<ImageSample> synthesize(const SyntheticSpec& spec) {
  if (spec.count < 1 || spec.height < 1 || spec.width < 1 || spec.channels < 1)
    throw ConfigError("synthetic spec: all extents must be positive");
  const Index C = spec.channels, H = spec.height, W = spec.width;
  std::vector<ImageSample> out;
  for (Index n = 0; n < spec.count; ++n) {
    CounterRng rng(derive_seed(spec.seed, "synthetic" + std::to_string(n)));
    TensorD img({C, H, W});
    const double bg = rng.uniform(0.05, 0.35);
    const auto bg_spec = spectrum(rng, C);
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < H * W; ++i) img[c * H * W + i] = bg * bg_spec[static_cast<std::size_t>(c)];
    const int rects = 2 + static_cast<int>(rng.below(4));
    for (int r = 0; r < rects; ++r) {
      const Index h = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, H / 2))));
      const Index w = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(std::max<Index>(1, W / 2))));
      const Index top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(H - h + 1)));
      const Index left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(W - w + 1)));
      const double v = rng.uniform(0.2, 1.0);
      const auto s = spectrum(rng, C);
      for (Index c = 0; c < C; ++c)
        for (Index i = top; i < top + h; ++i)
          for (Index j = left; j < left + w; ++j) img(c, i, j) = v * s[static_cast<std::size_t>(c)];
    }
    const int blobs = 1 + static_cast<int>(rng.below(3));
    for (int b = 0; b < blobs; ++b) {
      const double ci = rng.uniform(0.0, static_cast<double>(H)), cj = rng.uniform(0.0, static_cast<double>(W));
      const double sigma = rng.uniform(0.06, 0.25) * static_cast<double>(std::min(H, W));
      const double amp = rng.uniform(-0.4, 0.4);
      const auto s = spectrum(rng, C);
      for (Index c = 0; c < C; ++c)
        for (Index i = 0; i < H; ++i)
          for (Index j = 0; j < W; ++j) {
            const double di = static_cast<double>(i) - ci, dj = static_cast<double>(j) - cj;
            img(c, i, j) += amp * s[static_cast<std::size_t>(c)] * std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
          }
    }
    out.push_back({clamp_unit(img.cast<float>()), "synthetic" + std::to_string(n)});
  }
  return out;
}

std::vector<ImageSample> ingest(const std::string& source, Layout layout) {
  namespace fs = std::filesystem;
  if (layout == Layout::Synthetic || (layout == Layout::Auto && is_synthetic_spec(source)))
    return synthesize(parse_synthetic(source));
  std::vector<ImageSample> out;
  const fs::path p(source);
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) load_file(out, f, layout == Layout::Auto ? layout_of(f) : layout);
    if (out.empty()) throw IoError("no images found in " + source);
    return out;
  }
  if (!fs::exists(p)) throw IoError("data source not found: " + source);
  load_file(out, p, layout == Layout::Auto ? layout_of(p) : layout);
  return out;
}

}  // namespace lorun
