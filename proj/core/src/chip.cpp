#include "yieldnet/chip.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace yieldnet {

namespace {

using json = nlohmann::json;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<char*>(b), 2);
}

void write_f32(std::ostream& os, float v) {
  static_assert(sizeof(float) == 4);
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("chip file truncated");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw FormatError("chip file truncated");
  return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
  uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw FormatError("chip file: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("chip file truncated");
  return s;
}

// x86 is little-endian; float payloads are written raw in bulk.
void write_f32_block(std::ostream& os, const float* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
}

void read_f32_block(std::istream& is, float* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4));
  if (!is) throw FormatError("chip file truncated: payload shorter than header promises");
}

}  // namespace

void Chip::validate() const {
  const auto& hd = header;
  if (hd.t < 1 || hd.c < 1 || hd.h < 1 || hd.w < 1)
    throw ValidationError("chip: extents must be >= 1");
  if (static_cast<int64_t>(hd.band_names.size()) != hd.c)
    throw ValidationError("chip: band_names must have exactly C entries");
  if (bands.shape != std::vector<int64_t>{hd.t, hd.c, hd.h, hd.w})
    throw ValidationError("chip: band array extents do not match header");
  if (yield_map.shape != std::vector<int64_t>{hd.h, hd.w})
    throw ValidationError("chip: yield map extents do not match header");
  for (float v : bands.data)
    if (!std::isfinite(v)) throw ValidationError("chip: non-finite band value");
  for (float v : yield_map.data) {
    if (!std::isfinite(v)) throw ValidationError("chip: non-finite yield value");
    if (v < 0.0f) throw ValidationError("chip: negative yield value");
  }
}

InputMode input_mode_from_string(const std::string& s) {
  if (s == "FLATTENED_CHANNELS") return InputMode::kFlattenedChannels;
  if (s == "PER_TIMESTEP") return InputMode::kPerTimestep;
  throw ConfigError("unknown input mode: " + s);
}

std::string to_string(InputMode m) {
  return m == InputMode::kFlattenedChannels ? "FLATTENED_CHANNELS" : "PER_TIMESTEP";
}

void write_chip(const Chip& chip, const std::filesystem::path& path) {
  chip.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(kChipMagic, 4);
  write_u16(os, kChipFormatVersion);
  const auto& hd = chip.header;
  write_str(os, hd.chip_id);
  write_u32(os, static_cast<uint32_t>(hd.year));
  write_f32(os, static_cast<float>(hd.lat));
  write_f32(os, static_cast<float>(hd.lon));
  write_u32(os, static_cast<uint32_t>(hd.t));
  write_u32(os, static_cast<uint32_t>(hd.c));
  write_u32(os, static_cast<uint32_t>(hd.h));
  write_u32(os, static_cast<uint32_t>(hd.w));
  for (const auto& b : hd.band_names) write_str(os, b);
  write_f32_block(os, chip.bands.ptr(), chip.bands.data.size());
  write_f32_block(os, chip.yield_map.ptr(), chip.yield_map.data.size());
  if (!os) throw IoError("write failed: " + path.string());
}

Chip read_chip(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kChipMagic, 4) != 0)
    throw FormatError("not a chip file (bad magic): " + path.string());
  uint16_t version = read_u16(is);
  if (version != kChipFormatVersion)
    throw FormatError("unsupported chip format version " + std::to_string(version));
  Chip chip;
  auto& hd = chip.header;
  hd.chip_id = read_str(is);
  hd.year = static_cast<int32_t>(read_u32(is));
  hd.lat = read_f32(is);
  hd.lon = read_f32(is);
  hd.t = read_u32(is);
  hd.c = read_u32(is);
  hd.h = read_u32(is);
  hd.w = read_u32(is);
  if (hd.t < 1 || hd.c < 1 || hd.h < 1 || hd.w < 1 || hd.t * hd.c * hd.h * hd.w > (1ll << 32))
    throw FormatError("chip file: implausible extents");
  hd.band_names.clear();
  for (int64_t i = 0; i < hd.c; ++i) hd.band_names.push_back(read_str(is));
  chip.bands = Tensor<float>({hd.t, hd.c, hd.h, hd.w});
  chip.yield_map = Tensor<float>({hd.h, hd.w});
  read_f32_block(is, chip.bands.ptr(), chip.bands.data.size());
  read_f32_block(is, chip.yield_map.ptr(), chip.yield_map.data.size());
  chip.validate();
  return chip;
}

DatasetStats compute_stats(const DatasetManifest& manifest,
                           const std::vector<ManifestEntry>& split) {
  if (split.empty()) throw ConfigError("compute_stats: empty split");
  std::vector<double> sum, sum2;
  std::vector<int64_t> count;
  double ysum = 0, ysum2 = 0;
  int64_t ycount = 0;
  std::vector<std::string> names;
  for (const auto& e : split) {
    Chip chip = read_chip(manifest.root / e.path);
    const auto& hd = chip.header;
    if (names.empty()) {
      names = hd.band_names;
      sum.assign(hd.c, 0.0);
      sum2.assign(hd.c, 0.0);
      count.assign(hd.c, 0);
    } else if (names != hd.band_names) {
      throw ValidationError("compute_stats: inconsistent band names across chips");
    }
    int64_t hw = hd.h * hd.w;
    for (int64_t t = 0; t < hd.t; ++t)
      for (int64_t c = 0; c < hd.c; ++c) {
        const float* p = chip.bands.ptr() + (t * hd.c + c) * hw;
        double s = 0, s2 = 0;
        for (int64_t i = 0; i < hw; ++i) {
          s += p[i];
          s2 += double(p[i]) * p[i];
        }
        sum[c] += s;
        sum2[c] += s2;
        count[c] += hw;
      }
    for (float v : chip.yield_map.data) {
      ysum += v;
      ysum2 += double(v) * v;
      ++ycount;
    }
  }
  DatasetStats out;
  out.bands.band_names = names;
  for (size_t c = 0; c < names.size(); ++c) {
    double m = sum[c] / double(count[c]);
    double var = sum2[c] / double(count[c]) - m * m;
    double sd = std::sqrt(std::max(0.0, var));
    if (sd <= 0.0)
      throw ValidationError("compute_stats: degenerate band '" + names[c] +
                            "' (constant values, std = 0)");
    out.bands.means.push_back(m);
    out.bands.stds.push_back(sd);
  }
  out.yield.mean = ysum / double(ycount);
  out.yield.std = std::sqrt(std::max(0.0, ysum2 / double(ycount) - out.yield.mean * out.yield.mean));
  if (out.yield.std <= 0.0)
    throw ValidationError("compute_stats: degenerate yield (constant values)");
  return out;
}

void write_stats(const DatasetStats& s, const std::filesystem::path& path) {
  json j;
  j["band_names"] = s.bands.band_names;
  j["means"] = s.bands.means;
  j["stds"] = s.bands.stds;
  j["yield_mean"] = s.yield.mean;
  j["yield_std"] = s.yield.std;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write stats: " + path.string());
  os << j.dump(2) << "\n";
}

DatasetStats read_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open stats: " + path.string());
  json j = json::parse(is, nullptr, true);
  DatasetStats s;
  s.bands.band_names = j.at("band_names").get<std::vector<std::string>>();
  s.bands.means = j.at("means").get<std::vector<double>>();
  s.bands.stds = j.at("stds").get<std::vector<double>>();
  s.yield.mean = j.at("yield_mean").get<double>();
  s.yield.std = j.at("yield_std").get<double>();
  if (s.bands.means.size() != s.bands.band_names.size() ||
      s.bands.stds.size() != s.bands.band_names.size())
    throw FormatError("stats file: length mismatch");
  for (double sd : s.bands.stds)
    if (sd <= 0) throw ValidationError("stats file: band std must be > 0");
  if (s.yield.std <= 0) throw ValidationError("stats file: yield std must be > 0");
  return s;
}

Tensor<float> normalize(const Chip& chip, const BandStats& stats) {
  const auto& hd = chip.header;
  if (static_cast<int64_t>(stats.means.size()) != hd.c)
    throw ValidationError("normalize: stats band count does not match chip");
  Tensor<float> out = chip.bands;
  int64_t hw = hd.h * hd.w;
  for (int64_t t = 0; t < hd.t; ++t)
    for (int64_t c = 0; c < hd.c; ++c) {
      float m = static_cast<float>(stats.means[c]);
      float inv = static_cast<float>(1.0 / stats.stds[c]);
      float* p = out.ptr() + (t * hd.c + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = (p[i] - m) * inv;
    }
  return out;
}

Tensor<float> standardize_yield_map(const Tensor<float>& y, const YieldStats& ys) {
  if (ys.std <= 0) throw ValidationError("yield std must be > 0");
  Tensor<float> out = y;
  float m = static_cast<float>(ys.mean);
  float inv = static_cast<float>(1.0 / ys.std);
  for (auto& v : out.data) v = (v - m) * inv;
  return out;
}

Tensor<float> flatten_to_input(const Tensor<float>& normalized, InputMode mode) {
  if (normalized.rank() != 4) throw ValidationError("flatten_to_input: expected [T,C,H,W]");
  if (mode == InputMode::kPerTimestep) return normalized;
  // [T,C,H,W] is already channel k = t*C + c in row-major order.
  Tensor<float> out = normalized;
  out.shape = {normalized.dim(0) * normalized.dim(1), normalized.dim(2), normalized.dim(3)};
  return out;
}

namespace {

void flip_last2(Tensor<float>& t, bool hflip, bool vflip) {
  if (!hflip && !vflip) return;
  int64_t w = t.shape.back();
  int64_t h = t.shape[t.rank() - 2];
  int64_t planes = t.numel() / (h * w);
  for (int64_t p = 0; p < planes; ++p) {
    float* base = t.ptr() + p * h * w;
    if (hflip)
      for (int64_t r = 0; r < h; ++r) std::reverse(base + r * w, base + (r + 1) * w);
    if (vflip)
      for (int64_t r = 0; r < h / 2; ++r)
        std::swap_ranges(base + r * w, base + (r + 1) * w, base + (h - 1 - r) * w);
  }
}

double unit_uniform(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1p-53; }

}  // namespace

void augment(Tensor<float>& input, Tensor<float>& target, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p > 1.0) throw ConfigError("augment: p must be in [0,1]");
  bool hflip = unit_uniform(rng) < p;
  bool vflip = unit_uniform(rng) < p;
  flip_last2(input, hflip, vflip);
  flip_last2(target, hflip, vflip);
}

void GenParams::validate() const {
  if (t < 1 || c < 1 || h < 1 || w < 1) throw ConfigError("gen: extents must be >= 1");
  if (y_min < 0 || y_max <= y_min) throw ConfigError("gen: need 0 <= y_min < y_max");
  if (static_cast<int64_t>(phenology.size()) != t)
    throw ConfigError("gen: phenology weights must have T entries");
  if (static_cast<int64_t>(band_base.size()) != c ||
      static_cast<int64_t>(band_gain.size()) != c)
    throw ConfigError("gen: band base/gain must have C entries");
  if (smooth_radius < 0) throw ConfigError("gen: smoothing radius must be >= 0");
  if (noise_std < 0 || struct_noise_std < 0)
    throw ConfigError("gen: noise level must be >= 0");
  if (struct_radius < 0) throw ConfigError("gen: smoothing radius must be >= 0");
}

namespace {

// Separable box blur, three passes, reflecting at the borders.
void box_blur(std::vector<double>& img, int64_t h, int64_t w, int64_t radius) {
  if (radius <= 0) return;
  std::vector<double> tmp(img.size());
  auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return i;
  };
  for (int pass = 0; pass < 3; ++pass) {
    for (int64_t r = 0; r < h; ++r)
      for (int64_t q = 0; q < w; ++q) {
        double acc = 0;
        for (int64_t d = -radius; d <= radius; ++d) acc += img[r * w + reflect(q + d, w)];
        tmp[r * w + q] = acc / double(2 * radius + 1);
      }
    for (int64_t q = 0; q < w; ++q)
      for (int64_t r = 0; r < h; ++r) {
        double acc = 0;
        for (int64_t d = -radius; d <= radius; ++d) acc += tmp[reflect(r + d, h) * w + q];
        img[r * w + q] = acc / double(2 * radius + 1);
      }
  }
}

}  // namespace

Chip synthesize_chip(uint64_t seed, const GenParams& params, const std::string& chip_id,
                     int32_t year, double lat, double lon) {
  params.validate();
  std::mt19937_64 rng(seed);
  int64_t h = params.h, w = params.w;
  std::vector<double> field(h * w);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : field) v = nd(rng);
  box_blur(field, h, w, params.smooth_radius);
  auto [mn_it, mx_it] = std::minmax_element(field.begin(), field.end());
  double mn = *mn_it, mx = *mx_it;
  double span = mx > mn ? mx - mn : 1.0;
  Chip chip;
  chip.header.chip_id = chip_id;
  chip.header.year = year;
  chip.header.lat = lat;
  chip.header.lon = lon;
  chip.header.t = params.t;
  chip.header.c = params.c;
  chip.header.h = h;
  chip.header.w = w;
  chip.header.band_names = kDefaultBands;
  chip.header.band_names.resize(params.c, "BAND");
  chip.yield_map = Tensor<float>({h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    double y = params.y_min + (field[i] - mn) / span * (params.y_max - params.y_min);
    chip.yield_map[i] = static_cast<float>(y);
  }
  chip.bands = Tensor<float>({params.t, params.c, h, w});
  std::vector<double> smooth(h * w);
  for (int64_t t = 0; t < params.t; ++t)
    for (int64_t c = 0; c < params.c; ++c) {
      float* p = chip.bands.ptr() + (t * params.c + c) * h * w;
      double base = params.band_base[c];
      double gain = params.band_gain[c] * params.phenology[t];
      double sscale = 0.0;
      double smean = 0.0;
      if (params.struct_noise_std > 0) {
        for (auto& v : smooth) v = nd(rng);
        box_blur(smooth, h, w, params.struct_radius);
        double s1 = 0, s2 = 0;
        for (double v : smooth) {
          s1 += v;
          s2 += v * v;
        }
        smean = s1 / double(h * w);
        double var = s2 / double(h * w) - smean * smean;
        if (var > 0) sscale = params.struct_noise_std / std::sqrt(var);
      }
      for (int64_t i = 0; i < h * w; ++i) {
        double v = base + gain * (chip.yield_map[i] / params.y_max) +
                   sscale * (smooth[i] - smean) + params.noise_std * nd(rng);
        p[i] = static_cast<float>(std::clamp(v, 0.0, 10000.0));
      }
    }
  return chip;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  json j;
  j["chips"] = json::array();
  for (const auto& e : m.chips)
    j["chips"].push_back({{"chip_id", e.chip_id}, {"year", e.year}, {"path", e.path}});
  j["val_years"] = m.val_years;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest: " + path.string());
  os << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path.string());
  json j = json::parse(is, nullptr, true);
  DatasetManifest m;
  m.root = path.parent_path();
  for (const auto& e : j.at("chips")) {
    ManifestEntry me;
    me.chip_id = e.at("chip_id").get<std::string>();
    me.year = e.at("year").get<int32_t>();
    me.path = e.at("path").get<std::string>();
    m.chips.push_back(std::move(me));
  }
  m.val_years = j.at("val_years").get<std::vector<int32_t>>();
  return m;
}

std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> split_by_year(
    const DatasetManifest& manifest, const std::vector<int32_t>& val_years) {
  if (val_years.empty()) throw ConfigError("split_by_year: val_years must be nonempty");
  std::vector<ManifestEntry> train, val;
  for (const auto& e : manifest.chips) {
    if (std::find(val_years.begin(), val_years.end(), e.year) != val_years.end())
      val.push_back(e);
    else
      train.push_back(e);
  }
  if (train.empty()) throw ConfigError("split_by_year: training split is empty");
  if (val.empty()) throw ConfigError("split_by_year: validation split is empty");
  return {std::move(train), std::move(val)};
}

}  // namespace yieldnet
