#pragma once

// Synthetic volumetric segmentation data: ellipsoid-blob generator,
// augmentations, and the on-disk volume / manifest formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3s3/error.hpp"
#include "c3s3/rng.hpp"

namespace c3s3 {

using Extent3 = std::array<std::size_t, 3>;

inline std::size_t extent_numel(const Extent3& e) { return e[0] * e[1] * e[2]; }

inline std::string extent_str(const Extent3& e) {
  return "(" + std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + ")";
}

/// Dense row-major 3D grid of voxels.
template <class T>
struct Grid3 {
  Extent3 shape{};
  std::vector<T> voxels;

  Grid3() = default;
  explicit Grid3(Extent3 s, T fill = T{}) : shape(s), voxels(extent_numel(s), fill) {}

  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const { return (d * shape[1] + h) * shape[2] + w; }
  T& at(std::size_t d, std::size_t h, std::size_t w) { return voxels[index(d, h, w)]; }
  const T& at(std::size_t d, std::size_t h, std::size_t w) const { return voxels[index(d, h, w)]; }
  std::size_t size() const { return voxels.size(); }

  friend bool operator==(const Grid3&, const Grid3&) = default;
};

/// Intensities in [0, 1].
using Volume = Grid3<float>;
/// Class indices: 0 background, 1 foreground.
using LabelVolume = Grid3<std::uint8_t>;

struct Sample {
  Volume image;
  LabelVolume label;
};

struct DataSplit {
  std::vector<Sample> labeled;
  std::vector<Volume> unlabeled;
  std::vector<Sample> test;
  std::uint64_t seed = 0;
};

inline std::size_t count_foreground(const LabelVolume& l) {
  return static_cast<std::size_t>(std::count(l.voxels.begin(), l.voxels.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------
// Generation

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  /// Sum of squared normalized offsets; <= 1 inside.
  double level(double d, double h, double w) const {
    const double a = (d - center[0]) / radii[0];
    const double b = (h - center[1]) / radii[1];
    const double c = (w - center[2]) / radii[2];
    return a * a + b * b + c * c;
  }
};

struct GeneratedSample {
  Sample sample;
  std::vector<Ellipsoid> blobs;
};

struct GeneratorOptions {
  double texture_amplitude = 0.1;
  double min_foreground_fraction = 0.01;
  double max_foreground_fraction = 0.5;
  double falloff_width = 0.08;  // logistic width in normalized-radius units
};

namespace volume_detail {

// Separable 3-tap box blur with clamped borders.
inline void box_blur(std::vector<double>& v, const Extent3& s) {
  std::vector<double> tmp(v.size());
  const std::array<std::size_t, 3> stride{s[1] * s[2], s[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t d = 0; d < s[0]; ++d)
      for (std::size_t h = 0; h < s[1]; ++h)
        for (std::size_t w = 0; w < s[2]; ++w) {
          const std::array<std::size_t, 3> p{d, h, w};
          const std::size_t i = (d * s[1] + h) * s[2] + w;
          const std::size_t lo = p[axis] > 0 ? i - stride[axis] : i;
          const std::size_t hi = p[axis] + 1 < s[axis] ? i + stride[axis] : i;
          tmp[i] = (v[lo] + v[i] + v[hi]) / 3.0;
        }
    v.swap(tmp);
  }
}

inline GeneratedSample generate_one(const Extent3& shape, Rng& rng, const GeneratorOptions& opt) {
  const std::size_t n = extent_numel(shape);
  for (;;) {
    GeneratedSample out;
    const std::size_t blob_count = 1 + rng.below(3);
    for (std::size_t i = 0; i < blob_count; ++i) {
      Ellipsoid e{};
      for (int a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(shape[a]);
        e.center[a] = rng.uniform(0.25 * ext, 0.75 * ext);
        e.radii[a] = rng.uniform(0.10 * ext, 0.28 * ext);
      }
      out.blobs.push_back(e);
    }
    std::vector<double> contrast(blob_count);
    for (auto& c : contrast) c = rng.uniform(0.35, 0.6);
    const double base = rng.uniform(0.2, 0.35);

    std::vector<double> texture(n);
    for (auto& t : texture) t = rng.normal();
    volume_detail::box_blur(texture, shape);
    volume_detail::box_blur(texture, shape);
    double peak = 0.0;
    for (double t : texture) peak = std::max(peak, std::abs(t));
    const double tex_scale = peak > 0.0 ? opt.texture_amplitude / peak : 0.0;

    Volume image(shape);
    LabelVolume label(shape);
    for (std::size_t d = 0; d < shape[0]; ++d)
      for (std::size_t h = 0; h < shape[1]; ++h)
        for (std::size_t w = 0; w < shape[2]; ++w) {
          const std::size_t i = image.index(d, h, w);
          double signal = 0.0;
          bool inside = false;
          for (std::size_t b = 0; b < blob_count; ++b) {
            const double q = out.blobs[b].level(static_cast<double>(d), static_cast<double>(h), static_cast<double>(w));
            inside = inside || q <= 1.0;
            const double r = std::sqrt(q);
            signal = std::max(signal, contrast[b] / (1.0 + std::exp((r - 1.0) / opt.falloff_width)));
          }
          const double value = base + signal + tex_scale * texture[i];
          image.voxels[i] = static_cast<float>(std::clamp(value, 0.0, 1.0));
          label.voxels[i] = inside ? 1 : 0;
        }
    const double frac = static_cast<double>(count_foreground(label)) / static_cast<double>(n);
    if (frac < opt.min_foreground_fraction || frac > opt.max_foreground_fraction) continue;
    out.sample = {std::move(image), std::move(label)};
    return out;
  }
}

}  // namespace volume_detail

/// Sample i depends only on (seed, i). Blob geometry is returned alongside
/// each sample so callers can verify labels against the ellipsoid inequality.
inline std::vector<GeneratedSample> generate_dataset_with_blobs(std::size_t count, const Extent3& shape,
                                                                std::uint64_t seed,
                                                                const GeneratorOptions& opt = {}) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
  for (auto e : shape) {
    if (e < 16) throw ShapeError("generate_dataset: extents must be >= 16, got " + extent_str(shape));
  }
  std::vector<GeneratedSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {kStreamGenerate, i}));
    out.push_back(volume_detail::generate_one(shape, rng, opt));
  }
  return out;
}

inline std::vector<Sample> generate_dataset(std::size_t count, const Extent3& shape, std::uint64_t seed,
                                            const GeneratorOptions& opt = {}) {
  std::vector<Sample> out;
  for (auto& g : generate_dataset_with_blobs(count, shape, seed, opt)) out.push_back(std::move(g.sample));
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning

struct SplitSizes {
  std::size_t test, labeled, unlabeled;
};

/// test = floor(test_frac * count); of the remaining train pool,
/// labeled = floor(labeled_frac * train) and the rest are unlabeled.
/// Requires labeled >= 1 and unlabeled >= labeled.
inline SplitSizes split_sizes(std::size_t count, double labeled_frac, double test_frac) {
  if (!(labeled_frac > 0.0 && labeled_frac < 1.0)) {
    throw ConfigError("labeled fraction must lie in (0, 1), got " + std::to_string(labeled_frac));
  }
  if (!(test_frac >= 0.0 && test_frac < 1.0)) {
    throw ConfigError("test fraction must lie in [0, 1), got " + std::to_string(test_frac));
  }
  // The small epsilon keeps products such as 0.29 * 100 from flooring to 28.
  auto floor_of = [](double f, std::size_t n) {
    return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9));
  };
  SplitSizes s{};
  s.test = floor_of(test_frac, count);
  const std::size_t train = count - s.test;
  s.labeled = floor_of(labeled_frac, train);
  s.unlabeled = train - s.labeled;
  if (s.labeled < 1) throw ConfigError("split leaves no labeled samples");
  if (s.unlabeled < s.labeled) {
    throw ConfigError("split needs at least as many unlabeled (" + std::to_string(s.unlabeled) +
                      ") as labeled (" + std::to_string(s.labeled) + ") samples");
  }
  return s;
}

/// Samples [0, test) become the test set, the next `labeled` keep labels, and
/// the rest lose them.
inline DataSplit make_split(std::vector<Sample> samples, const SplitSizes& sizes, std::uint64_t seed) {
  if (samples.size() != sizes.test + sizes.labeled + sizes.unlabeled) {
    throw std::invalid_argument("make_split: sample count does not match split sizes");
  }
  DataSplit split;
  split.seed = seed;
  std::size_t i = 0;
  for (; i < sizes.test; ++i) split.test.push_back(std::move(samples[i]));
  for (; i < sizes.test + sizes.labeled; ++i) split.labeled.push_back(std::move(samples[i]));
  for (; i < samples.size(); ++i) split.unlabeled.push_back(std::move(samples[i].image));
  return split;
}

inline DataSplit generate_split(std::size_t count, const Extent3& shape, double labeled_frac, double test_frac,
                                std::uint64_t seed) {
  const auto sizes = split_sizes(count, labeled_frac, test_frac);
  return make_split(generate_dataset(count, shape, seed), sizes, seed);
}

// ---------------------------------------------------------------------------
// Augmentation

struct Augmentation {
  enum class Kind { flip, intensity_noise, crop_pad };
  Kind kind = Kind::flip;
  int axis = 0;                                // flip: 0 = D, 1 = H, 2 = W
  double sigma = 0.0;                          // intensity_noise: Gaussian stddev
  std::array<std::ptrdiff_t, 3> offset{};      // crop_pad: content shift, zero fill
  std::uint64_t seed = 0;                      // intensity_noise draws

  static Augmentation flip(int axis) {
    Augmentation a;
    a.kind = Kind::flip;
    a.axis = axis;
    return a;
  }
  static Augmentation noise(double sigma, std::uint64_t seed) {
    Augmentation a;
    a.kind = Kind::intensity_noise;
    a.sigma = sigma;
    a.seed = seed;
    return a;
  }
  static Augmentation crop_pad(std::array<std::ptrdiff_t, 3> offset) {
    Augmentation a;
    a.kind = Kind::crop_pad;
    a.offset = offset;
    return a;
  }
};

namespace volume_detail {

template <class T>
Grid3<T> flip_grid(const Grid3<T>& g, int axis) {
  if (axis < 0 || axis > 2) throw std::invalid_argument("flip axis must be 0, 1 or 2");
  Grid3<T> out(g.shape);
  const auto& s = g.shape;
  for (std::size_t d = 0; d < s[0]; ++d)
    for (std::size_t h = 0; h < s[1]; ++h)
      for (std::size_t w = 0; w < s[2]; ++w) {
        std::array<std::size_t, 3> p{d, h, w};
        p[axis] = s[axis] - 1 - p[axis];
        out.at(p[0], p[1], p[2]) = g.at(d, h, w);
      }
  return out;
}

// Output voxel p takes input voxel p - offset when in bounds, else zero.
template <class T>
Grid3<T> shift_grid(const Grid3<T>& g, const std::array<std::ptrdiff_t, 3>& off) {
  Grid3<T> out(g.shape);
  const auto& s = g.shape;
  for (std::size_t d = 0; d < s[0]; ++d)
    for (std::size_t h = 0; h < s[1]; ++h)
      for (std::size_t w = 0; w < s[2]; ++w) {
        const std::array<std::ptrdiff_t, 3> src{static_cast<std::ptrdiff_t>(d) - off[0],
                                                static_cast<std::ptrdiff_t>(h) - off[1],
                                                static_cast<std::ptrdiff_t>(w) - off[2]};
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && src[a] >= 0 && src[a] < static_cast<std::ptrdiff_t>(s[a]);
        if (inside) {
          out.at(d, h, w) = g.at(static_cast<std::size_t>(src[0]), static_cast<std::size_t>(src[1]),
                                 static_cast<std::size_t>(src[2]));
        }
      }
  return out;
}

}  // namespace volume_detail

struct Augmented {
  Volume image;
  std::optional<LabelVolume> label;
};

/// Geometric kinds transform image and label identically; intensity noise
/// touches the image only and is clamped back into [0, 1].
inline Augmented augment(const Volume& v, const std::optional<LabelVolume>& l, const Augmentation& a) {
  if (l && l->shape != v.shape) {
    throw ShapeError("augment: label shape " + extent_str(l->shape) + " != image shape " + extent_str(v.shape));
  }
  Augmented out;
  switch (a.kind) {
    case Augmentation::Kind::flip:
      out.image = volume_detail::flip_grid(v, a.axis);
      if (l) out.label = volume_detail::flip_grid(*l, a.axis);
      break;
    case Augmentation::Kind::crop_pad:
      out.image = volume_detail::shift_grid(v, a.offset);
      if (l) out.label = volume_detail::shift_grid(*l, a.offset);
      break;
    case Augmentation::Kind::intensity_noise: {
      out.image = v;
      out.label = l;
      if (a.sigma > 0.0) {
        Rng rng(a.seed);
        for (auto& x : out.image.voxels) {
          x = static_cast<float>(std::clamp(static_cast<double>(x) + a.sigma * rng.normal(), 0.0, 1.0));
        }
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Volume file format
//
//   bytes 0..7   magic "C3S3VOL1"
//   bytes 8..11  header length L, little-endian u32
//   next L bytes UTF-8 JSON {"shape":[D,H,W],"dtype":"f32"|"u8","kind":"image"|"label"}
//   payload      row-major little-endian voxels (f32 for images, u8 for labels)

class VolumeIoError : public DataError {
 public:
  enum class Kind { io, bad_magic, malformed_header, truncated_payload, extent_mismatch, wrong_kind };
  VolumeIoError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kVolumeMagic[8] = {'C', '3', 'S', '3', 'V', 'O', 'L', '1'};

namespace volume_detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string encode(const Extent3& shape, const std::string& dtype, const std::string& kind,
                          const std::string& payload) {
  const nlohmann::json header = {{"shape", {shape[0], shape[1], shape[2]}}, {"dtype", dtype}, {"kind", kind}};
  const std::string h = header.dump();
  std::string out(kVolumeMagic, sizeof(kVolumeMagic));
  put_u32_le(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out += payload;
  return out;
}

struct Decoded {
  Extent3 shape{};
  std::string dtype, kind;
  std::string payload;
};

inline Decoded decode(const std::string& bytes, const std::string& origin) {
  using K = VolumeIoError::Kind;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) {
    throw VolumeIoError(K::bad_magic, origin + ": missing C3S3VOL1 magic");
  }
  const std::uint32_t len = get_u32_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(len)) {
    throw VolumeIoError(K::malformed_header, origin + ": header length exceeds file size");
  }
  Decoded out;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(12, len));
    const auto& shape = header.at("shape");
    if (!shape.is_array() || shape.size() != 3) throw std::runtime_error("shape must have 3 entries");
    for (int i = 0; i < 3; ++i) {
      const auto e = shape.at(i).get<std::int64_t>();
      if (e <= 0) {
        throw VolumeIoError(K::extent_mismatch, origin + ": non-positive extent in header");
      }
      out.shape[i] = static_cast<std::size_t>(e);
    }
    out.dtype = header.at("dtype").get<std::string>();
    out.kind = header.at("kind").get<std::string>();
  } catch (const VolumeIoError&) {
    throw;
  } catch (const std::exception& e) {
    throw VolumeIoError(K::malformed_header, origin + ": malformed header: " + e.what());
  }
  out.payload = bytes.substr(12 + len);
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeIoError(VolumeIoError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeIoError(VolumeIoError::Kind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw VolumeIoError(VolumeIoError::Kind::io, "short write to " + path.string());
}

inline void check_payload(const Decoded& dec, std::size_t elem_size, const std::string& origin) {
  const std::size_t want = extent_numel(dec.shape) * elem_size;
  if (dec.payload.size() < want) {
    throw VolumeIoError(VolumeIoError::Kind::truncated_payload,
                        origin + ": payload has " + std::to_string(dec.payload.size()) + " bytes, header promises " +
                            std::to_string(want));
  }
  if (dec.payload.size() > want) {
    throw VolumeIoError(VolumeIoError::Kind::extent_mismatch,
                        origin + ": payload has " + std::to_string(dec.payload.size() - want) +
                            " bytes beyond the header's extents");
  }
}

}  // namespace volume_detail

inline std::string encode_volume(const Volume& v) {
  std::string payload(v.voxels.size() * 4, '\0');
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(v.voxels[i]);
    for (int b = 0; b < 4; ++b) payload[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return volume_detail::encode(v.shape, "f32", "image", payload);
}

inline std::string encode_label(const LabelVolume& l) {
  return volume_detail::encode(l.shape, "u8", "label", std::string(l.voxels.begin(), l.voxels.end()));
}

inline Volume decode_volume(const std::string& bytes, const std::string& origin = "<memory>") {
  auto dec = volume_detail::decode(bytes, origin);
  if (dec.kind != "image" || dec.dtype != "f32") {
    throw VolumeIoError(VolumeIoError::Kind::wrong_kind, origin + ": expected an f32 image, found " + dec.dtype +
                                                             " " + dec.kind);
  }
  volume_detail::check_payload(dec, 4, origin);
  Volume v(dec.shape);
  const auto* p = reinterpret_cast<const unsigned char*>(dec.payload.data());
  for (std::size_t i = 0; i < v.voxels.size(); ++i) {
    v.voxels[i] = std::bit_cast<float>(volume_detail::get_u32_le(p + 4 * i));
  }
  return v;
}

inline LabelVolume decode_label(const std::string& bytes, const std::string& origin = "<memory>") {
  auto dec = volume_detail::decode(bytes, origin);
  if (dec.kind != "label" || dec.dtype != "u8") {
    throw VolumeIoError(VolumeIoError::Kind::wrong_kind, origin + ": expected a u8 label, found " + dec.dtype +
                                                             " " + dec.kind);
  }
  volume_detail::check_payload(dec, 1, origin);
  LabelVolume l(dec.shape);
  for (std::size_t i = 0; i < l.voxels.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(dec.payload[i]);
    if (v > 1) throw VolumeIoError(VolumeIoError::Kind::malformed_header, origin + ": label value outside {0,1}");
    l.voxels[i] = v;
  }
  return l;
}

inline void save_volume(const std::filesystem::path& path, const Volume& v) {
  volume_detail::write_file(path, encode_volume(v));
}
inline void save_label(const std::filesystem::path& path, const LabelVolume& l) {
  volume_detail::write_file(path, encode_label(l));
}
inline Volume load_volume(const std::filesystem::path& path) {
  return decode_volume(volume_detail::read_file(path), path.string());
}
inline LabelVolume load_label(const std::filesystem::path& path) {
  return decode_label(volume_detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Dataset manifest: manifest.json beside per-partition volume files.

inline constexpr const char* kManifestName = "manifest.json";

inline void save_split(const std::filesystem::path& dir, const DataSplit& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json m;
  m["seed"] = split.seed;
  m["format"] = "C3S3VOL1";
  auto write_part = [&](const std::string& part, std::size_t n, auto&& image_of, auto&& label_of) {
    fs::create_directories(dir / part);
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "%04zu", i);
      nlohmann::json entry;
      const std::string img = part + "/" + stem + "_image.vol";
      save_volume(dir / img, image_of(i));
      entry["image"] = img;
      if (const LabelVolume* l = label_of(i)) {
        const std::string lab = part + "/" + stem + "_label.vol";
        save_label(dir / lab, *l);
        entry["label"] = lab;
      }
      list.push_back(entry);
    }
    m[part] = list;
  };
  write_part("labeled", split.labeled.size(), [&](std::size_t i) -> const Volume& { return split.labeled[i].image; },
             [&](std::size_t i) -> const LabelVolume* { return &split.labeled[i].label; });
  write_part("unlabeled", split.unlabeled.size(), [&](std::size_t i) -> const Volume& { return split.unlabeled[i]; },
             [](std::size_t) -> const LabelVolume* { return nullptr; });
  write_part("test", split.test.size(), [&](std::size_t i) -> const Volume& { return split.test[i].image; },
             [&](std::size_t i) -> const LabelVolume* { return &split.test[i].label; });
  volume_detail::write_file(dir / kManifestName, m.dump(2) + "\n");
}

inline DataSplit load_split(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(volume_detail::read_file(dir / kManifestName));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / kManifestName).string() + ": " + e.what());
  }
  DataSplit split;
  try {
    split.seed = m.at("seed").get<std::uint64_t>();
    auto load_pair = [&](const nlohmann::json& e) {
      Sample s{load_volume(dir / e.at("image").get<std::string>()), load_label(dir / e.at("label").get<std::string>())};
      if (s.image.shape != s.label.shape) {
        throw VolumeIoError(VolumeIoError::Kind::extent_mismatch,
                            e.at("label").get<std::string>() + ": label shape differs from its image");
      }
      return s;
    };
    for (const auto& e : m.at("labeled")) split.labeled.push_back(load_pair(e));
    for (const auto& e : m.at("unlabeled")) split.unlabeled.push_back(load_volume(dir / e.at("image").get<std::string>()));
    for (const auto& e : m.at("test")) split.test.push_back(load_pair(e));
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / kManifestName).string() + ": malformed manifest: " + e.what());
  }
  return split;
}

}  // namespace c3s3
