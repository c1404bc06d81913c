#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "scanflow/error.hpp"
#include "scanflow/nn/tensor.hpp"

namespace scanflow {

using nn::Tensor;

/// Grayscale image collection: images are [n, h, w] in [0, 1]; labels, when
/// present, hold one class id in 0..9 per image.
struct Dataset {
  Tensor<float> images;
  std::optional<std::vector<int>> labels;
  std::string name;

  std::size_t size() const { return images.rank() ? images.dim(0) : 0; }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }

  /// Images as a [n, 1, h, w] batch for the convolutional models.
  Tensor<float> batch() const { return images.reshaped({size(), 1, height(), width()}); }

  const std::vector<int>& y() const {
    if (!labels) throw InvalidSpec("dataset '" + name + "' has no labels");
    return *labels;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d{images.gather(idx), std::nullopt, name};
    if (labels) {
      std::vector<int> l;
      for (auto i : idx) l.push_back((*labels)[i]);
      d.labels = std::move(l);
    }
    return d;
  }

  void validate() const {
    if (images.rank() != 3) throw FormatError("images must be [n,h,w]");
    if (labels && labels->size() != size()) throw FormatError("label count differs from image count");
    for (float v : images.vec())
      if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("pixel outside [0,1]");
    if (labels)
      for (int l : *labels)
        if (l < 0 || l > 9) throw FormatError("label outside 0..9");
  }
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  Dataset d{nn::concat_rows(a.images, b.images), std::nullopt, a.name};
  if (a.labels && b.labels) {
    auto l = *a.labels;
    l.insert(l.end(), b.labels->begin(), b.labels->end());
    d.labels = std::move(l);
  }
  return d;
}

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

/// Decoded IDX payload: unsigned-byte tensors keep their raw bytes so that
/// re-serialization is bit-exact; `images` is the scaled float view.
struct IdxData {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> raw;

  Tensor<float> images() const {
    if (magic != kIdxImages) throw FormatError("not an image file");
    std::vector<float> v(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) v[i] = static_cast<float>(raw[i]) / 255.0f;
    return Tensor<float>({dims[0], dims[1], dims[2]}, std::move(v));
  }

  std::vector<int> labels() const {
    if (magic != kIdxLabels) throw FormatError("not a label file");
    return std::vector<int>(raw.begin(), raw.end());
  }
};

inline IdxData parse_idx(std::string_view bytes) {
  auto be32 = [&](std::size_t off) {
    if (off + 4 > bytes.size())
      throw FormatError("truncated header at byte offset " + std::to_string(bytes.size()));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[off + i]);
    return v;
  };
  IdxData d;
  d.magic = be32(0);
  std::size_t rank;
  if (d.magic == kIdxImages)
    rank = 3;
  else if (d.magic == kIdxLabels)
    rank = 1;
  else {
    std::ostringstream os;
    os << "unsupported magic 0x" << std::hex << d.magic;
    throw FormatError(os.str());
  }
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    d.dims.push_back(be32(4 + 4 * i));
    count *= d.dims.back();
  }
  std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header + count)
    throw FormatError("truncated payload at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(header + count));
  d.raw.assign(bytes.begin() + header, bytes.begin() + header + count);
  return d;
}

inline std::string serialize_idx(const IdxData& d) {
  std::string out;
  auto put = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
  };
  put(d.magic);
  for (auto v : d.dims) put(v);
  out.append(d.raw.begin(), d.raw.end());
  return out;
}

inline IdxData idx_from_images(const Tensor<float>& images) {
  IdxData d{kIdxImages, {static_cast<std::uint32_t>(images.dim(0)),
                         static_cast<std::uint32_t>(images.dim(1)),
                         static_cast<std::uint32_t>(images.dim(2))}, {}};
  d.raw.reserve(images.size());
  for (float v : images.vec())
    d.raw.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return d;
}

inline IdxData idx_from_labels(const std::vector<int>& labels) {
  IdxData d{kIdxLabels, {static_cast<std::uint32_t>(labels.size())}, {}};
  for (int l : labels) d.raw.push_back(static_cast<std::uint8_t>(l));
  return d;
}

inline std::string read_binary(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_binary(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Dataset load_idx_dataset(const std::filesystem::path& images,
                                const std::optional<std::filesystem::path>& labels,
                                std::string name = {}) {
  Dataset d{parse_idx(read_binary(images)).images(), std::nullopt,
            name.empty() ? images.filename().string() : std::move(name)};
  if (labels) d.labels = parse_idx(read_binary(*labels)).labels();
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { kGaussianNoise, kImpulseNoise, kTranslate, kScale };

inline std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kImpulseNoise: return "impulse_noise";
    case CorruptionKind::kTranslate: return "translate";
    case CorruptionKind::kScale: return "scale";
  }
  return "gaussian_noise";
}

inline CorruptionKind corruption_from_string(const std::string& s) {
  for (auto k : {CorruptionKind::kGaussianNoise, CorruptionKind::kImpulseNoise,
                 CorruptionKind::kTranslate, CorruptionKind::kScale})
    if (to_string(k) == s) return k;
  throw InvalidSpec("unknown corruption '" + s + "'");
}

inline constexpr CorruptionKind kAllCorruptions[] = {
    CorruptionKind::kGaussianNoise, CorruptionKind::kImpulseNoise, CorruptionKind::kTranslate,
    CorruptionKind::kScale};

inline bool is_geometric(CorruptionKind k) {
  return k == CorruptionKind::kTranslate || k == CorruptionKind::kScale;
}

/// Magnitude per severity 0..5 for each corruption kind.
struct SeverityTable {
  std::array<double, 6> gaussian_sigma{0, .05, .1, .2, .3, .5};
  std::array<double, 6> impulse_rate{0, .02, .05, .1, .2, .4};
  std::array<double, 6> translate_px{0, 1, 2, 3, 4, 5};
  std::array<double, 6> scale_zoom{1, 1.1, 1.2, 1.3, 1.4, 1.5};
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kGaussianNoise;
  int severity = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline void translate_image(const float* src, float* dst, std::size_t h, std::size_t w, long dx,
                            long dy) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      long sx = static_cast<long>(x) - dx, sy = static_cast<long>(y) - dy;
      bool inside = sx >= 0 && sy >= 0 && sx < static_cast<long>(w) && sy < static_cast<long>(h);
      dst[y * w + x] = inside ? src[sy * static_cast<long>(w) + sx] : 0.0f;
    }
}

// Nearest-neighbour zoom about the image centre; samples falling outside
// the source read as 0.
inline void zoom_image(const float* src, float* dst, std::size_t h, std::size_t w, double zoom) {
  double cy = (static_cast<double>(h) - 1) / 2.0, cx = (static_cast<double>(w) - 1) / 2.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      long sy = std::lround(cy + (static_cast<double>(y) - cy) / zoom);
      long sx = std::lround(cx + (static_cast<double>(x) - cx) / zoom);
      bool inside = sx >= 0 && sy >= 0 && sx < static_cast<long>(w) && sy < static_cast<long>(h);
      dst[y * w + x] = inside ? src[sy * static_cast<long>(w) + sx] : 0.0f;
    }
}

}  // namespace detail

/// Apply a corruption to every image. Labels and shape are preserved,
/// pixels clamped to [0,1], and the output depends only on (data, spec).
/// Translation moves each image horizontally by the severity's pixel count,
/// left or right as drawn from the seeded stream.
inline Dataset corrupt(const Dataset& in, const CorruptionSpec& spec,
                       const SeverityTable& table = {}) {
  if (spec.severity < 0 || spec.severity > 5)
    throw InvalidSpec("severity " + std::to_string(spec.severity) + " outside 0..5");
  Dataset out = in;
  if (spec.severity == 0) return out;
  out.name = in.name + "+" + to_string(spec.kind) + "@" + std::to_string(spec.severity);
  const std::size_t n = in.size(), h = in.height(), w = in.width(), px = h * w;
  std::mt19937_64 rng(spec.seed);
  auto s = static_cast<std::size_t>(spec.severity);
  for (std::size_t i = 0; i < n; ++i) {
    const float* src = in.images.data() + i * px;
    float* dst = out.images.data() + i * px;
    switch (spec.kind) {
      case CorruptionKind::kGaussianNoise: {
        std::normal_distribution<double> noise(0.0, table.gaussian_sigma[s]);
        for (std::size_t k = 0; k < px; ++k)
          dst[k] = static_cast<float>(std::clamp(src[k] + noise(rng), 0.0, 1.0));
        break;
      }
      case CorruptionKind::kImpulseNoise: {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t k = 0; k < px; ++k) {
          double roll = u(rng), salt = u(rng);
          if (roll < table.impulse_rate[s]) dst[k] = salt < 0.5 ? 0.0f : 1.0f;
        }
        break;
      }
      case CorruptionKind::kTranslate: {
        auto shift = static_cast<long>(table.translate_px[s]);
        bool left = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        detail::translate_image(src, dst, h, w, left ? -shift : shift, 0);
        break;
      }
      case CorruptionKind::kScale:
        detail::zoom_image(src, dst, h, w, table.scale_zoom[s]);
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

/// Disjoint, seeded train/test split. With labels the split is stratified:
/// each class contributes round(train_n * class_share) to train (largest
/// remainders fill the gap) and test draws the same way from the rest.
inline std::pair<Dataset, Dataset> split(const Dataset& d, std::size_t train_n,
                                         std::size_t test_n, std::uint64_t seed) {
  if (train_n + test_n > d.size())
    throw InvalidSpec("split " + std::to_string(train_n) + "+" + std::to_string(test_n) +
                      " exceeds " + std::to_string(d.size()) + " samples");
  std::mt19937_64 rng(seed);
  if (!d.labels) {
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> tr(order.begin(), order.begin() + train_n);
    std::vector<std::size_t> te(order.begin() + train_n, order.begin() + train_n + test_n);
    return {d.subset(tr), d.subset(te)};
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < d.size(); ++i) by_class[(*d.labels)[i]].push_back(i);
  for (auto& [_, v] : by_class) std::shuffle(v.begin(), v.end(), rng);

  auto allocate = [&](std::size_t want, const std::map<int, std::size_t>& avail) {
    std::size_t total = 0;
    for (auto& [_, a] : avail) total += a;
    std::map<int, std::size_t> take;
    std::vector<std::pair<double, int>> rema;
    std::size_t used = 0;
    for (auto& [c, a] : avail) {
      double exact = total ? static_cast<double>(want) * static_cast<double>(a) / total : 0.0;
      auto fl = std::min(a, static_cast<std::size_t>(std::floor(exact)));
      take[c] = fl;
      used += fl;
      rema.push_back({exact - static_cast<double>(fl), c});
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    while (used < want) {
      bool progressed = false;
      for (auto& [_, c] : rema) {
        if (used == want) break;
        if (take[c] < avail.at(c)) {
          ++take[c];
          ++used;
          progressed = true;
        }
      }
      if (!progressed) break;
    }
    return take;
  };

  std::map<int, std::size_t> avail;
  for (auto& [c, v] : by_class) avail[c] = v.size();
  auto take_train = allocate(train_n, avail);
  for (auto& [c, a] : avail) a -= take_train[c];
  auto take_test = allocate(test_n, avail);

  std::vector<std::size_t> tr, te;
  for (auto& [c, v] : by_class) {
    tr.insert(tr.end(), v.begin(), v.begin() + take_train[c]);
    te.insert(te.end(), v.begin() + take_train[c], v.begin() + take_train[c] + take_test[c]);
  }
  std::shuffle(tr.begin(), tr.end(), rng);
  std::shuffle(te.begin(), te.end(), rng);
  return {d.subset(tr), d.subset(te)};
}

// ---------------------------------------------------------------------------
// Digit synthesis from a small low-resolution base set

namespace detail {

inline float bilinear(const float* src, std::size_t h, std::size_t w, double y, double x) {
  if (y < -1 || x < -1 || y > static_cast<double>(h) || x > static_cast<double>(w)) return 0.0f;
  auto y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
  double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  auto at = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return src[yy * static_cast<long>(w) + xx];
  };
  double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
             fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
  return static_cast<float>(v);
}

}  // namespace detail

/// Render `count` 28x28 digits from a low-resolution labeled base set.
/// Each output picks a base image uniformly, maps it into a 20x20 box
/// centred in the frame under a random rotation (+-12 deg), scale
/// (0.9..1.1), shear (+-0.15) and sub-pixel offset (+-1 px), then applies
/// a random contrast curve. Disjoint base sets give disjoint renderings.
inline Dataset synthesize_digits(const Dataset& base, std::size_t count, std::uint64_t seed,
                                 std::size_t side = 28) {
  const std::size_t bh = base.height(), bw = base.width(), bpx = bh * bw;
  Dataset out{Tensor<float>({count, side, side}), std::vector<int>(count), base.name + "-synth"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, base.size() - 1);
  std::uniform_real_distribution<double> rot(-0.21, 0.21), scale(0.9, 1.1), shear(-0.15, 0.15),
      off(-1.0, 1.0), gamma(0.7, 1.3);
  const double box = 20.0 * static_cast<double>(side) / 28.0;
  const double c_out = (static_cast<double>(side) - 1) / 2.0;
  for (std::size_t i = 0; i < count; ++i) {
    auto b = pick(rng);
    const float* src = base.images.data() + b * bpx;
    double a = rot(rng), s = scale(rng), sh = shear(rng), oy = off(rng), ox = off(rng),
           g = gamma(rng);
    // output pixel -> base pixel: undo offset, rotation/shear, scale.
    double px_per_base = box * s / static_cast<double>(std::max(bh, bw));
    double ca = std::cos(a), sa = std::sin(a);
    float* dst = out.images.data() + i * side * side;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double u = static_cast<double>(x) - c_out - ox, v = static_cast<double>(y) - c_out - oy;
        double ru = ca * u + sa * v, rv = -sa * u + ca * v;
        ru -= sh * rv;
        double bx = ru / px_per_base + (static_cast<double>(bw) - 1) / 2.0;
        double by = rv / px_per_base + (static_cast<double>(bh) - 1) / 2.0;
        float val = detail::bilinear(src, bh, bw, by, bx);
        dst[y * side + x] = static_cast<float>(std::pow(std::clamp<double>(val, 0.0, 1.0), g));
      }
    (*out.labels)[i] = base.y()[b];
  }
  return out;
}

}  // namespace scanflow
