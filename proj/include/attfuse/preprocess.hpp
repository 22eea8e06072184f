#pragma once

// Depth clipping/normalization, center crop + resize, and the geometric
// augmentations (rotation, shear, mirror, perspective).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "attfuse/errors.hpp"
#include "attfuse/image.hpp"
#include "attfuse/layers.hpp"

namespace attfuse {

// ---------------------------------------------------------------------------
// Depth clipping

/// 1-based nearest rank ceil(p/100 * n), at least 1. Exact for integer p.
inline std::size_t nearest_rank(unsigned percent, std::size_t n) {
  const std::size_t r = (static_cast<std::size_t>(percent) * n + 99) / 100;
  return std::max<std::size_t>(r, 1);
}

struct DepthBounds {
  std::uint16_t low;   // 25th percentile of nonzero samples
  std::uint16_t high;  // 90th percentile of nonzero samples
};

/// Nearest-rank 25th/90th percentiles over the nonzero samples.
inline DepthBounds depth_percentiles(const Image16& d) {
  std::vector<std::uint16_t> v;
  v.reserve(d.data.size());
  for (auto s : d.data) {
    if (s != 0) v.push_back(s);
  }
  if (v.empty()) throw DataError("depth image has no nonzero samples");
  const std::size_t k25 = nearest_rank(25, v.size()) - 1;
  const std::size_t k90 = nearest_rank(90, v.size()) - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k90), v.end());
  const std::uint16_t high = v[k90];
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k25), v.begin() + static_cast<std::ptrdiff_t>(k90));
  return {v[k25], high};
}

/// Clamps nonzero depth into [p25, p90] and maps that range linearly onto
/// [0, 255], rounding half up. Zero (missing) samples stay 0, as does
/// everything when p25 == p90.
inline Image8 depth_clip_normalize(const Image16& d) {
  if (d.channels != 1) throw DimensionError("depth_clip_normalize: expected a single-channel image");
  const auto [lo, hi] = depth_percentiles(d);
  Image8 out(d.width, d.height, 1);
  if (lo == hi) return out;
  const std::uint64_t range = hi - lo;
  for (std::size_t i = 0; i < d.data.size(); ++i) {
    const std::uint16_t s = d.data[i];
    if (s == 0) continue;
    const std::uint64_t c = std::clamp(s, lo, hi) - lo;
    out.data[i] = static_cast<std::uint8_t>((2 * 255 * c + range) / (2 * range));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling helpers

namespace detail {

template <class T>
T store_sample(double v) {
  if constexpr (std::is_integral_v<T>) {
    const double hi = static_cast<double>(std::numeric_limits<T>::max());
    return static_cast<T>(std::clamp(std::floor(v + 0.5), 0.0, hi));
  } else {
    return static_cast<T>(v);
  }
}

inline double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

/// Bilinear sample at (x, y); taps outside the image read as zero.
template <class T>
double bilinear(const Image<T>& img, double x, double y, std::size_t c) {
  x = snap(x);
  y = snap(y);
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  auto tap = [&](long xi, long yi) -> double {
    if (xi < 0 || yi < 0 || xi >= static_cast<long>(img.width) || yi >= static_cast<long>(img.height)) return 0.0;
    return static_cast<double>(img.at(static_cast<std::size_t>(xi), static_cast<std::size_t>(yi), c));
  };
  double v = (1.0 - ax) * (1.0 - ay) * tap(x0, y0);
  if (ax != 0.0) v += ax * (1.0 - ay) * tap(x0 + 1, y0);
  if (ay != 0.0) v += (1.0 - ax) * ay * tap(x0, y0 + 1);
  if (ax != 0.0 && ay != 0.0) v += ax * ay * tap(x0 + 1, y0 + 1);
  return v;
}

/// Builds an image by pulling each output pixel from source coordinates
/// given by `inverse(x, y) -> (sx, sy)`.
template <class T, class F>
Image<T> remap(const Image<T>& src, std::size_t w, std::size_t h, F inverse) {
  Image<T> out(w, h, src.channels);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto [sx, sy] = inverse(static_cast<double>(x), static_cast<double>(y));
      for (std::size_t c = 0; c < src.channels; ++c) out.at(x, y, c) = store_sample<T>(bilinear(src, sx, sy, c));
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Crop + resize

inline constexpr double kDefaultCropRatio = 0.8;

/// Align-corners bilinear resize; each axis scales independently.
template <class T>
Image<T> resize_bilinear(const Image<T>& img, std::size_t target_w, std::size_t target_h) {
  if (target_w == 0 || target_h == 0) throw ConfigError("resize: target size must be positive");
  auto axis = [](std::size_t out, std::size_t in) {
    return out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  };
  const double sx = axis(target_w, img.width), sy = axis(target_h, img.height);
  const double cx = target_w > 1 ? 0.0 : static_cast<double>(img.width - 1) / 2.0;
  const double cy = target_h > 1 ? 0.0 : static_cast<double>(img.height - 1) / 2.0;
  return detail::remap(img, target_w, target_h, [&](double x, double y) {
    return std::pair{cx + x * sx, cy + y * sy};
  });
}

/// Center square crop covering `ratio` of the shorter side, then bilinear
/// resize to target x target.
template <class T>
Image<T> crop_resize(const Image<T>& img, std::size_t target, double ratio = kDefaultCropRatio) {
  if (img.width < 2 || img.height < 2) {
    throw DataError("crop_resize: image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                    " is smaller than 2x2");
  }
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("crop_resize: crop ratio must be in (0, 1]");
  const std::size_t shorter = std::min(img.width, img.height);
  const auto side = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(shorter))));
  const std::size_t x0 = (img.width - side) / 2, y0 = (img.height - side) / 2;
  Image<T> crop(side, side, img.channels);
  for (std::size_t y = 0; y < side; ++y) {
    const T* row = &img.at(x0, y0 + y);
    std::copy(row, row + side * img.channels, &crop.at(0, y));
  }
  if (side == target) return crop;
  return resize_bilinear(crop, target, target);
}

/// Applies the identical crop to both images of a registered pair.
template <class A, class B>
std::pair<Image<A>, Image<B>> crop_resize_pair(const Image<A>& rgb, const Image<B>& depth, std::size_t target,
                                               double ratio = kDefaultCropRatio) {
  if (rgb.width != depth.width || rgb.height != depth.height) {
    throw DataError("crop_resize_pair: rgb and depth sizes differ");
  }
  return {crop_resize(rgb, target, ratio), crop_resize(depth, target, ratio)};
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentKind { rotation, shear, flip, perspective };

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::rotation: return "rotation";
    case AugmentKind::shear: return "shear";
    case AugmentKind::flip: return "flip";
    case AugmentKind::perspective: return "perspective";
  }
  return "?";
}

inline constexpr double kMaxRotationDeg = 30.0;
inline constexpr double kMaxShearDeg = 16.0;
inline constexpr double kMinPerspective = 0.5;
inline constexpr double kMaxPerspective = 1.5;

/// One transform per call, selected by `kind`; the other fields are ignored.
struct AugmentParams {
  AugmentKind kind = AugmentKind::rotation;
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  bool flip = true;
  double perspective_scale = 1.0;
  std::uint64_t seed = 0;  // the draw that produced these parameters

  void validate() const {
    if (!(std::abs(rotation_deg) <= kMaxRotationDeg)) throw ConfigError("rotation must be within [-30, 30] degrees");
    if (!(std::abs(shear_deg) <= kMaxShearDeg)) throw ConfigError("shear must be within [-16, 16] degrees");
    if (!(perspective_scale >= kMinPerspective && perspective_scale <= kMaxPerspective)) {
      throw ConfigError("perspective scale must be within [0.5, 1.5]");
    }
  }

  bool operator==(const AugmentParams&) const = default;
};

namespace detail {

/// Solves the 8-parameter homography mapping each dst[i] to src[i].
inline std::array<double, 9> homography(const std::array<std::pair<double, double>, 4>& dst,
                                        const std::array<std::pair<double, double>, 4>& src) {
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const auto [x, y] = dst[i];
    const auto [u, v] = src[i];
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = x, r0[1] = y, r0[2] = 1, r0[6] = -u * x, r0[7] = -u * y, r0[8] = u;
    r1[3] = x, r1[4] = y, r1[5] = 1, r1[6] = -v * x, r1[7] = -v * y, r1[8] = v;
  }
  for (int col = 0; col < 8; ++col) {
    int piv = col;
    for (int r = col + 1; r < 8; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    std::swap(a[col], a[piv]);
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (int k = col; k < 9; ++k) a[r][k] -= f * a[col][k];
    }
  }
  std::array<double, 9> h{};
  for (int i = 0; i < 8; ++i) h[i] = a[i][8] / a[i][i];
  h[8] = 1.0;
  return h;
}

}  // namespace detail

/// Geometric transform about the image center with bilinear resampling and
/// zero fill. Rotation is counter-clockwise as displayed (y axis down); shear
/// moves rows along x by tan(angle) * (y - cy); flip mirrors about the
/// vertical axis; perspective scales the top edge's width by the factor while
/// the bottom edge stays fixed.
template <class T>
Image<T> augment(const Image<T>& img, const AugmentParams& p) {
  p.validate();
  const std::size_t w = img.width, h = img.height;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  switch (p.kind) {
    case AugmentKind::rotation: {
      const double t = p.rotation_deg * std::numbers::pi / 180.0;
      const double c = std::cos(t), s = std::sin(t);
      return detail::remap(img, w, h, [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        return std::pair{cx + c * dx - s * dy, cy + s * dx + c * dy};
      });
    }
    case AugmentKind::shear: {
      const double k = std::tan(p.shear_deg * std::numbers::pi / 180.0);
      return detail::remap(img, w, h, [&](double x, double y) { return std::pair{x - k * (y - cy), y}; });
    }
    case AugmentKind::flip: {
      if (!p.flip) return img;
      Image<T> out(w, h, img.channels);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          for (std::size_t c = 0; c < img.channels; ++c) out.at(w - 1 - x, y, c) = img.at(x, y, c);
        }
      }
      return out;
    }
    case AugmentKind::perspective: {
      // A single row is its own bottom edge; a single column has no width to scale.
      if (w < 2 || h < 2) return img;
      const double xr = static_cast<double>(w) - 1.0, yb = static_cast<double>(h) - 1.0;
      const double half = cx * p.perspective_scale;
      const auto hm = detail::homography({{{cx - half, 0.0}, {cx + half, 0.0}, {xr, yb}, {0.0, yb}}},
                                         {{{0.0, 0.0}, {xr, 0.0}, {xr, yb}, {0.0, yb}}});
      return detail::remap(img, w, h, [&](double x, double y) {
        const double z = hm[6] * x + hm[7] * y + hm[8];
        return std::pair{(hm[0] * x + hm[1] * y + hm[2]) / z, (hm[3] * x + hm[4] * y + hm[5]) / z};
      });
    }
  }
  return img;
}

/// Same transform applied to both images of a registered pair.
template <class A, class B>
std::pair<Image<A>, Image<B>> augment_pair(const Image<A>& rgb, const Image<B>& depth, const AugmentParams& p) {
  return {augment(rgb, p), augment(depth, p)};
}

/// Draws parameters for `kind` uniformly from the allowed ranges.
inline AugmentParams sample_augment(AugmentKind kind, Rng& rng) {
  AugmentParams p;
  p.kind = kind;
  p.seed = rng();
  Rng local(p.seed);
  switch (kind) {
    case AugmentKind::rotation: p.rotation_deg = uniform(local, -kMaxRotationDeg, kMaxRotationDeg); break;
    case AugmentKind::shear: p.shear_deg = uniform(local, -kMaxShearDeg, kMaxShearDeg); break;
    case AugmentKind::flip: p.flip = true; break;
    case AugmentKind::perspective: p.perspective_scale = uniform(local, kMinPerspective, kMaxPerspective); break;
  }
  return p;
}

struct ImagePair {
  std::string id;
  Image8 rgb;
  Image8 depth;
  int label = 0;
};

struct ExpandedPair {
  ImagePair pair;
  std::optional<AugmentParams> params;  // empty for the original
};

/// Each pair yields the original plus 3 copies, each with a different
/// randomly drawn transform type (all 4 types when include_all_kinds is set,
/// giving 5 records per pair). Copy ids get a "_aug<k>" suffix.
inline std::vector<ExpandedPair> augment_expand(const std::vector<ImagePair>& pairs, std::uint64_t seed,
                                                bool include_all_kinds = false) {
  Rng rng(seed);
  const std::size_t copies = include_all_kinds ? 4 : 3;
  std::vector<ExpandedPair> out;
  out.reserve(pairs.size() * (copies + 1));
  for (const auto& p : pairs) {
    out.push_back({p, std::nullopt});
    std::array<AugmentKind, 4> kinds{AugmentKind::rotation, AugmentKind::shear, AugmentKind::flip,
                                     AugmentKind::perspective};
    // Partial Fisher-Yates with our own draws keeps results library-independent.
    for (std::size_t i = 0; i < copies; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(kinds.size() - i));
      std::swap(kinds[i], kinds[j]);
      const AugmentParams params = sample_augment(kinds[i], rng);
      auto [rgb, depth] = augment_pair(p.rgb, p.depth, params);
      out.push_back({ImagePair{p.id + "_aug" + std::to_string(i + 1), std::move(rgb), std::move(depth), p.label}, params});
    }
  }
  return out;
}

}  // namespace attfuse
