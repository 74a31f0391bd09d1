#pragma once

// Orthographic multi-view depth rendering, background detection and color
// compositing of the rendered maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "cmgr/core/autodiff.hpp"
#include "cmgr/pointset.hpp"

namespace cmgr {

inline constexpr double kDefaultElevation = 20.0 * std::numbers::pi / 180.0;
inline constexpr double kDefaultCameraDistance = 2.0;
inline constexpr int kBackgroundKernel = 9;
inline constexpr int kBackgroundPad = 4;

struct ViewTransform {
  double azimuth = 0.0;
  double elevation = kDefaultElevation;
  double distance = kDefaultCameraDistance;
};

using MaskMat = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Values in [0, 1]; 1.0 is background, smaller is nearer the camera.
struct DepthMap {
  Mat<double> pixels;
  ViewTransform view;

  Index height() const { return pixels.rows(); }
  Index width() const { return pixels.cols(); }
};

struct BackgroundMasks {
  MaskMat white;       // M_w
  MaskMat background;  // M_b
};

// Pixels stored one per row (row-major pixel order), three color channels.
struct EnhancedImage {
  Index height = 0;
  Index width = 0;
  Mat<double> pixels;
};

inline std::vector<ViewTransform> camera_views(std::size_t count, double elevation = kDefaultElevation,
                                               double distance = kDefaultCameraDistance) {
  if (count == 0) throw InvalidArgument("camera_views: need at least one view");
  if (!(distance > 1.0)) throw InvalidArgument("camera_views: camera must sit outside the unit sphere");
  std::vector<ViewTransform> views;
  for (std::size_t k = 0; k < count; ++k) {
    views.push_back({2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count), elevation,
                     distance});
  }
  return views;
}

// Camera frame of a view: viewing direction (origin -> camera), right and up.
struct CameraFrame {
  std::array<double, 3> dir;
  std::array<double, 3> right;
  std::array<double, 3> up;
};

inline CameraFrame camera_frame(const ViewTransform& v) {
  const double ce = std::cos(v.elevation), se = std::sin(v.elevation);
  const double ca = std::cos(v.azimuth), sa = std::sin(v.azimuth);
  CameraFrame f;
  f.dir = {ce * sa, se, ce * ca};
  // right = world_up x dir, normalized
  std::array<double, 3> r = {f.dir[2], 0.0, -f.dir[0]};
  const double rn = std::sqrt(r[0] * r[0] + r[2] * r[2]);
  f.right = {r[0] / rn, 0.0, r[2] / rn};
  f.up = {f.dir[1] * f.right[2] - f.dir[2] * f.right[1], f.dir[2] * f.right[0] - f.dir[0] * f.right[2],
          f.dir[0] * f.right[1] - f.dir[1] * f.right[0]};
  return f;
}

// Where one point lands: pixel centre of its splat and its normalized depth.
struct ProjectedPoint {
  Index row;
  Index col;
  double depth;
};

inline ProjectedPoint project_point(const CameraFrame& f, const ViewTransform& v, double x, double y, double z,
                                    Index height, Index width) {
  const double xv = x * f.right[0] + y * f.right[1] + z * f.right[2];
  const double yv = x * f.up[0] + y * f.up[1] + z * f.up[2];
  const double dist = v.distance - (x * f.dir[0] + y * f.dir[1] + z * f.dir[2]);
  const double near = v.distance - 1.0;
  double depth = (dist - near) / 2.0;
  depth = std::clamp(depth, 0.0, std::nextafter(1.0, 0.0));
  const auto col = static_cast<Index>(std::floor((xv + 1.0) * 0.5 * static_cast<double>(width)));
  const auto row = static_cast<Index>(std::floor((1.0 - yv) * 0.5 * static_cast<double>(height)));
  return {std::clamp<Index>(row, 0, height - 1), std::clamp<Index>(col, 0, width - 1), depth};
}

// Offsets covered by a square splat of side `splat` around its centre pixel.
inline std::pair<Index, Index> splat_extent(Index splat) {
  const Index lo = (splat - 1) / 2;
  return {-lo, splat - 1 - lo};
}

inline DepthMap render_depth(const PointCloud& pc, const ViewTransform& view, Index height, Index width,
                             Index splat = 3) {
  if (height < 16 || width < 16) throw InvalidArgument("render_depth: image must be at least 16 x 16");
  if (splat < 1) throw InvalidArgument("render_depth: splat must be >= 1");
  if (pc.points.rows() == 0) throw InvalidArgument("render_depth: empty cloud");
  if (pc.points.rowwise().norm().maxCoeff() > 1.01) {
    throw InvalidArgument("render_depth: cloud is not normalized to the unit sphere");
  }
  DepthMap dm;
  dm.view = view;
  dm.pixels = Mat<double>::Ones(height, width);
  const CameraFrame f = camera_frame(view);
  const auto [lo, hi] = splat_extent(splat);
  for (Index i = 0; i < pc.points.rows(); ++i) {
    const auto p = project_point(f, view, pc.points(i, 0), pc.points(i, 1), pc.points(i, 2), height, width);
    for (Index r = std::max<Index>(0, p.row + lo); r <= std::min<Index>(height - 1, p.row + hi); ++r) {
      for (Index c = std::max<Index>(0, p.col + lo); c <= std::min<Index>(width - 1, p.col + hi); ++c) {
        double& px = dm.pixels(r, c);
        if (p.depth < px) px = p.depth;
      }
    }
  }
  return dm;
}

inline std::vector<DepthMap> render_views(const PointCloud& pc, const std::vector<ViewTransform>& views,
                                          Index height, Index width, Index splat) {
  std::vector<DepthMap> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(render_depth(pc, v, height, width, splat));
  return out;
}

// M_w = exact white pixels; M_b = pixels whose 9x9 neighbourhood (white padding
// of 4 beyond the border) is entirely white. Uses a summed-area table of the
// non-white indicator.
inline BackgroundMasks detect_background(const DepthMap& depth) {
  const Index h = depth.height(), w = depth.width();
  BackgroundMasks m;
  m.white = (depth.pixels.array() == 1.0);
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sat =
      Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(h + 1, w + 1);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      sat(r + 1, c + 1) = (m.white(r, c) ? 0 : 1) + sat(r, c + 1) + sat(r + 1, c) - sat(r, c);
    }
  }
  m.background.resize(h, w);
  for (Index r = 0; r < h; ++r) {
    const Index r0 = std::max<Index>(0, r - kBackgroundPad), r1 = std::min<Index>(h, r + kBackgroundPad + 1);
    for (Index c = 0; c < w; ++c) {
      const Index c0 = std::max<Index>(0, c - kBackgroundPad), c1 = std::min<Index>(w, c + kBackgroundPad + 1);
      const std::int64_t dark = sat(r1, c1) - sat(r0, c1) - sat(r1, c0) + sat(r0, c0);
      m.background(r, c) = dark == 0;
    }
  }
  return m;
}

inline void check_color(const std::array<double, 3>& c) {
  for (double v : c) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("compose_enhanced: color outside [0,1]");
  }
}

inline EnhancedImage compose_enhanced(const DepthMap& depth, const BackgroundMasks& masks,
                                      const std::array<double, 3>& color) {
  check_color(color);
  if (masks.background.rows() != depth.height() || masks.background.cols() != depth.width()) {
    throw InvalidArgument("compose_enhanced: mask size mismatch");
  }
  EnhancedImage img;
  img.height = depth.height();
  img.width = depth.width();
  img.pixels.resize(img.height * img.width, 3);
  for (Index r = 0; r < img.height; ++r) {
    for (Index c = 0; c < img.width; ++c) {
      const Index p = r * img.width + c;
      for (int ch = 0; ch < 3; ++ch) {
        img.pixels(p, ch) = masks.background(r, c) ? color[ch] : depth.pixels(r, c);
      }
    }
  }
  return img;
}

// Gray depth replicated to three channels (the enhanced image for an empty M_b).
inline EnhancedImage grayscale_image(const DepthMap& depth) {
  EnhancedImage img;
  img.height = depth.height();
  img.width = depth.width();
  img.pixels.resize(img.height * img.width, 3);
  for (Index p = 0; p < img.height * img.width; ++p) {
    img.pixels.row(p).setConstant(depth.pixels.data()[p]);
  }
  return img;
}

// Differentiable compositing: `color` is a 1x3 variable; the result is the
// (H*W) x 3 pixel matrix. Background pixels copy the color, others the depth.
template <typename T>
Var<T> compose_enhanced(Var<T> color, const Mat<T>& gray_pixels, const MaskMat& background) {
  if (color.rows() != 1 || color.cols() != 3) throw InvalidArgument("compose_enhanced: color must be 1x3");
  if (gray_pixels.size() != background.size()) throw InvalidArgument("compose_enhanced: mask size mismatch");
  const Index n = gray_pixels.size();
  Tape<T>& t = *color.tape;
  Mat<T> v(n, 3);
  const T* g = gray_pixels.data();
  const bool* mb = background.data();
  const auto& c = color.value();
  for (Index p = 0; p < n; ++p) {
    for (int ch = 0; ch < 3; ++ch) v(p, ch) = mb[p] ? c(0, ch) : g[p];
  }
  const std::size_t ic = color.id;
  return t.push(std::move(v), t.needs_grad(ic), [ic, background](Tape<T>& tp, std::size_t s) {
    const Mat<T>& gr = tp.grad(s);
    const bool* m = background.data();
    RowVec<T> acc = RowVec<T>::Zero(3);
    for (Index p = 0; p < gr.rows(); ++p) {
      if (m[p]) acc += gr.row(p);
    }
    tp.grad(ic) += acc;
  });
}

// --- PGM / PPM ------------------------------------------------------------

inline std::uint8_t quantize(double v) {
  const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(q);
}

inline void write_netpbm(const std::filesystem::path& path, const char* magic, Index width, Index height,
                         const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing", path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path.string());
}

inline void export_image(const DepthMap& depth, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(depth.pixels.size()));
  for (Index i = 0; i < depth.pixels.size(); ++i) bytes.push_back(quantize(depth.pixels.data()[i]));
  write_netpbm(path, "P5", depth.width(), depth.height(), bytes);
}

inline void export_image(const EnhancedImage& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(img.pixels.size()));
  for (Index p = 0; p < img.pixels.rows(); ++p) {
    for (int ch = 0; ch < 3; ++ch) bytes.push_back(quantize(img.pixels(p, ch)));
  }
  write_netpbm(path, "P6", img.width, img.height, bytes);
}

struct NetpbmImage {
  int channels = 1;
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> bytes;
};

inline NetpbmImage read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading", path.string());
  std::string magic;
  int maxval = 0;
  NetpbmImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || (magic != "P5" && magic != "P6") || maxval != 255) throw ParseError("bad netpbm header", 1);
  in.get();
  img.channels = magic == "P5" ? 1 : 3;
  img.bytes.resize(static_cast<std::size_t>(img.width * img.height * img.channels));
  in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (!in) throw ParseError("truncated netpbm data", 1);
  return img;
}

}  // namespace cmgr
