#pragma once

// The trainable point encoder, the frozen depth-encoder stub, the text
// prototypes and the frozen vision-language stub behind the ForeignEncoder seam.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cmgr/core/layers.hpp"
#include "cmgr/pointset.hpp"
#include "cmgr/projection.hpp"

namespace cmgr {

struct EncoderConfig {
  Index layers = 12;
  Index dim = 64;
  Index heads = 4;
  Index tokens = 32;
  Index ffn_ratio = 2;
  Index tokenizer_hidden = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (layers < 1 || dim < 1 || heads < 1 || tokens < 1) throw InvalidArgument("encoder config: sizes must be >= 1");
    if (dim % heads != 0) throw InvalidArgument("encoder config: dim must be divisible by heads");
  }
};

// --- point grouping -------------------------------------------------------

namespace detail {

inline bool lex_less(const Mat<double>& p, Index a, Index b) {
  for (int k = 0; k < 3; ++k) {
    if (p(a, k) != p(b, k)) return p(a, k) < p(b, k);
  }
  return false;
}

inline double sq_dist(const Mat<double>& p, Index a, const RowVec<double>& c) {
  const double dx = p(a, 0) - c(0), dy = p(a, 1) - c(1), dz = p(a, 2) - c(2);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace detail

// Farthest point sampling. Starts from the point farthest from the centroid and
// breaks distance ties by coordinate order, so the result does not depend on
// the order of the input points.
inline std::vector<Index> farthest_point_sample(const Mat<double>& points, Index count) {
  const Index n = points.rows();
  if (count < 1 || count > n) throw InvalidArgument("farthest_point_sample: count must be in [1, N]");
  const RowVec<double> centroid = points.colwise().mean();
  auto better = [&](Index cand, double dc, Index best, double db) {
    return dc > db || (dc == db && detail::lex_less(points, cand, best));
  };
  Index first = 0;
  double first_d = detail::sq_dist(points, 0, centroid);
  for (Index i = 1; i < n; ++i) {
    const double d = detail::sq_dist(points, i, centroid);
    if (better(i, d, first, first_d)) {
      first = i;
      first_d = d;
    }
  }
  std::vector<Index> chosen{first};
  std::vector<double> mind(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Index last = first;
  while (static_cast<Index>(chosen.size()) < count) {
    const RowVec<double> lp = points.row(last);
    Index best = -1;
    double best_d = -1.0;
    for (Index i = 0; i < n; ++i) {
      double& m = mind[static_cast<std::size_t>(i)];
      m = std::min(m, detail::sq_dist(points, i, lp));
      if (best < 0 || better(i, m, best, best_d)) {
        best = i;
        best_d = m;
      }
    }
    chosen.push_back(best);
    last = best;
  }
  return chosen;
}

// Token neighbourhoods: `centers` (T x 3) and neighbour offsets from each
// centre stacked group by group ((T * k) x 3).
struct PointGroups {
  Mat<double> centers;
  Mat<double> offsets;
  Index group_size = 0;
};

// Each group holds the ceil(N / tokens) nearest points of its centre, so a
// single token covers the whole cloud.
inline PointGroups group_points(const PointCloud& pc, Index tokens) {
  const Index n = pc.points.rows();
  if (tokens < 1) throw InvalidArgument("tokenize: tokens must be >= 1");
  if (tokens > n) throw InvalidArgument("tokenize: more tokens than points");
  const auto centers = farthest_point_sample(pc.points, tokens);
  const Index k = (n + tokens - 1) / tokens;
  PointGroups g;
  g.group_size = k;
  g.centers.resize(tokens, 3);
  g.offsets.resize(tokens * k, 3);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::vector<double> d(static_cast<std::size_t>(n));
  for (Index t = 0; t < tokens; ++t) {
    const RowVec<double> c = pc.points.row(centers[static_cast<std::size_t>(t)]);
    g.centers.row(t) = c;
    for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = detail::sq_dist(pc.points, i, c);
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      const double da = d[static_cast<std::size_t>(a)], db = d[static_cast<std::size_t>(b)];
      return da < db || (da == db && detail::lex_less(pc.points, a, b));
    });
    for (Index j = 0; j < k; ++j) g.offsets.row(t * k + j) = pc.points.row(order[static_cast<std::size_t>(j)]) - c;
  }
  return g;
}

// --- point encoder --------------------------------------------------------

// Called in place of block `layer`; returning std::nullopt runs the block's own
// self-attention.
template <typename T>
using BlockOverride = std::function<std::optional<Var<T>>(std::size_t layer, Var<T> tokens)>;

template <typename T>
struct PointForward {
  std::vector<Var<T>> intermediates;  // input of each block
  Var<T> last;                        // output of the last block
  Var<T> final;                       // pooled, projected feature (1 x dim)
};

template <typename T>
struct PointFeatureSet {
  std::vector<Mat<T>> intermediates;
  RowVec<T> final;
};

struct PointEncoder {
  EncoderConfig config;
  bool initialized = false;
  Linear group_in;
  Linear group_out;
  Linear position;
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;
  Linear final_proj;

  template <typename T>
  static PointEncoder create(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng,
                             const std::string& prefix = "point") {
    cfg.validate();
    PointEncoder e;
    e.config = cfg;
    e.group_in = Linear::create(store, prefix + ".group_in", 3, cfg.tokenizer_hidden, rng);
    e.group_out = Linear::create(store, prefix + ".group_out", cfg.tokenizer_hidden, cfg.dim, rng);
    e.position = Linear::create(store, prefix + ".position", 3, cfg.dim, rng);
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    for (Index i = 0; i < cfg.layers; ++i) {
      e.blocks.push_back(TransformerBlock::create(store, prefix + ".block" + std::to_string(i), cfg.dim, cfg.heads,
                                                  cfg.dim * cfg.ffn_ratio, rng, residual_gain));
    }
    e.final_norm = LayerNorm::create(store, prefix + ".final_norm", cfg.dim);
    e.final_proj = Linear::create(store, prefix + ".final_proj", cfg.dim, cfg.dim, rng, false);
    e.initialized = true;
    return e;
  }

  // Token embeddings: a shared two-layer perceptron over each neighbourhood,
  // max-pooled, plus a linear embedding of the centre.
  template <typename T>
  Var<T> embed(ParamBinding<T>& pb, const PointGroups& g) const {
    require_initialized();
    Tape<T>& t = pb.tape();
    Var<T> offsets = t.constant(g.offsets.template cast<T>());
    Var<T> centers = t.constant(g.centers.template cast<T>());
    Var<T> h = group_out(pb, ad::relu(group_in(pb, offsets)));
    return ad::add(ad::group_max_rows(h, g.group_size), position(pb, centers));
  }

  template <typename T>
  PointForward<T> encode(ParamBinding<T>& pb, const PointGroups& g, const BlockOverride<T>& override_block = {}) const {
    PointForward<T> out;
    Var<T> x = embed(pb, g);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      out.intermediates.push_back(x);
      std::optional<Var<T>> y;
      if (override_block) y = override_block(i, x);
      x = y ? *y : blocks[i].forward(pb, x);
    }
    out.last = x;
    out.final = final_proj(pb, ad::mean_rows(final_norm(pb, x)));
    return out;
  }

  void require_initialized() const {
    if (!initialized) throw StateError("point encoder used before initialization");
  }
};

template <typename T>
Mat<T> tokenize_points(const PointEncoder& enc, const ParamStore<T>& store, const PointCloud& pc) {
  enc.require_initialized();
  Tape<T> tape;
  ParamBinding<T> pb(tape, store);
  return enc.embed(pb, group_points(pc, enc.config.tokens)).value();
}

template <typename T>
PointFeatureSet<T> encode_points(const PointEncoder& enc, const ParamStore<T>& store, const PointCloud& pc,
                                 const BlockOverride<T>& override_block = {}) {
  enc.require_initialized();
  Tape<T> tape;
  ParamBinding<T> pb(tape, store);
  auto fwd = enc.encode(pb, group_points(pc, enc.config.tokens), override_block);
  PointFeatureSet<T> fs;
  for (const auto& v : fwd.intermediates) fs.intermediates.push_back(v.value());
  fs.final = fwd.final.value();
  return fs;
}

// --- frozen depth encoder stub -------------------------------------------

struct DepthStubConfig {
  Index layers = 12;
  Index dim = 64;
  Index heads = 4;
  Index patch = 8;
  Index ffn_ratio = 2;
  Index max_tokens = 256;
  std::uint64_t seed = 0x5EED0D;
};

template <typename T>
struct DepthFeatureSet {
  std::vector<Mat<T>> intermediates;  // input of each block, averaged over views
  RowVec<T> final;                    // mean of the per-view finals
  std::vector<RowVec<T>> per_view;
};

namespace detail {

// Row-major flat indices that cut an (h x w x channels) pixel matrix into
// non-overlapping patch x patch tiles, one tile per output row.
inline std::vector<Index> patch_index(Index h, Index w, Index patch, Index channels) {
  if (h % patch != 0 || w % patch != 0) throw InvalidArgument("image size must be a multiple of the patch size");
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(h * w * channels));
  for (Index pr = 0; pr < h / patch; ++pr) {
    for (Index pc = 0; pc < w / patch; ++pc) {
      for (Index r = 0; r < patch; ++r) {
        for (Index c = 0; c < patch; ++c) {
          for (Index ch = 0; ch < channels; ++ch) {
            idx.push_back(((pr * patch + r) * w + (pc * patch + c)) * channels + ch);
          }
        }
      }
    }
  }
  return idx;
}

}  // namespace detail

// Deterministically seeded, frozen transformer over 8x8 depth patches.
template <typename T>
class DepthEncoderStub {
 public:
  explicit DepthEncoderStub(const DepthStubConfig& cfg = {}) : cfg_(cfg) {
    if (cfg.dim % cfg.heads != 0) throw InvalidArgument("depth stub: dim must be divisible by heads");
    Rng rng(cfg.seed);
    const Index pdim = cfg.patch * cfg.patch;
    embed_ = Linear::create(store_, "depth.embed", pdim, cfg.dim, rng, true, 2.0);
    Mat<T> pos(cfg.max_tokens, cfg.dim);
    for (Index i = 0; i < pos.size(); ++i) pos.data()[i] = static_cast<T>(rng.normal() * 0.5);
    position_ = store_.add("depth.position", std::move(pos));
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    for (Index i = 0; i < cfg.layers; ++i) {
      blocks_.push_back(TransformerBlock::create(store_, "depth.block" + std::to_string(i), cfg.dim, cfg.heads,
                                                 cfg.dim * cfg.ffn_ratio, rng, residual_gain));
    }
    final_norm_ = LayerNorm::create(store_, "depth.final_norm", cfg.dim);
    final_proj_ = Linear::create(store_, "depth.final_proj", cfg.dim, cfg.dim, rng, false);
    store_.freeze_all();
  }

  const DepthStubConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return store_; }
  std::uint64_t checksum() const { return store_.checksum(); }

  DepthFeatureSet<T> encode(const std::vector<DepthMap>& maps) const {
    if (maps.empty()) throw InvalidArgument("encode_depth: need at least one view");
    const Index h = maps.front().height(), w = maps.front().width();
    for (const auto& m : maps) {
      if (m.height() != h || m.width() != w) throw InvalidArgument("encode_depth: views have different resolutions");
    }
    const auto idx = detail::patch_index(h, w, cfg_.patch, 1);
    const Index tokens = (h / cfg_.patch) * (w / cfg_.patch);
    if (tokens > cfg_.max_tokens) throw InvalidArgument("encode_depth: image has too many patches");
    DepthFeatureSet<T> out;
    out.intermediates.assign(blocks_.size(), Mat<T>::Zero(tokens, cfg_.dim));
    out.final = RowVec<T>::Zero(cfg_.dim);
    for (const auto& m : maps) {
      Tape<T> tape;
      ParamBinding<T> pb(tape, store_);
      // Nearness (1 - depth): background patches carry no signal.
      Var<T> pix = ad::affine(tape.constant(m.pixels.template cast<T>()), T(-1), T(1));
      Var<T> patches = ad::gather(pix, tokens, cfg_.patch * cfg_.patch, idx);
      Var<T> x = ad::add(embed_(pb, patches), ad::slice_rows(pb(position_), 0, tokens));
      for (std::size_t i = 0; i < blocks_.size(); ++i) {
        out.intermediates[i] += x.value();
        x = blocks_[i].forward(pb, x);
      }
      RowVec<T> fin = final_proj_(pb, ad::mean_rows(final_norm_(pb, x))).value();
      out.final += fin;
      out.per_view.push_back(std::move(fin));
    }
    const T inv = T(1) / static_cast<T>(maps.size());
    for (auto& m : out.intermediates) m *= inv;
    out.final *= inv;
    return out;
  }

 private:
  DepthStubConfig cfg_;
  ParamStore<T> store_;
  Linear embed_;
  std::size_t position_ = 0;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear final_proj_;
};

// --- text prototypes ------------------------------------------------------

inline constexpr std::uint64_t kLcgMultiplier = 6364136223846793005ULL;
inline constexpr std::uint64_t kLcgIncrement = 1442695040888963407ULL;

// One unit row per class name. Row entries come from the LCG
// state <- state * 6364136223846793005 + 1442695040888963407 seeded with
// FNV-1a-64(name) XOR seed; each entry is 2 * (state >> 11) / 2^53 - 1.
inline Mat<double> text_prototypes(const std::vector<std::string>& names, std::uint64_t seed, Index dim) {
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) throw InvalidArgument("text_prototypes: duplicate class name '" + n + "'");
  }
  if (dim < 1) throw InvalidArgument("text_prototypes: dim must be >= 1");
  Mat<double> rows(static_cast<Index>(names.size()), dim);
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::uint64_t state = fnv1a(names[i]) ^ seed;
    for (Index j = 0; j < dim; ++j) {
      state = state * kLcgMultiplier + kLcgIncrement;
      rows(static_cast<Index>(i), j) = 2.0 * static_cast<double>(state >> 11) * 0x1.0p-53 - 1.0;
    }
    const double n = rows.row(static_cast<Index>(i)).norm();
    rows.row(static_cast<Index>(i)) /= n;
  }
  return rows;
}

// Class names with their prototype rows, in a fixed class order.
struct PrototypeMatrix {
  std::vector<std::string> classes;
  Mat<double> rows;

  Index index_of(const std::string& name) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == name) return static_cast<Index>(i);
    }
    throw InvalidArgument("no prototype for class '" + name + "'");
  }

  PrototypeMatrix subset(const std::vector<std::string>& names) const {
    PrototypeMatrix p;
    p.classes = names;
    p.rows.resize(static_cast<Index>(names.size()), rows.cols());
    for (std::size_t i = 0; i < names.size(); ++i) p.rows.row(static_cast<Index>(i)) = rows.row(index_of(names[i]));
    return p;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& c : classes) h = fnv1a(c, h);
    return fnv1a_values(std::span<const double>(rows.data(), static_cast<std::size_t>(rows.size())), h);
  }
};

inline PrototypeMatrix make_prototypes(const std::vector<std::string>& names, std::uint64_t seed, Index dim) {
  return {names, text_prototypes(names, seed, dim)};
}

// --- vision-language seam -------------------------------------------------

// Adapter for an image/text model: images -> unit features, names -> prototypes.
template <typename T>
class ForeignEncoder {
 public:
  virtual ~ForeignEncoder() = default;
  virtual Index dim() const = 0;
  // pixels: (h * w) x 3 variable. Returns a 1 x dim feature.
  virtual Var<T> image_features(Var<T> pixels, Index h, Index w) const = 0;
  virtual PrototypeMatrix prototypes(const std::vector<std::string>& names) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

struct VisionStubConfig {
  Index dim = 64;
  Index hidden = 64;
  Index patch = 8;
  Index max_tokens = 256;
  std::uint64_t seed = 0xC11F;
  std::uint64_t text_seed = 0x7E47;
};

// Frozen stand-in: 8x8 RGB patches -> tanh embedding -> mean -> projection ->
// unit normalization. Prototypes come from text_prototypes.
template <typename T>
class StubVisionEncoder final : public ForeignEncoder<T> {
 public:
  explicit StubVisionEncoder(const VisionStubConfig& cfg = {}) : cfg_(cfg) {
    Rng rng(cfg.seed);
    embed_ = Linear::create(store_, "vision.embed", cfg.patch * cfg.patch * 3, cfg.hidden, rng, true, 3.0);
    Mat<T> pos(cfg.max_tokens, cfg.hidden);
    for (Index i = 0; i < pos.size(); ++i) pos.data()[i] = static_cast<T>(rng.normal() * 0.2);
    position_ = store_.add("vision.position", std::move(pos));
    proj_ = Linear::create(store_, "vision.proj", cfg.hidden, cfg.dim, rng, false);
    store_.freeze_all();
  }

  Index dim() const override { return cfg_.dim; }
  const VisionStubConfig& config() const { return cfg_; }
  const ParamStore<T>& params() const { return store_; }

  Var<T> image_features(Var<T> pixels, Index h, Index w) const override {
    if (pixels.rows() != h * w || pixels.cols() != 3) throw InvalidArgument("image_features: expected (h*w) x 3 pixels");
    Tape<T>& tape = *pixels.tape;
    ParamBinding<T> pb(tape, store_);
    const Index tokens = (h / cfg_.patch) * (w / cfg_.patch);
    if (tokens > cfg_.max_tokens) throw InvalidArgument("image_features: image has too many patches");
    Var<T> centered = ad::affine(pixels, T(1), T(-0.5));
    Var<T> patches = ad::gather(centered, tokens, cfg_.patch * cfg_.patch * 3, patch_index(h, w));
    Var<T> hdn = ad::tanh(ad::add(embed_(pb, patches), ad::slice_rows(pb(position_), 0, tokens)));
    return ad::row_normalize(proj_(pb, ad::mean_rows(hdn)));
  }

  PrototypeMatrix prototypes(const std::vector<std::string>& names) const override {
    return make_prototypes(names, cfg_.text_seed, cfg_.dim);
  }

  std::uint64_t checksum() const override { return store_.checksum(); }

 private:
  const std::vector<Index>& patch_index(Index h, Index w) const {
    if (h != cached_h_ || w != cached_w_) {
      cached_index_ = detail::patch_index(h, w, cfg_.patch, 3);
      cached_h_ = h;
      cached_w_ = w;
    }
    return cached_index_;
  }

  VisionStubConfig cfg_;
  ParamStore<T> store_;
  Linear embed_;
  std::size_t position_ = 0;
  Linear proj_;
  // Memoized gather pattern for the last image size; not thread-safe.
  mutable Index cached_h_ = -1;
  mutable Index cached_w_ = -1;
  mutable std::vector<Index> cached_index_;
};

// Mean over views of (image feature . prototype row) / temperature, as a 1 x C variable.
template <typename T>
Var<T> zero_shot_logits(const std::vector<Var<T>>& view_pixels, Index h, Index w, const ForeignEncoder<T>& enc,
                        const Mat<T>& prototypes, T temperature) {
  if (view_pixels.empty()) throw InvalidArgument("zero_shot_logits: no images");
  if (!(temperature > T(0))) throw InvalidArgument("zero_shot_logits: temperature must be > 0");
  std::vector<Var<T>> feats;
  for (const auto& px : view_pixels) feats.push_back(enc.image_features(px, h, w));
  Tape<T>& t = *view_pixels.front().tape;
  Var<T> f = ad::concat_rows(feats);
  Var<T> scores = ad::matmul_nt(f, t.constant(prototypes));
  return ad::scale(ad::mean_rows(scores), T(1) / temperature);
}

template <typename T>
RowVec<T> zero_shot_logits(const std::vector<EnhancedImage>& images, const ForeignEncoder<T>& enc,
                           const PrototypeMatrix& prototypes, T temperature) {
  if (images.empty()) throw InvalidArgument("zero_shot_logits: no images");
  Tape<T> tape;
  std::vector<Var<T>> px;
  for (const auto& img : images) {
    if (img.height != images.front().height || img.width != images.front().width) {
      throw InvalidArgument("zero_shot_logits: images differ in size");
    }
    px.push_back(tape.constant(img.pixels.template cast<T>()));
  }
  return zero_shot_logits(px, images.front().height, images.front().width, enc,
                          Mat<T>(prototypes.rows.template cast<T>()), temperature)
      .value();
}

}  // namespace cmgr
