#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "remote/autograd.hpp"
#include "remote/config.hpp"
#include "remote/params.hpp"
#include "remote/sample.hpp"

namespace remote {

enum class Modality { kText, kVision };

inline const char* modality_name(Modality m) { return m == Modality::kText ? "text" : "vision"; }

/// Per-layer features F^0..F^{L-1} of one modality for one sample.
template <std::floating_point T>
struct MultilevelFeatures {
  Modality modality = Modality::kText;
  std::vector<Var<T>> layers;
  // Vision stacks hold objects back to back; each object owns this many rows.
  std::size_t rows_per_object = 0;

  std::size_t depth() const { return layers.size(); }
  const Var<T>& top() const { return layers.back(); }
  std::size_t rows() const { return layers.front().rows(); }
};

/// Patches per object for an H×W grid cut into P×P patches.
inline std::size_t patch_count(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("object grid " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
  return (height / patch) * (width / patch);
}

/// Standard transformer sinusoids: sin on even columns, cos on odd columns.
template <std::floating_point T>
BasicTensor<T> sinusoidal_positions(std::size_t n, std::size_t d) {
  BasicTensor<T> pe(Shape{n, d});
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Row p holds sin/cos(2^m·π·s) for s in (patch row, patch col, cx, cy, w, h)
/// and m < frequencies; 12·frequencies columns.
template <std::floating_point T>
BasicTensor<T> patch_position_features(const ObjectDescriptor& obj, std::size_t patch, std::size_t frequencies) {
  const std::size_t u = patch_count(obj.height, obj.width, patch);
  const std::size_t grid_cols = obj.width / patch, grid_rows = obj.height / patch;
  BasicTensor<T> out(Shape{u, 12 * frequencies});
  for (std::size_t p = 0; p < u; ++p) {
    const double row = (static_cast<double>(p / grid_cols) + 0.5) / static_cast<double>(grid_rows);
    const double col = (static_cast<double>(p % grid_cols) + 0.5) / static_cast<double>(grid_cols);
    const std::array<double, 6> s{row, col, obj.position.cx, obj.position.cy, obj.position.w, obj.position.h};
    std::size_t c = 0;
    for (double v : s) {
      for (std::size_t m = 0; m < frequencies; ++m) {
        const double angle = std::ldexp(std::numbers::pi, static_cast<int>(m)) * v;
        out(p, c++) = static_cast<T>(std::sin(angle));
        out(p, c++) = static_cast<T>(std::cos(angle));
      }
    }
  }
  return out;
}

/// Flattened patches: u × (channels·P²), patch-major in raster order.
template <std::floating_point T>
BasicTensor<T> patch_matrix(const std::vector<float>& grid, std::size_t height, std::size_t width, std::size_t channels,
                            std::size_t patch) {
  const std::size_t u = patch_count(height, width, patch);
  const std::size_t grid_cols = width / patch;
  BasicTensor<T> out(Shape{u, channels * patch * patch});
  for (std::size_t p = 0; p < u; ++p) {
    const std::size_t y0 = (p / grid_cols) * patch, x0 = (p % grid_cols) * patch;
    std::size_t c = 0;
    for (std::size_t y = 0; y < patch; ++y)
      for (std::size_t x = 0; x < patch; ++x)
        for (std::size_t ch = 0; ch < channels; ++ch)
          out(p, c++) = static_cast<T>(grid[((y0 + y) * width + (x0 + x)) * channels + ch]);
  }
  return out;
}

template <std::floating_point T>
void add_block_params(ParameterStore<T>& store, const std::string& prefix, std::size_t d, std::size_t hidden,
                      std::mt19937_64& rng, double scale) {
  store.add(prefix + ".wq", "encoder", scaled_normal<T>({d, d}, rng, scale));
  store.add(prefix + ".wk", "encoder", scaled_normal<T>({d, d}, rng, scale));
  store.add(prefix + ".wv", "encoder", scaled_normal<T>({d, d}, rng, scale));
  store.add(prefix + ".w1", "encoder", scaled_normal<T>({d, hidden}, rng, scale));
  store.add(prefix + ".b1", "encoder", BasicTensor<T>(Shape{1, hidden}));
  store.add(prefix + ".w2", "encoder", scaled_normal<T>({hidden, d}, rng, scale));
  store.add(prefix + ".b2", "encoder", BasicTensor<T>(Shape{1, d}));
}

template <std::floating_point T>
void add_encoder_params(ParameterStore<T>& store, const RunConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.d, p2 = cfg.patch_size * cfg.patch_size;
  store.add("text.embedding", "embeddings", scaled_normal<T>({cfg.vocab_size, d}, rng, cfg.init_scale, 1.0));
  store.add("vision.rgb_proj", "embeddings", scaled_normal<T>({3 * p2, d}, rng, cfg.init_scale));
  store.add("vision.depth_proj", "embeddings", scaled_normal<T>({p2, d}, rng, cfg.init_scale));
  store.add("vision.pos_proj", "embeddings", scaled_normal<T>({12 * cfg.pos_frequencies, d}, rng, cfg.init_scale));
  for (const char* side : {"text", "vision"})
    for (std::size_t j = 1; j < cfg.layers; ++j)
      add_block_params(store, std::string(side) + ".block" + std::to_string(j), d, cfg.ffn_width(), rng,
                       cfg.init_scale);
}

/// Token embeddings plus sinusoidal positions. With the caption channel off,
/// caption-interior rows are zeroed before positions are added.
template <std::floating_point T>
Var<T> embed_text(Leaves<T>& leaves, const SampleRecord& sample, const RunConfig& cfg) {
  Tape<T>& tape = leaves.tape();
  const std::size_t n = sample.tokens.size(), d = cfg.d;
  Var<T> x = embedding(leaves("text.embedding"), std::span<const int>(sample.tokens));
  if (!cfg.features.caption) {
    BasicTensor<T> keep = BasicTensor<T>::full(Shape{n, d}, T{1});
    for (const Span& s : sample.caption_spans)
      for (std::size_t i = s.begin; i < s.end; ++i)
        for (std::size_t k = 0; k < d; ++k) keep(i, k) = T{0};
    x = mul(x, tape.constant(std::move(keep)));
  }
  return add(x, tape.constant(sinusoidal_positions<T>(n, d)));
}

/// [E_RGB ⊕ E_POS ; E_DEPTH ⊕ E_POS], 2u×d. The position channel drops E_POS
/// and the depth channel zeroes the depth grid.
template <std::floating_point T>
Var<T> patchify_object(Leaves<T>& leaves, const ObjectDescriptor& obj, const RunConfig& cfg) {
  Tape<T>& tape = leaves.tape();
  const std::size_t p = cfg.patch_size;
  Var<T> rgb = matmul(tape.constant(patch_matrix<T>(obj.rgb, obj.height, obj.width, 3, p)), leaves("vision.rgb_proj"));
  BasicTensor<T> depth_patches = patch_matrix<T>(obj.depth, obj.height, obj.width, 1, p);
  if (!cfg.features.depth) depth_patches = BasicTensor<T>(depth_patches.shape());
  Var<T> depth = matmul(tape.constant(std::move(depth_patches)), leaves("vision.depth_proj"));
  if (cfg.features.position) {
    Var<T> pos = matmul(tape.constant(patch_position_features<T>(obj, p, cfg.pos_frequencies)), leaves("vision.pos_proj"));
    rgb = add(rgb, pos);
    depth = add(depth, pos);
  }
  return concat<T>({rgb, depth}, 0);
}

/// h = x + softmax(xWq(xWk)ᵀ/√d)·xWv, then h + tanh(hW1 + b1)W2 + b2.
template <std::floating_point T>
Var<T> encoder_block(Leaves<T>& leaves, const Var<T>& x, const std::string& prefix) {
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(x.cols()));
  Var<T> q = matmul(x, leaves(prefix + ".wq"));
  Var<T> k = matmul(x, leaves(prefix + ".wk"));
  Var<T> v = matmul(x, leaves(prefix + ".wv"));
  Var<T> attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
  Var<T> h = add(x, matmul(attn, v));
  Var<T> ff = tanh(add(matmul(h, leaves(prefix + ".w1")), leaves(prefix + ".b1")));
  return add(h, add(matmul(ff, leaves(prefix + ".w2")), leaves(prefix + ".b2")));
}

/// Layer 0 is the embedding; layer j applies block j to layer j-1.
template <std::floating_point T>
MultilevelFeatures<T> encode_multilevel(Leaves<T>& leaves, const Var<T>& embedded, std::size_t layers,
                                        Modality modality) {
  if (layers < 2) throw ConfigError("encode_multilevel needs L >= 2");
  MultilevelFeatures<T> out{modality, {embedded}, 0};
  for (std::size_t j = 1; j < layers; ++j) {
    out.layers.push_back(
        encoder_block(leaves, out.layers.back(), std::string(modality_name(modality)) + ".block" + std::to_string(j)));
  }
  return out;
}

/// Each object is encoded on its own; layer j stacks the objects' rows in
/// object order. A sample without objects gets one zero row so attention over
/// vision stays defined.
template <std::floating_point T>
MultilevelFeatures<T> encode_objects(Leaves<T>& leaves, const SampleRecord& sample, const RunConfig& cfg) {
  if (sample.objects.empty()) {
    const Var<T> empty = leaves.tape().constant(BasicTensor<T>(Shape{1, cfg.d}));
    return {Modality::kVision, std::vector<Var<T>>(cfg.layers, empty), 0};
  }
  std::vector<MultilevelFeatures<T>> per_object;
  for (const auto& obj : sample.objects)
    per_object.push_back(encode_multilevel(leaves, patchify_object(leaves, obj, cfg), cfg.layers, Modality::kVision));
  const std::size_t rows = per_object.front().rows();
  MultilevelFeatures<T> out{Modality::kVision, {}, rows};
  for (std::size_t j = 0; j < cfg.layers; ++j) {
    std::vector<Var<T>> parts;
    for (const auto& f : per_object) {
      if (f.rows() != rows) throw DataError("sample '" + sample.sample_id + "': objects differ in patch count");
      parts.push_back(f.layers[j]);
    }
    out.layers.push_back(parts.size() == 1 ? parts.front() : concat<T>(std::span<const Var<T>>(parts), 0));
  }
  return out;
}

}  // namespace remote
