// SPDX-License-Identifier: Apache-2.0
//
// Transformer backbone shared by every variant.
//
// A sequence is laid out as
//
//   [BOS, text_1 .. text_N] [res 0: x_T .. x_1] [res 1: x_T .. x_1] ... [AR tail]
//
// where each x_t is a chunk of K patch tokens in raster order. The prefix is
// always present (BOS alone when there is no text); it gives every image chunk
// a fixed key at a known rotary offset. The AR tail holds the first K-1 clean
// tokens and exists only for dart-ar, so that the last level can be decoded
// token by token.
//
// Rotary level positions decrease along the sequence: chunk x_t of the last
// resolution sits at t, earlier resolutions are shifted by the level counts
// that follow them, and prefix token n sits at total_levels + 1 + max_text - n.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dart/autodiff.hpp"
#include "dart/tensor.hpp"
#include "json.hpp"

namespace dart {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { dart, dart_ar, dart_fm, markov };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);

// Pixel grid and number of noise levels of one resolution.
struct ResolutionSpec {
  int height = 1;
  int width = 1;
  int levels = 8;
};

struct ModelConfig {
  Variant variant = Variant::dart;
  int layers = 2;
  int hidden = 64;
  int heads = 4;
  int ffn_hidden = 0;  // 0 picks 8/3 * hidden rounded up to a multiple of 8
  int image_channels = 2;
  int patch = 1;
  std::vector<ResolutionSpec> resolutions{ResolutionSpec{}};
  std::array<int, 3> rope_dims{0, 0, 0};  // (level, row, col); zeros pick the 2:3:3 default
  double rope_base = 10000.0;
  bool per_head_rmsnorm = true;
  int num_classes = 0;  // class id num_classes is the null condition
  int vocab = 0;        // > 0 enables the discrete prefix and logits head
  int max_text = 0;     // longest text prefix; fixes the rotary positions of the prefix
  int flow_hidden = 0;  // 0 means hidden
  int flow_blocks = 3;
  int markov_levels = 128;  // level count of the Markovian baseline

  int token_channels() const { return image_channels * patch * patch; }
  int head_dim() const { return hidden / heads; }
  int ffn() const;
  int flow_width() const { return flow_hidden > 0 ? flow_hidden : hidden; }
  int num_resolutions() const { return static_cast<int>(resolutions.size()); }
  int grid_rows(int res) const { return resolutions.at(static_cast<std::size_t>(res)).height / patch; }
  int grid_cols(int res) const { return resolutions.at(static_cast<std::size_t>(res)).width / patch; }
  int tokens(int res = 0) const { return grid_rows(res) * grid_cols(res); }
  int levels(int res = 0) const { return resolutions.at(static_cast<std::size_t>(res)).levels; }
  int total_levels() const;
  // Upsampling ratio of resolution `res` relative to resolution 0.
  int ratio(int res) const;
  std::array<int, 3> rope_axes() const;

  // Throws ConfigError on any inconsistency.
  void validate() const;

  nlohmann::json to_json() const;
  // Unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);
};

struct Chunk {
  int res = 0;
  int level = 0;  // 0 marks the dart-ar clean tail
  std::int64_t begin = 0;
  std::int64_t length = 0;
};

struct Layout {
  std::int64_t prefix = 1;                   // BOS plus text tokens
  std::vector<Chunk> chunks;                 // image chunks in sequence order
  std::vector<std::array<double, 3>> pos;    // rotary position (level, row, col) per position
  std::vector<int> chunk_of;                 // chunk index, -1 in the prefix
  std::vector<int> token_of;                 // token index within its chunk or prefix
  std::vector<std::int64_t> ref_of;          // dart-ar: position of the token the readout here is
                                             // reconstructed against; the position itself elsewhere
  BoolMatrix mask;                           // visibility [length, length]

  std::int64_t length() const { return static_cast<std::int64_t>(pos.size()); }
  // Index into `chunks` of (res, level); throws if absent.
  int find(int res, int level) const;
};

// `text_tokens` counts prefix tokens after BOS.
Layout make_layout(const ModelConfig& cfg, int text_tokens = 0);

// Visibility over T chunks of K image tokens, no prefix: block-causal for
// dart / dart-fm, token-causal for dart-ar.
BoolMatrix build_mask(int T, int K, Variant variant);

// Angles of the head_dim/2 rotation pairs at position (level, row, col):
// level pairs first, then row, then col; pair i of an axis with dimension d
// turns by pos * base^(-2i/d).
std::vector<double> rope_phases(const ModelConfig& cfg, double level, double row, double col);

// Rotary position of token (i, j) of resolution `res`: spatial coordinates are
// divided by the upsampling ratio.
std::array<double, 2> spatial_position(const ModelConfig& cfg, int res, int i, int j);

// --- parameters ---------------------------------------------------------------

template <typename S>
using ParameterStore = std::map<std::string, Tensor<S>>;

ParameterStore<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

// Shapes of every parameter, without allocating.
std::map<std::string, Shape> parameter_manifest(const ModelConfig& cfg);
std::int64_t count_parameters(const std::map<std::string, Shape>& manifest, const std::string& prefix = "");
std::int64_t count_parameters(const ParameterStore<float>& store);

template <typename U, typename S>
ParameterStore<U> cast_store(const ParameterStore<S>& store) {
  ParameterStore<U> out;
  for (const auto& [name, t] : store) {
    out.emplace(name, t.template cast<U>());
  }
  return out;
}

using Bound = std::map<std::string, ad::Var>;

// Registers every tensor as a graph parameter.
template <typename S>
Bound bind(ad::Graph<S>& g, const ParameterStore<S>& store);

// --- forward ------------------------------------------------------------------

template <typename S>
struct KVCache {
  std::int64_t batch = 0;
  std::int64_t capacity = 0;
  std::int64_t width = 0;
  std::int64_t length = 0;
  std::vector<std::vector<S>> keys;    // per layer [batch, capacity, width]
  std::vector<std::vector<S>> values;
  std::vector<S> tokens;               // [batch, capacity, C] image inputs, for dart-ar references

  KVCache() = default;
  KVCache(const ModelConfig& cfg, std::int64_t batch, std::int64_t capacity);
};

template <typename S>
struct ModelInput {
  std::int64_t batch = 1;
  Tensor<S> tokens;                   // [batch * n, C], rows of prefix positions ignored
  std::vector<std::int64_t> ids;      // [batch * n], prefix token ids, -1 at image positions
  std::vector<std::int64_t> classes;  // [batch]
  std::vector<double> time;           // [batch], t / markov_levels for the baseline only
};

struct ModelOutput {
  ad::Var v;       // [batch * n, C] v-prediction
  ad::Var c;       // [batch * n, hidden] final-norm features
  ad::Var logits;  // [batch * n, vocab], valid only if vocab > 0
};

// Runs positions [begin, end) of `layout`. Without a cache begin must be 0;
// with a cache, cache->length must equal begin and is advanced to end.
template <typename S>
ModelOutput forward(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const Layout& layout,
                    const ModelInput<S>& in, std::int64_t begin, std::int64_t end, KVCache<S>* cache = nullptr);

// Sinusoidal embedding of a scalar, `dim` even: [sin(s f_i), cos(s f_i)], f_i = 1000 * 10000^(-i/(dim/2)).
std::vector<double> sinusoid(double s, int dim);

inline constexpr int kFlowTimeDim = 32;

// Velocity of the flow head at interpolation time tau (one per row, in [0, 1]).
template <typename S>
ad::Var flow_velocity(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, ad::Var state, ad::Var c,
                      std::span<const S> tau);

// --- images -------------------------------------------------------------------

// [C0, H, W] -> [K, C0 * p * p], patches in raster order, channel-major inside a patch.
template <typename S>
Tensor<S> patchify(const Tensor<S>& image, int patch);
template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, int channels, int height, int width, int patch);

// --- checkpoints --------------------------------------------------------------

struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, Tensor<float>> tensors;
};

// Writes `<path>.json` (meta plus {name, shape, dtype, offset, length} per
// tensor, byte units) and `<path>.bin` (concatenated little-endian f32).
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dart
