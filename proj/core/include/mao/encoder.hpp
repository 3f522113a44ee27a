#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mao/image.hpp"
#include "mao/numkit.hpp"

namespace mao {

struct EncoderConfig {
  int image_side = 32;
  int patch_side = 8;
  int layers = 2;
  int heads = 2;
  int embed_dim = 64;
  double mlp_ratio = 2.0;
  int channels = 3;
  std::uint64_t seed = 0;

  // Throws Error on inconsistent sizes.
  void validate() const;

  int grid_side() const { return image_side / patch_side; }
  int patch_count() const { return grid_side() * grid_side(); }
  int tokens() const { return 1 + patch_count(); }
  int head_dim() const { return embed_dim / heads; }
  int mlp_dim() const;
  int patch_dim() const { return patch_side * patch_side * channels; }

  bool operator==(const EncoderConfig&) const = default;
};

// Named parameter tensors of one encoder. Names are sorted (std::map), which
// fixes the serialization order.
struct WeightStore {
  EncoderConfig config;
  int adapter_rank = 0;
  std::map<std::string, Tensor> tensors;

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  bool has_adapters() const { return adapter_rank > 0; }

  bool operator==(const WeightStore&) const = default;
};

// Projections that carry low-rank adapters.
inline constexpr const char* kAdaptedProjections[] = {"q", "k", "v", "o"};

// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization; biases and
// norm shifts start at 0, norm scales at 1.
WeightStore init_encoder(const EncoderConfig& config);

// Adds rank-r adapter pairs to the q/k/v/o projections of every block:
// W_eff = W + B A with A (r x d) seeded uniform and B (d x r) zero, so the
// adapted store initially computes exactly the base function.
void add_adapters(WeightStore& weights, int rank, std::uint64_t seed);

// Names of the tensors that training updates: adapter factors when present,
// otherwise every tensor.
std::vector<std::string> trainable_tensor_names(const WeightStore& weights);

// Binary weights file: "MAOW1\n", an 8-byte little-endian header length,
// a text header (config line, then "name dtype d0,d1,..." per tensor), then
// little-endian float64 blobs in header order.
void persist_weights(const WeightStore& weights, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_weights(const WeightStore& weights);
WeightStore deserialize_weights(const std::vector<std::uint8_t>& bytes);

// Activations of one block, kept for the reverse pass.
struct LayerCache {
  Matrix input;
  Matrix norm1_hat;
  Vector norm1_rstd;
  Matrix norm1_out;
  Matrix q, k, v;
  std::vector<Matrix> attention;  // one n x n map per head (post-softmax)
  Matrix attended;                // concatenated head outputs
  Matrix mid;                     // input + attention branch
  Matrix norm2_hat;
  Vector norm2_rstd;
  Matrix norm2_out;
  Matrix hidden_pre;
  Matrix hidden;
};

// Per-layer attention maps of a forward pass plus every activation the
// reverse pass needs.
struct AttentionTrace {
  EncoderConfig config;
  Matrix patches;  // patch_count x patch_dim
  std::vector<LayerCache> layers;
  Vector final_hat;
  double final_rstd = 0.0;
  Vector cls_out;  // final-norm output before L2 normalization
  double cls_norm = 0.0;
  Descriptor descriptor;

  // A^l as an h x n x n tensor.
  Tensor attention_map(int layer) const;
};

struct EncodeResult {
  Descriptor descriptor;
  AttentionTrace trace;
};

// Replaces the softmax output of one layer with a caller-supplied h x n x n
// tensor. Used to probe attention gradients by finite differences.
struct AttentionOverride {
  int layer = 0;
  Tensor maps;
};

// Gradients of a reverse pass seeded with one or more vectors on the
// descriptor. attention[l] has one row per seed and h*n*n columns laid out
// (head, source token i, target token j) row-major.
struct BackwardResult {
  std::vector<Matrix> attention;
  std::map<std::string, Tensor> params;
};

// Forward/backward evaluator bound to one WeightStore. Adapter products are
// folded into effective projection matrices at construction. Immutable after
// construction, so concurrent encode calls are safe.
class Encoder {
 public:
  explicit Encoder(const WeightStore& weights);

  const EncoderConfig& config() const { return config_; }
  const WeightStore& weights() const { return *weights_; }

  EncodeResult encode(const ImageGrid& crop,
                      const std::optional<AttentionOverride>& override_maps = std::nullopt) const;

  // Seeds: S x d, row s is dL/dv for seed s. With want_params, gradients of
  // sum over seeds with respect to the trainable tensors are accumulated.
  BackwardResult backward(const AttentionTrace& trace, const Matrix& seeds,
                          bool want_attention, bool want_params) const;

 private:
  struct Block {
    Matrix wq, wk, wv, wo;  // effective (base + adapter) projections
    Vector bq, bk, bv, bo;
    Vector n1_w, n1_b, n2_w, n2_b;
    Matrix fc1, fc2;
    Vector fc1_b, fc2_b;
  };

  void check_trace(const AttentionTrace& trace) const;

  const WeightStore* weights_;
  EncoderConfig config_;
  Matrix patch_w_;
  Vector patch_b_, cls_, norm_w_, norm_b_;
  Matrix pos_;
  std::vector<Block> blocks_;
};

Matrix extract_patches(const ImageGrid& crop, const EncoderConfig& config);

// Free-function forms of the encoder operations.
EncodeResult encode(const WeightStore& weights, const ImageGrid& crop);

// ds/dA^l for s = cosine(direction, v), one h x n x n tensor per layer.
// Gradients treat each A^l as a leaf; downstream layers are differentiated in
// full. Throws for a zero direction or a trace from another configuration.
std::vector<Tensor> attention_gradient(const WeightStore& weights, const AttentionTrace& trace,
                                       const Descriptor& direction);

// dv/dA^l per layer, d x (h*n*n). For a unit u, u^T J^l equals
// attention_gradient(..., u) flattened.
std::vector<Matrix> attention_jacobian(const WeightStore& weights, const AttentionTrace& trace);
std::vector<Matrix> attention_jacobian(const Encoder& encoder, const AttentionTrace& trace);

}  // namespace mao
