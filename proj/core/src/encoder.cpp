#include "mao/encoder.hpp"

#include <cmath>

namespace mao {
namespace {

constexpr double kNormEps = 1e-6;

using MatMap = Eigen::Map<const Matrix>;
using VecMap = Eigen::Map<const Vector>;

std::string block_name(int layer, const std::string& leaf) {
  return "blocks." + std::to_string(layer) + "." + leaf;
}

Matrix as_matrix(const Tensor& t) {
  if (t.rank() != 2) throw Error("expected a rank-2 tensor, got " + shape_string(t.shape));
  return MatMap(t.data.data(), static_cast<Eigen::Index>(t.dim(0)),
                static_cast<Eigen::Index>(t.dim(1)));
}

Vector as_vector(const Tensor& t) {
  return VecMap(t.data.data(), static_cast<Eigen::Index>(t.size()));
}

Tensor to_tensor(const Matrix& m) {
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::vector<double>(m.data(), m.data() + m.size()));
}

Tensor to_tensor(const Vector& v) {
  return Tensor({static_cast<std::size_t>(v.size())},
                std::vector<double>(v.data(), v.data() + v.size()));
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (double& x : t.data) x = rng.uniform(-bound, bound);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

// Row-wise layer norm; returns normalized rows and records xhat / rstd.
Matrix layer_norm(const Matrix& x, const Vector& w, const Vector& b, Matrix& xhat,
                  Vector& rstd) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  Matrix out(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    rstd[r] = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
    out.row(r) = xhat.row(r).array() * w.transpose().array() + b.transpose().array();
  }
  return out;
}

// Reverse of layer_norm for stacked seeds: row r belongs to token r % n.
Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& xhat, const Vector& rstd,
                           const Vector& w) {
  const Eigen::Index n = xhat.rows();
  const Eigen::Index d = xhat.cols();
  Matrix grad_in(grad_out.rows(), d);
  for (Eigen::Index r = 0; r < grad_out.rows(); ++r) {
    const Eigen::Index t = r % n;
    const Eigen::RowVectorXd gh = grad_out.row(r).array() * w.transpose().array();
    const double mean_g = gh.mean();
    const double mean_gx = (gh.array() * xhat.row(t).array()).mean();
    grad_in.row(r) = rstd[t] * (gh.array() - mean_g - xhat.row(t).array() * mean_gx);
  }
  return grad_in;
}

// Accumulates the stacked-seed sum of dL/dscale and dL/dshift of a norm.
void layer_norm_param_grads(const Matrix& grad_out, const Matrix& xhat, Vector& gw, Vector& gb) {
  const Eigen::Index n = xhat.rows();
  for (Eigen::Index r = 0; r < grad_out.rows(); ++r) {
    gw += (grad_out.row(r).array() * xhat.row(r % n).array()).matrix().transpose();
    gb += grad_out.row(r).transpose();
  }
}

// Sum over seeds of per-seed (grad^T input), input shared by every seed.
Matrix stacked_outer(const Matrix& grad, const Matrix& input) {
  const Eigen::Index n = input.rows();
  const Eigen::Index seeds = grad.rows() / n;
  Matrix acc = Matrix::Zero(grad.cols(), input.cols());
  for (Eigen::Index s = 0; s < seeds; ++s) {
    acc.noalias() += grad.middleRows(s * n, n).transpose() * input;
  }
  return acc;
}

Vector column_sum(const Matrix& m) { return m.colwise().sum().transpose(); }

// Accumulates into grads[name] (creating it with the given shape on first use).
void accumulate(std::map<std::string, Tensor>& grads, const std::string& name,
                const Matrix& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, to_tensor(g));
    return;
  }
  Eigen::Map<Matrix>(it->second.data.data(), g.rows(), g.cols()) += g;
}

void accumulate(std::map<std::string, Tensor>& grads, const std::string& name,
                const Vector& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, to_tensor(g));
    return;
  }
  Eigen::Map<Vector>(it->second.data.data(), g.size()) += g;
}

}  // namespace

void EncoderConfig::validate() const {
  if (image_side <= 0 || patch_side <= 0 || layers <= 0 || heads <= 0 || embed_dim <= 0 ||
      channels <= 0) {
    throw Error("encoder config: extents must be positive");
  }
  if (image_side % patch_side != 0) {
    throw Error("encoder config: image_side " + std::to_string(image_side) +
                " not divisible by patch_side " + std::to_string(patch_side));
  }
  if (embed_dim % heads != 0) {
    throw Error("encoder config: embed_dim " + std::to_string(embed_dim) +
                " not divisible by heads " + std::to_string(heads));
  }
  if (!(mlp_ratio > 0.0) || mlp_dim() <= 0) throw Error("encoder config: bad mlp_ratio");
}

int EncoderConfig::mlp_dim() const {
  return static_cast<int>(std::lround(mlp_ratio * embed_dim));
}

const Tensor& WeightStore::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("weight store: missing tensor '" + name + "'");
  return it->second;
}

Tensor& WeightStore::get(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("weight store: missing tensor '" + name + "'");
  return it->second;
}

WeightStore init_encoder(const EncoderConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.embed_dim);
  const auto m = static_cast<std::size_t>(config.mlp_dim());
  const auto p = static_cast<std::size_t>(config.patch_dim());
  const auto n = static_cast<std::size_t>(config.tokens());

  WeightStore store;
  store.config = config;
  Rng rng(config.seed);
  auto add = [&](const std::string& name, std::vector<std::size_t> shape, double bound,
                 double fill = 0.0) {
    Tensor t(std::move(shape), fill);
    if (bound > 0.0) fill_uniform(t, bound, rng);
    store.tensors.emplace(name, std::move(t));
  };
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // Draw order is fixed here, independent of map order.
  add("patch_embed.weight", {d, p}, 1.0 / std::sqrt(static_cast<double>(p)));
  add("patch_embed.bias", {d}, 0.0);
  add("cls_token", {d}, inv_sqrt_d);
  add("pos_embed", {n, d}, inv_sqrt_d);
  for (int l = 0; l < config.layers; ++l) {
    add(block_name(l, "norm1.weight"), {d}, 0.0, 1.0);
    add(block_name(l, "norm1.bias"), {d}, 0.0);
    for (const char* proj : kAdaptedProjections) {
      add(block_name(l, std::string("attn.") + proj + ".weight"), {d, d}, inv_sqrt_d);
      add(block_name(l, std::string("attn.") + proj + ".bias"), {d}, 0.0);
    }
    add(block_name(l, "norm2.weight"), {d}, 0.0, 1.0);
    add(block_name(l, "norm2.bias"), {d}, 0.0);
    add(block_name(l, "mlp.fc1.weight"), {m, d}, inv_sqrt_d);
    add(block_name(l, "mlp.fc1.bias"), {m}, 0.0);
    add(block_name(l, "mlp.fc2.weight"), {d, m}, 1.0 / std::sqrt(static_cast<double>(m)));
    add(block_name(l, "mlp.fc2.bias"), {d}, 0.0);
  }
  add("norm.weight", {d}, 0.0, 1.0);
  add("norm.bias", {d}, 0.0);
  return store;
}

void add_adapters(WeightStore& weights, int rank, std::uint64_t seed) {
  if (rank <= 0) throw Error("add_adapters: rank must be positive");
  if (weights.has_adapters()) throw Error("add_adapters: store already carries adapters");
  const auto d = static_cast<std::size_t>(weights.config.embed_dim);
  const auto r = static_cast<std::size_t>(rank);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < weights.config.layers; ++l) {
    for (const char* proj : kAdaptedProjections) {
      const std::string base = block_name(l, std::string("attn.") + proj);
      Tensor a({r, d});
      fill_uniform(a, bound, rng);
      weights.tensors.emplace(base + ".lora_a", std::move(a));
      weights.tensors.emplace(base + ".lora_b", Tensor({d, r}, 0.0));
    }
  }
  weights.adapter_rank = rank;
}

std::vector<std::string> trainable_tensor_names(const WeightStore& weights) {
  std::vector<std::string> names;
  for (const auto& [name, tensor] : weights.tensors) {
    const bool adapter = name.ends_with(".lora_a") || name.ends_with(".lora_b");
    if (weights.has_adapters() == adapter) names.push_back(name);
  }
  return names;
}

Tensor AttentionTrace::attention_map(int layer) const {
  const auto& maps = layers.at(static_cast<std::size_t>(layer)).attention;
  const auto n = static_cast<std::size_t>(config.tokens());
  Tensor t({maps.size(), n, n});
  for (std::size_t h = 0; h < maps.size(); ++h) {
    std::copy(maps[h].data(), maps[h].data() + n * n, t.data.begin() + h * n * n);
  }
  return t;
}

Matrix extract_patches(const ImageGrid& crop, const EncoderConfig& config) {
  if (crop.width != config.image_side || crop.height != config.image_side ||
      crop.channels != config.channels) {
    throw Error("encode: crop is " + std::to_string(crop.width) + "x" +
                std::to_string(crop.height) + "x" + std::to_string(crop.channels) +
                ", encoder expects " + std::to_string(config.image_side) + "x" +
                std::to_string(config.image_side) + "x" + std::to_string(config.channels));
  }
  const int g = config.grid_side();
  const int ps = config.patch_side;
  Matrix patches(config.patch_count(), config.patch_dim());
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      const int row = py * g + px;
      int col = 0;
      for (int y = 0; y < ps; ++y) {
        for (int x = 0; x < ps; ++x) {
          for (int c = 0; c < config.channels; ++c) {
            patches(row, col++) = crop.at(px * ps + x, py * ps + y, c);
          }
        }
      }
    }
  }
  return patches;
}

Encoder::Encoder(const WeightStore& weights) : weights_(&weights), config_(weights.config) {
  config_.validate();
  patch_w_ = as_matrix(weights.get("patch_embed.weight"));
  patch_b_ = as_vector(weights.get("patch_embed.bias"));
  cls_ = as_vector(weights.get("cls_token"));
  pos_ = as_matrix(weights.get("pos_embed"));
  norm_w_ = as_vector(weights.get("norm.weight"));
  norm_b_ = as_vector(weights.get("norm.bias"));
  if (patch_w_.rows() != config_.embed_dim || patch_w_.cols() != config_.patch_dim() ||
      pos_.rows() != config_.tokens() || pos_.cols() != config_.embed_dim) {
    throw Error("weight store: embedding shapes do not match config");
  }
  auto effective = [&](int l, const char* proj) {
    const std::string base = block_name(l, std::string("attn.") + proj);
    Matrix w = as_matrix(weights.get(base + ".weight"));
    if (weights.has_adapters()) {
      w += as_matrix(weights.get(base + ".lora_b")) * as_matrix(weights.get(base + ".lora_a"));
    }
    return w;
  };
  for (int l = 0; l < config_.layers; ++l) {
    Block b;
    b.wq = effective(l, "q");
    b.wk = effective(l, "k");
    b.wv = effective(l, "v");
    b.wo = effective(l, "o");
    b.bq = as_vector(weights.get(block_name(l, "attn.q.bias")));
    b.bk = as_vector(weights.get(block_name(l, "attn.k.bias")));
    b.bv = as_vector(weights.get(block_name(l, "attn.v.bias")));
    b.bo = as_vector(weights.get(block_name(l, "attn.o.bias")));
    b.n1_w = as_vector(weights.get(block_name(l, "norm1.weight")));
    b.n1_b = as_vector(weights.get(block_name(l, "norm1.bias")));
    b.n2_w = as_vector(weights.get(block_name(l, "norm2.weight")));
    b.n2_b = as_vector(weights.get(block_name(l, "norm2.bias")));
    b.fc1 = as_matrix(weights.get(block_name(l, "mlp.fc1.weight")));
    b.fc1_b = as_vector(weights.get(block_name(l, "mlp.fc1.bias")));
    b.fc2 = as_matrix(weights.get(block_name(l, "mlp.fc2.weight")));
    b.fc2_b = as_vector(weights.get(block_name(l, "mlp.fc2.bias")));
    if (b.wq.rows() != config_.embed_dim || b.fc1.rows() != config_.mlp_dim()) {
      throw Error("weight store: block " + std::to_string(l) + " shapes do not match config");
    }
    blocks_.push_back(std::move(b));
  }
}

EncodeResult Encoder::encode(const ImageGrid& crop,
                             const std::optional<AttentionOverride>& override_maps) const {
  const int n = config_.tokens();
  const int dh = config_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (override_maps) {
    const auto& maps = override_maps->maps;
    if (override_maps->layer < 0 || override_maps->layer >= config_.layers ||
        maps.shape != std::vector<std::size_t>{static_cast<std::size_t>(config_.heads),
                                               static_cast<std::size_t>(n),
                                               static_cast<std::size_t>(n)}) {
      throw Error("encode: attention override has wrong layer or shape");
    }
  }

  EncodeResult result;
  AttentionTrace& trace = result.trace;
  trace.config = config_;
  trace.patches = extract_patches(crop, config_);

  Matrix x(n, config_.embed_dim);
  x.row(0) = cls_.transpose();
  x.bottomRows(n - 1) = trace.patches * patch_w_.transpose();
  x.bottomRows(n - 1).rowwise() += patch_b_.transpose();
  x += pos_;

  trace.layers.resize(static_cast<std::size_t>(config_.layers));
  for (int l = 0; l < config_.layers; ++l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    LayerCache& c = trace.layers[static_cast<std::size_t>(l)];
    c.input = x;
    c.norm1_out = layer_norm(x, b.n1_w, b.n1_b, c.norm1_hat, c.norm1_rstd);
    c.q = c.norm1_out * b.wq.transpose();
    c.q.rowwise() += b.bq.transpose();
    c.k = c.norm1_out * b.wk.transpose();
    c.k.rowwise() += b.bk.transpose();
    c.v = c.norm1_out * b.wv.transpose();
    c.v.rowwise() += b.bv.transpose();

    c.attended.resize(n, config_.embed_dim);
    c.attention.resize(static_cast<std::size_t>(config_.heads));
    for (int h = 0; h < config_.heads; ++h) {
      Matrix& a = c.attention[static_cast<std::size_t>(h)];
      if (override_maps && override_maps->layer == l) {
        a = Eigen::Map<const Matrix>(override_maps->maps.data.data() +
                                         static_cast<std::size_t>(h) * n * n,
                                     n, n);
      } else {
        a = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
        for (int r = 0; r < n; ++r) {
          const double mx = a.row(r).maxCoeff();
          a.row(r) = (a.row(r).array() - mx).exp();
          a.row(r) /= a.row(r).sum();
        }
      }
      c.attended.middleCols(h * dh, dh) = a * c.v.middleCols(h * dh, dh);
    }
    c.mid = x + c.attended * b.wo.transpose();
    c.mid.rowwise() += b.bo.transpose();

    c.norm2_out = layer_norm(c.mid, b.n2_w, b.n2_b, c.norm2_hat, c.norm2_rstd);
    c.hidden_pre = c.norm2_out * b.fc1.transpose();
    c.hidden_pre.rowwise() += b.fc1_b.transpose();
    c.hidden = c.hidden_pre.unaryExpr([](double v) { return gelu(v); });
    x = c.mid + c.hidden * b.fc2.transpose();
    x.rowwise() += b.fc2_b.transpose();
  }

  Matrix cls_row = x.row(0);
  Matrix cls_hat;
  Vector cls_rstd;
  const Matrix normed = layer_norm(cls_row, norm_w_, norm_b_, cls_hat, cls_rstd);
  trace.final_hat = cls_hat.row(0).transpose();
  trace.final_rstd = cls_rstd[0];
  trace.cls_out = normed.row(0).transpose();
  trace.cls_norm = trace.cls_out.norm();
  if (!(trace.cls_norm > 0.0) || !std::isfinite(trace.cls_norm)) {
    throw Error("encode: degenerate descriptor (zero or non-finite norm)");
  }
  trace.descriptor = trace.cls_out / trace.cls_norm;
  result.descriptor = trace.descriptor;
  return result;
}

void Encoder::check_trace(const AttentionTrace& trace) const {
  const auto& c = trace.config;
  if (c.layers != config_.layers || c.heads != config_.heads ||
      c.embed_dim != config_.embed_dim || c.tokens() != config_.tokens() ||
      trace.layers.size() != static_cast<std::size_t>(config_.layers)) {
    throw Error("attention trace does not match encoder configuration");
  }
}

BackwardResult Encoder::backward(const AttentionTrace& trace, const Matrix& seeds,
                                 bool want_attention, bool want_params) const {
  check_trace(trace);
  const int n = config_.tokens();
  const int d = config_.embed_dim;
  const int dh = config_.head_dim();
  const int heads = config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index seed_count = seeds.rows();
  if (seeds.cols() != d || seed_count == 0) throw Error("backward: seeds must be S x d");

  BackwardResult result;
  auto& pg = result.params;
  const bool adapters = weights_->has_adapters();
  const bool full = want_params && !adapters;
  if (want_attention) result.attention.resize(static_cast<std::size_t>(config_.layers));

  // Through v = c/|c| and the final norm of the CLS row.
  const Vector& v = trace.descriptor;
  Matrix grad_c(seed_count, d);
  for (Eigen::Index s = 0; s < seed_count; ++s) {
    const Vector g = seeds.row(s).transpose();
    grad_c.row(s) = ((g - v * v.dot(g)) / trace.cls_norm).transpose();
  }
  if (full) {
    Vector gw = Vector::Zero(d), gb = Vector::Zero(d);
    for (Eigen::Index s = 0; s < seed_count; ++s) {
      gw += (grad_c.row(s).transpose().array() * trace.final_hat.array()).matrix();
      gb += grad_c.row(s).transpose();
    }
    accumulate(pg, "norm.weight", gw);
    accumulate(pg, "norm.bias", gb);
  }
  Matrix grad_x = Matrix::Zero(seed_count * n, d);
  {
    const Matrix hat = trace.final_hat.transpose();
    Vector rstd(1);
    rstd[0] = trace.final_rstd;
    const Matrix g = layer_norm_backward(grad_c, hat, rstd, norm_w_);
    for (Eigen::Index s = 0; s < seed_count; ++s) grad_x.row(s * n) = g.row(s);
  }

  for (int l = config_.layers - 1; l >= 0; --l) {
    const Block& b = blocks_[static_cast<std::size_t>(l)];
    const LayerCache& c = trace.layers[static_cast<std::size_t>(l)];

    // MLP branch.
    Matrix grad_hidden = grad_x * b.fc2;
    for (Eigen::Index r = 0; r < grad_hidden.rows(); ++r) {
      const Eigen::Index t = r % n;
      for (Eigen::Index j = 0; j < grad_hidden.cols(); ++j) {
        grad_hidden(r, j) *= gelu_grad(c.hidden_pre(t, j));
      }
    }
    const Matrix grad_norm2 = grad_hidden * b.fc1;
    if (full) {
      accumulate(pg, block_name(l, "mlp.fc2.weight"), stacked_outer(grad_x, c.hidden));
      accumulate(pg, block_name(l, "mlp.fc2.bias"), column_sum(grad_x));
      accumulate(pg, block_name(l, "mlp.fc1.weight"), stacked_outer(grad_hidden, c.norm2_out));
      accumulate(pg, block_name(l, "mlp.fc1.bias"), column_sum(grad_hidden));
      Vector gw = Vector::Zero(d), gb = Vector::Zero(d);
      layer_norm_param_grads(grad_norm2, c.norm2_hat, gw, gb);
      accumulate(pg, block_name(l, "norm2.weight"), gw);
      accumulate(pg, block_name(l, "norm2.bias"), gb);
    }
    Matrix grad_mid = grad_x + layer_norm_backward(grad_norm2, c.norm2_hat, c.norm2_rstd, b.n2_w);

    // Attention branch.
    const Matrix grad_attended = grad_mid * b.wo;
    Matrix grad_q = Matrix::Zero(seed_count * n, d);
    Matrix grad_k = Matrix::Zero(seed_count * n, d);
    Matrix grad_v = Matrix::Zero(seed_count * n, d);
    if (want_attention) {
      result.attention[static_cast<std::size_t>(l)].resize(seed_count,
                                                           static_cast<Eigen::Index>(heads) * n * n);
    }
    for (int h = 0; h < heads; ++h) {
      const Matrix& a = c.attention[static_cast<std::size_t>(h)];
      const auto qh = c.q.middleCols(h * dh, dh);
      const auto kh = c.k.middleCols(h * dh, dh);
      const auto vh = c.v.middleCols(h * dh, dh);
      const Matrix grad_a_all = grad_attended.middleCols(h * dh, dh) * vh.transpose();
      for (Eigen::Index s = 0; s < seed_count; ++s) {
        const auto grad_a = grad_a_all.middleRows(s * n, n);
        if (want_attention) {
          auto& out = result.attention[static_cast<std::size_t>(l)];
          Eigen::Map<Matrix>(out.row(s).data() + static_cast<Eigen::Index>(h) * n * n, n, n) =
              grad_a;
        }
        grad_v.block(s * n, h * dh, n, dh).noalias() =
            a.transpose() * grad_attended.block(s * n, h * dh, n, dh);
        Matrix grad_scores = grad_a;
        for (int r = 0; r < n; ++r) {
          const double inner = a.row(r).dot(grad_a.row(r));
          grad_scores.row(r) = a.row(r).array() * (grad_a.row(r).array() - inner);
        }
        grad_q.block(s * n, h * dh, n, dh).noalias() = grad_scores * kh * scale;
        grad_k.block(s * n, h * dh, n, dh).noalias() = grad_scores.transpose() * qh * scale;
      }
    }
    const Matrix grad_norm1 = grad_q * b.wq + grad_k * b.wk + grad_v * b.wv;

    if (want_params) {
      struct Proj {
        const char* name;
        const Matrix* grad_out;
        const Matrix* input;
      };
      const Proj projections[] = {{"q", &grad_q, &c.norm1_out},
                                  {"k", &grad_k, &c.norm1_out},
                                  {"v", &grad_v, &c.norm1_out},
                                  {"o", &grad_mid, &c.attended}};
      for (const auto& p : projections) {
        const std::string base = block_name(l, std::string("attn.") + p.name);
        const Matrix grad_w = stacked_outer(*p.grad_out, *p.input);
        if (adapters) {
          const Matrix a = as_matrix(weights_->get(base + ".lora_a"));
          const Matrix bm = as_matrix(weights_->get(base + ".lora_b"));
          accumulate(pg, base + ".lora_b", Matrix(grad_w * a.transpose()));
          accumulate(pg, base + ".lora_a", Matrix(bm.transpose() * grad_w));
        } else {
          accumulate(pg, base + ".weight", grad_w);
          accumulate(pg, base + ".bias", column_sum(*p.grad_out));
        }
      }
      if (full) {
        Vector gw = Vector::Zero(d), gb = Vector::Zero(d);
        layer_norm_param_grads(grad_norm1, c.norm1_hat, gw, gb);
        accumulate(pg, block_name(l, "norm1.weight"), gw);
        accumulate(pg, block_name(l, "norm1.bias"), gb);
      }
    }
    grad_x = grad_mid + layer_norm_backward(grad_norm1, c.norm1_hat, c.norm1_rstd, b.n1_w);
  }

  if (full) {
    Vector g_cls = Vector::Zero(d);
    Matrix g_pos = Matrix::Zero(n, d);
    Matrix g_patch = Matrix::Zero(d, config_.patch_dim());
    Vector g_patch_b = Vector::Zero(d);
    for (Eigen::Index s = 0; s < seed_count; ++s) {
      const auto g = grad_x.middleRows(s * n, n);
      g_cls += g.row(0).transpose();
      g_pos += g;
      g_patch.noalias() += g.bottomRows(n - 1).transpose() * trace.patches;
      g_patch_b += g.bottomRows(n - 1).colwise().sum().transpose();
    }
    accumulate(pg, "cls_token", g_cls);
    accumulate(pg, "pos_embed", g_pos);
    accumulate(pg, "patch_embed.weight", g_patch);
    accumulate(pg, "patch_embed.bias", g_patch_b);
  }
  return result;
}

EncodeResult encode(const WeightStore& weights, const ImageGrid& crop) {
  return Encoder(weights).encode(crop);
}

std::vector<Tensor> attention_gradient(const WeightStore& weights, const AttentionTrace& trace,
                                       const Descriptor& direction) {
  const Encoder encoder(weights);
  if (direction.size() != encoder.config().embed_dim) {
    throw Error("attention_gradient: direction has wrong dimension");
  }
  const Vector unit = l2_normalized(direction);
  const Matrix seed = unit.transpose();
  const auto back = encoder.backward(trace, seed, true, false);
  const auto n = static_cast<std::size_t>(encoder.config().tokens());
  const auto h = static_cast<std::size_t>(encoder.config().heads);
  std::vector<Tensor> out;
  for (const auto& g : back.attention) {
    out.emplace_back(std::vector<std::size_t>{h, n, n},
                     std::vector<double>(g.data(), g.data() + g.size()));
  }
  return out;
}

std::vector<Matrix> attention_jacobian(const Encoder& encoder, const AttentionTrace& trace) {
  const int d = encoder.config().embed_dim;
  const Matrix identity = Matrix::Identity(d, d);
  return encoder.backward(trace, identity, true, false).attention;
}

std::vector<Matrix> attention_jacobian(const WeightStore& weights, const AttentionTrace& trace) {
  return attention_jacobian(Encoder(weights), trace);
}

}  // namespace mao
