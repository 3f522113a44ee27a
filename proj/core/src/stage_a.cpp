#include "mao/stage_a.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace mao {

TrainConfig TrainConfig::full_scale_mode() {
  TrainConfig c;
  c.batch_size = 128;
  c.adapter_rank = 256;
  return c;
}

TrainConfig TrainConfig::backbone_mode() {
  TrainConfig c;
  c.lr_init = 1e-3;
  c.lr_decay = 1.0;
  c.weight_decay = 0.0;
  c.adapter_rank = 0;
  c.max_steps = 3000;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr_init > 0.0) || !(lr_floor >= 0.0) || lr_floor > lr_init) {
    throw Error("train config: need 0 <= lr_floor <= lr_init, lr_init > 0");
  }
  if (!(lr_decay > 0.0 && lr_decay <= 1.0) || !(decay_every > 0.0)) {
    throw Error("train config: bad learning-rate decay");
  }
  if (batch_size < 2) throw Error("train config: batch_size must be >= 2 for in-batch negatives");
  if (epochs < 1 && max_steps <= 0) throw Error("train config: nothing to train");
  if (!(temperature > 0.0)) throw Error("train config: temperature must be > 0");
  if (adapter_rank < 0) throw Error("train config: adapter_rank must be >= 0");
}

double TrainConfig::learning_rate(int step) const {
  return std::max(lr_floor, lr_init * std::pow(lr_decay, step / decay_every));
}

Descriptor average_pool_objects(std::span<const Descriptor> descriptors) {
  if (descriptors.empty()) throw Error("average_pool_objects: no objects");
  Vector sum = Vector::Zero(descriptors.front().size());
  for (const auto& v : descriptors) {
    if (v.size() != sum.size()) throw Error("average_pool_objects: dimension mismatch");
    sum += v;
  }
  sum /= static_cast<double>(descriptors.size());
  if (!(sum.norm() > 1e-12)) throw Error("average_pool_objects: descriptors average to zero");
  return sum / sum.norm();
}

Descriptor gem_pool(std::span<const Descriptor> features, double p) {
  if (features.empty()) throw Error("gem_pool: no features");
  if (!(p >= 1.0)) throw Error("gem_pool: exponent must be >= 1");
  const Eigen::Index d = features.front().size();
  double lowest = 0.0;
  for (const auto& f : features) {
    if (f.size() != d) throw Error("gem_pool: dimension mismatch");
    lowest = std::min(lowest, f.minCoeff());
  }
  const double offset = -lowest;
  Vector out(d);
  if (std::isinf(p)) {
    out.setConstant(-std::numeric_limits<double>::infinity());
    for (const auto& f : features) out = out.cwiseMax(f);
  } else {
    out.setZero();
    for (const auto& f : features) out += (f.array() + offset).pow(p).matrix();
    out /= static_cast<double>(features.size());
    out = out.array().pow(1.0 / p).matrix();
    out.array() -= offset;
  }
  if (!(out.norm() > 1e-12)) throw Error("gem_pool: pooled feature is zero");
  return out / out.norm();
}

InfoNceResult info_nce_with_gradient(const Matrix& sim, double tau) {
  const Eigen::Index b = sim.rows();
  if (b != sim.cols()) throw Error("info_nce_loss: similarity matrix must be square");
  if (b < 2) throw Error("info_nce_loss: need a batch of at least 2");
  if (!(tau > 0.0)) throw Error("info_nce_loss: temperature must be > 0");

  const Matrix logits = sim / tau;
  InfoNceResult out;
  out.grad = Matrix::Zero(b, b);
  const double half_mean = 0.5 / static_cast<double>(b);
  // Row direction: query i against every gallery j.
  for (Eigen::Index i = 0; i < b; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd ex = (logits.row(i).array() - mx).exp();
    const double z = ex.sum();
    out.loss += half_mean * (std::log(z) + mx - logits(i, i));
    for (Eigen::Index j = 0; j < b; ++j) {
      out.grad(i, j) += half_mean * (ex[j] / z - (i == j ? 1.0 : 0.0)) / tau;
    }
  }
  // Column direction: gallery j against every query i.
  for (Eigen::Index j = 0; j < b; ++j) {
    const double mx = logits.col(j).maxCoeff();
    const Eigen::VectorXd ex = (logits.col(j).array() - mx).exp();
    const double z = ex.sum();
    out.loss += half_mean * (std::log(z) + mx - logits(j, j));
    for (Eigen::Index i = 0; i < b; ++i) {
      out.grad(i, j) += half_mean * (ex[i] / z - (i == j ? 1.0 : 0.0)) / tau;
    }
  }
  return out;
}

double info_nce_loss(const Matrix& sim, double tau) { return info_nce_with_gradient(sim, tau).loss; }

namespace {

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
};

}  // namespace

TrainResult train_stage_a(const WeightStore& weights, std::span<const TrainPair> dataset,
                          const TrainConfig& config, const TrainProgress& progress) {
  config.validate();
  if (dataset.empty()) throw Error("train_stage_a: empty dataset");
  for (const auto& pair : dataset) {
    if (pair.gallery_objects.empty()) {
      throw Error("train_stage_a: pair '" + pair.instance_id + "' has no gallery objects");
    }
  }

  TrainResult result;
  result.weights = weights;
  WeightStore& store = result.weights;
  if (config.adapter_rank > 0) {
    if (!store.has_adapters()) {
      add_adapters(store, config.adapter_rank, derive_seed(config.seed, 1));
    } else if (store.adapter_rank != config.adapter_rank) {
      throw Error("train_stage_a: store carries rank-" + std::to_string(store.adapter_rank) +
                  " adapters, config asks for rank " + std::to_string(config.adapter_rank));
    }
  } else if (store.has_adapters()) {
    throw Error("train_stage_a: full fine-tune requested on an adapter-bearing store");
  }
  const auto trainable = trainable_tensor_names(store);

  const auto per_epoch =
      static_cast<int>((dataset.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                       static_cast<std::size_t>(config.batch_size));
  const int total_steps = config.max_steps > 0 ? config.max_steps : config.epochs * per_epoch;
  const auto batch = static_cast<std::size_t>(std::min<std::size_t>(
      static_cast<std::size_t>(config.batch_size), std::max<std::size_t>(dataset.size(), 2)));
  if (dataset.size() < 2) throw Error("train_stage_a: need at least 2 pairs");

  Rng rng(derive_seed(config.seed, 2));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(dataset.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  AdamState adam;
  for (const auto& name : trainable) {
    adam.m[name].assign(store.get(name).size(), 0.0);
    adam.v[name].assign(store.get(name).size(), 0.0);
  }

  for (int step = 0; step < total_steps; ++step) {
    std::vector<std::size_t> members;
    while (members.size() < batch) members.push_back(next_index());

    const Encoder encoder(store);
    const auto b = static_cast<Eigen::Index>(batch);
    const int d = store.config.embed_dim;
    std::vector<EncodeResult> query_enc;
    std::vector<std::vector<EncodeResult>> object_enc(batch);
    Matrix vq(b, d), vc(b, d);
    std::vector<double> mean_norms(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      const TrainPair& pair = dataset[members[i]];
      query_enc.push_back(encoder.encode(pair.query));
      vq.row(static_cast<Eigen::Index>(i)) = query_enc.back().descriptor.transpose();
      Vector mean = Vector::Zero(d);
      for (const auto& crop : pair.gallery_objects) {
        object_enc[i].push_back(encoder.encode(crop));
        mean += object_enc[i].back().descriptor;
      }
      mean /= static_cast<double>(pair.gallery_objects.size());
      mean_norms[i] = mean.norm();
      if (!(mean_norms[i] > 0.0)) throw Error("train_stage_a: zero pooled descriptor");
      vc.row(static_cast<Eigen::Index>(i)) = (mean / mean_norms[i]).transpose();
    }

    const Matrix sim = vq * vc.transpose();
    const auto nce = info_nce_with_gradient(sim, config.temperature);
    if (!std::isfinite(nce.loss)) {
      throw Error("train_stage_a: loss diverged at step " + std::to_string(step));
    }
    const Matrix grad_vq = nce.grad * vc;
    const Matrix grad_vc = nce.grad.transpose() * vq;

    std::map<std::string, Tensor> grads;
    auto add_grads = [&](const std::map<std::string, Tensor>& g) {
      for (const auto& [name, t] : g) {
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, t);
        } else {
          for (std::size_t k = 0; k < t.size(); ++k) it->second.data[k] += t.data[k];
        }
      }
    };
    for (std::size_t i = 0; i < batch; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      add_grads(encoder.backward(query_enc[i].trace, grad_vq.row(ii), false, true).params);
      // Through v_c = mean / |mean|.
      const Vector vci = vc.row(ii).transpose();
      const Vector g = grad_vc.row(ii).transpose();
      const Vector grad_mean = (g - vci * vci.dot(g)) / mean_norms[i];
      const Matrix seed = (grad_mean / static_cast<double>(object_enc[i].size())).transpose();
      for (const auto& enc : object_enc[i]) {
        add_grads(encoder.backward(enc.trace, seed, false, true).params);
      }
    }

    const double lr = config.learning_rate(step);
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1);
    for (const auto& name : trainable) {
      auto& param = store.get(name).data;
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const auto& g = it->second.data;
      auto& m = adam.m[name];
      auto& v = adam.v[name];
      for (std::size_t k = 0; k < param.size(); ++k) {
        m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
        v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.adam_eps);
        param[k] -= lr * (update + config.weight_decay * param[k]);
      }
    }

    TrainLogRow row{step, lr, nce.loss};
    result.log.push_back(row);
    if (progress) progress(row);
  }
  return result;
}

double running_loss(std::span<const TrainLogRow> log, std::size_t window, bool tail) {
  if (log.empty() || window == 0) throw Error("running_loss: empty log or window");
  window = std::min(window, log.size());
  const auto part = tail ? log.last(window) : log.first(window);
  double sum = 0.0;
  for (const auto& row : part) sum += row.loss;
  return sum / static_cast<double>(window);
}

void write_training_log(const std::filesystem::path& path, std::span<const TrainLogRow> log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,lr,loss\n" << std::setprecision(10);
  for (const auto& r : log) out << r.step << ',' << r.lr << ',' << r.loss << '\n';
}

}  // namespace mao
