#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cspec/checkpoint.hpp"
#include "cspec/dual_cycle.hpp"
#include "cspec/losses.hpp"
#include "cspec/synthdata.hpp"

namespace cspec {

// ---------------------------------------------------------------------------
// data sources: manifests on disk or in-memory sample sets
// ---------------------------------------------------------------------------

struct DataSource {
  virtual ~DataSource() = default;
  virtual size_t size() const = 0;
  virtual PairSample load(size_t i) const = 0;
};

struct ManifestSource : DataSource {
  Manifest manifest;
  explicit ManifestSource(Manifest m) : manifest(std::move(m)) {}
  size_t size() const override { return manifest.size(); }
  PairSample load(size_t i) const override { return manifest.load(i); }
};

struct MemorySource : DataSource {
  std::vector<PairSample> samples;
  explicit MemorySource(std::vector<PairSample> s) : samples(std::move(s)) {}
  size_t size() const override { return samples.size(); }
  PairSample load(size_t i) const override { return samples.at(i); }
};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 8;
  double lr = 4.3e-5;
  double momentum = 0.9;
  double grad_clip = 100.0;
  int checkpoint_every = 500;
  int log_every = 10;
  uint64_t seed = 1;
  bool augment_enabled = true;
  LossWeights weights;       // weights.m <= 0 means: use 10% of image width
  AugmentConfig augment;
  FeatureExtractorConfig features;
  std::string feature_tap = "relu3_3";

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["iterations"] = iterations;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["momentum"] = momentum;
    j["grad_clip"] = grad_clip;
    j["checkpoint_every"] = checkpoint_every;
    j["log_every"] = log_every;
    j["seed"] = seed;
    j["augment_enabled"] = augment_enabled;
    j["weights"] = {{"alpha", weights.alpha}, {"beta", weights.beta},
                    {"gamma", weights.gamma}, {"delta", weights.delta},
                    {"epsilon", weights.epsilon}, {"m", weights.m}};
    j["augment"] = {{"flip_prob", augment.flip_prob}, {"crop_h", augment.crop_h},
                    {"crop_w", augment.crop_w}, {"max_offset", augment.max_offset},
                    {"jitter_frac", augment.jitter_frac},
                    {"jitter_spectrum", augment.jitter_spectrum}};
    j["features"] = {{"widths", features.widths}, {"seed", features.seed}};
    j["feature_tap"] = feature_tap;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
    c.seed = j.value("seed", c.seed);
    c.augment_enabled = j.value("augment_enabled", c.augment_enabled);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      c.weights.alpha = w.value("alpha", c.weights.alpha);
      c.weights.beta = w.value("beta", c.weights.beta);
      c.weights.gamma = w.value("gamma", c.weights.gamma);
      c.weights.delta = w.value("delta", c.weights.delta);
      c.weights.epsilon = w.value("epsilon", c.weights.epsilon);
      c.weights.m = w.value("m", c.weights.m);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.flip_prob = a.value("flip_prob", c.augment.flip_prob);
      c.augment.crop_h = a.value("crop_h", c.augment.crop_h);
      c.augment.crop_w = a.value("crop_w", c.augment.crop_w);
      c.augment.max_offset = a.value("max_offset", c.augment.max_offset);
      c.augment.jitter_frac = a.value("jitter_frac", c.augment.jitter_frac);
      c.augment.jitter_spectrum = a.value("jitter_spectrum", c.augment.jitter_spectrum);
    }
    if (j.contains("features")) {
      const auto& f = j.at("features");
      if (f.contains("widths")) {
        auto w = f.at("widths").get<std::vector<int>>();
        for (size_t i = 0; i < c.features.widths.size() && i < w.size(); ++i)
          c.features.widths[i] = w[i];
      }
      c.features.seed = f.value("seed", c.features.seed);
    }
    c.feature_tap = j.value("feature_tap", c.feature_tap);
    return c;
  }
};

// Applies "dotted.path=value" onto a json tree; the value is parsed as json
// when possible, falling back to a plain string.
inline void apply_json_override(nlohmann::json& j, const std::string& expr) {
  size_t eq = expr.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like path.to.key=value, got '" + expr + "'");
  std::string path = expr.substr(0, eq), value = expr.substr(eq + 1);
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  nlohmann::json* cur = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ConfigError("empty key in override '" + expr + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = parsed;
      break;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// SGD with momentum, one optimizer step per batch
// ---------------------------------------------------------------------------

template <typename T>
struct TrainState {
  std::map<std::string, Tensor<T>> momentum;
  int64_t iteration = 0;
};

namespace detail {

template <typename T>
void zero_grads(const std::vector<std::pair<std::string, Var<T>>>& params) {
  for (const auto& [name, p] : params)
    if (p->grad.shape == p->value.shape) p->grad.fill(T(0));
}

template <typename T>
double global_grad_norm(const std::vector<std::pair<std::string, Var<T>>>& params) {
  double sq = 0;
  for (const auto& [name, p] : params)
    if (p->grad.shape == p->value.shape)
      for (size_t i = 0; i < p->grad.numel(); ++i)
        sq += double(p->grad.data[i]) * double(p->grad.data[i]);
  return std::sqrt(sq);
}

}  // namespace detail

// One optimizer step over a batch of pairs. Gradients from every sample
// accumulate on the shared parameter nodes, then get scaled by 1/batch.
template <typename T>
LossBreakdown<T> train_step(SigmaModel<T>& model, const std::vector<PairSample>& batch,
                            const TrainConfig& cfg, const FeatureExtractor<T>& phi,
                            TrainState<T>& state) {
  require(!batch.empty(), "train_step: empty batch");
  auto params = model.named_parameters();
  detail::zero_grads(params);

  LossBreakdown<T> mean;
  double inv_n = 1.0 / double(batch.size());
  for (const auto& s : batch) {
    ImageTensor<T> a = s.img_a.template cast<T>();
    ImageTensor<T> b = s.img_b.template cast<T>();
    LossWeights w = cfg.weights;
    if (w.m <= 0) w.m = 0.1 * a.width();
    CycleOutputs<T> o = forward_cycle(a, b, model);
    LossBreakdown<T> lb = total_loss(o, a, b, w, phi, cfg.feature_tap);
    if (!std::isfinite(double(lb.total)))
      throw ContractViolation("non-finite loss at iteration " +
                              std::to_string(state.iteration) + " (pair '" + s.pair_id +
                              "'): L_C=" + std::to_string(double(lb.l_c)) +
                              " L_B=" + std::to_string(double(lb.l_b)) +
                              " L_F=" + std::to_string(double(lb.l_f)) +
                              " L_R=" + std::to_string(double(lb.l_r)) +
                              " L_S=" + std::to_string(double(lb.l_s)));
    backward(mul_scalar(lb.total_var, T(inv_n)));
    mean.l_c += T(lb.l_c * inv_n);
    mean.l_b += T(lb.l_b * inv_n);
    mean.l_f += T(lb.l_f * inv_n);
    mean.l_r += T(lb.l_r * inv_n);
    mean.l_s += T(lb.l_s * inv_n);
    mean.total += T(lb.total * inv_n);
  }

  double norm = detail::global_grad_norm(params);
  double scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
  for (const auto& [name, p] : params) {
    if (p->grad.shape != p->value.shape) continue;
    Tensor<T>& v = state.momentum.try_emplace(name, Tensor<T>::zeros(p->value.shape))
                       .first->second;
    for (size_t i = 0; i < v.numel(); ++i) {
      v.data[i] = T(cfg.momentum) * v.data[i] + T(scale) * p->grad.data[i];
      p->value.data[i] -= T(cfg.lr) * v.data[i];
    }
  }
  ++state.iteration;
  return mean;
}

// ---------------------------------------------------------------------------
// full training loop: deterministic, resumable from the latest checkpoint
// ---------------------------------------------------------------------------

// Sample and augmentation seeds are pure functions of (seed, iteration, slot),
// so resuming from a checkpoint replays the exact remaining schedule.
inline size_t sample_index_for(uint64_t seed, int64_t iter, int slot, size_t n) {
  return size_t(mix64(seed, uint64_t(iter) + 1, uint64_t(slot) * 2 + 1) % n);
}

inline uint64_t augment_seed_for(uint64_t seed, int64_t iter, int slot) {
  return mix64(seed, uint64_t(iter) + 1, uint64_t(slot) * 2 + 2);
}

struct TrainResult {
  int64_t iterations_done = 0;
  std::string checkpoint_path;
  std::string log_path;
};

template <typename T>
TrainResult train(SigmaModel<T>& model, const DataSource& data, const TrainConfig& cfg,
                  const std::string& out_dir,
                  const std::function<void(int64_t, const LossBreakdown<T>&)>& on_log = {}) {
  require(data.size() > 0, "train: empty data source");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  TrainResult res;
  res.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
  res.log_path = (fs::path(out_dir) / "train_log.csv").string();

  TrainState<T> state;
  if (fs::exists(res.checkpoint_path)) {
    Checkpoint<T> ck = load_checkpoint<T>(res.checkpoint_path);
    apply_checkpoint(model, ck);
    state.momentum = std::move(ck.momentum);
    state.iteration = ck.iteration;
  }

  std::ofstream log;
  if (state.iteration == 0) {
    log.open(res.log_path, std::ios::trunc);
    log << "# schema v1\n";
    log << "iter,L_C,L_B,L_F,L_R,L_S,total,lr,wallclock_s\n";
  } else {
    log.open(res.log_path, std::ios::app);
  }
  if (!log) throw IoError("cannot open training log: " + res.log_path);

  FeatureExtractor<T> phi(cfg.features);
  auto t0 = std::chrono::steady_clock::now();

  while (state.iteration < cfg.iterations) {
    int64_t iter = state.iteration;
    std::vector<PairSample> batch;
    batch.reserve(size_t(cfg.batch_size));
    for (int slot = 0; slot < cfg.batch_size; ++slot) {
      PairSample s = data.load(sample_index_for(cfg.seed, iter, slot, data.size()));
      if (cfg.augment_enabled)
        s = augment(s, cfg.augment, augment_seed_for(cfg.seed, iter, slot));
      batch.push_back(std::move(s));
    }
    LossBreakdown<T> lb = train_step(model, batch, cfg, phi, state);

    bool last = state.iteration >= cfg.iterations;
    if (state.iteration % std::max(1, cfg.log_every) == 0 || last ||
        state.iteration == 1) {
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                        .count();
      log << state.iteration << ',' << lb.l_c << ',' << lb.l_b << ',' << lb.l_f << ','
          << lb.l_r << ',' << lb.l_s << ',' << lb.total << ',' << cfg.lr << ','
          << secs << '\n';
      log.flush();
      if (on_log) on_log(state.iteration, lb);
    }
    if ((cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0) ||
        last)
      save_checkpoint(res.checkpoint_path, model, state.momentum, state.iteration,
                      cfg.seed);
  }
  if (!fs::exists(res.checkpoint_path))
    save_checkpoint(res.checkpoint_path, model, state.momentum, state.iteration,
                    cfg.seed);
  res.iterations_done = state.iteration;
  return res;
}

}  // namespace cspec
