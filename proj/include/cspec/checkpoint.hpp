#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "cspec/errors.hpp"
#include "cspec/flow_module.hpp"
#include "cspec/paramio.hpp"

namespace cspec {

// Checkpoint = model parameters + optimizer momentum buffers + enough
// metadata (architecture config, iteration, training seed) to resume exactly.
template <typename T>
struct Checkpoint {
  SigmaConfig config;
  int64_t iteration = 0;
  uint64_t train_seed = 0;
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> momentum;
};

template <typename T>
void save_checkpoint(const std::string& path, const SigmaModel<T>& model,
                     const std::map<std::string, Tensor<T>>& momentum,
                     int64_t iteration, uint64_t train_seed) {
  nlohmann::json manifest;
  manifest["kind"] = "cyclespectral-checkpoint";
  manifest["config"] = model.config().to_json();
  manifest["iteration"] = iteration;
  manifest["train_seed"] = train_seed;
  NamedTensors<T> nt;
  for (const auto& [name, var] : model.named_parameters())
    nt.items.push_back({name, var->value});
  for (const auto& [name, t] : momentum) nt.items.push_back({"momentum:" + name, t});
  write_param_file(path, manifest, nt);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  nlohmann::json manifest;
  NamedTensors<T> nt = read_param_file<T>(path, &manifest);
  if (manifest.value("kind", "") != "cyclespectral-checkpoint")
    throw IoError("not a checkpoint file: " + path);
  Checkpoint<T> ck;
  ck.config = SigmaConfig::from_json(manifest.at("config"));
  ck.iteration = manifest.at("iteration").get<int64_t>();
  ck.train_seed = manifest.at("train_seed").get<uint64_t>();
  for (auto& [name, t] : nt.items) {
    if (name.rfind("momentum:", 0) == 0)
      ck.momentum.emplace(name.substr(9), std::move(t));
    else
      ck.params.emplace(name, std::move(t));
  }
  return ck;
}

// Copies checkpoint values into an already-constructed model; shapes and the
// full name set must match.
template <typename T>
void apply_checkpoint(SigmaModel<T>& model, const Checkpoint<T>& ck) {
  auto named = model.named_parameters();
  require(named.size() == ck.params.size(),
          "checkpoint parameter count mismatch: model has " +
              std::to_string(named.size()) + ", file has " +
              std::to_string(ck.params.size()));
  for (auto& [name, var] : named) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw IoError("checkpoint missing parameter: " + name);
    require(var->value.shape == it->second.shape,
            "checkpoint shape mismatch for " + name);
    var->value = it->second;
  }
}

template <typename T>
SigmaModel<T> model_from_checkpoint(const Checkpoint<T>& ck) {
  SigmaModel<T> model(ck.config);
  apply_checkpoint(model, ck);
  return model;
}

}  // namespace cspec
