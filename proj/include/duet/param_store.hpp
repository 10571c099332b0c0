#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor moment1;
  Tensor moment2;
};

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 0.0;  // 0 disables clipping
};

// Named parameter map with deterministic (sorted) iteration order, AdamW
// state and a versioned binary checkpoint format.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  size_t size() const { return params_.size(); }
  int64_t step() const { return step_; }

  int64_t num_scalars() const;
  void zero_grads();
  // One AdamW update over all parameters. Throws NumericError naming the
  // first parameter with a non-finite gradient.
  void adamw_step(const AdamWConfig& cfg);

  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }

  std::vector<uint8_t> serialize() const;
  // Restores values, moments and step. Every checkpoint entry must match a
  // registered parameter in name and shape.
  void deserialize(const std::vector<uint8_t>& bytes);
  void save(const std::string& path) const;
  void load(const std::string& path);

  // Convenience initializers used by model construction.
  static Tensor xavier(Rng& rng, int rows, int cols);
  static Tensor normal_init(Rng& rng, std::vector<int> shape, double stddev);

 private:
  std::map<std::string, Parameter> params_;
  int64_t step_ = 0;
};

}  // namespace duet
