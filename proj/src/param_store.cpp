#include "duet/param_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace duet {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'E', 'T', 'C', 'K', '0', '1'};

template <typename T>
void put(std::vector<uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<uint8_t>& in, size_t& off) {
  if (off + sizeof(T) > in.size()) throw DataError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

void put_tensor(std::vector<uint8_t>& out, const Tensor& t) {
  put<uint32_t>(out, static_cast<uint32_t>(t.shape.size()));
  for (int e : t.shape) put<uint32_t>(out, static_cast<uint32_t>(e));
  const auto* p = reinterpret_cast<const uint8_t*>(t.data.data());
  out.insert(out.end(), p, p + t.data.size() * sizeof(double));
}

Tensor take_tensor(const std::vector<uint8_t>& in, size_t& off) {
  Tensor t;
  const uint32_t rank = take<uint32_t>(in, off);
  if (rank > 2) throw DataError("checkpoint: bad tensor rank");
  for (uint32_t i = 0; i < rank; ++i) t.shape.push_back(static_cast<int>(take<uint32_t>(in, off)));
  const size_t n = static_cast<size_t>(t.numel());
  if (off + n * sizeof(double) > in.size()) throw DataError("checkpoint: truncated tensor");
  t.data.resize(n);
  std::memcpy(t.data.data(), in.data() + off, n * sizeof(double));
  off += n * sizeof(double);
  return t;
}

}  // namespace

Parameter& ParamStore::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw DataError("parameter already registered: " + name);
  Parameter p;
  p.grad = Tensor::zeros(init.shape);
  p.moment1 = Tensor::zeros(init.shape);
  p.moment2 = Tensor::zeros(init.shape);
  p.value = std::move(init);
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw DataError("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw DataError("unknown parameter: " + name);
  return it->second;
}

int64_t ParamStore::num_scalars() const {
  int64_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

void ParamStore::adamw_step(const AdamWConfig& cfg) {
  for (const auto& [name, p] : params_) {
    for (double g : p.grad.data)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
  }
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, p] : params_)
      for (double g : p.grad.data) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& [name, p] : params_) {
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const double g = p.grad.data[i] * scale;
      p.moment1.data[i] = cfg.beta1 * p.moment1.data[i] + (1.0 - cfg.beta1) * g;
      p.moment2.data[i] = cfg.beta2 * p.moment2.data[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = p.moment1.data[i] / bc1;
      const double vhat = p.moment2.data[i] / bc2;
      p.value.data[i] -=
          cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value.data[i]);
    }
  }
}

std::vector<uint8_t> ParamStore::serialize() const {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 8);
  put<int64_t>(out, step_);
  put<uint32_t>(out, static_cast<uint32_t>(params_.size()));
  for (const auto& [name, p] : params_) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_tensor(out, p.value);
    put_tensor(out, p.moment1);
    put_tensor(out, p.moment2);
  }
  return out;
}

void ParamStore::deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic (not a checkpoint file or wrong version)");
  size_t off = 8;
  step_ = take<int64_t>(bytes, off);
  const uint32_t count = take<uint32_t>(bytes, off);
  if (count != params_.size())
    throw DataError("checkpoint: parameter count " + std::to_string(count) +
                    " does not match model (" + std::to_string(params_.size()) + ")");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = take<uint32_t>(bytes, off);
    if (off + len > bytes.size()) throw DataError("checkpoint: truncated name");
    std::string name(bytes.begin() + off, bytes.begin() + off + len);
    off += len;
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("checkpoint: unknown parameter " + name);
    Tensor value = take_tensor(bytes, off);
    Tensor m1 = take_tensor(bytes, off);
    Tensor m2 = take_tensor(bytes, off);
    if (!value.same_shape(it->second.value))
      throw ShapeError("checkpoint: shape mismatch for " + name + ": file " + value.shape_str() +
                       " vs model " + it->second.value.shape_str());
    it->second.value = std::move(value);
    it->second.moment1 = std::move(m1);
    it->second.moment2 = std::move(m2);
  }
}

void ParamStore::save(const std::string& path) const {
  const std::vector<uint8_t> bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  deserialize(bytes);
}

Tensor ParamStore::xavier(Rng& rng, int rows, int cols) {
  const double bound = std::sqrt(6.0 / (rows + cols));
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor ParamStore::normal_init(Rng& rng, std::vector<int> shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.normal() * stddev;
  return t;
}

}  // namespace duet
