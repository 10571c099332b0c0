#pragma once

// Independent reference implementations used as test oracles. Everything in
// here is deliberately written from the definitions (naive loops, no tape,
// no shared kernels with src/) so it can catch implementation bugs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <string>
#include <vector>

#include "duet/envsim.hpp"
#include "duet/param_store.hpp"
#include "duet/rng.hpp"

namespace oracles {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(int r, int c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = zeros(static_cast<int>(a.size()), static_cast<int>(b[0].size()));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k)
      for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

// Direct transcription of the scaled dot-product attention formula with an
// optional additive bias on the logits.
inline Mat attention(const Mat& q_tokens, const Mat& kv_tokens, const Mat& wq, const Mat& wk,
                     const Mat& wv, const Mat* bias = nullptr) {
  const Mat q = matmul(q_tokens, wq);
  const Mat k = matmul(kv_tokens, wk);
  const Mat v = matmul(kv_tokens, wv);
  const int d = static_cast<int>(wq[0].size());
  Mat out = zeros(static_cast<int>(q.size()), static_cast<int>(v[0].size()));
  for (size_t i = 0; i < q.size(); ++i) {
    std::vector<double> logits(k.size(), 0.0);
    for (size_t j = 0; j < k.size(); ++j) {
      for (int p = 0; p < d; ++p) logits[j] += q[i][p] * k[j][p];
      logits[j] /= std::sqrt(static_cast<double>(d));
      if (bias != nullptr) logits[j] += (*bias)[i][j];
    }
    const std::vector<double> w = softmax(logits);
    for (size_t j = 0; j < k.size(); ++j)
      for (size_t p = 0; p < v[0].size(); ++p) out[i][p] += w[j] * v[j][p];
  }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// y = W2 gelu(W1 x + b1) + b2
inline std::vector<double> ffn(const std::vector<double>& x, const Mat& w1,
                               const std::vector<double>& b1, const Mat& w2,
                               const std::vector<double>& b2) {
  std::vector<double> h(b1.size(), 0.0);
  for (size_t j = 0; j < b1.size(); ++j) {
    for (size_t i = 0; i < x.size(); ++i) h[j] += x[i] * w1[i][j];
    h[j] = gelu(h[j] + b1[j]);
  }
  std::vector<double> y(b2.size(), 0.0);
  for (size_t j = 0; j < b2.size(); ++j) {
    for (size_t i = 0; i < h.size(); ++i) y[j] += h[i] * w2[i][j];
    y[j] += b2[j];
  }
  return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x,
                                      const std::vector<double>& gamma,
                                      const std::vector<double>& beta, double eps = 1e-5) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = gamma[i] * (x[i] - mean) / std::sqrt(var + eps) + beta[i];
  return out;
}

// --- graph oracles -------------------------------------------------------

struct WeightedGraph {
  int n = 0;
  std::vector<std::vector<std::pair<int, double>>> adj;  // (neighbor, weight)
  void add_edge(int a, int b, double w) {
    adj[a].push_back({b, w});
    adj[b].push_back({a, w});
  }
};

inline std::vector<double> dijkstra(const WeightedGraph& g, int source) {
  std::vector<double> dist(g.n, std::numeric_limits<double>::infinity());
  dist[source] = 0;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.push({0, source});
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (auto [v, w] : g.adj[u])
      if (d + w < dist[v]) {
        dist[v] = d + w;
        heap.push({dist[v], v});
      }
  }
  return dist;
}

inline std::vector<int> bfs_reachable(const WeightedGraph& g, int source) {
  std::vector<int> seen(g.n, 0);
  std::queue<int> q;
  q.push(source);
  seen[source] = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (auto [v, w] : g.adj[u])
      if (!seen[v]) {
        seen[v] = 1;
        q.push(v);
      }
  }
  return seen;
}

inline WeightedGraph from_env(const duet::EnvGraph& env) {
  WeightedGraph g;
  g.n = static_cast<int>(env.nodes.size());
  g.adj.resize(g.n);
  for (const auto& [a, b] : env.edges) g.add_edge(a, b, env.edge_length(a, b));
  return g;
}

// --- finite differences ----------------------------------------------------

struct FdResult {
  double max_rel_err = 0;
  int checked = 0;
  std::string worst;
};

// Central finite differences over ParamStore entries against analytic
// gradients already accumulated in the store. `eval` must recompute the
// loss value from the current parameter values (no side effects).
inline FdResult fd_check(duet::ParamStore& store, const std::function<double()>& eval,
                         double eps = 1e-5, int max_coords_per_param = 6,
                         uint64_t sample_seed = 17) {
  FdResult result;
  duet::Rng rng(sample_seed);
  for (auto& [name, param] : store.params()) {
    const int n = static_cast<int>(param.value.data.size());
    std::vector<int> coords;
    if (n <= max_coords_per_param || max_coords_per_param <= 0) {
      coords.resize(n);
      for (int i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.uniform_int(n));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (int i : coords) {
      const double saved = param.value.data[i];
      param.value.data[i] = saved + eps;
      const double up = eval();
      param.value.data[i] = saved - eps;
      const double down = eval();
      param.value.data[i] = saved;
      const double fd = (up - down) / (2 * eps);
      const double an = param.grad.data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-10});
      double rel = std::abs(fd - an) / denom;
      if (std::abs(fd - an) < 1e-7) rel = 0;  // both effectively zero
      ++result.checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

inline duet::Tensor random_tensor(duet::Rng& rng, std::vector<int> shape, double lo = -1.0,
                                  double hi = 1.0) {
  duet::Tensor t = duet::Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace oracles
