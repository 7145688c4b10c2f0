#pragma once

// Trainable-parameter plumbing on top of the tape: named parameters and
// buffers, layer building blocks (conv, transposed conv, batch norm,
// spectral-normalized conv, residual block, attention gate), Kaiming
// initialization, Adam, and the checkpoint file format.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "transvert/common.hpp"
#include "transvert/conv_ops.hpp"
#include "transvert/tensor.hpp"

namespace transvert::nn {

using ad::Dims3;
using ad::Shape5;

/// A named trainable array with gradient and Adam state, persistent across
/// steps (tape nodes are created from it per forward pass).
struct Parameter {
  std::string name;
  Shape5 shape{1, 1, 1, 1, 1};
  std::vector<float> value, grad, m, v;

  void init(std::string n, const Shape5& s, float fill = 0.0f) {
    name = std::move(n);
    shape = s;
    const std::size_t sz = std::size_t(ad::numel(s));
    value.assign(sz, fill);
    grad.assign(sz, 0.0f);
    m.assign(sz, 0.0f);
    v.assign(sz, 0.0f);
  }
};

/// Named non-trainable state (batch-norm running stats, spectral-norm u).
struct Buffer {
  std::string name;
  std::vector<float> value;
};

/// Kaiming-normal fill for conv weights: std = sqrt(2 / fan_in).
inline void kaiming_init(Parameter& p, int fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / double(fan_in));
  for (float& v : p.value) v = float(rng.normal() * sd);
}

/// One training graph: a float tape plus the parameter<->node bindings made
/// while building it, so gradients can be pulled back into Parameters.
struct Graph {
  ad::Tape<float> tape;
  std::vector<std::pair<Parameter*, int>> bindings;

  ad::Tensor<float> use(Parameter& p, bool with_grad) {
    if (with_grad) {
      ad::Tensor<float> t = tape.leaf(p.shape, p.value);
      bindings.emplace_back(&p, t.id);
      return t;
    }
    return tape.constant(p.shape, p.value);
  }

  /// p.grad += scale * node.grad for every bound parameter.
  void pull_grads(float scl = 1.0f) {
    for (auto& [p, id] : bindings) {
      const auto& g = tape.node(id).grad;
      for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += scl * g[i];
    }
  }
};

struct Mode {
  bool training = true;
  bool grads = true;
};

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

/// w / sigma_hat with sigma_hat estimated by power iteration on the
/// (out_channels x rest) matrix view of w. u persists across calls; v is
/// recomputed. With update_u, one-or-more iterations refresh u in place
/// (training); without, u is read-only so repeated calls are bitwise
/// stable (eval). The returned tensor differentiates through w only (u, v
/// treated as constants, the standard estimator).
template <typename T>
ad::Tensor<T> spectral_norm(ad::Tensor<T> w, std::vector<T>& u, int power_iters,
                            bool update_u) {
  const Shape5& s = w.shape();
  const std::int64_t rows = s[0];
  const std::int64_t cols = ad::numel(s) / rows;
  if (std::int64_t(u.size()) != rows)
    throw DataError("spectral_norm: u must have out_channels entries");
  const auto& wv = w.value();

  auto matvec_t = [&](const std::vector<T>& uu, std::vector<T>& vv) {  // v = W^T u
    vv.assign(std::size_t(cols), T(0));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T ur = uu[std::size_t(r)];
      const T* row = wv.data() + r * cols;
      for (std::int64_t c = 0; c < cols; ++c) vv[std::size_t(c)] += ur * row[c];
    }
  };
  auto matvec = [&](const std::vector<T>& vv, std::vector<T>& uu) {  // u = W v
    uu.assign(std::size_t(rows), T(0));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* row = wv.data() + r * cols;
      T acc = T(0);
      for (std::int64_t c = 0; c < cols; ++c) acc += row[c] * vv[std::size_t(c)];
      uu[std::size_t(r)] = acc;
    }
  };
  auto normalize = [](std::vector<T>& x) {
    double n2 = 0.0;
    for (T v : x) n2 += double(v) * double(v);
    const double n = std::sqrt(n2);
    if (n == 0.0) throw DataError("spectral_norm: zero weight matrix");
    for (T& v : x) v = T(double(v) / n);
    return n;
  };

  std::vector<T> v;
  const int iters = update_u ? std::max(1, power_iters) : 1;
  for (int it = 0; it < iters; ++it) {
    matvec_t(u, v);
    normalize(v);
    if (update_u) {
      matvec(v, u);
      normalize(u);
    }
  }

  // sigma = u^T W v as a differentiable weighted sum of w's entries.
  auto coeffs = std::make_shared<std::vector<T>>(wv.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c)
      (*coeffs)[std::size_t(r * cols + c)] = u[std::size_t(r)] * v[std::size_t(c)];
  ad::Tensor<T> sigma =
      ad::weighted_sum(w, std::shared_ptr<const std::vector<T>>(coeffs));
  if (sigma.value()[0] <= T(0)) throw NumericError("spectral_norm: non-positive sigma");
  return ad::mul_broadcast(w, ad::reciprocal(sigma));
}

// ---------------------------------------------------------------------------
// Attention gate
// ---------------------------------------------------------------------------

/// A = sigmoid(conv1x1(f_img) + conv1x1(f_ann)) with a single output
/// channel, broadcast over f_img's channels: returns A (*) f_img.
template <typename T>
ad::Tensor<T> attention_gate(ad::Tensor<T> f_img, ad::Tensor<T> f_ann,
                             ad::Tensor<T> w1, ad::Tensor<T> b1, ad::Tensor<T> w2,
                             ad::Tensor<T> b2) {
  const Shape5 &si = f_img.shape(), &sa = f_ann.shape();
  for (int ax = 2; ax < 5; ++ax)
    if (si[std::size_t(ax)] != sa[std::size_t(ax)])
      throw DataError("attention_gate: spatial shape mismatch");
  auto s1 = ad::conv3d(f_img, w1, b1, {1, 1, 1}, {0, 0, 0});
  auto s2 = ad::conv3d(f_ann, w2, b2, {1, 1, 1}, {0, 0, 0});
  auto a = ad::sigmoid(ad::add(s1, s2));
  return ad::mul_broadcast(a, f_img);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Conv3dLayer {
  Parameter w, b;
  Dims3 stride{1, 1, 1}, pad{0, 0, 0};

  void init(const std::string& prefix, int ic, int oc, const Dims3& k, const Dims3& s,
            const Dims3& p, Rng& rng) {
    stride = s;
    pad = p;
    w.init(prefix + ".w", Shape5{oc, ic, k[0], k[1], k[2]});
    b.init(prefix + ".b", Shape5{1, oc, 1, 1, 1});
    kaiming_init(w, ic * k[0] * k[1] * k[2], rng);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    return ad::conv3d(x, g.use(w, m.grads), g.use(b, m.grads), stride, pad);
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>&) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

struct ConvTranspose3dLayer {
  Parameter w, b;
  Dims3 stride{1, 1, 1}, pad{0, 0, 0}, opad{0, 0, 0};

  void init(const std::string& prefix, int ic, int oc, const Dims3& k, const Dims3& s,
            const Dims3& p, const Dims3& op, Rng& rng) {
    stride = s;
    pad = p;
    opad = op;
    w.init(prefix + ".w", Shape5{ic, oc, k[0], k[1], k[2]});
    b.init(prefix + ".b", Shape5{1, oc, 1, 1, 1});
    kaiming_init(w, ic * k[0] * k[1] * k[2], rng);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    return ad::conv_transpose3d(x, g.use(w, m.grads), g.use(b, m.grads), stride, pad,
                                opad);
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>&) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

struct BatchNorm3dLayer {
  Parameter gamma, beta;
  Buffer running_mean, running_var;
  float momentum = 0.1f, eps = 1e-5f;

  void init(const std::string& prefix, int c) {
    gamma.init(prefix + ".gamma", Shape5{1, c, 1, 1, 1}, 1.0f);
    beta.init(prefix + ".beta", Shape5{1, c, 1, 1, 1}, 0.0f);
    running_mean = {prefix + ".running_mean", std::vector<float>(std::size_t(c), 0.0f)};
    running_var = {prefix + ".running_var", std::vector<float>(std::size_t(c), 1.0f)};
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    return ad::batch_norm3d(x, g.use(gamma, m.grads), g.use(beta, m.grads),
                            &running_mean.value, &running_var.value, m.training,
                            momentum, eps);
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>& bs) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
    bs.push_back(&running_mean);
    bs.push_back(&running_var);
  }
};

/// Conv3d whose weight is divided by its leading singular value (estimated
/// by one persistent-u power iteration per training forward).
struct SpectralConv3dLayer {
  Parameter w, b;
  Buffer u;
  Dims3 stride{1, 1, 1}, pad{0, 0, 0};
  int power_iters = 1;

  void init(const std::string& prefix, int ic, int oc, const Dims3& k, const Dims3& s,
            const Dims3& p, Rng& rng) {
    stride = s;
    pad = p;
    w.init(prefix + ".w", Shape5{oc, ic, k[0], k[1], k[2]});
    b.init(prefix + ".b", Shape5{1, oc, 1, 1, 1});
    kaiming_init(w, ic * k[0] * k[1] * k[2], rng);
    u.name = prefix + ".u";
    u.value.resize(std::size_t(oc));
    double n2 = 0.0;
    for (float& v : u.value) {
      v = float(rng.normal());
      n2 += double(v) * double(v);
    }
    for (float& v : u.value) v = float(double(v) / std::sqrt(n2));
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    ad::Tensor<float> wt = g.use(w, m.grads);
    ad::Tensor<float> wn = spectral_norm(wt, u.value, power_iters, m.training);
    return ad::conv3d(x, wn, g.use(b, m.grads), stride, pad);
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>& bs) {
    ps.push_back(&w);
    ps.push_back(&b);
    bs.push_back(&u);
  }
};

/// conv-BN-ReLU, conv-BN-ReLU, then the identity skip added on top.
struct ResidualBlock3d {
  Conv3dLayer conv1, conv2;
  BatchNorm3dLayer bn1, bn2;

  void init(const std::string& prefix, int c, Rng& rng) {
    conv1.init(prefix + ".conv1", c, c, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    bn1.init(prefix + ".bn1", c);
    conv2.init(prefix + ".conv2", c, c, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
    bn2.init(prefix + ".bn2", c);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> x, const Mode& m) {
    auto h = ad::relu(bn1.forward(g, conv1.forward(g, x, m), m));
    h = ad::relu(bn2.forward(g, conv2.forward(g, h, m), m));
    return ad::add(x, h);
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>& bs) {
    conv1.collect(ps, bs);
    bn1.collect(ps, bs);
    conv2.collect(ps, bs);
    bn2.collect(ps, bs);
  }
};

struct AttentionGateLayer {
  Parameter w1, b1, w2, b2;

  void init(const std::string& prefix, int c, Rng& rng) {
    w1.init(prefix + ".w1", Shape5{1, c, 1, 1, 1});
    b1.init(prefix + ".b1", Shape5{1, 1, 1, 1, 1});
    w2.init(prefix + ".w2", Shape5{1, c, 1, 1, 1});
    b2.init(prefix + ".b2", Shape5{1, 1, 1, 1, 1});
    kaiming_init(w1, c, rng);
    kaiming_init(w2, c, rng);
  }

  ad::Tensor<float> forward(Graph& g, ad::Tensor<float> f_img, ad::Tensor<float> f_ann,
                            const Mode& m) {
    return attention_gate(f_img, f_ann, g.use(w1, m.grads), g.use(b1, m.grads),
                          g.use(w2, m.grads), g.use(b2, m.grads));
  }

  void collect(std::vector<Parameter*>& ps, std::vector<Buffer*>&) {
    ps.push_back(&w1);
    ps.push_back(&b1);
    ps.push_back(&w2);
    ps.push_back(&b2);
  }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::int64_t t = 0;
};

/// Standard Adam with bias correction; moments live on the Parameters.
inline void adam_step(const std::vector<Parameter*>& params, AdamState& st,
                      const AdamConfig& cfg = {}) {
  st.t += 1;
  const float bc1 = 1.0f - float(std::pow(double(cfg.beta1), double(st.t)));
  const float bc2 = 1.0f - float(std::pow(double(cfg.beta2), double(st.t)));
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const float g = p->grad[i];
      p->m[i] = cfg.beta1 * p->m[i] + (1.0f - cfg.beta1) * g;
      p->v[i] = cfg.beta2 * p->v[i] + (1.0f - cfg.beta2) * g * g;
      const float mh = p->m[i] / bc1;
      const float vh = p->v[i] / bc2;
      p->value[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
}

// ---------------------------------------------------------------------------
// Checkpoints: text manifest (name, shape, offset) + raw little-endian f32
// payload in a sibling .bin file.
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, std::pair<Shape5, std::vector<float>>> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  const std::vector<float>& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint is missing tensor: " + name);
    return it->second.second;
  }
};

struct CheckpointWriter {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, std::pair<Shape5, const std::vector<float>*>>> tensors;

  void add(const std::string& name, const Shape5& shape, const std::vector<float>* data) {
    if (std::int64_t(data->size()) != ad::numel(shape))
      throw DataError("checkpoint tensor size mismatch: " + name);
    tensors.emplace_back(name, std::make_pair(shape, data));
  }

  void add_flat(const std::string& name, const std::vector<float>* data) {
    add(name, Shape5{1, 1, 1, 1, int(data->size())}, data);
  }

  void save(const std::string& path) const {
    static_assert(sizeof(float) == 4);
    std::ofstream man(path, std::ios::trunc);
    if (!man) throw DataError("cannot write checkpoint manifest: " + path);
    man << "transvert-checkpoint 1\n";
    man << "payload " << payload_name(path) << "\n";
    for (const auto& [k, v] : meta) man << "meta " << k << " " << v << "\n";
    std::int64_t offset = 0;
    for (const auto& [name, sv] : tensors) {
      man << "tensor " << name;
      for (int d : sv.first) man << " " << d;
      man << " " << offset << "\n";
      offset += std::int64_t(sv.second->size());
    }
    man.close();
    if (!man) throw DataError("failed writing checkpoint manifest: " + path);

    std::ofstream bin(path + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw DataError("cannot write checkpoint payload: " + path + ".bin");
    for (const auto& [name, sv] : tensors)
      bin.write(reinterpret_cast<const char*>(sv.second->data()),
                std::streamsize(sv.second->size() * sizeof(float)));
    bin.close();
    if (!bin) throw DataError("failed writing checkpoint payload: " + path + ".bin");
  }

  static std::string payload_name(const std::string& path) {
    const std::size_t slash = path.find_last_of('/');
    const std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
    return base + ".bin";
  }
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream man(path);
  if (!man) throw DataError("cannot open checkpoint manifest: " + path);
  std::string line;
  if (!std::getline(man, line) || line != "transvert-checkpoint 1")
    throw DataError("unrecognized checkpoint manifest: " + path);
  Checkpoint ck;
  struct Entry {
    std::string name;
    Shape5 shape;
    std::int64_t offset;
  };
  std::vector<Entry> entries;
  std::int64_t total = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "payload") {
      std::string ignored;
      is >> ignored;
    } else if (kind == "meta") {
      std::string k, v;
      is >> k;
      std::getline(is, v);
      if (!v.empty() && v.front() == ' ') v.erase(0, 1);
      ck.meta[k] = v;
    } else if (kind == "tensor") {
      Entry e;
      is >> e.name;
      for (int& d : e.shape) is >> d;
      is >> e.offset;
      if (!is) throw DataError("malformed checkpoint tensor line: " + line);
      entries.push_back(e);
      total = std::max(total, e.offset + ad::numel(e.shape));
    } else {
      throw DataError("malformed checkpoint manifest line: " + line);
    }
  }
  std::ifstream bin(path + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot open checkpoint payload: " + path + ".bin");
  std::vector<float> payload(static_cast<std::size_t>(total));
  bin.read(reinterpret_cast<char*>(payload.data()),
           std::streamsize(payload.size() * sizeof(float)));
  if (bin.gcount() != std::streamsize(payload.size() * sizeof(float)))
    throw DataError("checkpoint payload truncated: " + path + ".bin");
  for (const Entry& e : entries) {
    std::vector<float> data(payload.begin() + e.offset,
                            payload.begin() + e.offset + ad::numel(e.shape));
    ck.tensors[e.name] = {e.shape, std::move(data)};
  }
  return ck;
}

}  // namespace transvert::nn
