#pragma once

#include <cmath>
#include <map>
#include <string>

#include "ndtpr/autodiff.hpp"

namespace ndtpr {

/// Named tensors for a network: trainable values with matching gradient
/// accumulators, plus non-trained buffers (batch-norm running statistics).
struct ParamStore {
  std::map<std::string, Tensor> values;
  std::map<std::string, Tensor> grads;
  std::map<std::string, Tensor> buffers;

  Tensor& create(const std::string& name, Tensor init) {
    if (values.count(name)) throw Error("param exists: " + name);
    grads.emplace(name, Tensor(init.shape));
    return values.emplace(name, std::move(init)).first->second;
  }

  Tensor& create_buffer(const std::string& name, Tensor init) {
    if (buffers.count(name)) throw Error("buffer exists: " + name);
    return buffers.emplace(name, std::move(init)).first->second;
  }

  void zero_grads() {
    for (auto& [name, g] : grads) std::fill(g.data.begin(), g.data.end(), 0.0);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : values) n += v.data.size();
    return n;
  }
};

inline Tensor xavier_uniform(Rng& rng, int fan_in, int fan_out) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

inline void add_linear(ParamStore& store, Rng& rng, const std::string& prefix, int in,
                       int out) {
  store.create(prefix + ".w", xavier_uniform(rng, in, out));
  store.create(prefix + ".b", Tensor({out}));
}

inline void add_batchnorm(ParamStore& store, const std::string& prefix, int n) {
  store.create(prefix + ".gamma", Tensor::full({n}, 1.0));
  store.create(prefix + ".beta", Tensor({n}));
  store.create_buffer(prefix + ".running_mean", Tensor({n}));
  store.create_buffer(prefix + ".running_var", Tensor::full({n}, 1.0));
}

inline void add_layernorm(ParamStore& store, const std::string& prefix, int n) {
  store.create(prefix + ".gamma", Tensor::full({n}, 1.0));
  store.create(prefix + ".beta", Tensor({n}));
}

/// Per-forward context binding a tape to a parameter store and mode flags.
/// update_stats is disabled during gradient checks, which re-run the forward
/// pass many times and must not drift the running statistics.
struct NetCtx {
  Tape& tape;
  ParamStore& store;
  bool train = false;
  bool update_stats = true;
};

inline Var linear(NetCtx& ctx, Var x, const std::string& prefix) {
  const Var w = ctx.tape.param(prefix + ".w", &ctx.store.values.at(prefix + ".w"));
  const Var b = ctx.tape.param(prefix + ".b", &ctx.store.values.at(prefix + ".b"));
  return ctx.tape.add(ctx.tape.matmul(x, w), b);
}

inline Var batchnorm(NetCtx& ctx, Var x, const std::string& prefix) {
  const Var gamma =
      ctx.tape.param(prefix + ".gamma", &ctx.store.values.at(prefix + ".gamma"));
  const Var beta =
      ctx.tape.param(prefix + ".beta", &ctx.store.values.at(prefix + ".beta"));
  return ctx.tape.batchnorm(x, gamma, beta, &ctx.store.buffers.at(prefix + ".running_mean"),
                            &ctx.store.buffers.at(prefix + ".running_var"), ctx.train,
                            ctx.update_stats);
}

/// LayerNorm with learned gain and bias.
inline Var layernorm(NetCtx& ctx, Var x, const std::string& prefix) {
  const Var gamma =
      ctx.tape.param(prefix + ".gamma", &ctx.store.values.at(prefix + ".gamma"));
  const Var beta =
      ctx.tape.param(prefix + ".beta", &ctx.store.values.at(prefix + ".beta"));
  return ctx.tape.add(ctx.tape.mul(ctx.tape.layernorm(x), gamma), beta);
}

}  // namespace ndtpr
