#pragma once

#include <string>
#include <vector>

#include "ndtpr/ndt.hpp"
#include "ndtpr/nn.hpp"

namespace ndtpr {

/// Fixed-size unit-norm place signature.
using Descriptor = std::vector<double>;

inline double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  if (a.size() != b.size()) throw Error("descriptor dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

struct ModelConfig {
  int cells = 2000;       // expected cell count per map
  int d_model = 256;      // encoder width
  int d_ff = 1024;        // feed-forward width
  int heads = 4;
  int encoders = 3;
  double dropout = 0.1;
  int vlad_clusters = 64;
  int vlad_in = 1024;     // aggregation input width
  int out_dim = 256;      // descriptor size
  bool use_points_only = false;  // zero the covariance feature slots
  bool use_cov_only = false;     // zero the mean feature slots
  bool use_tnet = true;          // learned input transform on/off

  void validate() const {
    if (cells < 1) throw Error("model: cells must be >= 1");
    if (heads < 1 || d_model % heads != 0) {
      throw Error("model: d_model must be divisible by heads");
    }
    if (use_points_only && use_cov_only) {
      throw Error("model: points-only and cov-only are mutually exclusive");
    }
    if (encoders < 1 || d_ff < 1 || vlad_clusters < 1 || vlad_in < 1 || out_dim < 1) {
      throw Error("model: bad dimensions");
    }
  }
};

// Shared-MLP widths of the input transform network.
inline constexpr int kTnetMlp[3] = {64, 128, 1024};
inline constexpr int kTnetFc[2] = {512, 256};

/// Creates and initializes all parameters for the configuration. Creation
/// order is fixed, so a given seed always produces the same network.
inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  Rng rng = Rng::keyed(seed, {0x6d6f64656cULL});

  if (cfg.use_tnet) {
    int in = 3;
    for (int i = 0; i < 3; ++i) {
      add_linear(store, rng, "tnet.mlp" + std::to_string(i + 1), in, kTnetMlp[i]);
      add_batchnorm(store, "tnet.bn" + std::to_string(i + 1), kTnetMlp[i]);
      in = kTnetMlp[i];
    }
    add_linear(store, rng, "tnet.fc1", kTnetMlp[2], kTnetFc[0]);
    add_linear(store, rng, "tnet.fc2", kTnetFc[0], kTnetFc[1]);
    // Final layer starts as the identity transform: zero weights plus an
    // identity bias.
    store.create("tnet.out.w", Tensor({kTnetFc[1], 9}));
    store.create("tnet.out.b", Tensor({9}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  }

  add_linear(store, rng, "head.l1", 9, cfg.d_model);
  add_batchnorm(store, "head.bn1", cfg.d_model);
  add_linear(store, rng, "head.l2", cfg.d_model, cfg.d_model);
  add_batchnorm(store, "head.bn2", cfg.d_model);

  for (int e = 0; e < cfg.encoders; ++e) {
    const std::string p = "enc" + std::to_string(e);
    for (const char* name : {".wq", ".wk", ".wv", ".wo"}) {
      store.create(p + name, xavier_uniform(rng, cfg.d_model, cfg.d_model));
    }
    for (const char* name : {".bq", ".bk", ".bv", ".bo"}) {
      store.create(p + name, Tensor({cfg.d_model}));
    }
    add_layernorm(store, p + ".ln1", cfg.d_model);
    add_linear(store, rng, p + ".ffn1", cfg.d_model, cfg.d_ff);
    add_linear(store, rng, p + ".ffn2", cfg.d_ff, cfg.d_model);
    add_layernorm(store, p + ".ln2", cfg.d_model);
  }

  add_linear(store, rng, "bottom.l1", 2 * cfg.d_model, cfg.vlad_in);
  add_batchnorm(store, "bottom.bn1", cfg.vlad_in);
  add_linear(store, rng, "bottom.l2", cfg.vlad_in, cfg.vlad_in);
  add_batchnorm(store, "bottom.bn2", cfg.vlad_in);

  add_linear(store, rng, "vlad.assign", cfg.vlad_in, cfg.vlad_clusters);
  {
    Tensor centers({cfg.vlad_clusters, cfg.vlad_in});
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.vlad_in));
    for (double& v : centers.data) v = scale * rng.normal();
    store.create("vlad.centers", std::move(centers));
  }

  add_linear(store, rng, "final", cfg.vlad_clusters * cfg.vlad_in, cfg.out_dim);
  return store;
}

/// Optional capture of intermediate values for inspection and tests.
struct EmbedTrace {
  Tensor transform;                // the 3x3 transform actually applied
  Tensor features;                 // k x 9 features entering the head stack
  std::vector<Tensor> attention;   // row-stochastic matrices, per encoder*head
};

/// Learned 3x3 input transform from the cell means: shared per-point MLP,
/// max-pool over cells, then fully connected layers biased to the identity at
/// initialization.
inline Var tnet_forward(NetCtx& ctx, Var means) {
  Var h = means;
  for (int i = 1; i <= 3; ++i) {
    h = linear(ctx, h, "tnet.mlp" + std::to_string(i));
    h = batchnorm(ctx, h, "tnet.bn" + std::to_string(i));
    h = ctx.tape.relu(h);
  }
  Var pooled = ctx.tape.reshape(ctx.tape.max_axis0(h), {1, kTnetMlp[2]});
  pooled = ctx.tape.relu(linear(ctx, pooled, "tnet.fc1"));
  pooled = ctx.tape.relu(linear(ctx, pooled, "tnet.fc2"));
  const Var t9 = linear(ctx, pooled, "tnet.out");
  return ctx.tape.reshape(t9, {3, 3});
}

/// One encoder: multi-head self-attention with residual + LayerNorm, then a
/// ReLU feed-forward block with residual + LayerNorm.
inline Var encoder_forward(NetCtx& ctx, Var z, const ModelConfig& cfg,
                           const std::string& prefix, EmbedTrace* trace = nullptr) {
  Tape& t = ctx.tape;
  const int dh = cfg.d_model / cfg.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto proj = [&](const char* w, const char* b) {
    return t.add(t.matmul(z, t.param(prefix + w, &ctx.store.values.at(prefix + w))),
                 t.param(prefix + b, &ctx.store.values.at(prefix + b)));
  };
  const Var q = proj(".wq", ".bq");
  const Var k = proj(".wk", ".bk");
  const Var v = proj(".wv", ".bv");

  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    const Var qh = t.slice_cols(q, h * dh, dh);
    const Var kh = t.slice_cols(k, h * dh, dh);
    const Var vh = t.slice_cols(v, h * dh, dh);
    const Var scores = t.affine(t.matmul(qh, kh, false, true), scale, 0.0);
    const Var weights = t.softmax(scores);
    if (trace) trace->attention.push_back(t.val(weights));
    heads.push_back(t.matmul(weights, vh));
  }
  Var attn = t.concat_cols(heads);
  attn = t.add(t.matmul(attn, t.param(prefix + ".wo", &ctx.store.values.at(prefix + ".wo"))),
               t.param(prefix + ".bo", &ctx.store.values.at(prefix + ".bo")));
  attn = t.dropout(attn, cfg.dropout, ctx.train);

  const Var z1 = layernorm(ctx, t.add(z, attn), prefix + ".ln1");
  Var f = t.relu(linear(ctx, z1, prefix + ".ffn1"));
  f = linear(ctx, f, prefix + ".ffn2");
  f = t.dropout(f, cfg.dropout, ctx.train);
  return layernorm(ctx, t.add(z1, f), prefix + ".ln2");
}

/// Packs a map into mean / packed-covariance input tensors.
inline void map_to_tensors(const NdtMap& map, Tensor& means, Tensor& covs) {
  const int k = static_cast<int>(map.cells.size());
  means = Tensor({k, 3});
  covs = Tensor({k, 6});
  for (int i = 0; i < k; ++i) {
    const NdtCell& cell = map.cells[i];
    means(i, 0) = cell.mean.x();
    means(i, 1) = cell.mean.y();
    means(i, 2) = cell.mean.z();
    covs(i, 0) = cell.cov(0, 0);
    covs(i, 1) = cell.cov(0, 1);
    covs(i, 2) = cell.cov(0, 2);
    covs(i, 3) = cell.cov(1, 1);
    covs(i, 4) = cell.cov(1, 2);
    covs(i, 5) = cell.cov(2, 2);
  }
}

/// Full network: learned input transform with covariance propagation, lifting
/// stack, encoder stack, per-cell skip concatenation, NetVLAD aggregation and
/// the output projection. Returns the unit-norm descriptor node (1, out_dim).
inline Var embed_on_tape(NetCtx& ctx, const NdtMap& map, const ModelConfig& cfg,
                         EmbedTrace* trace = nullptr) {
  cfg.validate();
  if (static_cast<int>(map.cells.size()) != cfg.cells) {
    throw Error("cardinality mismatch");
  }
  Tape& t = ctx.tape;
  const int k = cfg.cells;

  Tensor means_in, covs_in;
  map_to_tensors(map, means_in, covs_in);
  const Var means = t.input(std::move(means_in));
  const Var covs = t.input(std::move(covs_in));

  Var means_t = means;
  Var covs_t = covs;
  if (cfg.use_tnet) {
    const Var transform = tnet_forward(ctx, means);
    means_t = t.matmul(means, transform, false, true);
    covs_t = t.congruence3(covs, transform);
    if (trace) trace->transform = t.val(transform);
  } else if (trace) {
    Tensor eye({3, 3});
    eye(0, 0) = eye(1, 1) = eye(2, 2) = 1.0;
    trace->transform = eye;
  }
  if (cfg.use_points_only) covs_t = t.input(Tensor({k, 6}));
  if (cfg.use_cov_only) means_t = t.input(Tensor({k, 3}));

  const Var feat = t.concat_cols({means_t, covs_t});
  if (trace) trace->features = t.val(feat);

  Var lifted = t.relu(batchnorm(ctx, linear(ctx, feat, "head.l1"), "head.bn1"));
  lifted = t.relu(batchnorm(ctx, linear(ctx, lifted, "head.l2"), "head.bn2"));

  Var z = lifted;
  for (int e = 0; e < cfg.encoders; ++e) {
    z = encoder_forward(ctx, z, cfg, "enc" + std::to_string(e), trace);
  }

  const Var skip = t.concat_cols({lifted, z});
  Var agg = t.relu(batchnorm(ctx, linear(ctx, skip, "bottom.l1"), "bottom.bn1"));
  agg = t.relu(batchnorm(ctx, linear(ctx, agg, "bottom.l2"), "bottom.bn2"));

  // NetVLAD: learned soft assignment, residuals to learned centers,
  // per-cluster intra-normalization, then a global L2 normalization.
  const Var assign = t.softmax(linear(ctx, agg, "vlad.assign"));
  const Var weighted = t.matmul(assign, agg, true, false);  // clusters x vlad_in
  const Var mass = t.sum_axis0(assign);
  const Var centers = t.param("vlad.centers", &ctx.store.values.at("vlad.centers"));
  const Var residual = t.sub(weighted, t.scale_rows(centers, mass));
  const Var intra = t.l2normalize(residual);
  Var flat = t.reshape(intra, {1, cfg.vlad_clusters * cfg.vlad_in});
  flat = t.l2normalize(flat);

  const Var out = linear(ctx, flat, "final");
  return t.l2normalize(out);
}

/// Convenience inference path: eval mode, fresh tape, plain vector out.
inline Descriptor embed(ParamStore& store, const NdtMap& map, const ModelConfig& cfg,
                        EmbedTrace* trace = nullptr) {
  Tape tape;
  NetCtx ctx{tape, store, /*train=*/false, /*update_stats=*/false};
  const Var xi = embed_on_tape(ctx, map, cfg, trace);
  return tape.val(xi).data;
}

}  // namespace ndtpr
