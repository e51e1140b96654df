#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ndtpr/tensor.hpp"

namespace ndtpr {

/// Reverse-mode automatic differentiation over a dynamically recorded tape.
///
/// Every operation appends a node holding the forward value and a closure
/// that routes the node's gradient to its parents. backward() walks the tape
/// once in reverse, skipping nodes that never received a nonzero gradient,
/// so subgraphs cut off by min/max selections cost nothing.
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  explicit Tape(std::uint64_t seed = 0, std::uint64_t step = 0)
      : seed_(seed), step_(step) {}

  const Tensor& val(Var v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }

  bool has_grad(Var v) const { return nodes_[v.id].grad_set; }

  const Tensor& grad(Var v) const {
    if (!nodes_[v.id].grad_set) throw Error("autodiff: no gradient recorded");
    return nodes_[v.id].grad;
  }

  /// Constant or differentiable input leaf (owning).
  Var input(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Named parameter leaf referencing externally owned storage. Repeated
  /// requests for the same name return the same node, so gradients
  /// accumulate in one place.
  Var param(const std::string& name, const Tensor* value) {
    const auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return {it->second};
    Node n;
    n.external = value;
    n.param_name = name;
    const Var v = push(std::move(n));
    param_nodes_.emplace(name, v.id);
    return v;
  }

  /// Runs reverse accumulation from a scalar loss. May be called once.
  void backward(Var loss) {
    const Tensor& lv = val(loss);
    if (lv.numel() != 1) {
      throw Error("autodiff: loss must be scalar, got shape " + lv.shape_str());
    }
    if (backward_done_) throw Error("autodiff: backward already run on this tape");
    backward_done_ = true;
    grad_buf(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad_set && n.backward) n.backward(*this, id);
    }
  }

  /// Adds each parameter leaf's gradient into `sink[name]` (which must exist
  /// and match shape). Leaves without gradient are skipped.
  void flush_param_grads(std::map<std::string, Tensor>& sink) const {
    for (const auto& [name, id] : param_nodes_) {
      const Node& n = nodes_[id];
      if (!n.grad_set) continue;
      Tensor& g = sink.at(name);
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    }
  }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t step() const { return step_; }

  // ---- operations ----

  /// opA (m,k) times opB (k,n).
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2) {
      throw Error("matmul: need matrices, got " + ta.shape_str() + " x " + tb.shape_str());
    }
    const int m = trans_a ? ta.shape[1] : ta.shape[0];
    const int ka = trans_a ? ta.shape[0] : ta.shape[1];
    const int kb = trans_b ? tb.shape[1] : tb.shape[0];
    const int n = trans_b ? tb.shape[0] : tb.shape[1];
    if (ka != kb) {
      throw Error("matmul: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
    }
    Tensor out({m, n});
    detail::gemm(trans_a, trans_b, m, n, ka, 1.0, ta.data.data(), tb.data.data(), 0.0,
                 out.data.data());
    Node node;
    node.value = std::move(out);
    node.backward = [a, b, trans_a, trans_b, m, n, ka](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      {
        Tensor& da = t.grad_buf(a.id);
        // d(opA) = G * opB^t, mapped back through trans_a.
        if (!trans_a) {
          detail::gemm(false, !trans_b, m, ka, n, 1.0, g.data.data(), bv.data.data(), 1.0,
                       da.data.data());
        } else {
          detail::gemm(trans_b, true, ka, m, n, 1.0, bv.data.data(), g.data.data(), 1.0,
                       da.data.data());
        }
      }
      {
        Tensor& db = t.grad_buf(b.id);
        if (!trans_b) {
          detail::gemm(!trans_a, false, ka, n, m, 1.0, av.data.data(), g.data.data(), 1.0,
                       db.data.data());
        } else {
          detail::gemm(true, trans_a, n, ka, m, 1.0, g.data.data(), av.data.data(), 1.0,
                       db.data.data());
        }
      }
    };
    return push(std::move(node));
  }

  Var add(Var a, Var b) { return binary_elementwise(a, b, +1.0); }
  Var sub(Var a, Var b) { return binary_elementwise(a, b, -1.0); }

  /// Elementwise product; b may be a row vector broadcast over a's rows.
  Var mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const bool broadcast = is_row_broadcast(ta, tb);
    if (!broadcast && !ta.same_shape(tb)) {
      throw Error("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out = ta;
    if (broadcast) {
      const int r = ta.shape[0], c = ta.shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) *= tb.data[static_cast<std::size_t>(j)];
    } else {
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, b, broadcast](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      Tensor& da = t.grad_buf(a.id);
      Tensor& db = t.grad_buf(b.id);
      if (broadcast) {
        const int r = av.shape[0], c = av.shape[1];
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) {
            da(i, j) += g(i, j) * bv.data[static_cast<std::size_t>(j)];
            db.data[static_cast<std::size_t>(j)] += g(i, j) * av(i, j);
          }
        }
      } else {
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          da.data[i] += g.data[i] * bv.data[i];
          db.data[i] += g.data[i] * av.data[i];
        }
      }
    };
    return push(std::move(node));
  }

  /// k * a + c elementwise with scalar constants.
  Var affine(Var a, double k, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v = k * v + c;
    Node node;
    node.value = std::move(out);
    node.backward = [a, k](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += k * g.data[i];
    };
    return push(std::move(node));
  }

  /// Scales row i of a (m,n) by s(i) (s has m entries).
  Var scale_rows(Var a, Var s) {
    const Tensor& ta = val(a);
    const Tensor& ts = val(s);
    if (ta.rank() != 2 || ts.numel() != ta.shape[0]) {
      throw Error("scale_rows: shape mismatch " + ta.shape_str() + " vs " + ts.shape_str());
    }
    Tensor out = ta;
    for (int i = 0; i < ta.shape[0]; ++i)
      for (int j = 0; j < ta.shape[1]; ++j) out(i, j) *= ts.data[static_cast<std::size_t>(i)];
    Node node;
    node.value = std::move(out);
    node.backward = [a, s](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& av = t.val(a);
      const Tensor& sv = t.val(s);
      Tensor& da = t.grad_buf(a.id);
      Tensor& ds = t.grad_buf(s.id);
      for (int i = 0; i < av.shape[0]; ++i) {
        for (int j = 0; j < av.shape[1]; ++j) {
          da(i, j) += g(i, j) * sv.data[static_cast<std::size_t>(i)];
          ds.data[static_cast<std::size_t>(i)] += g(i, j) * av(i, j);
        }
      }
    };
    return push(std::move(node));
  }

  /// Concatenates matrices with equal row counts along columns.
  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error("concat: no inputs");
    const int rows = val(parts[0]).shape[0];
    int cols = 0;
    for (Var p : parts) {
      const Tensor& tp = val(p);
      if (tp.rank() != 2 || tp.shape[0] != rows) {
        throw Error("concat: row mismatch at " + tp.shape_str());
      }
      cols += tp.shape[1];
    }
    Tensor out({rows, cols});
    int off = 0;
    for (Var p : parts) {
      const Tensor& tp = val(p);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < tp.shape[1]; ++j) out(i, off + j) = tp(i, j);
      off += tp.shape[1];
    }
    Node node;
    node.value = std::move(out);
    node.backward = [parts, rows](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      int off = 0;
      for (Var p : parts) {
        const int c = t.val(p).shape[1];
        Tensor& dp = t.grad_buf(p.id);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < c; ++j) dp(i, j) += g(i, off + j);
        off += c;
      }
    };
    return push(std::move(node));
  }

  Var slice_cols(Var a, int start, int len) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2 || start < 0 || start + len > ta.shape[1]) {
      throw Error("slice: out of range on " + ta.shape_str());
    }
    Tensor out({ta.shape[0], len});
    for (int i = 0; i < ta.shape[0]; ++i)
      for (int j = 0; j < len; ++j) out(i, j) = ta(i, start + j);
    Node node;
    node.value = std::move(out);
    node.backward = [a, start, len](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < g.shape[0]; ++i)
        for (int j = 0; j < len; ++j) da(i, start + j) += g(i, j);
    };
    return push(std::move(node));
  }

  Var transpose(Var a) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2) throw Error("transpose: need matrix, got " + ta.shape_str());
    Tensor out({ta.shape[1], ta.shape[0]});
    for (int i = 0; i < ta.shape[0]; ++i)
      for (int j = 0; j < ta.shape[1]; ++j) out(j, i) = ta(i, j);
    Node node;
    node.value = std::move(out);
    node.backward = [a](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < g.shape[0]; ++i)
        for (int j = 0; j < g.shape[1]; ++j) da(j, i) += g(i, j);
    };
    return push(std::move(node));
  }

  Var reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (Tensor::numel_of(shape) != ta.numel()) {
      throw Error("reshape: element count mismatch " + ta.shape_str() + " -> " +
                  Tensor::shape_str(shape));
    }
    Tensor out(std::move(shape));
    out.data = ta.data;
    Node node;
    node.value = std::move(out);
    node.backward = [a](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
    };
    return push(std::move(node));
  }

  Var relu(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Node node;
    node.value = std::move(out);
    node.backward = [a](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& av = t.val(a);
      Tensor& da = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (av.data[i] > 0.0) da.data[i] += g.data[i];
      }
    };
    return push(std::move(node));
  }

  /// Softmax over the last axis (each row of a matrix, or a whole vector).
  Var softmax(Var a) {
    const Tensor& ta = val(a);
    const int rows = ta.rows(), cols = ta.cols();
    if (rows < 0) throw Error("softmax: need rank 1 or 2, got " + ta.shape_str());
    Tensor out = ta;
    for (int i = 0; i < rows; ++i) {
      double* row = out.data.data() + static_cast<std::size_t>(i) * cols;
      double mx = row[0];
      for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < cols; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (int j = 0; j < cols; ++j) row[j] /= sum;
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, rows, cols](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& y = t.nodes_[id].value;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < rows; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += g.data[off + j] * y.data[off + j];
        for (int j = 0; j < cols; ++j) {
          da.data[off + j] += y.data[off + j] * (g.data[off + j] - dot);
        }
      }
    };
    return push(std::move(node));
  }

  /// Normalizes each row to zero mean and unit variance (no affine part).
  Var layernorm(Var a, double eps = 1e-5) {
    const Tensor& ta = val(a);
    const int rows = ta.rows(), cols = ta.cols();
    if (rows < 0) throw Error("layernorm: need rank 1 or 2, got " + ta.shape_str());
    Tensor out = ta;
    Tensor inv_std({rows});
    for (int i = 0; i < rows; ++i) {
      double* row = out.data.data() + static_cast<std::size_t>(i) * cols;
      double mean = 0.0;
      for (int j = 0; j < cols; ++j) mean += row[j];
      mean /= cols;
      double var = 0.0;
      for (int j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= cols;
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std.data[static_cast<std::size_t>(i)] = inv;
      for (int j = 0; j < cols; ++j) row[j] = (row[j] - mean) * inv;
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, rows, cols, inv_std](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& y = t.nodes_[id].value;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < rows; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * cols;
        double gm = 0.0, gym = 0.0;
        for (int j = 0; j < cols; ++j) {
          gm += g.data[off + j];
          gym += g.data[off + j] * y.data[off + j];
        }
        gm /= cols;
        gym /= cols;
        const double inv = inv_std.data[static_cast<std::size_t>(i)];
        for (int j = 0; j < cols; ++j) {
          da.data[off + j] += inv * (g.data[off + j] - gm - y.data[off + j] * gym);
        }
      }
    };
    return push(std::move(node));
  }

  /// Batch normalization over axis 0 of a (m,n) input with learned gamma and
  /// beta row vectors. Running statistics (externally owned) are used in eval
  /// mode and updated in train mode unless update_stats is false (gradient
  /// checking re-evaluates the forward pass and must not drift the state).
  Var batchnorm(Var a, Var gamma, Var beta, Tensor* run_mean, Tensor* run_var,
                bool train, bool update_stats = true, double eps = 1e-5,
                double momentum = 0.9) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2) throw Error("batchnorm: need matrix, got " + ta.shape_str());
    const int m = ta.shape[0], n = ta.shape[1];
    if (val(gamma).numel() != n || val(beta).numel() != n) {
      throw Error("batchnorm: affine shape mismatch on " + ta.shape_str());
    }
    Tensor mean({n}), var({n});
    if (train) {
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += ta(i, j);
        mean.data[static_cast<std::size_t>(j)] = s / m;
      }
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
          const double d = ta(i, j) - mean.data[static_cast<std::size_t>(j)];
          s += d * d;
        }
        var.data[static_cast<std::size_t>(j)] = s / m;
      }
      if (update_stats) {
        for (int j = 0; j < n; ++j) {
          run_mean->data[static_cast<std::size_t>(j)] =
              momentum * run_mean->data[static_cast<std::size_t>(j)] +
              (1.0 - momentum) * mean.data[static_cast<std::size_t>(j)];
          run_var->data[static_cast<std::size_t>(j)] =
              momentum * run_var->data[static_cast<std::size_t>(j)] +
              (1.0 - momentum) * var.data[static_cast<std::size_t>(j)];
        }
      }
    } else {
      mean = *run_mean;
      var = *run_var;
    }
    Tensor xhat({m, n});
    Tensor inv_std({n});
    for (int j = 0; j < n; ++j) {
      inv_std.data[static_cast<std::size_t>(j)] =
          1.0 / std::sqrt(var.data[static_cast<std::size_t>(j)] + eps);
    }
    const Tensor& gv = val(gamma);
    const Tensor& bv = val(beta);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const std::size_t sj = static_cast<std::size_t>(j);
        xhat(i, j) = (ta(i, j) - mean.data[sj]) * inv_std.data[sj];
        out(i, j) = gv.data[sj] * xhat(i, j) + bv.data[sj];
      }
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, gamma, beta, m, n, xhat, inv_std, train](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& gv = t.val(gamma);
      Tensor& da = t.grad_buf(a.id);
      Tensor& dgamma = t.grad_buf(gamma.id);
      Tensor& dbeta = t.grad_buf(beta.id);
      for (int j = 0; j < n; ++j) {
        const std::size_t sj = static_cast<std::size_t>(j);
        double sum_g = 0.0, sum_gx = 0.0;
        for (int i = 0; i < m; ++i) {
          sum_g += g(i, j);
          sum_gx += g(i, j) * xhat(i, j);
        }
        dgamma.data[sj] += sum_gx;
        dbeta.data[sj] += sum_g;
        if (train) {
          // Full batch-statistics gradient.
          for (int i = 0; i < m; ++i) {
            da(i, j) += gv.data[sj] * inv_std.data[sj] *
                        (g(i, j) - sum_g / m - xhat(i, j) * sum_gx / m);
          }
        } else {
          for (int i = 0; i < m; ++i) {
            da(i, j) += gv.data[sj] * inv_std.data[sj] * g(i, j);
          }
        }
      }
    };
    return push(std::move(node));
  }

  /// Inverted dropout with a counter-based mask keyed by (tape seed, node id,
  /// step, element). Identity in eval mode and for p == 0.
  Var dropout(Var a, double p, bool train) {
    if (!train || p <= 0.0) return a;
    if (p >= 1.0) throw Error("dropout: p must be < 1");
    const Tensor& ta = val(a);
    const int node_id = static_cast<int>(nodes_.size());
    Tensor mask = ta;
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
      const std::uint64_t h = splitmix64(
          splitmix64(seed_ ^ 0xd1b54a32d192ed03ULL) ^
          splitmix64(static_cast<std::uint64_t>(node_id) * 0x9e3779b97f4a7c15ULL) ^
          splitmix64(step_ * 0xbf58476d1ce4e5b9ULL) ^ i);
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      mask.data[i] = u >= p ? keep_scale : 0.0;
    }
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
    Node node;
    node.value = std::move(out);
    node.backward = [a, mask](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * mask.data[i];
    };
    return push(std::move(node));
  }

  /// L2-normalizes each row (matrix) or the whole vector (rank 1). Rows with
  /// norm below 1e-12 are passed through scaled by 1/1e-12.
  Var l2normalize(Var a) {
    const Tensor& ta = val(a);
    const int rows = ta.rows(), cols = ta.cols();
    if (rows < 0) throw Error("l2normalize: need rank 1 or 2, got " + ta.shape_str());
    Tensor out = ta;
    Tensor norms({rows});
    for (int i = 0; i < rows; ++i) {
      double* row = out.data.data() + static_cast<std::size_t>(i) * cols;
      double s = 0.0;
      for (int j = 0; j < cols; ++j) s += row[j] * row[j];
      const double norm = std::max(std::sqrt(s), 1e-12);
      norms.data[static_cast<std::size_t>(i)] = norm;
      for (int j = 0; j < cols; ++j) row[j] /= norm;
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, rows, cols, norms](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& y = t.nodes_[id].value;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < rows; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += g.data[off + j] * y.data[off + j];
        const double inv = 1.0 / norms.data[static_cast<std::size_t>(i)];
        for (int j = 0; j < cols; ++j) {
          da.data[off + j] += inv * (g.data[off + j] - y.data[off + j] * dot);
        }
      }
    };
    return push(std::move(node));
  }

  Var sum(Var a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double v : ta.data) s += v;
    Node node;
    node.value = Tensor::scalar(s);
    node.backward = [a](Tape& t, int id) {
      const double g = t.nodes_[id].grad.data[0];
      Tensor& da = t.grad_buf(a.id);
      for (double& v : da.data) v += g;
    };
    return push(std::move(node));
  }

  Var mean(Var a) {
    const Tensor& ta = val(a);
    const double inv = 1.0 / static_cast<double>(ta.numel());
    double s = 0.0;
    for (double v : ta.data) s += v;
    Node node;
    node.value = Tensor::scalar(s * inv);
    node.backward = [a, inv](Tape& t, int id) {
      const double g = t.nodes_[id].grad.data[0] * inv;
      Tensor& da = t.grad_buf(a.id);
      for (double& v : da.data) v += g;
    };
    return push(std::move(node));
  }

  /// Column sums: (m,n) -> (n).
  Var sum_axis0(Var a) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2) throw Error("sum_axis0: need matrix, got " + ta.shape_str());
    const int m = ta.shape[0], n = ta.shape[1];
    Tensor out({n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j)] += ta(i, j);
    Node node;
    node.value = std::move(out);
    node.backward = [a, m, n](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) da(i, j) += g.data[static_cast<std::size_t>(j)];
    };
    return push(std::move(node));
  }

  /// Column-wise max: (m,n) -> (n). Gradient routes to the first argmax row.
  Var max_axis0(Var a) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2) throw Error("max_axis0: need matrix, got " + ta.shape_str());
    const int m = ta.shape[0], n = ta.shape[1];
    Tensor out({n});
    std::vector<int> arg(n, 0);
    for (int j = 0; j < n; ++j) {
      double best = ta(0, j);
      for (int i = 1; i < m; ++i) {
        if (ta(i, j) > best) {
          best = ta(i, j);
          arg[static_cast<std::size_t>(j)] = i;
        }
      }
      out.data[static_cast<std::size_t>(j)] = best;
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, arg, n](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      for (int j = 0; j < n; ++j) {
        da(arg[static_cast<std::size_t>(j)], j) += g.data[static_cast<std::size_t>(j)];
      }
    };
    return push(std::move(node));
  }

  /// Minimum / maximum over all elements, gradient to the first arg element.
  Var reduce_min(Var a) { return reduce_extreme(a, /*take_max=*/false); }
  Var reduce_max(Var a) { return reduce_extreme(a, /*take_max=*/true); }

  /// Elementwise square root; the derivative is treated as zero at x = 0.
  Var sqrt_op(Var a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::sqrt(v);
    Node node;
    node.value = std::move(out);
    node.backward = [a](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& y = t.nodes_[id].value;
      Tensor& da = t.grad_buf(a.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (y.data[i] > 0.0) da.data[i] += 0.5 * g.data[i] / y.data[i];
      }
    };
    return push(std::move(node));
  }

  /// Gathers scalar nodes into one vector.
  Var stack_scalars(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error("stack: no inputs");
    Tensor out({static_cast<int>(parts.size())});
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Tensor& tp = val(parts[i]);
      if (tp.numel() != 1) throw Error("stack: non-scalar input " + tp.shape_str());
      out.data[i] = tp.data[0];
    }
    Node node;
    node.value = std::move(out);
    node.backward = [parts](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        t.grad_buf(parts[i].id).data[0] += g.data[i];
      }
    };
    return push(std::move(node));
  }

  /// Per-row congruence transform of packed symmetric 3x3 matrices:
  /// each row of cov6 holds (c11,c12,c13,c22,c23,c33); the output packs
  /// T C T^t. t33 must be a 3x3 matrix node.
  Var congruence3(Var cov6, Var t33) {
    const Tensor& tc = val(cov6);
    const Tensor& tt = val(t33);
    if (tc.rank() != 2 || tc.shape[1] != 6 || tt.shape != std::vector<int>{3, 3}) {
      throw Error("congruence3: want (k,6) and (3,3), got " + tc.shape_str() + " and " +
                  tt.shape_str());
    }
    const int k = tc.shape[0];
    Tensor out({k, 6});
    for (int i = 0; i < k; ++i) {
      double c[3][3];
      unpack_sym(&tc(i, 0), c);
      double tc_[3][3];  // T * C
      for (int r = 0; r < 3; ++r)
        for (int s = 0; s < 3; ++s) {
          tc_[r][s] = 0.0;
          for (int m = 0; m < 3; ++m) tc_[r][s] += tt(r, m) * c[m][s];
        }
      double res[3][3];  // (T C) * T^t
      for (int r = 0; r < 3; ++r)
        for (int s = 0; s < 3; ++s) {
          res[r][s] = 0.0;
          for (int m = 0; m < 3; ++m) res[r][s] += tc_[r][m] * tt(s, m);
        }
      pack_sym(res, &out(i, 0));
    }
    Node node;
    node.value = std::move(out);
    node.backward = [cov6, t33, k](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      const Tensor& tc = t.val(cov6);
      const Tensor& tt = t.val(t33);
      Tensor& dc = t.grad_buf(cov6.id);
      Tensor& dt = t.grad_buf(t33.id);
      for (int i = 0; i < k; ++i) {
        // Gradient w.r.t. the full output matrix: packed slots feed only the
        // upper triangle.
        double gf[3][3] = {{g(i, 0), g(i, 1), g(i, 2)},
                           {0.0, g(i, 3), g(i, 4)},
                           {0.0, 0.0, g(i, 5)}};
        double c[3][3];
        unpack_sym(&tc(i, 0), c);
        // dC_full = T^t Gf T
        double tg[3][3];
        for (int r = 0; r < 3; ++r)
          for (int s = 0; s < 3; ++s) {
            tg[r][s] = 0.0;
            for (int m = 0; m < 3; ++m) tg[r][s] += tt(m, r) * gf[m][s];
          }
        double dcf[3][3];
        for (int r = 0; r < 3; ++r)
          for (int s = 0; s < 3; ++s) {
            dcf[r][s] = 0.0;
            for (int m = 0; m < 3; ++m) dcf[r][s] += tg[r][m] * tt(m, s);
          }
        dc(i, 0) += dcf[0][0];
        dc(i, 1) += dcf[0][1] + dcf[1][0];
        dc(i, 2) += dcf[0][2] + dcf[2][0];
        dc(i, 3) += dcf[1][1];
        dc(i, 4) += dcf[1][2] + dcf[2][1];
        dc(i, 5) += dcf[2][2];
        // dT = Gf T C^t + Gf^t T C, with C symmetric.
        double tcm[3][3];
        for (int r = 0; r < 3; ++r)
          for (int s = 0; s < 3; ++s) {
            tcm[r][s] = 0.0;
            for (int m = 0; m < 3; ++m) tcm[r][s] += tt(r, m) * c[m][s];
          }
        for (int r = 0; r < 3; ++r)
          for (int s = 0; s < 3; ++s) {
            double acc = 0.0;
            for (int m = 0; m < 3; ++m) {
              acc += gf[r][m] * tcm[m][s] + gf[m][r] * tcm[m][s];
            }
            dt(r, s) += acc;
          }
      }
    };
    return push(std::move(node));
  }

  static void unpack_sym(const double* p, double c[3][3]) {
    c[0][0] = p[0];
    c[0][1] = c[1][0] = p[1];
    c[0][2] = c[2][0] = p[2];
    c[1][1] = p[3];
    c[1][2] = c[2][1] = p[4];
    c[2][2] = p[5];
  }
  static void pack_sym(const double c[3][3], double* p) {
    p[0] = c[0][0];
    p[1] = c[0][1];
    p[2] = c[0][2];
    p[3] = c[1][1];
    p[4] = c[1][2];
    p[5] = c[2][2];
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool grad_set = false;
    std::function<void(Tape&, int)> backward;
    std::string param_name;
  };

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Tensor& grad_buf(int id) {
    Node& n = nodes_[id];
    if (!n.grad_set) {
      const Tensor& v = n.external ? *n.external : n.value;
      n.grad = Tensor(v.shape);
      n.grad_set = true;
    }
    return n.grad;
  }

  static bool is_row_broadcast(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2) return false;
    if (b.rank() == 1 && b.shape[0] == a.shape[1]) return true;
    if (b.rank() == 2 && b.shape[0] == 1 && b.shape[1] == a.shape[1]) return true;
    return false;
  }

  Var binary_elementwise(Var a, Var b, double sign_b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const bool broadcast = is_row_broadcast(ta, tb);
    if (!broadcast && !ta.same_shape(tb)) {
      throw Error("add/sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    }
    Tensor out = ta;
    if (broadcast) {
      const int r = ta.shape[0], c = ta.shape[1];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out(i, j) += sign_b * tb.data[static_cast<std::size_t>(j)];
    } else {
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += sign_b * tb.data[i];
    }
    Node node;
    node.value = std::move(out);
    node.backward = [a, b, sign_b, broadcast](Tape& t, int id) {
      const Tensor& g = t.nodes_[id].grad;
      Tensor& da = t.grad_buf(a.id);
      Tensor& db = t.grad_buf(b.id);
      for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
      if (broadcast) {
        const int r = g.shape[0], c = g.shape[1];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) db.data[static_cast<std::size_t>(j)] += sign_b * g(i, j);
      } else {
        for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += sign_b * g.data[i];
      }
    };
    return push(std::move(node));
  }

  Var reduce_extreme(Var a, bool take_max) {
    const Tensor& ta = val(a);
    if (ta.numel() == 0) throw Error("reduce: empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < ta.data.size(); ++i) {
      const bool better = take_max ? ta.data[i] > ta.data[arg] : ta.data[i] < ta.data[arg];
      if (better) arg = i;
    }
    Node node;
    node.value = Tensor::scalar(ta.data[arg]);
    node.backward = [a, arg](Tape& t, int id) {
      t.grad_buf(a.id).data[arg] += t.nodes_[id].grad.data[0];
    };
    return push(std::move(node));
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  std::uint64_t seed_ = 0;
  std::uint64_t step_ = 0;
  bool backward_done_ = false;
};

using Var = Tape::Var;

/// Compares the reverse-mode gradient of a scalar-valued graph against
/// central finite differences. `make_loss` receives a tape plus one leaf per
/// input tensor and must return a scalar. Checks every element, or an evenly
/// spaced sample of max_entries per input when positive. Returns the maximum
/// relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& make_loss,
    std::vector<Tensor> inputs, double h = 1e-5, int max_entries = 0,
    std::uint64_t seed = 0) {
  const auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape(seed, /*step=*/0);
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const Tensor& x : xs) vars.push_back(tape.input(x));
    return tape.val(make_loss(tape, vars)).data[0];
  };

  Tape tape(seed, /*step=*/0);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& x : inputs) vars.push_back(tape.input(x));
  const Var loss = make_loss(tape, vars);
  tape.backward(loss);

  double max_rel = 0.0;
  for (std::size_t v = 0; v < inputs.size(); ++v) {
    const std::int64_t n = inputs[v].numel();
    const std::int64_t count = (max_entries > 0 && n > max_entries) ? max_entries : n;
    for (std::int64_t e = 0; e < count; ++e) {
      const std::size_t idx = static_cast<std::size_t>(e * n / count);
      std::vector<Tensor> perturbed = inputs;
      perturbed[v].data[idx] += h;
      const double fp = eval(perturbed);
      perturbed[v].data[idx] = inputs[v].data[idx] - h;
      const double fm = eval(perturbed);
      const double fd = (fp - fm) / (2.0 * h);
      const double an = tape.has_grad(vars[v]) ? tape.grad(vars[v]).data[idx] : 0.0;
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ndtpr
