#include "lego/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Core>

namespace lego::tensor {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using CMapMat = Eigen::Map<const EMat>;

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data.assign(t->numel(), 0.0f);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<float> data,
                       bool requires_grad) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  if (t->data.size() != t->numel()) {
    throw ShapeMismatch("data size " + std::to_string(t->data.size()) +
                        " vs shape " + shape_str(t->shape));
  }
  return t;
}

TensorPtr Tensor::randn(std::vector<int> shape, Rng& rng, float stdev,
                        bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (auto& x : t->data) x = rng.normal() * stdev;
  return t;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const TensorPtr& a,
                              const TensorPtr& b) {
  throw ShapeMismatch(op + ": " + shape_str(a->shape) + " vs " +
                      shape_str(b->shape));
}

int last_dim(const TensorPtr& t) {
  if (t->shape.empty()) throw ShapeMismatch("scalar has no last dim");
  return t->shape.back();
}

// Rows when the tensor is viewed as a (rows x last_dim) matrix.
int lead_rows(const TensorPtr& t) {
  return static_cast<int>(t->numel()) / last_dim(t);
}

TensorPtr prepare(Tape& tape, std::vector<int> shape,
                  std::initializer_list<TensorPtr> parents) {
  for (const auto& p : parents) {
    tape.touch(p);
    p->ensure_grad();
  }
  auto out = Tensor::zeros(std::move(shape));
  out->ensure_grad();
  return out;
}

}  // namespace

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  const auto& as = a->shape;
  const auto& bs = b->shape;
  if (as.size() == 2 && bs.size() == 2) {
    if (as[1] != bs[0]) shape_error("matmul", a, b);
    auto out = prepare(tape, {as[0], bs[1]}, {a, b});
    CMapMat A(a->data.data(), as[0], as[1]);
    CMapMat B(b->data.data(), bs[0], bs[1]);
    MapMat C(out->data.data(), as[0], bs[1]);
    C.noalias() = A * B;
    tape.record([a, b, out] {
      CMapMat A(a->data.data(), a->shape[0], a->shape[1]);
      CMapMat B(b->data.data(), b->shape[0], b->shape[1]);
      CMapMat dC(out->grad.data(), a->shape[0], b->shape[1]);
      MapMat dA(a->grad.data(), a->shape[0], a->shape[1]);
      MapMat dB(b->grad.data(), b->shape[0], b->shape[1]);
      dA.noalias() += dC * B.transpose();
      dB.noalias() += A.transpose() * dC;
    });
    return out;
  }
  if (as.size() == 3 && bs.size() == 2) {
    if (as[2] != bs[0]) shape_error("matmul", a, b);
    auto out = prepare(tape, {as[0], as[1], bs[1]}, {a, b});
    const int rows = as[0] * as[1];
    CMapMat A(a->data.data(), rows, as[2]);
    CMapMat B(b->data.data(), bs[0], bs[1]);
    MapMat C(out->data.data(), rows, bs[1]);
    C.noalias() = A * B;
    tape.record([a, b, out, rows] {
      CMapMat A(a->data.data(), rows, a->shape[2]);
      CMapMat B(b->data.data(), b->shape[0], b->shape[1]);
      CMapMat dC(out->grad.data(), rows, b->shape[1]);
      MapMat dA(a->grad.data(), rows, a->shape[2]);
      MapMat dB(b->grad.data(), b->shape[0], b->shape[1]);
      dA.noalias() += dC * B.transpose();
      dB.noalias() += A.transpose() * dC;
    });
    return out;
  }
  if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || as[2] != bs[1]) shape_error("matmul", a, b);
    auto out = prepare(tape, {as[0], as[1], bs[2]}, {a, b});
    const int batch = as[0], m = as[1], k = as[2], n = bs[2];
    for (int i = 0; i < batch; ++i) {
      CMapMat A(a->data.data() + std::size_t(i) * m * k, m, k);
      CMapMat B(b->data.data() + std::size_t(i) * k * n, k, n);
      MapMat C(out->data.data() + std::size_t(i) * m * n, m, n);
      C.noalias() = A * B;
    }
    tape.record([a, b, out, batch, m, k, n] {
      for (int i = 0; i < batch; ++i) {
        CMapMat A(a->data.data() + std::size_t(i) * m * k, m, k);
        CMapMat B(b->data.data() + std::size_t(i) * k * n, k, n);
        CMapMat dC(out->grad.data() + std::size_t(i) * m * n, m, n);
        MapMat dA(a->grad.data() + std::size_t(i) * m * k, m, k);
        MapMat dB(b->grad.data() + std::size_t(i) * k * n, k, n);
        dA.noalias() += dC * B.transpose();
        dB.noalias() += A.transpose() * dC;
      }
    });
    return out;
  }
  shape_error("matmul", a, b);
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape == b->shape) {
    auto out = prepare(tape, a->shape, {a, b});
    for (std::size_t i = 0; i < a->data.size(); ++i) {
      out->data[i] = a->data[i] + b->data[i];
    }
    tape.record([a, b, out] {
      for (std::size_t i = 0; i < a->data.size(); ++i) {
        a->grad[i] += out->grad[i];
        b->grad[i] += out->grad[i];
      }
    });
    return out;
  }
  // bias broadcast over the last dim
  if (b->shape.size() == 1 && b->shape[0] == last_dim(a)) {
    auto out = prepare(tape, a->shape, {a, b});
    const int k = last_dim(a);
    const int rows = lead_rows(a);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < k; ++c) {
        out->data[std::size_t(r) * k + c] = a->data[std::size_t(r) * k + c] + b->data[c];
      }
    }
    tape.record([a, b, out, rows, k] {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < k; ++c) {
          a->grad[std::size_t(r) * k + c] += out->grad[std::size_t(r) * k + c];
          b->grad[c] += out->grad[std::size_t(r) * k + c];
        }
      }
    });
    return out;
  }
  shape_error("add", a, b);
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) shape_error("mul", a, b);
  auto out = prepare(tape, a->shape, {a, b});
  for (std::size_t i = 0; i < a->data.size(); ++i) {
    out->data[i] = a->data[i] * b->data[i];
  }
  tape.record([a, b, out] {
    for (std::size_t i = 0; i < a->data.size(); ++i) {
      a->grad[i] += out->grad[i] * b->data[i];
      b->grad[i] += out->grad[i] * a->data[i];
    }
  });
  return out;
}

TensorPtr scale(Tape& tape, const TensorPtr& a, float s) {
  auto out = prepare(tape, a->shape, {a});
  for (std::size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * s;
  tape.record([a, out, s] {
    for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i] * s;
  });
  return out;
}

TensorPtr relu(Tape& tape, const TensorPtr& a) {
  auto out = prepare(tape, a->shape, {a});
  for (std::size_t i = 0; i < a->data.size(); ++i) {
    out->data[i] = a->data[i] > 0.0f ? a->data[i] : 0.0f;
  }
  tape.record([a, out] {
    for (std::size_t i = 0; i < a->data.size(); ++i) {
      if (a->data[i] > 0.0f) a->grad[i] += out->grad[i];
    }
  });
  return out;
}

TensorPtr softmax_lastdim(Tape& tape, const TensorPtr& a) {
  auto out = prepare(tape, a->shape, {a});
  const int k = last_dim(a);
  const int rows = lead_rows(a);
  for (int r = 0; r < rows; ++r) {
    const float* x = a->data.data() + std::size_t(r) * k;
    float* y = out->data.data() + std::size_t(r) * k;
    float mx = x[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, x[c]);
    float sum = 0.0f;
    for (int c = 0; c < k; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    for (int c = 0; c < k; ++c) y[c] /= sum;
  }
  tape.record([a, out, rows, k] {
    for (int r = 0; r < rows; ++r) {
      const float* y = out->data.data() + std::size_t(r) * k;
      const float* g = out->grad.data() + std::size_t(r) * k;
      float* da = a->grad.data() + std::size_t(r) * k;
      float dot = 0.0f;
      for (int c = 0; c < k; ++c) dot += y[c] * g[c];
      for (int c = 0; c < k; ++c) da[c] += y[c] * (g[c] - dot);
    }
  });
  return out;
}

TensorPtr layernorm(Tape& tape, const TensorPtr& a, const TensorPtr& gain,
                    const TensorPtr& bias, float eps) {
  const int k = last_dim(a);
  if (gain->shape != std::vector<int>{k}) shape_error("layernorm gain", a, gain);
  if (bias->shape != std::vector<int>{k}) shape_error("layernorm bias", a, bias);
  auto out = prepare(tape, a->shape, {a, gain, bias});
  const int rows = lead_rows(a);
  auto xhat = std::make_shared<std::vector<float>>(a->data.size());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (int r = 0; r < rows; ++r) {
    const float* x = a->data.data() + std::size_t(r) * k;
    float mean = 0.0f;
    for (int c = 0; c < k; ++c) mean += x[c];
    mean /= k;
    float var = 0.0f;
    for (int c = 0; c < k; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= k;
    const float is = 1.0f / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < k; ++c) {
      const float xh = (x[c] - mean) * is;
      (*xhat)[std::size_t(r) * k + c] = xh;
      out->data[std::size_t(r) * k + c] = xh * gain->data[c] + bias->data[c];
    }
  }
  tape.record([a, gain, bias, out, rows, k, xhat, inv_std] {
    for (int r = 0; r < rows; ++r) {
      const float* g = out->grad.data() + std::size_t(r) * k;
      const float* xh = xhat->data() + std::size_t(r) * k;
      float* da = a->grad.data() + std::size_t(r) * k;
      // d/dxhat = g * gain; then backprop through normalization
      float sum_dxh = 0.0f, sum_dxh_xh = 0.0f;
      for (int c = 0; c < k; ++c) {
        const float dxh = g[c] * gain->data[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[c];
        gain->grad[c] += g[c] * xh[c];
        bias->grad[c] += g[c];
      }
      const float is = (*inv_std)[r];
      for (int c = 0; c < k; ++c) {
        const float dxh = g[c] * gain->data[c];
        da[c] += is * (dxh - sum_dxh / k - xh[c] * sum_dxh_xh / k);
      }
    }
  });
  return out;
}

TensorPtr embed_lookup(Tape& tape, const TensorPtr& table,
                       const std::vector<int>& ids, int batch, int seq) {
  if (table->shape.size() != 2) {
    throw ShapeMismatch("embed_lookup: table must be 2D, got " +
                        shape_str(table->shape));
  }
  if (static_cast<int>(ids.size()) != batch * seq) {
    throw ShapeMismatch("embed_lookup: " + std::to_string(ids.size()) +
                        " ids for batch " + std::to_string(batch) + " x seq " +
                        std::to_string(seq));
  }
  const int vocab = table->shape[0];
  const int d = table->shape[1];
  auto out = prepare(tape, {batch, seq, d}, {table});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab) {
      throw ShapeMismatch("embed_lookup: id " + std::to_string(id) +
                          " outside vocab " + std::to_string(vocab));
    }
    std::copy_n(table->data.data() + std::size_t(id) * d, d,
                out->data.data() + i * d);
  }
  tape.record([table, out, ids, d] {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const float* g = out->grad.data() + i * d;
      float* dt = table->grad.data() + std::size_t(ids[i]) * d;
      for (int c = 0; c < d; ++c) dt[c] += g[c];
    }
  });
  return out;
}

TensorPtr concat_lastdim(Tape& tape, const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of zero tensors");
  auto lead = parts[0]->shape;
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    auto pl = p->shape;
    pl.pop_back();
    if (pl != lead) shape_error("concat", parts[0], p);
    total += last_dim(p);
  }
  auto out_shape = lead;
  out_shape.push_back(total);
  std::initializer_list<TensorPtr> none{};
  auto out = prepare(tape, out_shape, none);
  for (const auto& p : parts) {
    tape.touch(p);
    p->ensure_grad();
  }
  const int rows = lead_rows(out);
  int offset = 0;
  for (const auto& p : parts) {
    const int k = last_dim(p);
    for (int r = 0; r < rows; ++r) {
      std::copy_n(p->data.data() + std::size_t(r) * k, k,
                  out->data.data() + std::size_t(r) * total + offset);
    }
    offset += k;
  }
  tape.record([parts, out, rows, total] {
    int offset = 0;
    for (const auto& p : parts) {
      const int k = p->shape.back();
      for (int r = 0; r < rows; ++r) {
        const float* g = out->grad.data() + std::size_t(r) * total + offset;
        float* dp = p->grad.data() + std::size_t(r) * k;
        for (int c = 0; c < k; ++c) dp[c] += g[c];
      }
      offset += k;
    }
  });
  return out;
}

TensorPtr slice_lastdim(Tape& tape, const TensorPtr& a, int start, int len) {
  const int k = last_dim(a);
  if (start < 0 || len <= 0 || start + len > k) {
    throw ShapeMismatch("slice [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") of last dim " +
                        std::to_string(k));
  }
  auto out_shape = a->shape;
  out_shape.back() = len;
  auto out = prepare(tape, out_shape, {a});
  const int rows = lead_rows(a);
  for (int r = 0; r < rows; ++r) {
    std::copy_n(a->data.data() + std::size_t(r) * k + start, len,
                out->data.data() + std::size_t(r) * len);
  }
  tape.record([a, out, rows, k, start, len] {
    for (int r = 0; r < rows; ++r) {
      const float* g = out->grad.data() + std::size_t(r) * len;
      float* da = a->grad.data() + std::size_t(r) * k + start;
      for (int c = 0; c < len; ++c) da[c] += g[c];
    }
  });
  return out;
}

TensorPtr reshape(Tape& tape, const TensorPtr& a, std::vector<int> new_shape) {
  std::size_t n = 1;
  for (int d : new_shape) n *= static_cast<std::size_t>(d);
  if (n != a->numel()) {
    throw ShapeMismatch("reshape " + shape_str(a->shape) + " -> " +
                        shape_str(new_shape));
  }
  auto out = prepare(tape, new_shape, {a});
  out->data = a->data;
  tape.record([a, out] {
    for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[i];
  });
  return out;
}

TensorPtr masked_fill(Tape& tape, const TensorPtr& a,
                      const std::vector<float>& mask, float value) {
  if (mask.size() != a->data.size()) {
    throw ShapeMismatch("masked_fill: mask size " + std::to_string(mask.size()) +
                        " vs tensor " + shape_str(a->shape));
  }
  auto out = prepare(tape, a->shape, {a});
  for (std::size_t i = 0; i < a->data.size(); ++i) {
    out->data[i] = mask[i] != 0.0f ? value : a->data[i];
  }
  tape.record([a, out, mask] {
    for (std::size_t i = 0; i < a->data.size(); ++i) {
      if (mask[i] == 0.0f) a->grad[i] += out->grad[i];
    }
  });
  return out;
}

TensorPtr transpose_last2(Tape& tape, const TensorPtr& a) {
  if (a->shape.size() < 2) {
    throw ShapeMismatch("transpose_last2 needs >= 2 dims, got " +
                        shape_str(a->shape));
  }
  auto out_shape = a->shape;
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  auto out = prepare(tape, out_shape, {a});
  const int m = a->shape[a->shape.size() - 2];
  const int n = a->shape.back();
  const int batch = static_cast<int>(a->numel()) / (m * n);
  for (int i = 0; i < batch; ++i) {
    CMapMat A(a->data.data() + std::size_t(i) * m * n, m, n);
    MapMat T(out->data.data() + std::size_t(i) * m * n, n, m);
    T = A.transpose();
  }
  tape.record([a, out, batch, m, n] {
    for (int i = 0; i < batch; ++i) {
      CMapMat dT(out->grad.data() + std::size_t(i) * m * n, n, m);
      MapMat dA(a->grad.data() + std::size_t(i) * m * n, m, n);
      dA += dT.transpose();
    }
  });
  return out;
}

TensorPtr sum(Tape& tape, const TensorPtr& a) {
  auto out = prepare(tape, {1}, {a});
  float s = 0.0f;
  for (float x : a->data) s += x;
  out->data[0] = s;
  tape.record([a, out] {
    for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += out->grad[0];
  });
  return out;
}

TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits,
                        const std::vector<int>& targets,
                        const std::vector<float>& target_mask) {
  if (logits->shape.size() != 3) {
    throw ShapeMismatch("cross_entropy: logits must be (B,S,V), got " +
                        shape_str(logits->shape));
  }
  const int positions = logits->shape[0] * logits->shape[1];
  const int vocab = logits->shape[2];
  if (static_cast<int>(targets.size()) != positions ||
      static_cast<int>(target_mask.size()) != positions) {
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(positions) +
                        " positions");
  }
  auto out = prepare(tape, {1}, {logits});
  auto probs = std::make_shared<std::vector<float>>(logits->data.size());
  double total = 0.0;
  std::size_t count = 0;
  for (int p = 0; p < positions; ++p) {
    if (target_mask[p] == 0.0f) continue;
    const float* x = logits->data.data() + std::size_t(p) * vocab;
    float* pr = probs->data() + std::size_t(p) * vocab;
    float mx = x[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, x[v]);
    double sum = 0.0;
    for (int v = 0; v < vocab; ++v) sum += std::exp(double(x[v]) - mx);
    const double lse = mx + std::log(sum);
    for (int v = 0; v < vocab; ++v) {
      pr[v] = static_cast<float>(std::exp(double(x[v]) - lse));
    }
    total += lse - x[targets[p]];
    ++count;
  }
  if (count == 0) throw ShapeMismatch("cross_entropy: empty target mask");
  out->data[0] = static_cast<float>(total / count);
  tape.record([logits, out, probs, targets, target_mask, positions, vocab,
               count] {
    const float g = out->grad[0] / static_cast<float>(count);
    for (int p = 0; p < positions; ++p) {
      if (target_mask[p] == 0.0f) continue;
      const float* pr = probs->data() + std::size_t(p) * vocab;
      float* dl = logits->grad.data() + std::size_t(p) * vocab;
      for (int v = 0; v < vocab; ++v) dl[v] += g * pr[v];
      dl[targets[p]] -= g;
    }
  });
  return out;
}

void Tape::backward(const TensorPtr& loss) {
  if (loss->numel() != 1) {
    throw NonScalarLoss("loss has shape " + shape_str(loss->shape));
  }
  loss->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void adam_step(const std::vector<TensorPtr>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->data.size(), 0.0f);
      state.v[i].assign(params[i]->data.size(), 0.0f);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeMismatch("adam state holds " + std::to_string(state.m.size()) +
                        " buffers for " + std::to_string(params.size()) +
                        " params");
  }
  state.step_count++;
  const float b1 = state.cfg.beta1;
  const float b2 = state.cfg.beta2;
  const float corr1 = 1.0f - std::pow(b1, static_cast<float>(state.step_count));
  const float corr2 = 1.0f - std::pow(b2, static_cast<float>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (p.grad.size() != p.data.size()) {
      throw MissingGrad("parameter " + std::to_string(i) + " (" +
                        shape_str(p.shape) + ") has no gradient");
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      const float g = p.grad[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      const float mhat = m[j] / corr1;
      const float vhat = v[j] / corr2;
      p.data[j] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
    p.zero_grad();
  }
}

std::uint64_t params_hash(const std::vector<TensorPtr>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a(p->data.data(), p->data.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace lego::tensor
