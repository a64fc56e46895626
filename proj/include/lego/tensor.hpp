#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "lego/common.hpp"

namespace lego::tensor {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major float32 array. grad, when allocated, matches data's size.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;
  std::string owner;  // branch id for residency/closure instrumentation

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
  void zero_grad() { grad.assign(data.size(), 0.0f); }

  static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr from(std::vector<int> shape, std::vector<float> data,
                        bool requires_grad = false);
  static TensorPtr randn(std::vector<int> shape, Rng& rng, float stdev,
                         bool requires_grad = false);
};

std::string shape_str(const std::vector<int>& shape);

// Reverse-mode tape. Ops append backward closures during the forward pass;
// backward() replays them in reverse, accumulating into .grad buffers.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }
  void touch(const TensorPtr& t) {
    if (!t->owner.empty()) owners_.insert(t->owner);
  }
  void backward(const TensorPtr& loss);
  const std::set<std::string>& touched_owners() const { return owners_; }
  void clear() {
    nodes_.clear();
    owners_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::set<std::string> owners_;
};

// Primitives. All return a fresh tensor and record a backward closure.
// a:(..,m,k) x b:(k,n), or batched (B,m,k) x (B,k,n).
TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
// Same shape, or b broadcast as a bias over the last dimension of a.
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& a, float s);
TensorPtr relu(Tape& tape, const TensorPtr& a);
TensorPtr softmax_lastdim(Tape& tape, const TensorPtr& a);
TensorPtr layernorm(Tape& tape, const TensorPtr& a, const TensorPtr& gain,
                    const TensorPtr& bias, float eps = 1e-5f);
// table:(V,d), ids:(B,S) -> (B,S,d)
TensorPtr embed_lookup(Tape& tape, const TensorPtr& table,
                       const std::vector<int>& ids, int batch, int seq);
TensorPtr concat_lastdim(Tape& tape, const std::vector<TensorPtr>& parts);
TensorPtr slice_lastdim(Tape& tape, const TensorPtr& a, int start, int len);
TensorPtr reshape(Tape& tape, const TensorPtr& a, std::vector<int> new_shape);
// mask has a's shape (or is broadcast over the last dim when smaller by one
// trailing dimension); nonzero mask entries are overwritten with `value` and
// receive zero gradient.
TensorPtr masked_fill(Tape& tape, const TensorPtr& a,
                      const std::vector<float>& mask, float value);
TensorPtr transpose_last2(Tape& tape, const TensorPtr& a);
TensorPtr sum(Tape& tape, const TensorPtr& a);

// Mean token-level negative log-likelihood over positions where
// target_mask != 0. logits:(B,S,V), targets:(B*S).
TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits,
                        const std::vector<int>& targets,
                        const std::vector<float>& target_mask);

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// One state per parameter set; parameter order must be stable across calls.
struct AdamState {
  AdamConfig cfg;
  std::int64_t step_count = 0;
  std::vector<std::vector<float>> m;  // first moments, aligned with params
  std::vector<std::vector<float>> v;  // second moments
};

// Bias-corrected Adam update; zeroes grads afterwards.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state);

// FNV hash over the raw float bytes of a parameter list, for freeze and
// routing assertions.
std::uint64_t params_hash(const std::vector<TensorPtr>& params);

}  // namespace lego::tensor
