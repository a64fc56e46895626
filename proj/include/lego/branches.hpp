#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lego/corpus.hpp"
#include "lego/tensor.hpp"
#include "lego/tokenizer.hpp"

namespace lego::model {

using tensor::Tape;
using tensor::TensorPtr;

enum class BranchKind { Encoder, Decoder };

// "enc:multi", "dec:zh", ...; "multi" is the multilingual scope.
struct BranchId {
  BranchKind kind = BranchKind::Encoder;
  std::string scope = "multi";

  bool multilingual() const { return scope == "multi"; }
  std::string str() const {
    return (kind == BranchKind::Encoder ? "enc:" : "dec:") + scope;
  }
  static BranchId encoder(std::string scope) {
    return {BranchKind::Encoder, std::move(scope)};
  }
  static BranchId decoder(std::string scope) {
    return {BranchKind::Decoder, std::move(scope)};
  }
  // Accepts "enc:multi" / "dec:zh" and the shorthand "M-enc", "E:en", "D:zh".
  static BranchId parse(const std::string& text);

  friend bool operator==(const BranchId& a, const BranchId& b) {
    return a.kind == b.kind && a.scope == b.scope;
  }
  friend bool operator<(const BranchId& a, const BranchId& b) {
    return a.str() < b.str();
  }
};

struct Dims {
  int d = 64;
  int heads = 4;
  int n_layers = 2;
  int ff_mult = 4;

  friend bool operator==(const Dims&, const Dims&) = default;
};

struct LayerNormParams {
  TensorPtr gain, bias;
};

struct AttentionParams {
  TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
  TensorPtr w1, b1, w2, b2;
};

struct Layer {
  LayerNormParams ln1;
  AttentionParams self_attn;
  LayerNormParams ln2;        // decoder: before cross-attention
  AttentionParams cross_attn; // decoder only
  LayerNormParams ln3;        // decoder: before ffn (encoder uses ln2)
  FfnParams ffn;
};

// A self-contained parameter set. The forward pass reads nothing outside it;
// all tensors carry the branch id as owner tag so that closure can be checked.
struct Branch {
  BranchId id;
  Dims dims;
  int vocab_size = 0;
  std::uint64_t vocab_hash = 0;
  TensorPtr embed;             // (V, d)
  std::vector<Layer> layers;
  LayerNormParams final_ln;
  TensorPtr out_w, out_b;      // decoder only: (d, V), (V)

  std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
  std::vector<TensorPtr> parameters() const;
  std::size_t parameter_count() const;
  std::uint64_t hash() const { return tensor::params_hash(parameters()); }
  std::shared_ptr<Branch> clone(const BranchId& new_id) const;
};

using BranchPtr = std::shared_ptr<Branch>;

// Output projection starts at zero so an untrained decoder emits uniform
// logits (loss exactly ln|V|).
BranchPtr init_branch(const BranchId& id, const Dims& dims,
                      const tok::Vocabulary& vocab, std::uint64_t seed);

enum class Flow { Mix, Enc, Dec, Custom };

std::string flow_name(Flow f);

struct FlowSpec {
  Flow flow = Flow::Mix;
  BranchPtr encoder;
  BranchPtr decoder;
};

// Classifies the pairing: M+M = Mix, E+M = Enc, M+D = Dec, else Custom.
Flow classify_flow(const BranchId& enc, const BranchId& dec);
FlowSpec make_flow(BranchPtr encoder, BranchPtr decoder);

// Rectangular batch with PAD filling and a key mask.
struct PaddedBatch {
  std::vector<int> ids;        // batch*seq
  std::vector<float> pad;      // 1.0 where PAD
  int batch = 0;
  int seq = 0;
};

PaddedBatch pad_batch(const std::vector<tok::TokenSeq>& seqs, int pad_id);

struct Encoded {
  TensorPtr hidden;            // (B, S_src, d): the unified-space representation
  PaddedBatch batch;
};

Encoded encode_seq(Tape& tape, const Branch& branch,
                   const std::vector<tok::TokenSeq>& inputs,
                   const tok::Vocabulary& vocab);

// Causal self-attention over the prefix plus cross-attention over the
// encoder states; returns logits (B, S_tgt, V).
TensorPtr decode_logits(Tape& tape, const Branch& branch, const Encoded& enc,
                        const PaddedBatch& tgt_prefix);

// Teacher-forced mean NLL per non-PAD target token.
TensorPtr flow_loss(Tape& tape, const FlowSpec& spec,
                    const std::vector<corpus::ParallelPair>& batch,
                    const tok::Vocabulary& vocab);

std::string greedy_translate(const FlowSpec& spec, const std::string& src,
                             const std::string& src_lg, const std::string& tgt_lg,
                             const tok::Vocabulary& vocab, int max_len);

// Length-normalized beam search.
std::string beam_translate(const FlowSpec& spec, const std::string& src,
                           const std::string& src_lg, const std::string& tgt_lg,
                           const tok::Vocabulary& vocab, int max_len, int width);

}  // namespace lego::model
