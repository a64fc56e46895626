#include "lego/branches.hpp"

#include <algorithm>
#include <cmath>

namespace lego::model {

using tensor::Tensor;

BranchId BranchId::parse(const std::string& text) {
  auto make = [&](BranchKind kind, std::string scope) {
    BranchId id;
    id.kind = kind;
    id.scope = std::move(scope);
    return id;
  };
  if (text == "M-enc") return make(BranchKind::Encoder, "multi");
  if (text == "M-dec") return make(BranchKind::Decoder, "multi");
  if (text.rfind("enc:", 0) == 0) return make(BranchKind::Encoder, text.substr(4));
  if (text.rfind("dec:", 0) == 0) return make(BranchKind::Decoder, text.substr(4));
  if (text.rfind("E:", 0) == 0) return make(BranchKind::Encoder, text.substr(2));
  if (text.rfind("D:", 0) == 0) return make(BranchKind::Decoder, text.substr(2));
  if (text == "M" || text == "multi") {
    throw ConfigError("ambiguous branch id '" + text + "': use M-enc or M-dec");
  }
  throw ConfigError("cannot parse branch id '" + text + "'");
}

std::string flow_name(Flow f) {
  switch (f) {
    case Flow::Mix: return "Mix";
    case Flow::Enc: return "Enc";
    case Flow::Dec: return "Dec";
    case Flow::Custom: return "Custom";
  }
  return "?";
}

Flow classify_flow(const BranchId& enc, const BranchId& dec) {
  if (enc.multilingual() && dec.multilingual()) return Flow::Mix;
  if (!enc.multilingual() && dec.multilingual()) return Flow::Enc;
  if (enc.multilingual() && !dec.multilingual()) return Flow::Dec;
  return Flow::Custom;
}

FlowSpec make_flow(BranchPtr encoder, BranchPtr decoder) {
  if (!encoder || encoder->id.kind != BranchKind::Encoder) {
    throw MissingBranch("flow needs an encoder branch");
  }
  if (!decoder || decoder->id.kind != BranchKind::Decoder) {
    throw MissingBranch("flow needs a decoder branch");
  }
  FlowSpec spec;
  spec.flow = classify_flow(encoder->id, decoder->id);
  spec.encoder = std::move(encoder);
  spec.decoder = std::move(decoder);
  return spec;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

void collect_ln(std::vector<std::pair<std::string, TensorPtr>>& out,
                const std::string& prefix, const LayerNormParams& ln) {
  out.push_back({prefix + ".gain", ln.gain});
  out.push_back({prefix + ".bias", ln.bias});
}

void collect_attn(std::vector<std::pair<std::string, TensorPtr>>& out,
                  const std::string& prefix, const AttentionParams& a) {
  out.push_back({prefix + ".wq", a.wq});
  out.push_back({prefix + ".bq", a.bq});
  out.push_back({prefix + ".wk", a.wk});
  out.push_back({prefix + ".bk", a.bk});
  out.push_back({prefix + ".wv", a.wv});
  out.push_back({prefix + ".bv", a.bv});
  out.push_back({prefix + ".wo", a.wo});
  out.push_back({prefix + ".bo", a.bo});
}

}  // namespace

std::vector<std::pair<std::string, TensorPtr>> Branch::named_parameters() const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.push_back({"embed", embed});
  const bool dec = id.kind == BranchKind::Decoder;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i);
    collect_ln(out, p + ".ln1", l.ln1);
    collect_attn(out, p + ".self_attn", l.self_attn);
    if (dec) {
      collect_ln(out, p + ".ln2", l.ln2);
      collect_attn(out, p + ".cross_attn", l.cross_attn);
      collect_ln(out, p + ".ln3", l.ln3);
    } else {
      collect_ln(out, p + ".ln2", l.ln2);
    }
    out.push_back({p + ".ffn.w1", l.ffn.w1});
    out.push_back({p + ".ffn.b1", l.ffn.b1});
    out.push_back({p + ".ffn.w2", l.ffn.w2});
    out.push_back({p + ".ffn.b2", l.ffn.b2});
  }
  collect_ln(out, "final_ln", final_ln);
  if (dec) {
    out.push_back({"out_w", out_w});
    out.push_back({"out_b", out_b});
  }
  return out;
}

std::vector<TensorPtr> Branch::parameters() const {
  std::vector<TensorPtr> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Branch::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p->numel();
  return n;
}

std::shared_ptr<Branch> Branch::clone(const BranchId& new_id) const {
  auto b = std::make_shared<Branch>();
  b->id = new_id;
  b->dims = dims;
  b->vocab_size = vocab_size;
  b->vocab_hash = vocab_hash;
  auto copy = [&](const TensorPtr& t) {
    auto c = Tensor::from(t->shape, t->data, true);
    c->owner = new_id.str();
    return c;
  };
  b->embed = copy(embed);
  for (const auto& l : layers) {
    Layer nl;
    nl.ln1 = {copy(l.ln1.gain), copy(l.ln1.bias)};
    auto copy_attn = [&](const AttentionParams& a) {
      return AttentionParams{copy(a.wq), copy(a.bq), copy(a.wk), copy(a.bk),
                             copy(a.wv), copy(a.bv), copy(a.wo), copy(a.bo)};
    };
    nl.self_attn = copy_attn(l.self_attn);
    if (id.kind == BranchKind::Decoder) {
      nl.ln2 = {copy(l.ln2.gain), copy(l.ln2.bias)};
      nl.cross_attn = copy_attn(l.cross_attn);
      nl.ln3 = {copy(l.ln3.gain), copy(l.ln3.bias)};
    } else {
      nl.ln2 = {copy(l.ln2.gain), copy(l.ln2.bias)};
    }
    nl.ffn = {copy(l.ffn.w1), copy(l.ffn.b1), copy(l.ffn.w2), copy(l.ffn.b2)};
    b->layers.push_back(std::move(nl));
  }
  b->final_ln = {copy(final_ln.gain), copy(final_ln.bias)};
  if (id.kind == BranchKind::Decoder) {
    b->out_w = copy(out_w);
    b->out_b = copy(out_b);
  }
  return b;
}

BranchPtr init_branch(const BranchId& id, const Dims& dims,
                      const tok::Vocabulary& vocab, std::uint64_t seed) {
  if (dims.d % dims.heads != 0) {
    throw DimMismatch("d=" + std::to_string(dims.d) + " not divisible by heads=" +
                      std::to_string(dims.heads));
  }
  // Seed depends only on the branch kind so every branch of a kind clones
  // the same initial parameter set.
  const std::string kind_label =
      id.kind == BranchKind::Encoder ? "theta0:encoder" : "theta0:decoder";
  Rng rng(derive_seed(seed, kind_label));
  const float init = 0.02f;
  const int d = dims.d;
  const int ff = dims.d * dims.ff_mult;
  const int v = vocab.size();

  auto b = std::make_shared<Branch>();
  b->id = id;
  b->dims = dims;
  b->vocab_size = v;
  b->vocab_hash = vocab.content_hash;

  auto W = [&](int rows, int cols) {
    return Tensor::randn({rows, cols}, rng, init, true);
  };
  auto zero = [&](std::vector<int> shape) {
    return Tensor::zeros(std::move(shape), true);
  };
  auto ones = [&](int n) {
    auto t = Tensor::zeros({n}, true);
    std::fill(t->data.begin(), t->data.end(), 1.0f);
    return t;
  };
  auto ln = [&] { return LayerNormParams{ones(d), zero({d})}; };
  auto attn = [&] {
    return AttentionParams{W(d, d), zero({d}), W(d, d), zero({d}),
                           W(d, d), zero({d}), W(d, d), zero({d})};
  };

  // 1/sqrt(d) embeddings, scaled back up by sqrt(d) in the forward pass, so
  // token content and the unit-amplitude position signal have similar size
  b->embed = Tensor::randn({v, d}, rng, 1.0f / std::sqrt(float(d)), true);
  for (int i = 0; i < dims.n_layers; ++i) {
    Layer l;
    l.ln1 = ln();
    l.self_attn = attn();
    l.ln2 = ln();
    if (id.kind == BranchKind::Decoder) {
      l.cross_attn = attn();
      l.ln3 = ln();
    }
    l.ffn = {W(d, ff), zero({ff}), W(ff, d), zero({d})};
    b->layers.push_back(std::move(l));
  }
  b->final_ln = ln();
  if (id.kind == BranchKind::Decoder) {
    b->out_w = zero({d, v});  // uniform logits at init
    b->out_b = zero({v});
  }
  for (auto& [name, t] : b->named_parameters()) t->owner = id.str();
  return b;
}

// ---------------------------------------------------------------------------
// Forward passes

PaddedBatch pad_batch(const std::vector<tok::TokenSeq>& seqs, int pad_id) {
  PaddedBatch out;
  out.batch = static_cast<int>(seqs.size());
  for (const auto& s : seqs) {
    out.seq = std::max(out.seq, static_cast<int>(s.ids.size()));
  }
  out.ids.assign(std::size_t(out.batch) * out.seq, pad_id);
  out.pad.assign(std::size_t(out.batch) * out.seq, 1.0f);
  for (int b = 0; b < out.batch; ++b) {
    for (std::size_t t = 0; t < seqs[b].ids.size(); ++t) {
      out.ids[std::size_t(b) * out.seq + t] = seqs[b].ids[t];
      out.pad[std::size_t(b) * out.seq + t] = 0.0f;
    }
  }
  return out;
}

namespace {

// (B,S,d) constant sinusoidal position tensor.
TensorPtr positions(int batch, int seq, int d) {
  auto t = Tensor::zeros({batch, seq, d});
  for (int s = 0; s < seq; ++s) {
    for (int i = 0; i < d; ++i) {
      const double angle =
          s / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(d));
      const float val =
          static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      for (int b = 0; b < batch; ++b) {
        t->data[(std::size_t(b) * seq + s) * d + i] = val;
      }
    }
  }
  return t;
}

TensorPtr attention(Tape& tape, const AttentionParams& p, const Dims& dims,
                    const TensorPtr& q_h, const TensorPtr& kv_h,
                    const std::vector<float>& kv_pad, bool causal) {
  const int d = dims.d;
  const int dh = d / dims.heads;
  const int b = q_h->shape[0];
  const int sq = q_h->shape[1];
  const int sk = kv_h->shape[1];

  auto q = add(tape, matmul(tape, q_h, p.wq), p.bq);
  auto k = add(tape, matmul(tape, kv_h, p.wk), p.bk);
  auto v = add(tape, matmul(tape, kv_h, p.wv), p.bv);

  // (B,Sq,Sk) mask: 1 where the key is PAD or ahead of a causal query.
  std::vector<float> mask(std::size_t(b) * sq * sk, 0.0f);
  for (int bi = 0; bi < b; ++bi) {
    for (int i = 0; i < sq; ++i) {
      for (int j = 0; j < sk; ++j) {
        const bool banned = kv_pad[std::size_t(bi) * sk + j] != 0.0f ||
                            (causal && j > i);
        if (banned) mask[(std::size_t(bi) * sq + i) * sk + j] = 1.0f;
      }
    }
  }

  std::vector<TensorPtr> heads;
  for (int h = 0; h < dims.heads; ++h) {
    auto qh = slice_lastdim(tape, q, h * dh, dh);
    auto kh = slice_lastdim(tape, k, h * dh, dh);
    auto vh = slice_lastdim(tape, v, h * dh, dh);
    auto scores = scale(tape, matmul(tape, qh, transpose_last2(tape, kh)),
                        1.0f / std::sqrt(static_cast<float>(dh)));
    scores = masked_fill(tape, scores, mask, -1e9f);
    auto att = softmax_lastdim(tape, scores);
    heads.push_back(matmul(tape, att, vh));
  }
  auto ctx = concat_lastdim(tape, heads);
  return add(tape, matmul(tape, ctx, p.wo), p.bo);
}

TensorPtr ffn_forward(Tape& tape, const FfnParams& p, const TensorPtr& h) {
  auto a = relu(tape, add(tape, matmul(tape, h, p.w1), p.b1));
  return add(tape, matmul(tape, a, p.w2), p.b2);
}

TensorPtr norm(Tape& tape, const LayerNormParams& ln, const TensorPtr& h) {
  return layernorm(tape, h, ln.gain, ln.bias);
}

}  // namespace

Encoded encode_seq(Tape& tape, const Branch& branch,
                   const std::vector<tok::TokenSeq>& inputs,
                   const tok::Vocabulary& vocab) {
  if (branch.id.kind != BranchKind::Encoder) {
    throw MissingBranch("encode_seq on a decoder branch " + branch.id.str());
  }
  if (branch.vocab_hash != vocab.content_hash) {
    throw VocabMismatch("branch " + branch.id.str() +
                        " was built for a different vocabulary");
  }
  Encoded enc;
  enc.batch = pad_batch(inputs, vocab.specials.pad);
  const auto& pb = enc.batch;

  auto h = scale(tape, embed_lookup(tape, branch.embed, pb.ids, pb.batch, pb.seq),
                 std::sqrt(float(branch.dims.d)));
  h = add(tape, h, positions(pb.batch, pb.seq, branch.dims.d));
  for (const auto& layer : branch.layers) {
    auto n1 = norm(tape, layer.ln1, h);
    auto a = attention(tape, layer.self_attn, branch.dims, n1, n1, pb.pad,
                       /*causal=*/false);
    h = add(tape, h, a);
    h = add(tape, h, ffn_forward(tape, layer.ffn, norm(tape, layer.ln2, h)));
  }
  enc.hidden = norm(tape, branch.final_ln, h);
  return enc;
}

TensorPtr decode_logits(Tape& tape, const Branch& branch, const Encoded& enc,
                        const PaddedBatch& tgt_prefix) {
  if (branch.id.kind != BranchKind::Decoder) {
    throw MissingBranch("decode_logits on an encoder branch " + branch.id.str());
  }
  if (enc.hidden->shape.back() != branch.dims.d) {
    throw DimMismatch("encoder d=" + std::to_string(enc.hidden->shape.back()) +
                      " vs decoder d=" + std::to_string(branch.dims.d));
  }
  if (enc.hidden->shape[0] != tgt_prefix.batch) {
    throw ShapeMismatch("encoder batch " + std::to_string(enc.hidden->shape[0]) +
                        " vs prefix batch " + std::to_string(tgt_prefix.batch));
  }
  auto h = scale(tape,
                 embed_lookup(tape, branch.embed, tgt_prefix.ids,
                              tgt_prefix.batch, tgt_prefix.seq),
                 std::sqrt(float(branch.dims.d)));
  h = add(tape, h, positions(tgt_prefix.batch, tgt_prefix.seq, branch.dims.d));
  for (const auto& layer : branch.layers) {
    auto n1 = norm(tape, layer.ln1, h);
    auto a = attention(tape, layer.self_attn, branch.dims, n1, n1,
                       tgt_prefix.pad, /*causal=*/true);
    h = add(tape, h, a);
    auto c = attention(tape, layer.cross_attn, branch.dims,
                       norm(tape, layer.ln2, h), enc.hidden, enc.batch.pad,
                       /*causal=*/false);
    h = add(tape, h, c);
    h = add(tape, h, ffn_forward(tape, layer.ffn, norm(tape, layer.ln3, h)));
  }
  h = norm(tape, branch.final_ln, h);
  return add(tape, matmul(tape, h, branch.out_w), branch.out_b);
}

// ---------------------------------------------------------------------------
// Losses and decoding

namespace {

void check_flow_batch(const FlowSpec& spec,
                      const std::vector<corpus::ParallelPair>& batch) {
  if (spec.flow == Flow::Enc) {
    for (const auto& p : batch) {
      if (p.src_lang.normalized != spec.encoder->id.scope) {
        throw FlowDataMismatch("Enc flow for '" + spec.encoder->id.scope +
                               "' got source language '" +
                               p.src_lang.normalized + "'");
      }
    }
  } else if (spec.flow == Flow::Dec) {
    for (const auto& p : batch) {
      if (p.tgt_lang.normalized != spec.decoder->id.scope) {
        throw FlowDataMismatch("Dec flow for '" + spec.decoder->id.scope +
                               "' got target language '" +
                               p.tgt_lang.normalized + "'");
      }
    }
  }
}

}  // namespace

TensorPtr flow_loss(Tape& tape, const FlowSpec& spec,
                    const std::vector<corpus::ParallelPair>& batch,
                    const tok::Vocabulary& vocab) {
  if (batch.empty()) throw FlowDataMismatch("empty batch");
  if (spec.encoder->dims.d != spec.decoder->dims.d) {
    throw DimMismatch("encoder d=" + std::to_string(spec.encoder->dims.d) +
                      " vs decoder d=" + std::to_string(spec.decoder->dims.d));
  }
  if (spec.decoder->vocab_hash != vocab.content_hash) {
    throw VocabMismatch("decoder " + spec.decoder->id.str() +
                        " was built for a different vocabulary");
  }
  check_flow_batch(spec, batch);

  std::vector<tok::TokenSeq> src_seqs;
  std::vector<tok::TokenSeq> prefix_seqs;   // [tgt_tag, y1..yn]
  std::vector<tok::TokenSeq> target_seqs;   // [y1..yn, EOS]
  for (const auto& p : batch) {
    src_seqs.push_back(tok::encode(p.src_text, p.src_lang, vocab));
    auto full = tok::encode(p.tgt_text, p.tgt_lang, vocab);
    tok::TokenSeq prefix, target;
    prefix.ids.assign(full.ids.begin(), full.ids.end() - 1);  // drop EOS
    target.ids.assign(full.ids.begin() + 1, full.ids.end());  // drop tag
    prefix_seqs.push_back(std::move(prefix));
    target_seqs.push_back(std::move(target));
  }

  auto enc = encode_seq(tape, *spec.encoder, src_seqs, vocab);
  auto prefix = pad_batch(prefix_seqs, vocab.specials.pad);
  auto logits = decode_logits(tape, *spec.decoder, enc, prefix);

  auto targets = pad_batch(target_seqs, vocab.specials.pad);
  std::vector<float> loss_mask(targets.pad.size());
  for (std::size_t i = 0; i < targets.pad.size(); ++i) {
    loss_mask[i] = targets.pad[i] == 0.0f ? 1.0f : 0.0f;
  }
  return cross_entropy(tape, logits, targets.ids, loss_mask);
}

namespace {

std::vector<float> last_position_logits(const TensorPtr& logits, int pos) {
  const int vocab = logits->shape[2];
  std::vector<float> out(vocab);
  std::copy_n(logits->data.data() + std::size_t(pos) * vocab, vocab, out.begin());
  return out;
}

}  // namespace

std::string greedy_translate(const FlowSpec& spec, const std::string& src,
                             const std::string& src_lg, const std::string& tgt_lg,
                             const tok::Vocabulary& vocab, int max_len) {
  const int tgt_tag = vocab.tag(tgt_lg);
  Tape tape;
  auto enc = encode_seq(tape, *spec.encoder, {tok::encode(src, src_lg, vocab)},
                        vocab);
  std::vector<int> prefix{tgt_tag};
  for (int t = 0; t < max_len; ++t) {
    Tape step_tape;
    tok::TokenSeq ps;
    ps.ids = prefix;
    auto pb = pad_batch({ps}, vocab.specials.pad);
    auto logits = decode_logits(step_tape, *spec.decoder, enc, pb);
    auto row = last_position_logits(logits, static_cast<int>(prefix.size()) - 1);
    const int next = static_cast<int>(
        std::max_element(row.begin(), row.end()) - row.begin());
    if (next == vocab.specials.eos) break;
    prefix.push_back(next);
  }
  tok::TokenSeq out;
  out.ids = prefix;
  out.ids.push_back(vocab.specials.eos);
  return tok::decode(out, vocab);
}

std::string beam_translate(const FlowSpec& spec, const std::string& src,
                           const std::string& src_lg, const std::string& tgt_lg,
                           const tok::Vocabulary& vocab, int max_len, int width) {
  if (width <= 1) return greedy_translate(spec, src, src_lg, tgt_lg, vocab, max_len);
  const int tgt_tag = vocab.tag(tgt_lg);
  Tape tape;
  auto enc = encode_seq(tape, *spec.encoder, {tok::encode(src, src_lg, vocab)},
                        vocab);

  struct Hyp {
    std::vector<int> ids;
    double logprob = 0.0;
    bool done = false;
    double norm_score() const {
      return logprob / std::max<std::size_t>(1, ids.size() - 1);
    }
  };
  std::vector<Hyp> beam{{{tgt_tag}, 0.0, false}};

  for (int t = 0; t < max_len; ++t) {
    std::vector<Hyp> next;
    for (const auto& h : beam) {
      if (h.done) {
        next.push_back(h);
        continue;
      }
      Tape step_tape;
      tok::TokenSeq ps;
      ps.ids = h.ids;
      auto pb = pad_batch({ps}, vocab.specials.pad);
      auto logits = decode_logits(step_tape, *spec.decoder, enc, pb);
      auto row = last_position_logits(logits, static_cast<int>(h.ids.size()) - 1);
      // log-softmax
      float mx = *std::max_element(row.begin(), row.end());
      double sum = 0.0;
      for (float x : row) sum += std::exp(double(x) - mx);
      const double lse = mx + std::log(sum);
      // top-width continuations
      std::vector<int> order(row.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      std::partial_sort(order.begin(), order.begin() + width, order.end(),
                        [&](int a, int b) { return row[a] > row[b]; });
      for (int k = 0; k < width; ++k) {
        Hyp nh = h;
        nh.logprob += row[order[k]] - lse;
        if (order[k] == vocab.specials.eos) {
          nh.done = true;
        } else {
          nh.ids.push_back(order[k]);
        }
        next.push_back(std::move(nh));
      }
    }
    std::sort(next.begin(), next.end(),
              [](const Hyp& a, const Hyp& b) { return a.norm_score() > b.norm_score(); });
    next.resize(std::min<std::size_t>(next.size(), width));
    beam = std::move(next);
    if (std::all_of(beam.begin(), beam.end(), [](const Hyp& h) { return h.done; })) {
      break;
    }
  }
  const auto& best = *std::max_element(
      beam.begin(), beam.end(),
      [](const Hyp& a, const Hyp& b) { return a.norm_score() < b.norm_score(); });
  tok::TokenSeq out;
  out.ids = best.ids;
  out.ids.push_back(vocab.specials.eos);
  return tok::decode(out, vocab);
}

}  // namespace lego::model
