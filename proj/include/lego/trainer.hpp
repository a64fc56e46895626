#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lego/branches.hpp"
#include "lego/registry.hpp"

namespace lego::train {

// Desk-scale defaults; the larger published-style settings (8000-token
// budget, 70 shards, 7 centers) stay reachable through config.
struct Plan {
  model::Dims dims;
  std::vector<std::string> centers;  // trained in this order
  std::uint64_t seed = 1;
  int epochs = 2;             // passes per (center, shard) and stage
  int token_budget = 512;     // max tokens (src+tgt) per batch
  float lr = 1e-3f;
  // Ablation: stage 2 trains Dec flow and Mix flow jointly, so the
  // multilingual pair keeps moving while decoders specialize.
  bool joint_dec_mix = false;
  // Stop after this many checkpointed units (stage/center/epoch/shard),
  // leaving a resumable state; -1 runs to completion.
  int max_units = -1;
  std::string log_path;  // JSONL step log; empty disables logging

  std::uint64_t digest() const;  // identity of the schedule, for resume checks
};

struct StepLog {
  int stage = 1;
  std::string center;
  int shard_id = 0;
  int epoch = 0;
  int step = 0;
  std::string flow;
  double l_m = -1.0;  // negative = not computed this step
  double l_e = -1.0;
  double l_d = -1.0;
  std::size_t tokens = 0;
  double wall_time = 0.0;

  double loss() const;  // mean of the losses computed this step
};

// Deterministic batch order: a pure function of the tuple, independent of
// any previous shuffling.
std::vector<std::size_t> batch_order(std::uint64_t seed, int stage,
                                     const std::string& center, int epoch,
                                     int shard_id, std::size_t n);

// Two-stage trainer over a branch store. Stage 1 trains the multilingual
// pair together with per-center encoders; stage 2 clones the multilingual
// decoder into per-center decoders and specializes them against the frozen
// multilingual encoder.
class Trainer {
 public:
  Trainer(Plan plan, registry::BranchStore& store, tok::Vocabulary vocab);

  // Creates enc:multi, dec:multi and enc:<center> branches in the store when
  // absent. Branches of the same kind start from identical parameters.
  void ensure_initialized();

  // One Stage-1 step: Enc-flow loss on enc_batch plus Mix-flow loss on
  // mix_batch, gradients accumulated into the shared multilingual decoder
  // before one optimizer step per branch. Either batch may be empty.
  StepLog stage1_step(const std::string& center,
                      const std::vector<corpus::ParallelPair>& enc_batch,
                      const std::vector<corpus::ParallelPair>& mix_batch);

  // Clones dec:multi into dec:<center> (bit-identical) unless it exists.
  model::BranchPtr begin_stage2(const std::string& center);

  // One Stage-2 step: Dec-flow loss with the multilingual encoder frozen;
  // only dec:<center> is updated (plus the multilingual pair when the
  // joint ablation is on).
  StepLog stage2_step(const std::string& center,
                      const std::vector<corpus::ParallelPair>& dec_batch);

  // Full schedule: every stage-1 (center, epoch, shard) unit in plan order,
  // then every stage-2 unit. Progress is checkpointed per unit and resumed
  // on re-entry; interrupting between units loses nothing.
  void run(const std::vector<corpus::Shard>& shards);

  // Token-budget batches of one epoch pass, in seeded order.
  std::vector<std::vector<corpus::ParallelPair>> make_batches(
      const std::vector<corpus::ParallelPair>& data, int stage,
      const std::string& center, int epoch, int shard_id) const;

  std::size_t max_resident_branches() const { return max_resident_; }
  const tok::Vocabulary& vocab() const { return vocab_; }

 private:
  tensor::AdamState& adam_for(const std::string& branch_id);
  void checkpoint_unit(const std::string& unit,
                       const std::vector<model::BranchPtr>& branches);
  void write_log(const StepLog& log);
  void note_residency();
  std::string state_path() const;
  void load_state();
  std::size_t pair_tokens(const corpus::ParallelPair& p) const;

  Plan plan_;
  registry::BranchStore& store_;
  tok::Vocabulary vocab_;
  std::map<std::string, tensor::AdamState> adam_;
  std::set<std::string> done_;
  std::ofstream log_;
  std::size_t max_resident_ = 0;
};

}  // namespace lego::train
