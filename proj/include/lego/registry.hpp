#pragma once

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lego/branches.hpp"

namespace lego::registry {

// Checkpoint binary layout (little-endian):
//   magic "LEGO" | version u16 | header_len u32 | header JSON |
//   f32 payload | fnv1a digest of all preceding bytes, u64
// The header carries branch id, dims, vocab hash and the tensor directory
// (name, shape, float offset). Field order is fixed, so identical branches
// produce identical files.
inline constexpr char kMagic[4] = {'L', 'E', 'G', 'O'};
inline constexpr std::uint16_t kVersion = 1;

void save_branch(const model::Branch& branch, const std::string& path);
model::BranchPtr load_branch(const std::string& path);

void save_adam_state(const tensor::AdamState& state, const std::string& path);
tensor::AdamState load_adam_state(const std::string& path);

struct ResidencyLedger {
  struct Entry {
    std::size_t params = 0;
    std::size_t bytes = 0;
  };
  std::map<std::string, Entry> loaded;  // by branch id string
  std::size_t peak_bytes = 0;

  std::size_t total_bytes() const;
  std::size_t total_params() const;
  void add(const model::Branch& branch);
  void remove(const std::string& id);
};

// One file per branch plus a manifest index. Mutations are serialized by an
// internal mutex; loaded branches are immutable from the store's viewpoint.
class BranchStore {
 public:
  explicit BranchStore(std::string dir);

  void put(const model::BranchPtr& branch);
  bool contains(const model::BranchId& id) const;
  std::vector<model::BranchId> list() const;
  std::string file_of(const model::BranchId& id) const;

  // Loads into residency (no-op if already resident).
  model::BranchPtr load(const model::BranchId& id);
  void unload(const model::BranchId& id);
  void unload_all();
  model::BranchPtr resident(const model::BranchId& id) const;

  // Loads exactly the two branches (unloading everything else) and returns
  // a runnable spec.
  model::FlowSpec compose(const model::BranchId& encoder_id,
                          const model::BranchId& decoder_id);

  const ResidencyLedger& ledger() const { return ledger_; }
  void reset_peak();
  const std::string& dir() const { return dir_; }

 private:
  void load_manifest();
  void save_manifest() const;

  std::string dir_;
  std::map<std::string, std::string> files_;  // id string -> file name
  std::map<std::string, model::BranchPtr> resident_;
  ResidencyLedger ledger_;
  mutable std::mutex mu_;
};

// Background branch loading on a single worker thread; fully validated
// branches are handed off through a one-slot queue. Overlapping the load
// with compute must not change any numerical result.
class Prefetcher {
 public:
  explicit Prefetcher(BranchStore& store);
  ~Prefetcher();

  void request(const model::BranchId& id);
  model::BranchPtr wait();  // blocks until the requested branch is ready

 private:
  void run();

  BranchStore& store_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<model::BranchId> pending_;
  model::BranchPtr ready_;
  bool stop_ = false;
};

struct ResidencyComparison {
  int k = 0;
  std::size_t branch_bytes = 0;    // per-branch size (all equal)
  std::size_t multiway_bytes = 0;  // all 2K branches resident
  std::size_t lego_bytes = 0;      // multilingual pair + one specific branch
  std::uint64_t ratio_num = 0;     // loaded-byte ratio, reduced fraction
  std::uint64_t ratio_den = 0;
  double multiway_seconds = 0.0;   // wall time to materialize each scenario
  double lego_seconds = 0.0;
};

// Synthesizes K equal-size encoder+decoder pairs (scope list, "multi"
// first) for the residency benchmark. Encoder embedding tables get extra
// rows so both kinds weigh exactly the same number of bytes; vocab_rows
// must be a multiple of dims.d for that padding to come out whole.
void make_bench_branches(BranchStore& store,
                         const std::vector<std::string>& scopes,
                         const model::Dims& dims, int vocab_rows);

// Scenario comparison behind Table-2-style reporting. `scopes` lists the K
// branch scopes present in the store as encoder+decoder pairs; the first
// must be "multi".
ResidencyComparison residency_report(BranchStore& store,
                                     const std::vector<std::string>& scopes);

std::string residency_report_json(const ResidencyComparison& cmp);
std::string residency_report_text(const ResidencyComparison& cmp);

struct FlowDecision {
  model::BranchId encoder = model::BranchId::encoder("multi");
  model::BranchId decoder = model::BranchId::decoder("multi");
  std::string rationale;
  std::string warning;  // nonempty when a missing branch forced a fallback
};

// Routing policy for a translation into `center`: an explicit override wins;
// otherwise low-resource directions ride the multilingual pair and
// high-resource ones the specialized decoder. The resource level is operator
// input, not inferred. A missing branch degrades to the multilingual pair.
FlowDecision select_flow(const BranchStore& store, const std::string& center,
                         const std::string& resource_level,
                         const std::string& enc_override = "",
                         const std::string& dec_override = "");

}  // namespace lego::registry
