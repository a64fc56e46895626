#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>

#include "lego/synth.hpp"
#include "lego/trainer.hpp"

using namespace lego;
using namespace lego::model;
using namespace lego::train;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("tmp_") += name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

synth::TaskSpec small_task() {
  synth::TaskSpec spec;
  spec.langs = {"aa", "bb"};
  spec.pairs_per_direction = 6;
  spec.min_words = 2;
  spec.max_words = 4;
  spec.seed = 11;
  return spec;
}

tok::Vocabulary task_vocab(const std::vector<corpus::ParallelPair>& pairs,
                           const std::vector<std::string>& langs) {
  std::vector<std::string> texts;
  for (const auto& p : pairs) {
    texts.push_back(p.src_text);
    texts.push_back(p.tgt_text);
  }
  return tok::train_bpe(texts, 4 + int(langs.size()) + 256 + 24, langs);
}

Plan small_plan() {
  Plan plan;
  plan.dims = Dims{16, 2, 1, 2};
  plan.centers = {"aa", "bb"};
  plan.seed = 5;
  plan.epochs = 1;
  plan.token_budget = 256;
  plan.lr = 1e-3f;
  return plan;
}

std::vector<corpus::ParallelPair> with_src(
    const std::vector<corpus::ParallelPair>& pairs, const std::string& lg,
    std::size_t n) {
  std::vector<corpus::ParallelPair> out;
  for (const auto& p : pairs) {
    if (p.src_lang.normalized == lg && out.size() < n) out.push_back(p);
  }
  return out;
}

std::vector<corpus::ParallelPair> with_tgt(
    const std::vector<corpus::ParallelPair>& pairs, const std::string& lg,
    std::size_t n) {
  std::vector<corpus::ParallelPair> out;
  for (const auto& p : pairs) {
    if (p.tgt_lang.normalized == lg && out.size() < n) out.push_back(p);
  }
  return out;
}

corpus::Shard shard_for(const std::vector<corpus::ParallelPair>& pairs,
                        const std::string& center, int shard_id) {
  corpus::Shard s;
  s.shard_id = shard_id;
  s.center_language = corpus::CodeTable::builtin().normalize(center);
  for (const auto& p : pairs) {
    if (p.src_lang.normalized == center) s.one_to_many.push_back(p);
    if (p.tgt_lang.normalized == center) s.many_to_one.push_back(p);
  }
  s.multilingual_sample = pairs;
  return s;
}

std::map<std::string, std::uint64_t> store_hashes(registry::BranchStore& store) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& id : store.list()) out[id.str()] = store.load(id)->hash();
  return out;
}

}  // namespace

TEST_CASE("plan digest identifies the schedule, not the run controls") {
  Plan a = small_plan();
  Plan b = a;
  CHECK(a.digest() == b.digest());
  b.max_units = 1;
  b.log_path = "somewhere.jsonl";
  CHECK(a.digest() == b.digest());  // resume controls are not identity
  b = a;
  b.lr = 2e-3f;
  CHECK(a.digest() != b.digest());
  b = a;
  b.centers = {"bb", "aa"};
  CHECK(a.digest() != b.digest());
  b = a;
  b.joint_dec_mix = true;
  CHECK(a.digest() != b.digest());
  b = a;
  b.dims.d = 32;
  CHECK(a.digest() != b.digest());
}

TEST_CASE("batch order is a seeded permutation, distinct per unit") {
  auto o1 = batch_order(5, 1, "aa", 0, 0, 50);
  auto o2 = batch_order(5, 1, "aa", 0, 0, 50);
  CHECK(o1 == o2);
  auto sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  CHECK(o1 != batch_order(5, 1, "aa", 1, 0, 50));
  CHECK(o1 != batch_order(5, 2, "aa", 0, 0, 50));
  CHECK(o1 != batch_order(5, 1, "bb", 0, 0, 50));
  CHECK(o1 != batch_order(6, 1, "aa", 0, 0, 50));
}

TEST_CASE("batches respect the token budget and cover every pair once") {
  TempDir dir("trainer_batches");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  Plan plan = small_plan();
  plan.token_budget = 64;
  registry::BranchStore store(dir.str());
  Trainer trainer(plan, store, vocab);

  auto batches = trainer.make_batches(pairs, 1, "aa", 0, 0);
  REQUIRE(!batches.empty());
  std::size_t covered = 0;
  for (const auto& b : batches) {
    REQUIRE(!b.empty());
    std::size_t tokens = 0;
    for (const auto& p : b) {
      tokens += tok::encode(p.src_text, p.src_lang, vocab).ids.size() +
                tok::encode(p.tgt_text, p.tgt_lang, vocab).ids.size();
    }
    if (b.size() > 1) CHECK(tokens <= std::size_t(plan.token_budget));
    covered += b.size();
  }
  CHECK(covered == pairs.size());
  CHECK(batches.size() > 1);

  auto again = trainer.make_batches(pairs, 1, "aa", 0, 0);
  REQUIRE(again.size() == batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    CHECK(again[i].size() == batches[i].size());
    for (std::size_t j = 0; j < batches[i].size(); ++j) {
      CHECK(again[i][j].src_text == batches[i][j].src_text);
    }
  }
}

TEST_CASE("trainer constructor rejects bad plans") {
  TempDir dir("trainer_badplan");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  registry::BranchStore store(dir.str());
  Plan p = small_plan();
  p.centers.clear();
  CHECK_THROWS_AS(Trainer(p, store, vocab), ConfigError);
  p = small_plan();
  p.epochs = 0;
  CHECK_THROWS_AS(Trainer(p, store, vocab), ConfigError);
  p = small_plan();
  p.token_budget = 0;
  CHECK_THROWS_AS(Trainer(p, store, vocab), ConfigError);
}

TEST_CASE("stage 1 updates only the multilingual pair and the center encoder") {
  TempDir dir("trainer_stage1");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  registry::BranchStore store(dir.str());
  Trainer trainer(small_plan(), store, vocab);
  trainer.ensure_initialized();

  auto before = store_hashes(store);
  REQUIRE(before.count("enc:aa") == 1);
  REQUIRE(before.count("enc:bb") == 1);
  store.unload_all();

  auto enc_batch = with_src(pairs, "aa", 3);
  auto mix_batch = with_tgt(pairs, "bb", 3);
  for (int i = 0; i < 3; ++i) {
    auto log = trainer.stage1_step("aa", enc_batch, mix_batch);
    CHECK(log.l_e >= 0.0);
    CHECK(log.l_m >= 0.0);
    CHECK(log.flow == "Enc+Mix");
  }
  auto after = store_hashes(store);
  CHECK(after["enc:multi"] != before["enc:multi"]);
  CHECK(after["dec:multi"] != before["dec:multi"]);
  CHECK(after["enc:aa"] != before["enc:aa"]);
  CHECK(after["enc:bb"] == before["enc:bb"]);  // other centers untouched
  CHECK(trainer.max_resident_branches() <= 3);

  // a center whose encoder never saw Enc-flow data has an all-zero optimizer
  // state, so a mix-only step leaves that encoder bit-identical
  auto mid = store_hashes(store);
  trainer.stage1_step("bb", {}, mix_batch);
  auto end = store_hashes(store);
  CHECK(end["enc:bb"] == mid["enc:bb"]);
  CHECK(end["dec:multi"] != mid["dec:multi"]);

  CHECK_THROWS_AS(trainer.stage1_step("aa", {}, {}), FlowDataMismatch);
}

TEST_CASE("stage 2 clones the decoder bit-exactly and freezes the encoder") {
  TempDir dir("trainer_stage2");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  registry::BranchStore store(dir.str());
  Trainer trainer(small_plan(), store, vocab);
  trainer.ensure_initialized();

  // move the multilingual pair off its initialization first
  auto mix = with_tgt(pairs, "aa", 3);
  for (int i = 0; i < 2; ++i) trainer.stage1_step("aa", {}, mix);

  auto mdec_hash = store.load(BranchId::decoder("multi"))->hash();
  auto ddec = trainer.begin_stage2("aa");
  CHECK(ddec->hash() == mdec_hash);
  CHECK(ddec->id.str() == "dec:aa");
  // idempotent: a second call returns the stored branch, no fresh clone
  CHECK(trainer.begin_stage2("aa")->hash() == mdec_hash);

  auto before = store_hashes(store);
  auto dec_batch = with_tgt(pairs, "aa", 3);
  for (int i = 0; i < 3; ++i) {
    auto log = trainer.stage2_step("aa", dec_batch);
    CHECK(log.flow == "Dec");
    CHECK(log.l_d >= 0.0);
    CHECK(log.l_m < 0.0);
  }
  auto after = store_hashes(store);
  CHECK(after["dec:aa"] != before["dec:aa"]);
  CHECK(after["enc:multi"] == before["enc:multi"]);  // frozen, bit-identical
  CHECK(after["dec:multi"] == before["dec:multi"]);
  CHECK(after["enc:aa"] == before["enc:aa"]);

  CHECK_THROWS_AS(trainer.stage2_step("aa", {}), FlowDataMismatch);
}

TEST_CASE("the joint ablation lets stage 2 move the multilingual pair") {
  TempDir dir("trainer_joint");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  registry::BranchStore store(dir.str());
  Plan plan = small_plan();
  plan.joint_dec_mix = true;
  Trainer trainer(plan, store, vocab);
  trainer.ensure_initialized();
  // warm up: a freshly initialized decoder has a zero output projection,
  // which blocks any gradient from reaching the encoders
  auto mix = with_tgt(pairs, "aa", 3);
  for (int i = 0; i < 2; ++i) trainer.stage1_step("aa", {}, mix);
  trainer.begin_stage2("aa");

  auto before = store_hashes(store);
  auto dec_batch = with_tgt(pairs, "aa", 3);
  auto log = trainer.stage2_step("aa", dec_batch);
  CHECK(log.flow == "Dec+Mix");
  CHECK(log.l_m >= 0.0);
  auto after = store_hashes(store);
  CHECK(after["dec:aa"] != before["dec:aa"]);
  CHECK(after["enc:multi"] != before["enc:multi"]);
  CHECK(after["dec:multi"] != before["dec:multi"]);
}

TEST_CASE("a full run matches an interrupted and resumed run bit for bit") {
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  std::vector<corpus::Shard> shards = {shard_for(pairs, "aa", 0),
                                       shard_for(pairs, "bb", 0)};

  TempDir dir_a("trainer_full");
  registry::BranchStore store_a(dir_a.str());
  {
    Trainer trainer(small_plan(), store_a, vocab);
    trainer.run(shards);
  }
  auto full = store_hashes(store_a);
  REQUIRE(full.count("dec:aa") == 1);
  REQUIRE(full.count("dec:bb") == 1);

  TempDir dir_b("trainer_resume");
  registry::BranchStore store_b(dir_b.str());
  {
    Plan p = small_plan();
    p.max_units = 1;  // stop after the first checkpointed unit
    Trainer trainer(p, store_b, vocab);
    trainer.run(shards);
  }
  CHECK_FALSE(store_b.contains(BranchId::decoder("aa")));
  {
    Plan p = small_plan();
    p.max_units = 2;  // partial again, exercising a second resume point
    registry::BranchStore store(dir_b.str());
    Trainer trainer(p, store, vocab);
    trainer.run(shards);
  }
  {
    registry::BranchStore store(dir_b.str());
    Trainer trainer(small_plan(), store, vocab);
    trainer.run(shards);
  }
  registry::BranchStore store_b2(dir_b.str());
  auto resumed = store_hashes(store_b2);
  CHECK(resumed == full);

  // rerunning a completed schedule changes nothing
  {
    Trainer trainer(small_plan(), store_a, vocab);
    trainer.run(shards);
  }
  CHECK(store_hashes(store_a) == full);
}

TEST_CASE("a state file from a different plan is refused") {
  TempDir dir("trainer_stateguard");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  std::vector<corpus::Shard> shards = {shard_for(pairs, "aa", 0),
                                       shard_for(pairs, "bb", 0)};
  registry::BranchStore store(dir.str());
  {
    Plan p = small_plan();
    p.max_units = 1;
    Trainer trainer(p, store, vocab);
    trainer.run(shards);
  }
  Plan other = small_plan();
  other.lr = 9e-3f;
  CHECK_THROWS_AS(Trainer(other, store, vocab), ConfigError);
}

TEST_CASE("step logs land in the jsonl file when enabled") {
  TempDir dir("trainer_log");
  auto pairs = synth::generate(small_task());
  auto vocab = task_vocab(pairs, {"aa", "bb"});
  registry::BranchStore store(dir.str());
  Plan plan = small_plan();
  plan.centers = {"aa"};
  plan.log_path = (dir.path / "steps.jsonl").string();
  Trainer trainer(plan, store, vocab);
  trainer.run({shard_for(pairs, "aa", 0)});

  std::ifstream in(plan.log_path);
  REQUIRE(in.good());
  std::string line;
  int lines = 0;
  bool saw_stage2 = false;
  while (std::getline(in, line)) {
    CHECK(line.find("\"flow\"") != std::string::npos);
    if (line.find("\"stage\":2") != std::string::npos) saw_stage2 = true;
    ++lines;
  }
  CHECK(lines > 0);
  CHECK(saw_stage2);
}
