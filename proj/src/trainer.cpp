#include "lego/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <numeric>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lego::train {

namespace {

const model::BranchId kMEnc = model::BranchId::encoder("multi");
const model::BranchId kMDec = model::BranchId::decoder("multi");

std::string file_safe(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    if (c == ':' || c == '/') c = '_';
  }
  return out;
}

std::string log_json(const StepLog& log) {
  json j;
  j["stage"] = log.stage;
  j["center"] = log.center;
  j["shard"] = log.shard_id;
  j["epoch"] = log.epoch;
  j["step"] = log.step;
  j["flow"] = log.flow;
  json losses = json::object();
  if (log.l_m >= 0) losses["l_m"] = log.l_m;
  if (log.l_e >= 0) losses["l_e"] = log.l_e;
  if (log.l_d >= 0) losses["l_d"] = log.l_d;
  j["losses"] = std::move(losses);
  j["tokens"] = log.tokens;
  j["wall_time"] = log.wall_time;
  return j.dump();
}

}  // namespace

std::uint64_t Plan::digest() const {
  json j;
  j["dims"] = {dims.d, dims.heads, dims.n_layers, dims.ff_mult};
  j["centers"] = centers;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["token_budget"] = token_budget;
  j["lr"] = lr;
  j["joint_dec_mix"] = joint_dec_mix;
  return fnv1a(j.dump());
}

double StepLog::loss() const {
  double total = 0.0;
  int parts = 0;
  for (double l : {l_m, l_e, l_d}) {
    if (l >= 0) {
      total += l;
      ++parts;
    }
  }
  return parts ? total / parts : 0.0;
}

std::vector<std::size_t> batch_order(std::uint64_t seed, int stage,
                                     const std::string& center, int epoch,
                                     int shard_id, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::string label = "batches:" + std::to_string(stage) + ":" + center +
                            ":" + std::to_string(shard_id) + ":" +
                            std::to_string(epoch);
  Rng rng(derive_seed(seed, label));
  rng.shuffle(order);
  return order;
}

Trainer::Trainer(Plan plan, registry::BranchStore& store, tok::Vocabulary vocab)
    : plan_(std::move(plan)), store_(store), vocab_(std::move(vocab)) {
  if (plan_.centers.empty()) throw ConfigError("training plan has no centers");
  if (plan_.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (plan_.token_budget < 1) throw ConfigError("token budget must be positive");
  if (!plan_.log_path.empty()) log_.open(plan_.log_path, std::ios::app);
  load_state();
}

void Trainer::ensure_initialized() {
  auto ensure = [&](const model::BranchId& id) {
    if (!store_.contains(id)) {
      store_.put(model::init_branch(id, plan_.dims, vocab_, plan_.seed));
    }
  };
  ensure(kMEnc);
  ensure(kMDec);
  for (const auto& c : plan_.centers) ensure(model::BranchId::encoder(c));
}

tensor::AdamState& Trainer::adam_for(const std::string& branch_id) {
  auto it = adam_.find(branch_id);
  if (it != adam_.end()) return it->second;
  const fs::path p =
      fs::path(store_.dir()) / ("adam_" + file_safe(branch_id) + ".bin");
  tensor::AdamState state;
  if (fs::exists(p)) {
    state = registry::load_adam_state(p.string());
  }
  state.cfg.lr = plan_.lr;
  return adam_.emplace(branch_id, std::move(state)).first->second;
}

void Trainer::note_residency() {
  max_resident_ = std::max(max_resident_, store_.ledger().loaded.size());
}

std::size_t Trainer::pair_tokens(const corpus::ParallelPair& p) const {
  return tok::encode(p.src_text, p.src_lang, vocab_).ids.size() +
         tok::encode(p.tgt_text, p.tgt_lang, vocab_).ids.size();
}

std::vector<std::vector<corpus::ParallelPair>> Trainer::make_batches(
    const std::vector<corpus::ParallelPair>& data, int stage,
    const std::string& center, int epoch, int shard_id) const {
  std::vector<std::vector<corpus::ParallelPair>> batches;
  if (data.empty()) return batches;
  const auto order =
      batch_order(plan_.seed, stage, center, epoch, shard_id, data.size());
  std::vector<corpus::ParallelPair> batch;
  std::size_t tokens = 0;
  for (std::size_t idx : order) {
    const auto& p = data[idx];
    const std::size_t t = pair_tokens(p);
    if (!batch.empty() && tokens + t > std::size_t(plan_.token_budget)) {
      batches.push_back(std::move(batch));
      batch.clear();
      tokens = 0;
    }
    batch.push_back(p);
    tokens += t;
  }
  if (!batch.empty()) batches.push_back(std::move(batch));
  return batches;
}

StepLog Trainer::stage1_step(const std::string& center,
                             const std::vector<corpus::ParallelPair>& enc_batch,
                             const std::vector<corpus::ParallelPair>& mix_batch) {
  const auto t0 = std::chrono::steady_clock::now();
  auto menc = store_.load(kMEnc);
  auto mdec = store_.load(kMDec);
  auto eenc = store_.load(model::BranchId::encoder(center));
  note_residency();

  StepLog log;
  log.stage = 1;
  log.center = center;
  if (!enc_batch.empty()) {
    tensor::Tape tape;
    auto loss =
        model::flow_loss(tape, model::make_flow(eenc, mdec), enc_batch, vocab_);
    tape.backward(loss);
    log.l_e = loss->data[0];
    for (const auto& p : enc_batch) log.tokens += pair_tokens(p);
  }
  if (!mix_batch.empty()) {
    tensor::Tape tape;
    auto loss =
        model::flow_loss(tape, model::make_flow(menc, mdec), mix_batch, vocab_);
    tape.backward(loss);
    log.l_m = loss->data[0];
    for (const auto& p : mix_batch) log.tokens += pair_tokens(p);
  }
  if (log.l_e < 0 && log.l_m < 0) {
    throw FlowDataMismatch("stage-1 step with no data");
  }

  for (auto& branch : {menc, mdec, eenc}) {
    for (auto& p : branch->parameters()) p->ensure_grad();
    tensor::adam_step(branch->parameters(), adam_for(branch->id.str()));
  }

  log.flow = log.l_e >= 0 ? (log.l_m >= 0 ? "Enc+Mix" : "Enc") : "Mix";
  log.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return log;
}

model::BranchPtr Trainer::begin_stage2(const std::string& center) {
  const auto dec_id = model::BranchId::decoder(center);
  if (store_.contains(dec_id)) return store_.load(dec_id);
  auto mdec = store_.load(kMDec);
  auto ddec = mdec->clone(dec_id);
  store_.put(ddec);
  return store_.load(dec_id);
}

StepLog Trainer::stage2_step(const std::string& center,
                             const std::vector<corpus::ParallelPair>& dec_batch) {
  if (dec_batch.empty()) throw FlowDataMismatch("stage-2 step with no data");
  const auto t0 = std::chrono::steady_clock::now();
  auto menc = store_.load(kMEnc);
  auto ddec = store_.load(model::BranchId::decoder(center));
  note_residency();

  StepLog log;
  log.stage = 2;
  log.center = center;
  {
    tensor::Tape tape;
    auto loss =
        model::flow_loss(tape, model::make_flow(menc, ddec), dec_batch, vocab_);
    tape.backward(loss);
    log.l_d = loss->data[0];
  }
  for (const auto& p : dec_batch) log.tokens += pair_tokens(p);
  for (auto& p : ddec->parameters()) p->ensure_grad();
  tensor::adam_step(ddec->parameters(), adam_for(ddec->id.str()));

  if (plan_.joint_dec_mix) {
    auto mdec = store_.load(kMDec);
    note_residency();
    tensor::Tape tape;
    auto loss =
        model::flow_loss(tape, model::make_flow(menc, mdec), dec_batch, vocab_);
    tape.backward(loss);
    log.l_m = loss->data[0];
    for (auto& branch : {menc, mdec}) {
      for (auto& p : branch->parameters()) p->ensure_grad();
      tensor::adam_step(branch->parameters(), adam_for(branch->id.str()));
    }
  } else {
    // The multilingual encoder stays frozen: discard whatever gradient the
    // backward pass accumulated into it.
    for (auto& p : menc->parameters()) p->zero_grad();
  }

  log.flow = plan_.joint_dec_mix ? "Dec+Mix" : "Dec";
  log.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return log;
}

std::string Trainer::state_path() const {
  return (fs::path(store_.dir()) / "train_state.json").string();
}

void Trainer::load_state() {
  std::ifstream in(state_path());
  if (!in) return;
  json j;
  try {
    in >> j;
  } catch (const json::exception&) {
    throw CorruptCheckpoint("unreadable training state " + state_path());
  }
  const auto stored = j.at("plan_digest").get<std::uint64_t>();
  if (stored != plan_.digest()) {
    throw ConfigError("training state in " + store_.dir() +
                      " belongs to a different plan");
  }
  for (const auto& u : j.at("done")) done_.insert(u.get<std::string>());
}

void Trainer::checkpoint_unit(const std::string& unit,
                              const std::vector<model::BranchPtr>& branches) {
  for (const auto& b : branches) {
    store_.put(b);
    auto it = adam_.find(b->id.str());
    if (it != adam_.end()) {
      const fs::path p =
          fs::path(store_.dir()) / ("adam_" + file_safe(b->id.str()) + ".bin");
      registry::save_adam_state(it->second, p.string());
    }
  }
  done_.insert(unit);
  json j;
  j["plan_digest"] = plan_.digest();
  j["done"] = json::array();
  for (const auto& u : done_) j["done"].push_back(u);
  std::ofstream out(state_path(), std::ios::trunc);
  out << j.dump(2) << "\n";
}

void Trainer::write_log(const StepLog& log) {
  if (log_.is_open()) log_ << log_json(log) << std::endl;
}

void Trainer::run(const std::vector<corpus::Shard>& shards) {
  ensure_initialized();
  int finished_units = 0;
  auto budget_left = [&] {
    return plan_.max_units < 0 || finished_units < plan_.max_units;
  };

  auto shards_for = [&](const std::string& center) {
    std::vector<const corpus::Shard*> out;
    for (const auto& s : shards) {
      if (s.center_language.normalized == center) out.push_back(&s);
    }
    return out;
  };
  auto unit_key = [](int stage, const std::string& center, int epoch,
                     int shard_id) {
    return std::to_string(stage) + ":" + center + ":" + std::to_string(epoch) +
           ":" + std::to_string(shard_id);
  };

  for (const auto& center : plan_.centers) {
    for (int epoch = 0; epoch < plan_.epochs && budget_left(); ++epoch) {
      for (const auto* s : shards_for(center)) {
        if (!budget_left()) break;
        const std::string unit = unit_key(1, center, epoch, s->shard_id);
        if (done_.count(unit)) continue;
        const auto& mix_data = s->multilingual_sample.empty()
                                   ? s->many_to_one
                                   : s->multilingual_sample;
        auto enc_batches =
            make_batches(s->one_to_many, 1, center, epoch, s->shard_id);
        auto mix_batches =
            make_batches(mix_data, 1, center, epoch + 1000, s->shard_id);
        const std::size_t steps =
            std::max(enc_batches.size(), mix_batches.size());
        for (std::size_t step = 0; step < steps; ++step) {
          const std::vector<corpus::ParallelPair> empty;
          auto log = stage1_step(
              center,
              enc_batches.empty() ? empty
                                  : enc_batches[step % enc_batches.size()],
              mix_batches.empty() ? empty
                                  : mix_batches[step % mix_batches.size()]);
          log.shard_id = s->shard_id;
          log.epoch = epoch;
          log.step = static_cast<int>(step);
          write_log(log);
        }
        checkpoint_unit(unit, {store_.load(kMEnc), store_.load(kMDec),
                               store_.load(model::BranchId::encoder(center))});
        ++finished_units;
      }
    }
    store_.unload(model::BranchId::encoder(center));
    if (!budget_left()) return;
  }

  for (const auto& center : plan_.centers) {
    auto ddec = begin_stage2(center);
    if (!plan_.joint_dec_mix) store_.unload(kMDec);
    for (int epoch = 0; epoch < plan_.epochs && budget_left(); ++epoch) {
      for (const auto* s : shards_for(center)) {
        if (!budget_left()) break;
        const std::string unit = unit_key(2, center, epoch, s->shard_id);
        if (done_.count(unit)) continue;
        if (s->many_to_one.empty()) continue;
        auto batches =
            make_batches(s->many_to_one, 2, center, epoch, s->shard_id);
        for (std::size_t step = 0; step < batches.size(); ++step) {
          auto log = stage2_step(center, batches[step]);
          log.shard_id = s->shard_id;
          log.epoch = epoch;
          log.step = static_cast<int>(step);
          write_log(log);
        }
        std::vector<model::BranchPtr> save{ddec};
        if (plan_.joint_dec_mix) {
          save.push_back(store_.load(kMEnc));
          save.push_back(store_.load(kMDec));
        }
        checkpoint_unit(unit, save);
        ++finished_units;
      }
    }
    store_.unload(model::BranchId::decoder(center));
    if (!budget_left()) return;
  }
}

}  // namespace lego::train
