#include "lego/registry.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace lego::registry {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32s(std::string& out, const std::vector<float>& vals) {
  for (float f : vals) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& what)
      : buf_(buf), what_(what) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void need(std::size_t n) {
    if (remaining() < n) throw CorruptCheckpoint(what_ + ": truncated file");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<unsigned char>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<unsigned char>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptCheckpoint(what + ": cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return buf;
}

void write_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CorruptCheckpoint("cannot write " + path);
}

std::string hex64(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

std::uint64_t payload_digest(const std::string& payload) {
  return fnv1a(payload.data(), payload.size());
}

// Same structure as init_branch but with zero tensors; the caller fills them
// from the checkpoint directory.
model::BranchPtr make_skeleton(const model::BranchId& id, const model::Dims& dims,
                               int vocab_size, std::uint64_t vocab_hash) {
  using tensor::Tensor;
  const int d = dims.d;
  const int ff = dims.d * dims.ff_mult;
  auto b = std::make_shared<model::Branch>();
  b->id = id;
  b->dims = dims;
  b->vocab_size = vocab_size;
  b->vocab_hash = vocab_hash;
  auto zero = [](std::vector<int> shape) {
    return Tensor::zeros(std::move(shape), true);
  };
  auto ln = [&] { return model::LayerNormParams{zero({d}), zero({d})}; };
  auto attn = [&] {
    return model::AttentionParams{zero({d, d}), zero({d}), zero({d, d}), zero({d}),
                                  zero({d, d}), zero({d}), zero({d, d}), zero({d})};
  };
  b->embed = zero({vocab_size, d});
  for (int i = 0; i < dims.n_layers; ++i) {
    model::Layer l;
    l.ln1 = ln();
    l.self_attn = attn();
    l.ln2 = ln();
    if (id.kind == model::BranchKind::Decoder) {
      l.cross_attn = attn();
      l.ln3 = ln();
    }
    l.ffn = {zero({d, ff}), zero({ff}), zero({ff, d}), zero({d})};
    b->layers.push_back(std::move(l));
  }
  b->final_ln = ln();
  if (id.kind == model::BranchKind::Decoder) {
    b->out_w = zero({d, vocab_size});
    b->out_b = zero({vocab_size});
  }
  for (auto& [name, t] : b->named_parameters()) t->owner = id.str();
  return b;
}

std::string sanitize_filename(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    if (c == ':' || c == '/') c = '_';
  }
  return out + ".ckpt";
}

std::uint64_t gcd64(std::uint64_t a, std::uint64_t b) {
  while (b) {
    a %= b;
    std::swap(a, b);
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoint files

void save_branch(const model::Branch& branch, const std::string& path) {
  json header;
  header["branch"] = branch.id.str();
  header["dims"] = {{"d", branch.dims.d},
                    {"heads", branch.dims.heads},
                    {"n_layers", branch.dims.n_layers},
                    {"ff_mult", branch.dims.ff_mult}};
  header["vocab_size"] = branch.vocab_size;
  header["vocab_hash"] = hex64(branch.vocab_hash);
  json dir = json::array();
  std::string payload;
  std::size_t offset = 0;
  for (const auto& [name, t] : branch.named_parameters()) {
    dir.push_back({{"name", name}, {"shape", t->shape}, {"offset", offset}});
    put_f32s(payload, t->data);
    offset += t->numel();
  }
  header["tensors"] = std::move(dir);

  std::string out;
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  const std::string hs = header.dump();
  put_u32(out, static_cast<std::uint32_t>(hs.size()));
  out += hs;
  out += payload;
  // digest over every preceding byte, so header tampering is caught too
  put_u64(out, fnv1a(out.data(), out.size()));
  write_file(path, out);
}

model::BranchPtr load_branch(const std::string& path) {
  const std::string buf = read_file(path, "checkpoint");
  Reader r(buf, "checkpoint");
  if (r.bytes(4) != std::string(kMagic, 4)) {
    throw CorruptCheckpoint("bad magic in " + path);
  }
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kVersion));
  }
  const std::uint32_t hlen = r.u32();
  json header;
  try {
    header = json::parse(r.bytes(hlen));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("bad header: ") + e.what());
  }
  if (r.remaining() < 8) throw CorruptCheckpoint("truncated payload");
  const std::size_t payload_len = r.remaining() - 8;
  if (payload_len % 4 != 0) throw CorruptCheckpoint("payload not f32-aligned");
  const std::string payload = r.bytes(payload_len);
  const std::uint64_t stored = r.u64();
  if (fnv1a(buf.data(), buf.size() - 8) != stored) {
    throw DigestMismatch("content digest mismatch in " + path);
  }

  try {
    const auto id = model::BranchId::parse(header.at("branch").get<std::string>());
    model::Dims dims;
    dims.d = header.at("dims").at("d").get<int>();
    dims.heads = header.at("dims").at("heads").get<int>();
    dims.n_layers = header.at("dims").at("n_layers").get<int>();
    dims.ff_mult = header.at("dims").at("ff_mult").get<int>();
    const int vocab_size = header.at("vocab_size").get<int>();
    const std::uint64_t vocab_hash =
        std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);

    auto b = make_skeleton(id, dims, vocab_size, vocab_hash);
    std::map<std::string, tensor::TensorPtr> by_name;
    for (auto& [name, t] : b->named_parameters()) by_name[name] = t;

    const std::size_t total_floats = payload_len / 4;
    for (const auto& e : header.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<int>>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        throw CorruptCheckpoint("unknown tensor '" + name + "'");
      }
      auto& t = it->second;
      if (shape != t->shape) {
        throw CorruptCheckpoint("tensor '" + name + "' has shape " +
                                tensor::shape_str(shape) + ", expected " +
                                tensor::shape_str(t->shape));
      }
      if (offset + t->numel() > total_floats) {
        throw CorruptCheckpoint("tensor '" + name + "' overruns payload");
      }
      std::memcpy(t->data.data(), payload.data() + offset * 4, t->numel() * 4);
    }
    return b;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("bad header: ") + e.what());
  }
}

void save_adam_state(const tensor::AdamState& state, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  std::string payload;
  put_u64(payload, static_cast<std::uint64_t>(state.step_count));
  put_f32s(payload, {state.cfg.lr, state.cfg.beta1, state.cfg.beta2, state.cfg.eps});
  put_u32(payload, static_cast<std::uint32_t>(state.m.size()));
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    put_u64(payload, state.m[i].size());
    put_f32s(payload, state.m[i]);
    put_f32s(payload, state.v[i]);
  }
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out += payload;
  put_u64(out, payload_digest(payload));
  write_file(path, out);
}

tensor::AdamState load_adam_state(const std::string& path) {
  const std::string buf = read_file(path, "optimizer state");
  Reader r(buf, "optimizer state");
  if (r.bytes(4) != std::string(kMagic, 4)) {
    throw CorruptCheckpoint("bad magic in " + path);
  }
  if (r.u16() != kVersion) throw VersionMismatch("optimizer state version");
  const std::uint32_t plen = r.u32();
  const std::string payload = r.bytes(plen);
  const std::uint64_t stored = r.u64();
  if (payload_digest(payload) != stored) {
    throw DigestMismatch("optimizer state digest mismatch in " + path);
  }
  Reader pr(payload, "optimizer state");
  tensor::AdamState state;
  state.step_count = static_cast<std::int64_t>(pr.u64());
  auto f32 = [&] {
    std::uint32_t bits = pr.u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  };
  state.cfg.lr = f32();
  state.cfg.beta1 = f32();
  state.cfg.beta2 = f32();
  state.cfg.eps = f32();
  const std::uint32_t nbuf = pr.u32();
  for (std::uint32_t i = 0; i < nbuf; ++i) {
    const std::size_t n = pr.u64();
    std::vector<float> m(n), v(n);
    for (auto& x : m) x = f32();
    for (auto& x : v) x = f32();
    state.m.push_back(std::move(m));
    state.v.push_back(std::move(v));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Residency ledger

std::size_t ResidencyLedger::total_bytes() const {
  std::size_t n = 0;
  for (const auto& [id, e] : loaded) n += e.bytes;
  return n;
}

std::size_t ResidencyLedger::total_params() const {
  std::size_t n = 0;
  for (const auto& [id, e] : loaded) n += e.params;
  return n;
}

void ResidencyLedger::add(const model::Branch& branch) {
  Entry e;
  e.params = branch.parameter_count();
  e.bytes = e.params * sizeof(float);
  loaded[branch.id.str()] = e;
  peak_bytes = std::max(peak_bytes, total_bytes());
}

void ResidencyLedger::remove(const std::string& id) { loaded.erase(id); }

// ---------------------------------------------------------------------------
// BranchStore

BranchStore::BranchStore(std::string dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
  load_manifest();
}

void BranchStore::load_manifest() {
  const fs::path mpath = fs::path(dir_) / "manifest.json";
  if (!fs::exists(mpath)) return;
  std::ifstream in(mpath);
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("bad store manifest: ") + e.what());
  }
  for (auto& [id, file] : m.at("branches").items()) {
    files_[id] = file.get<std::string>();
  }
}

void BranchStore::save_manifest() const {
  json m;
  m["version"] = 1;
  m["branches"] = json::object();
  for (const auto& [id, file] : files_) m["branches"][id] = file;
  std::ofstream out(fs::path(dir_) / "manifest.json", std::ios::trunc);
  out << m.dump(2) << "\n";
}

void BranchStore::put(const model::BranchPtr& branch) {
  std::lock_guard lk(mu_);
  const std::string id = branch->id.str();
  const std::string file = sanitize_filename(id);
  save_branch(*branch, (fs::path(dir_) / file).string());
  files_[id] = file;
  save_manifest();
  if (resident_.count(id)) resident_[id] = branch;
}

bool BranchStore::contains(const model::BranchId& id) const {
  std::lock_guard lk(mu_);
  return files_.count(id.str()) > 0;
}

std::vector<model::BranchId> BranchStore::list() const {
  std::lock_guard lk(mu_);
  std::vector<model::BranchId> out;
  for (const auto& [id, file] : files_) out.push_back(model::BranchId::parse(id));
  return out;
}

std::string BranchStore::file_of(const model::BranchId& id) const {
  std::lock_guard lk(mu_);
  auto it = files_.find(id.str());
  if (it == files_.end()) throw MissingBranch("no branch " + id.str() + " in store");
  return (fs::path(dir_) / it->second).string();
}

model::BranchPtr BranchStore::load(const model::BranchId& id) {
  {
    std::lock_guard lk(mu_);
    auto it = resident_.find(id.str());
    if (it != resident_.end()) return it->second;
  }
  auto branch = load_branch(file_of(id));
  std::lock_guard lk(mu_);
  resident_[id.str()] = branch;
  ledger_.add(*branch);
  return branch;
}

void BranchStore::unload(const model::BranchId& id) {
  std::lock_guard lk(mu_);
  resident_.erase(id.str());
  ledger_.remove(id.str());
}

void BranchStore::unload_all() {
  std::lock_guard lk(mu_);
  resident_.clear();
  ledger_.loaded.clear();
}

model::BranchPtr BranchStore::resident(const model::BranchId& id) const {
  std::lock_guard lk(mu_);
  auto it = resident_.find(id.str());
  return it == resident_.end() ? nullptr : it->second;
}

void BranchStore::reset_peak() {
  std::lock_guard lk(mu_);
  ledger_.peak_bytes = ledger_.total_bytes();
}

model::FlowSpec BranchStore::compose(const model::BranchId& encoder_id,
                                     const model::BranchId& decoder_id) {
  if (encoder_id.kind != model::BranchKind::Encoder) {
    throw MissingBranch(encoder_id.str() + " is not an encoder branch");
  }
  if (decoder_id.kind != model::BranchKind::Decoder) {
    throw MissingBranch(decoder_id.str() + " is not a decoder branch");
  }
  {
    std::lock_guard lk(mu_);
    std::vector<std::string> evict;
    for (const auto& [id, b] : resident_) {
      if (id != encoder_id.str() && id != decoder_id.str()) evict.push_back(id);
    }
    for (const auto& id : evict) {
      resident_.erase(id);
      ledger_.remove(id);
    }
  }
  auto enc = load(encoder_id);
  auto dec = load(decoder_id);
  if (enc->dims.d != dec->dims.d) {
    throw DimMismatch("cannot compose " + encoder_id.str() + " (d=" +
                      std::to_string(enc->dims.d) + ") with " + decoder_id.str() +
                      " (d=" + std::to_string(dec->dims.d) + ")");
  }
  if (enc->vocab_hash != dec->vocab_hash) {
    throw VocabMismatch("cannot compose " + encoder_id.str() + " and " +
                        decoder_id.str() + ": different vocabularies");
  }
  return model::make_flow(enc, dec);
}

// ---------------------------------------------------------------------------
// Prefetcher

Prefetcher::Prefetcher(BranchStore& store) : store_(store) {
  worker_ = std::thread([this] { run(); });
}

Prefetcher::~Prefetcher() {
  {
    std::lock_guard lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void Prefetcher::request(const model::BranchId& id) {
  {
    std::lock_guard lk(mu_);
    pending_ = id;
    ready_.reset();
  }
  cv_.notify_all();
}

model::BranchPtr Prefetcher::wait() {
  std::unique_lock lk(mu_);
  cv_.wait(lk, [this] { return ready_ != nullptr; });
  auto b = std::move(ready_);
  ready_.reset();
  return b;
}

void Prefetcher::run() {
  for (;;) {
    model::BranchId id;
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [this] { return stop_ || pending_.has_value(); });
      if (stop_) return;
      id = *pending_;
      pending_.reset();
    }
    auto b = store_.load(id);
    {
      std::lock_guard lk(mu_);
      ready_ = std::move(b);
    }
    cv_.notify_all();
  }
}

// ---------------------------------------------------------------------------
// Residency comparison

void make_bench_branches(BranchStore& store,
                         const std::vector<std::string>& scopes,
                         const model::Dims& dims, int vocab_rows) {
  if (vocab_rows % dims.d != 0) {
    throw ConfigError("bench vocab_rows must be a multiple of d");
  }
  const auto enc_count =
      make_skeleton(model::BranchId::encoder("x"), dims, vocab_rows, 0)
          ->parameter_count();
  const auto dec_count =
      make_skeleton(model::BranchId::decoder("x"), dims, vocab_rows, 0)
          ->parameter_count();
  const std::size_t diff = dec_count - enc_count;
  if (diff % dims.d != 0) {
    throw ConfigError("bench dims do not admit equal-size padding");
  }
  const int enc_rows = vocab_rows + static_cast<int>(diff / dims.d);
  for (const auto& scope : scopes) {
    store.put(make_skeleton(model::BranchId::encoder(scope), dims, enc_rows, 0));
    store.put(make_skeleton(model::BranchId::decoder(scope), dims, vocab_rows, 0));
  }
}

ResidencyComparison residency_report(BranchStore& store,
                                     const std::vector<std::string>& scopes) {
  if (scopes.empty() || scopes.front() != "multi") {
    throw ConfigError("residency comparison needs scopes starting with 'multi'");
  }
  using clock = std::chrono::steady_clock;
  ResidencyComparison cmp;
  cmp.k = static_cast<int>(scopes.size());

  store.unload_all();
  const auto t0 = clock::now();
  for (const auto& s : scopes) {
    store.load(model::BranchId::encoder(s));
    store.load(model::BranchId::decoder(s));
  }
  cmp.multiway_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  cmp.multiway_bytes = store.ledger().total_bytes();

  store.unload_all();
  const std::string specific = scopes.size() > 1 ? scopes[1] : scopes[0];
  const auto t1 = clock::now();
  store.load(model::BranchId::encoder("multi"));
  store.load(model::BranchId::decoder("multi"));
  store.load(model::BranchId::decoder(specific));
  cmp.lego_seconds = std::chrono::duration<double>(clock::now() - t1).count();
  cmp.lego_bytes = store.ledger().total_bytes();
  store.unload_all();

  cmp.branch_bytes = cmp.lego_bytes / 3;
  if (cmp.branch_bytes * 3 != cmp.lego_bytes ||
      cmp.branch_bytes * 2 * scopes.size() != cmp.multiway_bytes) {
    throw ConfigError("residency comparison needs equally sized branches");
  }
  std::uint64_t num = 2ull * cmp.k;
  std::uint64_t den = 3ull;
  const std::uint64_t g = gcd64(num, den);
  cmp.ratio_num = num / g;
  cmp.ratio_den = den / g;
  return cmp;
}

std::string residency_report_json(const ResidencyComparison& cmp) {
  json j;
  j["k"] = cmp.k;
  j["branch_bytes"] = cmp.branch_bytes;
  j["multiway_bytes"] = cmp.multiway_bytes;
  j["lego_bytes"] = cmp.lego_bytes;
  j["ratio"] = {{"num", cmp.ratio_num}, {"den", cmp.ratio_den}};
  j["multiway_seconds"] = cmp.multiway_seconds;
  j["lego_seconds"] = cmp.lego_seconds;
  return j.dump(2);
}

std::string residency_report_text(const ResidencyComparison& cmp) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "K=%d language groups, %zu bytes per branch\n"
                "  multiway: %2d branches resident, %zu bytes (%.6fs load)\n"
                "  lego:      3 branches resident, %zu bytes (%.6fs load)\n"
                "  memory ratio: %llu/%llu\n",
                cmp.k, cmp.branch_bytes, 2 * cmp.k, cmp.multiway_bytes,
                cmp.multiway_seconds, cmp.lego_bytes, cmp.lego_seconds,
                static_cast<unsigned long long>(cmp.ratio_num),
                static_cast<unsigned long long>(cmp.ratio_den));
  return buf;
}


FlowDecision select_flow(const BranchStore& store, const std::string& center,
                         const std::string& resource_level,
                         const std::string& enc_override,
                         const std::string& dec_override) {
  FlowDecision d;
  if (!enc_override.empty() || !dec_override.empty()) {
    if (!enc_override.empty()) d.encoder = model::BranchId::parse(enc_override);
    if (!dec_override.empty()) d.decoder = model::BranchId::parse(dec_override);
    d.rationale = "explicit override";
    if (!store.contains(d.encoder) || !store.contains(d.decoder)) {
      d.warning = "override branch missing, falling back to the multilingual pair";
      d.encoder = model::BranchId::encoder("multi");
      d.decoder = model::BranchId::decoder("multi");
    }
    return d;
  }
  if (resource_level == "high") {
    const auto specialized = model::BranchId::decoder(center);
    if (store.contains(specialized)) {
      d.decoder = specialized;
      d.rationale = "high-resource direction: specialized decoder";
    } else {
      d.warning = "no " + specialized.str() + ", falling back to the multilingual pair";
      d.rationale = "high-resource direction but decoder missing";
    }
    return d;
  }
  if (resource_level != "low") {
    throw ConfigError("resource level must be 'low' or 'high', got '" +
                      resource_level + "'");
  }
  d.rationale = "low-resource direction: multilingual pair";
  return d;
}

}  // namespace lego::registry

