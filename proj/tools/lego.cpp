#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lego/corpus.hpp"
#include "lego/metric.hpp"
#include "lego/registry.hpp"
#include "lego/synth.hpp"
#include "lego/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace lego;

namespace {

// Stable exit codes per error class, documented in --help.
const std::vector<std::string> kErrorOrder = {
    "EmptyText",         "DirectionTooSmall", "VocabTooSmall",
    "UnknownLanguageTag", "LengthMismatch",   "ShapeMismatch",
    "NonScalarLoss",     "MissingGrad",       "VocabMismatch",
    "DimMismatch",       "FlowDataMismatch",  "CorruptCheckpoint",
    "VersionMismatch",   "DigestMismatch",    "MissingBranch",
    "ConfigError"};

int exit_code_for(const std::string& name) {
  for (std::size_t i = 0; i < kErrorOrder.size(); ++i) {
    if (kErrorOrder[i] == name) return static_cast<int>(10 + i);
  }
  return 1;
}

std::string exit_code_table() {
  std::string out = "exit codes: 0 ok, 1 unexpected, 2 usage";
  for (std::size_t i = 0; i < kErrorOrder.size(); ++i) {
    out += ", " + std::to_string(10 + i) + " " + kErrorOrder[i];
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<corpus::ParallelPair> read_all_pairs(
    const std::vector<std::string>& files) {
  std::vector<corpus::ParallelPair> pairs;
  const auto& table = corpus::CodeTable::builtin();
  for (const auto& f : files) {
    auto part = corpus::read_pairs_file(f, table);
    pairs.insert(pairs.end(), part.begin(), part.end());
  }
  return pairs;
}

std::vector<corpus::LanguageCode> center_codes(
    const std::vector<std::string>& names) {
  std::vector<corpus::LanguageCode> out;
  const auto& table = corpus::CodeTable::builtin();
  for (const auto& n : names) out.push_back(table.normalize(n));
  return out;
}

std::vector<std::string> languages_in(
    const std::vector<corpus::ParallelPair>& pairs) {
  std::set<std::string> langs;
  for (const auto& p : pairs) {
    langs.insert(p.src_lang.normalized);
    langs.insert(p.tgt_lang.normalized);
  }
  return {langs.begin(), langs.end()};
}

// ---------------------------------------------------------------------------

int cmd_corpus_build(const std::vector<std::string>& in_files,
                     const std::string& out_dir, std::uint64_t seed,
                     int shard_count, const std::string& centers_csv,
                     const std::string& benchmark_file) {
  fs::create_directories(out_dir);
  auto pairs = read_all_pairs(in_files);
  auto manifest = corpus::make_manifest(std::move(pairs));
  auto [cleaned, report] = corpus::clean(manifest);
  auto split = corpus::split(cleaned, seed);
  if (!benchmark_file.empty()) {
    auto bench = read_all_pairs({benchmark_file});
    split = corpus::filter_benchmark_overlap(split, bench);
  }
  const auto centers = center_codes(split_csv(centers_csv));
  auto shards = corpus::shard(split, centers, shard_count, seed);

  {
    std::ofstream out(fs::path(out_dir) / "clean_report.json");
    out << corpus::clean_report_json(report) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "splits.jsonl");
    corpus::write_split_jsonl(out, split);
  }
  for (const auto& s : shards) {
    std::ofstream out(fs::path(out_dir) /
                      ("shard_" + s.center_language.normalized + "_" +
                       std::to_string(s.shard_id) + ".jsonl"));
    corpus::write_shard_jsonl(out, s, "train");
  }

  json j;
  j["input_pairs"] = report.input_pairs;
  j["output_pairs"] = report.output_pairs;
  j["removed"] = {{"duplicates", report.duplicates},
                  {"missing_translation", report.missing_translation},
                  {"too_long", report.too_long},
                  {"length_ratio", report.length_ratio}};
  j["directions"] = split.directions.size();
  j["too_small_directions"] = split.too_small.size();
  j["shards"] = shards.size();
  j["out"] = out_dir;
  std::cout << j.dump(2) << std::endl;
  std::cerr << "kept " << report.output_pairs << "/" << report.input_pairs
            << " pairs across " << split.directions.size() << " directions, "
            << shards.size() << " shards -> " << out_dir << "\n";
  return 0;
}

int cmd_tok_train(const std::vector<std::string>& in_files, int vocab_size,
                  const std::string& out_file) {
  auto pairs = read_all_pairs(in_files);
  std::vector<std::string> texts;
  for (const auto& p : pairs) {
    texts.push_back(p.src_text);
    texts.push_back(p.tgt_text);
  }
  auto vocab = tok::train_bpe(texts, vocab_size, languages_in(pairs));
  tok::save_vocab(vocab, out_file);
  json j;
  j["vocab_size"] = vocab.size();
  j["merges"] = vocab.merges.size();
  j["languages"] = vocab.lang_tags.size();
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(vocab.content_hash));
  j["content_hash"] = hex;
  j["out"] = out_file;
  std::cout << j.dump(2) << std::endl;
  std::cerr << "vocab of " << vocab.size() << " tokens (" << vocab.merges.size()
            << " merges) -> " << out_file << "\n";
  return 0;
}

int cmd_synth_gen(int langs, int pairs_per_direction, std::uint64_t seed,
                  const std::string& out_file) {
  synth::TaskSpec spec;
  if (langs < 2 || langs > static_cast<int>(spec.langs.size())) {
    throw ConfigError("--langs must be between 2 and " +
                      std::to_string(spec.langs.size()));
  }
  spec.langs.resize(langs);
  spec.pairs_per_direction = pairs_per_direction;
  spec.seed = seed;
  auto pairs = synth::generate(spec);
  std::ofstream out(out_file);
  corpus::write_pairs_jsonl(out, pairs);
  json j;
  j["languages"] = spec.langs;
  j["pairs"] = pairs.size();
  j["out"] = out_file;
  std::cout << j.dump(2) << std::endl;
  std::cerr << pairs.size() << " synthetic pairs -> " << out_file << "\n";
  return 0;
}

int cmd_train_run(const std::string& config_path) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config " + config_path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw ConfigError("bad config JSON: " + std::string(e.what()));
  }

  train::Plan plan;
  if (cfg.contains("dims")) {
    plan.dims.d = cfg["dims"].value("d", plan.dims.d);
    plan.dims.heads = cfg["dims"].value("heads", plan.dims.heads);
    plan.dims.n_layers = cfg["dims"].value("n_layers", plan.dims.n_layers);
    plan.dims.ff_mult = cfg["dims"].value("ff_mult", plan.dims.ff_mult);
  }
  plan.centers = cfg.at("centers").get<std::vector<std::string>>();
  plan.seed = cfg.value("seed", 1);
  plan.epochs = cfg.value("epochs", 2);
  plan.token_budget = cfg.value("token_budget", 512);
  plan.lr = cfg.value("lr", 1e-3f);
  plan.joint_dec_mix = cfg.value("joint_dec_mix", false);
  plan.max_units = cfg.value("max_units", -1);
  plan.log_path = cfg.value("log", "");
  const int shard_count = cfg.value("shards", 4);

  auto vocab = tok::load_vocab(cfg.at("vocab").get<std::string>());
  auto pairs = read_all_pairs({cfg.at("corpus").get<std::string>()});
  auto manifest = corpus::make_manifest(std::move(pairs));
  auto split = corpus::split(manifest, plan.seed);
  auto shards =
      corpus::shard(split, center_codes(plan.centers), shard_count, plan.seed);

  registry::BranchStore store(cfg.at("store").get<std::string>());
  train::Trainer trainer(plan, store, vocab);
  trainer.run(shards);

  json j;
  j["store"] = store.dir();
  j["centers"] = plan.centers;
  j["shards"] = shards.size();
  j["max_resident_branches"] = trainer.max_resident_branches();
  j["branches"] = json::array();
  for (const auto& id : store.list()) j["branches"].push_back(id.str());
  std::cout << j.dump(2) << std::endl;
  std::cerr << "training done; " << store.list().size() << " branches in "
            << store.dir() << "\n";
  return 0;
}

model::FlowSpec compose_for(registry::BranchStore& store,
                            const std::string& tgt,
                            const std::string& resource,
                            const std::string& enc_override,
                            const std::string& dec_override,
                            json& decision_out) {
  auto decision =
      registry::select_flow(store, tgt, resource, enc_override, dec_override);
  decision_out["encoder"] = decision.encoder.str();
  decision_out["decoder"] = decision.decoder.str();
  decision_out["rationale"] = decision.rationale;
  if (!decision.warning.empty()) {
    decision_out["warning"] = decision.warning;
    std::cerr << "warning: " << decision.warning << "\n";
  }
  return store.compose(decision.encoder, decision.decoder);
}

int cmd_translate(const std::string& store_dir, const std::string& vocab_file,
                  const std::string& enc_override,
                  const std::string& dec_override, const std::string& src_lg,
                  const std::string& tgt_lg, const std::string& resource,
                  std::vector<std::string> texts, int beam, int max_len) {
  auto vocab = tok::load_vocab(vocab_file);
  registry::BranchStore store(store_dir);
  json decision;
  auto spec = compose_for(store, tgt_lg, resource, enc_override, dec_override,
                          decision);
  if (texts.empty()) {
    std::string line;
    while (std::getline(std::cin, line)) texts.push_back(line);
  }
  json j;
  j["flow"] = model::flow_name(spec.flow);
  j["decision"] = decision;
  j["translations"] = json::array();
  for (const auto& t : texts) {
    const std::string out =
        beam > 1 ? model::beam_translate(spec, t, src_lg, tgt_lg, vocab,
                                         max_len, beam)
                 : model::greedy_translate(spec, t, src_lg, tgt_lg, vocab,
                                           max_len);
    j["translations"].push_back({{"src", t}, {"tgt", out}});
    std::cerr << out << "\n";
  }
  std::cout << j.dump(2) << std::endl;
  return 0;
}

int cmd_eval(const std::string& store_dir, const std::string& vocab_file,
             const std::string& test_file, const std::string& centers_csv,
             const std::string& resource, int beam, int max_len) {
  auto vocab = tok::load_vocab(vocab_file);
  registry::BranchStore store(store_dir);
  auto pairs = read_all_pairs({test_file});

  std::map<corpus::Direction, std::vector<const corpus::ParallelPair*>> by_dir;
  for (const auto& p : pairs) by_dir[corpus::direction_of(p)].push_back(&p);

  metric::DirectionScores scores;
  for (const auto& [dir, dps] : by_dir) {
    json decision;
    auto spec = compose_for(store, dir.second, resource, "", "", decision);
    std::vector<std::string> hyps, refs;
    for (const auto* p : dps) {
      const std::string hyp =
          beam > 1 ? model::beam_translate(spec, p->src_text, dir.first,
                                           dir.second, vocab, max_len, beam)
                   : model::greedy_translate(spec, p->src_text, dir.first,
                                             dir.second, vocab, max_len);
      hyps.push_back(hyp);
      refs.push_back(p->tgt_text);
    }
    scores[dir] = metric::spbleu(hyps, refs, vocab);
  }

  auto centers = split_csv(centers_csv);
  if (centers.empty()) {
    std::set<std::string> cs;
    for (const auto& [dir, s] : scores) {
      cs.insert(dir.first);
      cs.insert(dir.second);
    }
    centers.assign(cs.begin(), cs.end());
  }
  auto report = metric::direction_table(scores, centers);
  json j = json::parse(metric::report_json(report));
  j["directions"] = json::array();
  for (const auto& [dir, s] : scores) {
    j["directions"].push_back({{"src", dir.first},
                               {"tgt", dir.second},
                               {"spbleu", s.score},
                               {"bp", s.brevity_penalty}});
  }
  std::cout << j.dump(2) << std::endl;
  std::cerr << metric::report_text(report);
  return 0;
}

int cmd_branch_ls(const std::string& store_dir) {
  registry::BranchStore store(store_dir);
  json j = json::array();
  for (const auto& id : store.list()) {
    auto b = registry::load_branch(store.file_of(id));
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(b->hash()));
    j.push_back({{"id", id.str()},
                 {"params", b->parameter_count()},
                 {"bytes", b->parameter_count() * sizeof(float)},
                 {"hash", hex}});
    std::cerr << id.str() << "  " << b->parameter_count() << " params\n";
  }
  std::cout << j.dump(2) << std::endl;
  return 0;
}

int cmd_branch_inspect(const std::string& store_dir, const std::string& id_str) {
  registry::BranchStore store(store_dir);
  const auto id = model::BranchId::parse(id_str);
  auto b = registry::load_branch(store.file_of(id));
  json j;
  j["id"] = b->id.str();
  j["dims"] = {{"d", b->dims.d},
               {"heads", b->dims.heads},
               {"n_layers", b->dims.n_layers},
               {"ff_mult", b->dims.ff_mult}};
  j["vocab_size"] = b->vocab_size;
  j["params"] = b->parameter_count();
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(b->hash()));
  j["hash"] = hex;
  j["tensors"] = json::array();
  for (const auto& [name, t] : b->named_parameters()) {
    j["tensors"].push_back({{"name", name}, {"shape", t->shape}});
  }
  std::cout << j.dump(2) << std::endl;
  std::cerr << b->id.str() << ": " << b->parameter_count() << " params, d="
            << b->dims.d << ", layers=" << b->dims.n_layers << "\n";
  return 0;
}

int cmd_branch_compose(const std::string& store_dir, const std::string& enc,
                       const std::string& dec) {
  registry::BranchStore store(store_dir);
  auto spec = store.compose(model::BranchId::parse(enc),
                            model::BranchId::parse(dec));
  json j;
  j["flow"] = model::flow_name(spec.flow);
  j["encoder"] = spec.encoder->id.str();
  j["decoder"] = spec.decoder->id.str();
  j["resident_bytes"] = store.ledger().total_bytes();
  std::cout << j.dump(2) << std::endl;
  std::cerr << model::flow_name(spec.flow) << " flow: " << spec.encoder->id.str()
            << " + " << spec.decoder->id.str() << ", "
            << store.ledger().total_bytes() << " bytes resident\n";
  return 0;
}

int cmd_bench_residency(const std::string& store_dir, int k, int d, int layers,
                        int vocab_rows) {
  registry::BranchStore store(store_dir);
  std::vector<std::string> scopes{"multi"};
  for (int i = 1; i < k; ++i) scopes.push_back("lg" + std::to_string(i));
  model::Dims dims;
  dims.d = d;
  dims.heads = 1;
  dims.n_layers = layers;
  if (store.list().empty()) {
    registry::make_bench_branches(store, scopes, dims, vocab_rows);
  }
  auto cmp = registry::residency_report(store, scopes);
  std::cout << registry::residency_report_json(cmp) << std::endl;
  std::cerr << registry::residency_report_text(cmp);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lego: detachable multi-branch translation toolkit"};
  app.require_subcommand(1);
  app.footer(exit_code_table());

  // corpus build
  auto* corpus_cmd = app.add_subcommand("corpus", "corpus pipeline");
  auto* cb = corpus_cmd->add_subcommand("build", "merge, clean, split, shard");
  std::vector<std::string> cb_in;
  std::string cb_out, cb_centers, cb_benchmark;
  std::uint64_t cb_seed = 1;
  int cb_shards = 4;
  cb->add_option("--in", cb_in, "input JSONL files")->required();
  cb->add_option("--out", cb_out, "output directory")->required();
  cb->add_option("--seed", cb_seed, "pipeline seed");
  cb->add_option("--shards", cb_shards, "shards per center");
  cb->add_option("--centers", cb_centers, "comma-separated center languages")
      ->required();
  cb->add_option("--benchmark", cb_benchmark,
                 "benchmark JSONL whose sentences are filtered from train/dev");

  // tok train
  auto* tok_cmd = app.add_subcommand("tok", "tokenizer");
  auto* tt = tok_cmd->add_subcommand("train", "train byte-level BPE");
  std::vector<std::string> tt_in;
  std::string tt_out;
  int tt_vocab = 512;
  tt->add_option("--in", tt_in, "input JSONL files")->required();
  tt->add_option("--vocab-size", tt_vocab, "total vocabulary size");
  tt->add_option("--out", tt_out, "output vocab JSON")->required();

  // synth gen
  auto* synth_cmd = app.add_subcommand("synth", "synthetic task");
  auto* sg = synth_cmd->add_subcommand("gen", "generate cipher corpus");
  int sg_langs = 4, sg_pairs = 2000;
  std::uint64_t sg_seed = 7;
  std::string sg_out;
  sg->add_option("--langs", sg_langs, "number of synthetic languages (2-4)");
  sg->add_option("--pairs", sg_pairs, "pairs per high-resource direction");
  sg->add_option("--seed", sg_seed, "generation seed");
  sg->add_option("--out", sg_out, "output JSONL")->required();

  // train run
  auto* train_cmd = app.add_subcommand("train", "training");
  auto* tr = train_cmd->add_subcommand("run", "run the two-stage schedule");
  std::string tr_config;
  tr->add_option("--config", tr_config, "training config JSON")->required();

  // translate
  auto* trans = app.add_subcommand("translate", "translate text");
  std::string x_store, x_vocab, x_enc, x_dec, x_src, x_tgt, x_resource = "low";
  std::vector<std::string> x_texts;
  int x_beam = 1, x_max_len = 64;
  trans->add_option("--store", x_store)->required();
  trans->add_option("--vocab", x_vocab)->required();
  trans->add_option("--enc", x_enc, "encoder branch override (e.g. M-enc, E:en)");
  trans->add_option("--dec", x_dec, "decoder branch override (e.g. D:zh)");
  trans->add_option("--src-lg", x_src)->required();
  trans->add_option("--tgt-lg", x_tgt)->required();
  trans->add_option("--resource", x_resource, "low or high");
  trans->add_option("--text", x_texts, "input text (default: stdin lines)");
  trans->add_option("--beam", x_beam, "beam width (1 = greedy)");
  trans->add_option("--max-len", x_max_len);

  // eval
  auto* ev = app.add_subcommand("eval", "spBLEU per direction");
  std::string e_store, e_vocab, e_test, e_centers, e_resource = "low";
  int e_beam = 1, e_max_len = 64;
  ev->add_option("--store", e_store)->required();
  ev->add_option("--vocab", e_vocab)->required();
  ev->add_option("--test", e_test, "test JSONL")->required();
  ev->add_option("--centers", e_centers, "report rows (default: all languages)");
  ev->add_option("--resource", e_resource, "low or high");
  ev->add_option("--beam", e_beam);
  ev->add_option("--max-len", e_max_len);

  // branch
  auto* br = app.add_subcommand("branch", "branch registry");
  auto* br_ls = br->add_subcommand("ls", "list branches");
  std::string b_store;
  br_ls->add_option("--store", b_store)->required();
  auto* br_in = br->add_subcommand("inspect", "branch details");
  std::string bi_store, bi_id;
  br_in->add_option("--store", bi_store)->required();
  br_in->add_option("--id", bi_id)->required();
  auto* br_co = br->add_subcommand("compose", "compose an encoder and decoder");
  std::string bc_store, bc_enc, bc_dec;
  br_co->add_option("--store", bc_store)->required();
  br_co->add_option("--enc", bc_enc)->required();
  br_co->add_option("--dec", bc_dec)->required();

  // bench residency
  auto* bench = app.add_subcommand("bench", "benchmarks");
  auto* be = bench->add_subcommand("residency", "multiway vs lego residency");
  std::string be_store;
  int be_k = 8, be_d = 8, be_layers = 1, be_rows = 128;
  be->add_option("--store", be_store)->required();
  be->add_option("--k", be_k, "language groups");
  be->add_option("--d", be_d, "model width for synthesized branches");
  be->add_option("--layers", be_layers);
  be->add_option("--vocab-rows", be_rows, "must be a multiple of --d");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (cb->parsed()) {
      return cmd_corpus_build(cb_in, cb_out, cb_seed, cb_shards, cb_centers,
                              cb_benchmark);
    }
    if (tt->parsed()) return cmd_tok_train(tt_in, tt_vocab, tt_out);
    if (sg->parsed()) return cmd_synth_gen(sg_langs, sg_pairs, sg_seed, sg_out);
    if (tr->parsed()) return cmd_train_run(tr_config);
    if (trans->parsed()) {
      return cmd_translate(x_store, x_vocab, x_enc, x_dec, x_src, x_tgt,
                           x_resource, x_texts, x_beam, x_max_len);
    }
    if (ev->parsed()) {
      return cmd_eval(e_store, e_vocab, e_test, e_centers, e_resource, e_beam,
                      e_max_len);
    }
    if (br_ls->parsed()) return cmd_branch_ls(b_store);
    if (br_in->parsed()) return cmd_branch_inspect(bi_store, bi_id);
    if (br_co->parsed()) return cmd_branch_compose(bc_store, bc_enc, bc_dec);
    if (be->parsed()) {
      return cmd_bench_residency(be_store, be_k, be_d, be_layers, be_rows);
    }
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.name);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
