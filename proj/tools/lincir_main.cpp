#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lincir/encoder.hpp"
#include "lincir/lncr.hpp"
#include "lincir/noise.hpp"
#include "lincir/projection.hpp"
#include "lincir/retrieval.hpp"
#include "lincir/rng.hpp"
#include "lincir/synth.hpp"
#include "lincir/tensor.hpp"
#include "lincir/text.hpp"
#include "lincir/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace lincir;

namespace {

// ---------------------------------------------------------------------------
// plumbing

int64_t thread_budget(int64_t n_items) {
  int64_t t = std::max<int64_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("LINCIR_THREADS")) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw Error("cli", "LINCIR_THREADS must be a positive integer");
    t = std::min<int64_t>(t, v);
  }
  return std::max<int64_t>(1, std::min(t, n_items));
}

// Deterministic regardless of thread count: disjoint index ranges, results
// land in preallocated slots. The first worker exception is rethrown on the
// calling thread after the join.
template <typename Fn>
void parallel_for(int64_t n, const Fn& fn) {
  const int64_t threads = thread_budget(n);
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::mutex mu;
  std::exception_ptr failure;
  for (int64_t t = 0; t < threads; ++t) {
    const int64_t begin = t * n / threads;
    const int64_t end = (t + 1) * n / threads;
    pool.emplace_back([&, begin, end] {
      try {
        for (int64_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cli", "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

fs::path prepare_out_dir(const std::string& out) {
  if (out.empty()) throw Error("cli", "--out is required");
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// options

// One flat bag per process; each subcommand binds the subset it uses and
// sets its own defaults. A JSON config file (--config) overlays these
// defaults before parsing, and explicit flags override the file.
struct Options {
  std::string config_file;
  std::string corpus;
  std::string encoder_ckpt;
  std::string phi_ckpt;
  std::string benchmark;
  std::string out;
  std::string lexicon = std::string(LINCIR_DATA_DIR) + "/lexicon.tsv";
  std::string templates_file = std::string(LINCIR_DATA_DIR) + "/templates.txt";
  uint64_t seed = 42;
  int64_t steps = 0;
  int64_t batch = 64;
  double lr = 0.0;
  double wd = 0.01;
  double dropout = 0.5;
  std::string mask_policy = "all-keyword";
  std::string noise = "scaled-gaussian";
  std::string supervision = "text-anchored";
  std::string template_text = "a photo of [$] that [cond]";
  int64_t k = 10;
  int64_t eval_every = 100;
  int64_t patience = 5;
  std::string query_mode = "composed";
  bool include_reference = false;
  std::string table;
  int64_t n_samples = 100000;
  std::string dims = "256,768";
};

void overlay_config_file(Options& o, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cli", "cannot read config file " + path);
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw Error("cli", std::string("config file is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("cli", "config file must hold a JSON object");
  const std::map<std::string, std::function<void(const ordered_json&)>> setters{
      {"corpus", [&](const ordered_json& v) { o.corpus = v.get<std::string>(); }},
      {"encoder-ckpt", [&](const ordered_json& v) { o.encoder_ckpt = v.get<std::string>(); }},
      {"phi-ckpt", [&](const ordered_json& v) { o.phi_ckpt = v.get<std::string>(); }},
      {"benchmark", [&](const ordered_json& v) { o.benchmark = v.get<std::string>(); }},
      {"out", [&](const ordered_json& v) { o.out = v.get<std::string>(); }},
      {"lexicon", [&](const ordered_json& v) { o.lexicon = v.get<std::string>(); }},
      {"templates-file", [&](const ordered_json& v) { o.templates_file = v.get<std::string>(); }},
      {"seed", [&](const ordered_json& v) { o.seed = v.get<uint64_t>(); }},
      {"steps", [&](const ordered_json& v) { o.steps = v.get<int64_t>(); }},
      {"batch", [&](const ordered_json& v) { o.batch = v.get<int64_t>(); }},
      {"lr", [&](const ordered_json& v) { o.lr = v.get<double>(); }},
      {"wd", [&](const ordered_json& v) { o.wd = v.get<double>(); }},
      {"dropout", [&](const ordered_json& v) { o.dropout = v.get<double>(); }},
      {"mask-policy", [&](const ordered_json& v) { o.mask_policy = v.get<std::string>(); }},
      {"noise", [&](const ordered_json& v) { o.noise = v.get<std::string>(); }},
      {"supervision", [&](const ordered_json& v) { o.supervision = v.get<std::string>(); }},
      {"template", [&](const ordered_json& v) { o.template_text = v.get<std::string>(); }},
      {"k", [&](const ordered_json& v) { o.k = v.get<int64_t>(); }},
      {"eval-every", [&](const ordered_json& v) { o.eval_every = v.get<int64_t>(); }},
      {"patience", [&](const ordered_json& v) { o.patience = v.get<int64_t>(); }},
      {"query-mode", [&](const ordered_json& v) { o.query_mode = v.get<std::string>(); }},
      {"include-reference", [&](const ordered_json& v) { o.include_reference = v.get<bool>(); }},
      {"table", [&](const ordered_json& v) { o.table = v.get<std::string>(); }},
      {"n-samples", [&](const ordered_json& v) { o.n_samples = v.get<int64_t>(); }},
      {"dims", [&](const ordered_json& v) { o.dims = v.get<std::string>(); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw Error("cli", "unknown config key: " + key);
    it->second(value);
  }
}

// ---------------------------------------------------------------------------
// shared artifact helpers

GalleryIndex build_gallery_index(const DualEncoder& enc, const std::vector<Scene>& scenes) {
  const int64_t n = static_cast<int64_t>(scenes.size());
  TensorBuilder latents({n, enc.config.d_joint});
  parallel_for(n, [&](int64_t i) {
    Tensor z = encode_image(enc, render_scene(scenes[i], enc.config.image_side));
    std::copy(z.data(), z.data() + z.numel(), latents.data() + i * enc.config.d_joint);
  });
  std::vector<std::string> ids;
  ids.reserve(scenes.size());
  for (const Scene& s : scenes) ids.push_back(s.id());
  return GalleryIndex(std::move(ids), latents.build());
}

struct LoadedBenchmark {
  std::vector<BenchmarkRecord> records;
  std::vector<Scene> gallery;
  TruthMap truths;
};

// `--benchmark` names a records file (dev.jsonl / test.jsonl) or the run
// directory holding one; the gallery manifest is its sibling gallery.jsonl.
LoadedBenchmark load_benchmark(const std::string& arg) {
  if (arg.empty()) throw Error("cli", "--benchmark is required");
  fs::path records_path(arg);
  if (fs::is_directory(records_path)) records_path /= "dev.jsonl";
  if (!fs::exists(records_path))
    throw Error("cli", "benchmark file not found: " + records_path.string());
  const fs::path gallery_path = records_path.parent_path() / "gallery.jsonl";
  if (!fs::exists(gallery_path))
    throw Error("cli", "gallery manifest not found next to benchmark: " + gallery_path.string());
  LoadedBenchmark b;
  b.records = read_benchmark_jsonl(records_path.string());
  b.gallery = read_gallery_jsonl(gallery_path.string());
  for (const BenchmarkRecord& r : b.records)
    b.truths[r.query_id] = std::set<std::string>(r.targets.begin(), r.targets.end());
  return b;
}

std::vector<Tensor> reference_renders(const DualEncoder& enc,
                                      const std::vector<BenchmarkRecord>& records) {
  std::vector<Tensor> renders(records.size());
  parallel_for(static_cast<int64_t>(records.size()), [&](int64_t i) {
    renders[i] =
        render_scene(scene_from_id(records[i].reference_id), enc.config.image_side);
  });
  return renders;
}

std::optional<std::string> exclusion_for(const Options& o, const BenchmarkRecord& r) {
  if (o.include_reference) return std::nullopt;
  return r.reference_id;
}

// ---------------------------------------------------------------------------
// pretrain

double heldout_image_to_text_r1(const DualEncoder& enc, const Vocabulary& vocab,
                                const std::vector<PretrainExample>& holdout) {
  const int64_t n = static_cast<int64_t>(holdout.size());
  TensorBuilder text_latents({n, enc.config.d_joint});
  std::vector<Tensor> image_latents(n);
  parallel_for(n, [&](int64_t i) {
    TokenSequence seq = tokenize(holdout[i].text, vocab, enc.config.max_seq_len);
    Tensor zt = encode_text(enc, seq);
    std::copy(zt.data(), zt.data() + zt.numel(), text_latents.data() + i * enc.config.d_joint);
    image_latents[i] =
        encode_image(enc, render_scene(holdout[i].scene, enc.config.image_side));
  });
  std::vector<std::string> ids(n);
  for (int64_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "pair_%03lld", static_cast<long long>(i));
    ids[i] = buf;
  }
  GalleryIndex captions(ids, text_latents.build());
  std::vector<RankedResult> results;
  TruthMap truths;
  for (int64_t i = 0; i < n; ++i) {
    results.push_back(rank(ids[i], image_latents[i], captions));
    truths[ids[i]] = {ids[i]};
  }
  return recall_at_k(results, truths, 1);
}

ordered_json pretrain_config_echo(const Options& o) {
  ordered_json j;
  j["command"] = "pretrain";
  j["out"] = o.out;
  j["seed"] = o.seed;
  j["steps"] = o.steps;
  j["batch"] = o.batch;
  j["lr"] = o.lr;
  j["wd"] = o.wd;
  j["templates-file"] = o.templates_file;
  return j;
}

int cmd_pretrain(const Options& o) {
  const fs::path out = prepare_out_dir(o.out);
  SynthBenchmark bench = build_cir_benchmark(o.seed);

  std::vector<std::string> vocab_lines = bench.vocab_texts();
  if (!o.templates_file.empty())
    for (const std::string& line : read_lines(o.templates_file)) vocab_lines.push_back(line);
  Vocabulary vocab = Vocabulary::from_corpus(vocab_lines);

  write_lines((out / "corpus.txt").string(), bench.train_corpus);
  write_pairs_jsonl((out / "pairs.jsonl").string(), bench.pretrain_examples);
  write_pairs_jsonl((out / "holdout_pairs.jsonl").string(), bench.holdout_examples);
  write_gallery_jsonl((out / "gallery.jsonl").string(), bench.gallery);
  write_benchmark_jsonl((out / "dev.jsonl").string(), bench.dev);
  write_benchmark_jsonl((out / "test.jsonl").string(), bench.test);
  vocab.save((out / "vocab.txt").string());

  EncoderConfig cfg;
  cfg.vocab_size = vocab.size();
  DualEncoder enc = DualEncoder::init(cfg, o.seed);
  std::vector<PretrainPair> pairs(bench.pretrain_examples.size());
  parallel_for(static_cast<int64_t>(pairs.size()), [&](int64_t i) {
    const PretrainExample& ex = bench.pretrain_examples[i];
    pairs[i] = PretrainPair{render_scene(ex.scene, cfg.image_side),
                            tokenize(ex.text, vocab, cfg.max_seq_len)};
  });

  PretrainConfig pc;
  pc.steps = o.steps;
  pc.batch = o.batch;
  pc.lr = o.lr;
  pc.weight_decay = o.wd;
  pc.seed = o.seed;
  PretrainResult result = pretrain_contrastive(enc, pairs, pc);
  enc.frozen = true;
  save_dual_encoder((out / "encoder.lncr").string(), enc, vocab);

  const double r1 = heldout_image_to_text_r1(enc, vocab, bench.holdout_examples);

  ordered_json metrics;
  metrics["command"] = "pretrain";
  metrics["steps"] = o.steps;
  metrics["pairs"] = pairs.size();
  metrics["final_loss"] = result.loss_history.empty() ? 0.0 : result.loss_history.back();
  metrics["final_temperature"] = result.final_temperature;
  metrics["heldout_image_to_text_r1"] = r1;
  write_json(out / "metrics.json", metrics);
  write_json(out / "config.json", pretrain_config_echo(o));
  std::cout << "pretrain: " << pairs.size() << " pairs, " << o.steps
            << " steps, held-out image->text R@1 = " << r1 << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

TrainConfig train_config_from(const Options& o) {
  TrainConfig cfg;
  cfg.max_steps = o.steps;
  cfg.batch = o.batch;
  cfg.lr = o.lr;
  cfg.weight_decay = o.wd;
  cfg.dropout = o.dropout;
  cfg.mask_policy = MaskPolicy::parse(o.mask_policy);
  cfg.noise = NoiseSpec::parse(o.noise);
  cfg.supervision = parse_supervision(o.supervision);
  cfg.eval_every = o.eval_every;
  cfg.patience = o.patience;
  cfg.seed = o.seed;
  return cfg;
}

ordered_json train_config_echo(const Options& o, const char* command) {
  ordered_json j;
  j["command"] = command;
  j["corpus"] = o.corpus;
  j["encoder-ckpt"] = o.encoder_ckpt;
  j["benchmark"] = o.benchmark;
  j["out"] = o.out;
  j["lexicon"] = o.lexicon;
  j["seed"] = o.seed;
  j["steps"] = o.steps;
  j["batch"] = o.batch;
  j["lr"] = o.lr;
  j["wd"] = o.wd;
  j["dropout"] = o.dropout;
  j["mask-policy"] = o.mask_policy;
  j["noise"] = o.noise;
  j["supervision"] = o.supervision;
  j["template"] = o.template_text;
  j["eval-every"] = o.eval_every;
  j["patience"] = o.patience;
  j["include-reference"] = o.include_reference;
  return j;
}

struct TrainInputs {
  std::vector<std::string> lines;
  std::vector<Tensor> images;  // empty unless image-anchored
};

// A .txt corpus is one caption per line; a .jsonl corpus carries paired
// scenes, whose renders only the image-anchored path needs.
TrainInputs load_train_corpus(const Options& o, const DualEncoder& enc,
                              SupervisionMode supervision) {
  if (o.corpus.empty()) throw Error("cli", "--corpus is required");
  TrainInputs in;
  if (fs::path(o.corpus).extension() == ".jsonl") {
    std::vector<PretrainExample> pairs = read_pairs_jsonl(o.corpus);
    in.lines.reserve(pairs.size());
    for (const PretrainExample& ex : pairs) in.lines.push_back(ex.text);
    if (supervision == SupervisionMode::ImageAnchored) {
      in.images.resize(pairs.size());
      parallel_for(static_cast<int64_t>(pairs.size()), [&](int64_t i) {
        in.images[i] = render_scene(pairs[i].scene, enc.config.image_side);
      });
    }
  } else {
    if (supervision == SupervisionMode::ImageAnchored)
      throw Error("cli", "image-anchored supervision needs a paired corpus (pairs.jsonl)");
    in.lines = read_lines(o.corpus);
  }
  return in;
}

struct TrainedRun {
  TrainResult result;
  int64_t used = 0;
  int64_t skipped = 0;
};

TrainedRun run_training(const Options& o, const TrainConfig& cfg, const LoadedEncoder& le,
                        const LoadedBenchmark& bench, const GalleryIndex& index) {
  PosLexicon lexicon = PosLexicon::load(o.lexicon);
  TrainInputs inputs = load_train_corpus(o, le.encoder, cfg.supervision);
  // Preparation draws from its own stream so policy sampling never aliases
  // the training stream for the same seed.
  PreparedCorpus corpus = prepare_corpus(inputs.lines, inputs.images, le.vocab, lexicon,
                                         le.encoder, cfg, cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  const PromptTemplate tmpl = PromptTemplate::parse(o.template_text);
  const std::vector<Tensor> refs = reference_renders(le.encoder, bench.records);
  auto validate = [&](const ProjectionModule& phi) {
    std::vector<RankedResult> results;
    results.reserve(bench.records.size());
    for (size_t i = 0; i < bench.records.size(); ++i) {
      const BenchmarkRecord& r = bench.records[i];
      Tensor q = compose_query(le.encoder, le.vocab, phi, refs[i], r.condition, tmpl);
      results.push_back(rank(r.query_id, q, index, exclusion_for(o, r)));
    }
    return recall_at_k(results, bench.truths, 1);
  };

  TrainedRun run;
  run.result = train(corpus, le.encoder, cfg, validate);
  run.used = corpus.used;
  run.skipped = corpus.skipped;
  return run;
}

int cmd_train(const Options& o) {
  const fs::path out = prepare_out_dir(o.out);
  if (o.encoder_ckpt.empty()) throw Error("cli", "--encoder-ckpt is required");
  LoadedEncoder le = load_dual_encoder(o.encoder_ckpt);
  LoadedBenchmark bench = load_benchmark(o.benchmark);
  GalleryIndex index = build_gallery_index(le.encoder, bench.gallery);

  TrainConfig cfg = train_config_from(o);
  TrainedRun run = run_training(o, cfg, le, bench, index);

  save_projection((out / "phi.lncr").string(), run.result.phi);
  write_history_csv((out / "history.csv").string(), run.result.history);

  ordered_json metrics;
  metrics["command"] = "train";
  metrics["captions_used"] = run.used;
  metrics["captions_skipped"] = run.skipped;
  metrics["best_step"] = run.result.best_step;
  metrics["best_val_r1"] = run.result.best_score;
  metrics["evaluations"] = run.result.history.size();
  write_json(out / "metrics.json", metrics);
  write_json(out / "config.json", train_config_echo(o, "train"));
  std::cout << "train: " << run.used << " captions (" << run.skipped
            << " skipped), best validation R@1 = " << run.result.best_score << " at step "
            << run.result.best_step << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOutcome {
  ordered_json metrics;
  std::vector<RankedResult> results;
};

EvalOutcome evaluate_mode(const Options& o, const LoadedEncoder& le, const LoadedBenchmark& bench,
                          const GalleryIndex& index, const ProjectionModule* phi,
                          const std::string& template_text) {
  const std::string& mode = o.query_mode;
  if (mode != "composed" && mode != "text-only" && mode != "image-only" && mode != "oracle")
    throw Error("cli", "unknown query mode: " + mode);
  EvalOutcome out;
  std::vector<Tensor> query_latents;

  if (mode == "oracle") {
    for (const BenchmarkRecord& r : bench.records) {
      const Scene proto = apply_condition(scene_from_id(r.reference_id), r.condition);
      out.results.push_back(rank_scores(r.query_id, index.ids(),
                                        attribute_match_scores(proto, bench.gallery),
                                        exclusion_for(o, r)));
    }
  } else {
    const PromptTemplate tmpl = PromptTemplate::parse(template_text);
    std::vector<Tensor> refs;
    if (mode != "text-only") refs = reference_renders(le.encoder, bench.records);
    query_latents.resize(bench.records.size());
    parallel_for(static_cast<int64_t>(bench.records.size()), [&](int64_t i) {
      const BenchmarkRecord& r = bench.records[i];
      if (mode == "composed")
        query_latents[i] =
            compose_query(le.encoder, le.vocab, *phi, refs[i], r.condition, tmpl);
      else if (mode == "text-only")
        query_latents[i] = text_only_query(le.encoder, le.vocab, r.condition);
      else
        query_latents[i] = image_only_query(le.encoder, refs[i]);
    });
    for (size_t i = 0; i < bench.records.size(); ++i)
      out.results.push_back(
          rank(bench.records[i].query_id, query_latents[i], index, exclusion_for(o, bench.records[i])));
  }

  ordered_json& m = out.metrics;
  m["command"] = "eval";
  m["query_mode"] = mode;
  m["template"] = mode == "composed" ? ordered_json(template_text) : ordered_json(nullptr);
  m["n_queries"] = bench.records.size();
  m["r_at_1"] = recall_at_k(out.results, bench.truths, 1);
  m["r_at_5"] = recall_at_k(out.results, bench.truths, 5);
  m["r_at_10"] = recall_at_k(out.results, bench.truths, 10);
  m["map_at_5"] = map_at_k(out.results, bench.truths, 5);
  m["map_at_10"] = map_at_k(out.results, bench.truths, 10);
  if (query_latents.empty()) {
    m["modality_gap"] = nullptr;  // oracle ranks attributes, not latents
  } else {
    std::vector<Tensor> gallery_rows;
    gallery_rows.reserve(index.size());
    for (int64_t i = 0; i < index.size(); ++i) {
      TensorBuilder row({index.dim()});
      std::copy(index.latents().data() + i * index.dim(),
                index.latents().data() + (i + 1) * index.dim(), row.data());
      gallery_rows.push_back(row.build());
    }
    m["modality_gap"] = modality_gap(query_latents, gallery_rows);
  }
  return out;
}

void write_results_csv(const fs::path& path, const std::vector<RankedResult>& results, int64_t k) {
  std::vector<std::string> lines;
  lines.emplace_back("query_id,rank,item_id,score");
  for (const RankedResult& r : results) {
    const int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(r.items.size()));
    for (int64_t i = 0; i < depth; ++i)
      lines.push_back(r.query_id + "," + std::to_string(i + 1) + "," + r.items[i].item_id + "," +
                      fmt_double(r.items[i].score));
  }
  write_lines(path.string(), lines);
}

ordered_json eval_config_echo(const Options& o) {
  ordered_json j;
  j["command"] = "eval";
  j["encoder-ckpt"] = o.encoder_ckpt;
  j["phi-ckpt"] = o.phi_ckpt;
  j["benchmark"] = o.benchmark;
  j["out"] = o.out;
  j["query-mode"] = o.query_mode;
  j["template"] = o.template_text;
  j["k"] = o.k;
  j["seed"] = o.seed;
  j["include-reference"] = o.include_reference;
  return j;
}

int cmd_eval(const Options& o) {
  const fs::path out = prepare_out_dir(o.out);
  if (o.encoder_ckpt.empty()) throw Error("cli", "--encoder-ckpt is required");
  if (o.k < 1) throw Error("cli", "--k must be at least 1");
  LoadedEncoder le = load_dual_encoder(o.encoder_ckpt);
  LoadedBenchmark bench = load_benchmark(o.benchmark);
  GalleryIndex index = build_gallery_index(le.encoder, bench.gallery);

  ProjectionModule phi;
  if (o.query_mode == "composed") {
    if (o.phi_ckpt.empty()) throw Error("cli", "--phi-ckpt is required for composed queries");
    phi = load_projection(o.phi_ckpt);
  }

  EvalOutcome outcome = evaluate_mode(o, le, bench, index, &phi, o.template_text);
  save_gallery_index((out / "index.lncr").string(), index);
  write_results_csv(out / "results.csv", outcome.results, o.k);
  write_json(out / "metrics.json", outcome.metrics);
  write_json(out / "config.json", eval_config_echo(o));
  std::cout << "eval (" << o.query_mode << "): R@1 = " << outcome.metrics["r_at_1"]
            << ", mAP@5 = " << outcome.metrics["map_at_5"] << " over "
            << bench.records.size() << " queries\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationContext {
  LoadedEncoder le;
  LoadedBenchmark bench;
  GalleryIndex index;
};

AblationContext ablation_context(const Options& o) {
  if (o.encoder_ckpt.empty()) throw Error("cli", "--encoder-ckpt is required");
  LoadedEncoder le = load_dual_encoder(o.encoder_ckpt);
  LoadedBenchmark bench = load_benchmark(o.benchmark);
  GalleryIndex index = build_gallery_index(le.encoder, bench.gallery);
  return AblationContext{std::move(le), std::move(bench), std::move(index)};
}

// One trained row: composed-retrieval metrics of the best snapshot on the
// validation records, plus the modality gap of its composed queries.
struct RowMetrics {
  double best_val_r1 = 0.0;
  double map_at_5 = 0.0;
  double modality_gap = 0.0;
  int64_t used = 0;
  int64_t skipped = 0;
};

RowMetrics ablation_row(const Options& o, const TrainConfig& cfg, const AblationContext& ctx,
                        const fs::path& history_path) {
  TrainedRun run = run_training(o, cfg, ctx.le, ctx.bench, ctx.index);
  write_history_csv(history_path.string(), run.result.history);

  const PromptTemplate tmpl = PromptTemplate::parse(o.template_text);
  const std::vector<Tensor> refs = reference_renders(ctx.le.encoder, ctx.bench.records);
  std::vector<RankedResult> results;
  std::vector<Tensor> queries(ctx.bench.records.size());
  parallel_for(static_cast<int64_t>(ctx.bench.records.size()), [&](int64_t i) {
    const BenchmarkRecord& r = ctx.bench.records[i];
    queries[i] = compose_query(ctx.le.encoder, ctx.le.vocab, run.result.phi, refs[i],
                               r.condition, tmpl);
  });
  for (size_t i = 0; i < ctx.bench.records.size(); ++i)
    results.push_back(rank(ctx.bench.records[i].query_id, queries[i], ctx.index,
                           exclusion_for(o, ctx.bench.records[i])));

  std::vector<Tensor> gallery_rows;
  gallery_rows.reserve(ctx.index.size());
  for (int64_t i = 0; i < ctx.index.size(); ++i) {
    TensorBuilder row({ctx.index.dim()});
    std::copy(ctx.index.latents().data() + i * ctx.index.dim(),
              ctx.index.latents().data() + (i + 1) * ctx.index.dim(), row.data());
    gallery_rows.push_back(row.build());
  }

  RowMetrics m;
  m.best_val_r1 = run.result.best_score;
  m.map_at_5 = map_at_k(results, ctx.bench.truths, 5);
  m.modality_gap = modality_gap(queries, gallery_rows);
  m.used = run.used;
  m.skipped = run.skipped;
  return m;
}

ordered_json ablate_config_echo(const Options& o) {
  ordered_json j = train_config_echo(o, "ablate");
  j["table"] = o.table;
  j["phi-ckpt"] = o.phi_ckpt;
  j["templates-file"] = o.templates_file;
  return j;
}

int cmd_ablate(const Options& o) {
  const fs::path out = prepare_out_dir(o.out);
  std::vector<std::string> lines;

  if (o.table == "masking") {
    const std::vector<std::string> policies{"all-non-keyword", "random-token", "all-noun",
                                            "1-keyword",       "3-keyword",    "5-keyword",
                                            "all-keyword"};
    AblationContext ctx = ablation_context(o);
    lines.emplace_back("policy,used,skipped,best_val_r1,map_at_5");
    for (const std::string& policy : policies) {
      TrainConfig cfg = train_config_from(o);
      cfg.mask_policy = MaskPolicy::parse(policy);
      RowMetrics m = ablation_row(o, cfg, ctx, out / ("history_masking_" + policy + ".csv"));
      lines.push_back(policy + "," + std::to_string(m.used) + "," + std::to_string(m.skipped) +
                      "," + fmt_double(m.best_val_r1) + "," + fmt_double(m.map_at_5));
      std::cout << "ablate masking: " << policy << " val R@1 " << m.best_val_r1 << "\n";
    }
  } else if (o.table == "noise") {
    const std::vector<std::string> kinds{"none",     "student-t", "exponential",    "chi-squared",
                                         "gaussian", "uniform",   "scaled-gaussian"};
    AblationContext ctx = ablation_context(o);
    lines.emplace_back("noise,best_val_r1,map_at_5,modality_gap");
    for (const std::string& kind : kinds) {
      TrainConfig cfg = train_config_from(o);
      cfg.noise = NoiseSpec::parse(kind);
      RowMetrics m = ablation_row(o, cfg, ctx, out / ("history_noise_" + kind + ".csv"));
      lines.push_back(kind + "," + fmt_double(m.best_val_r1) + "," + fmt_double(m.map_at_5) +
                      "," + fmt_double(m.modality_gap));
      std::cout << "ablate noise: " << kind << " val R@1 " << m.best_val_r1 << "\n";
    }
  } else if (o.table == "supervision") {
    AblationContext ctx = ablation_context(o);
    lines.emplace_back("supervision,status,best_val_r1,map_at_5");
    for (const std::string& mode : {"text-anchored", "image-anchored", "pic2word"}) {
      if (mode == "pic2word") {
        // Recognized design point that ships only as a refusing stub.
        lines.push_back("pic2word,not implemented,,");
        std::cout << "ablate supervision: pic2word not implemented\n";
        continue;
      }
      TrainConfig cfg = train_config_from(o);
      cfg.supervision = parse_supervision(mode);
      RowMetrics m =
          ablation_row(o, cfg, ctx, out / ("history_supervision_" + std::string(mode) + ".csv"));
      lines.push_back(mode + ",ok," + fmt_double(m.best_val_r1) + "," + fmt_double(m.map_at_5));
      std::cout << "ablate supervision: " << mode << " val R@1 " << m.best_val_r1 << "\n";
    }
  } else if (o.table == "prompts") {
    if (o.phi_ckpt.empty())
      throw Error("cli", "--phi-ckpt is required for the prompts table");
    AblationContext ctx = ablation_context(o);
    ProjectionModule phi = load_projection(o.phi_ckpt);
    const std::vector<std::string> templates = read_lines(o.templates_file);
    if (templates.empty()) throw Error("cli", "template file is empty");
    lines.emplace_back("template,r_at_1,map_at_5");
    Options row_opts = o;
    row_opts.query_mode = "composed";
    for (const std::string& text : templates) {
      EvalOutcome outcome = evaluate_mode(row_opts, ctx.le, ctx.bench, ctx.index, &phi, text);
      lines.push_back("\"" + text + "\"," + fmt_double(outcome.metrics["r_at_1"].get<double>()) +
                      "," + fmt_double(outcome.metrics["map_at_5"].get<double>()));
    }
    std::cout << "ablate prompts: " << templates.size() << " templates evaluated\n";
  } else {
    throw Error("cli", "unknown ablation table: " + o.table);
  }

  write_lines((out / ("ablate_" + o.table + ".csv")).string(), lines);
  write_json(out / "config.json", ablate_config_echo(o));
  return 0;
}

// ---------------------------------------------------------------------------
// analyze-noise

int cmd_analyze_noise(const Options& o) {
  const fs::path out = prepare_out_dir(o.out);
  if (o.n_samples < 2) throw Error("cli", "--n-samples must be at least 2");
  std::vector<int64_t> dims;
  for (const std::string& part : split_words(o.dims)) dims.push_back(std::stoll(part));
  if (dims.empty()) throw Error("cli", "--dims must list at least one dimension");

  const std::vector<std::string> kinds{"none",     "student-t", "exponential",    "chi-squared",
                                       "gaussian", "uniform",   "scaled-gaussian"};
  std::vector<std::string> lines;
  lines.emplace_back("kind,d,n_samples,mean_norm,std_norm");
  Rng root(o.seed);
  uint64_t row = 0;
  for (const std::string& kind : kinds) {
    const NoiseSpec spec = NoiseSpec::parse(kind);
    for (int64_t d : dims) {
      Rng rng = root.fork(row++);
      double sum = 0.0, sum_sq = 0.0;
      for (int64_t s = 0; s < o.n_samples; ++s) {
        const Tensor n = sample_noise(spec, d, rng);
        double norm_sq = 0.0;
        for (int64_t i = 0; i < n.numel(); ++i) norm_sq += n.data()[i] * n.data()[i];
        const double norm = std::sqrt(norm_sq);
        sum += norm;
        sum_sq += norm * norm;
      }
      const double mean = sum / static_cast<double>(o.n_samples);
      const double var =
          std::max(0.0, sum_sq / static_cast<double>(o.n_samples) - mean * mean);
      lines.push_back(kind + "," + std::to_string(d) + "," + std::to_string(o.n_samples) + "," +
                      fmt_double(mean) + "," + fmt_double(std::sqrt(var)));
    }
  }
  write_lines((out / "noise_stats.csv").string(), lines);

  ordered_json j;
  j["command"] = "analyze-noise";
  j["out"] = o.out;
  j["seed"] = o.seed;
  j["n-samples"] = o.n_samples;
  j["dims"] = o.dims;
  write_json(out / "config.json", j);
  std::cout << "analyze-noise: " << kinds.size() * dims.size() << " rows\n";
  return 0;
}

// ---------------------------------------------------------------------------
// wiring

void add_common_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_file, "JSON config file (flags override it)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "random seed");
}

}  // namespace

int main(int argc, char** argv) {
  Options o;

  // Defaults depend on the command (pretraining runs hotter than projection
  // training, ablation sweeps need a smaller per-row budget), and the
  // config file must overlay those defaults before CLI11 binds flag values.
  // Both are therefore resolved with a pre-scan rather than parsed options.
  std::string command;
  for (int i = 1; i < argc; ++i) {
    const std::string arg(argv[i]);
    if (arg == "--config" && i + 1 < argc) o.config_file = argv[i + 1];
    if (command.empty() && (arg == "pretrain" || arg == "train" || arg == "eval" ||
                            arg == "ablate" || arg == "analyze-noise"))
      command = arg;
  }
  if (command == "pretrain") {
    o.steps = 3000;
    o.lr = 3e-4;
  } else if (command == "ablate") {
    o.steps = 300;
    o.lr = 1e-4;
    o.eval_every = 50;
    o.patience = 3;
  } else {
    o.steps = 2000;
    o.lr = 1e-4;
  }
  try {
    if (!o.config_file.empty()) overlay_config_file(o, o.config_file);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"language-only composed image retrieval at desk scale"};
  app.require_subcommand(1);

  CLI::App* pre = app.add_subcommand("pretrain", "build the synthetic world and pretrain encoders");
  CLI::App* tr = app.add_subcommand("train", "train the projection module with masked reconstruction");
  CLI::App* ev = app.add_subcommand("eval", "run retrieval and report metrics");
  CLI::App* ab = app.add_subcommand("ablate", "sweep one design table and emit a CSV");
  CLI::App* an = app.add_subcommand("analyze-noise", "Monte-Carlo norm statistics per noise kind");

  add_common_flags(pre, o);
  pre->add_option("--steps", o.steps, "contrastive steps");
  pre->add_option("--batch", o.batch, "batch size");
  pre->add_option("--lr", o.lr, "learning rate");
  pre->add_option("--wd", o.wd, "weight decay");
  pre->add_option("--templates-file", o.templates_file, "prompt templates merged into the vocabulary");

  for (CLI::App* cmd : {tr, ab}) {
    add_common_flags(cmd, o);
    cmd->add_option("--corpus", o.corpus, "caption corpus (.txt) or paired corpus (.jsonl)");
    cmd->add_option("--encoder-ckpt", o.encoder_ckpt, "frozen encoder checkpoint");
    cmd->add_option("--benchmark", o.benchmark, "validation records file or run directory");
    cmd->add_option("--lexicon", o.lexicon, "part-of-speech lexicon TSV");
    cmd->add_option("--steps", o.steps, "max training steps");
    cmd->add_option("--batch", o.batch, "batch size");
    cmd->add_option("--lr", o.lr, "learning rate");
    cmd->add_option("--wd", o.wd, "weight decay");
    cmd->add_option("--dropout", o.dropout, "projection dropout");
    cmd->add_option("--mask-policy", o.mask_policy, "masking policy");
    cmd->add_option("--noise", o.noise, "latent noise kind");
    cmd->add_option("--supervision", o.supervision, "projection input side");
    cmd->add_option("--template", o.template_text, "inference prompt template");
    cmd->add_option("--eval-every", o.eval_every, "validation period in steps");
    cmd->add_option("--patience", o.patience, "evaluations without improvement before stopping");
    cmd->add_flag("--include-reference", o.include_reference,
                  "keep the reference image among candidates");
  }
  ab->add_option("--table", o.table, "masking | noise | supervision | prompts")->required();
  ab->add_option("--phi-ckpt", o.phi_ckpt, "projection checkpoint (prompts table)");
  ab->add_option("--templates-file", o.templates_file, "templates for the prompts table");

  add_common_flags(ev, o);
  ev->add_option("--encoder-ckpt", o.encoder_ckpt, "frozen encoder checkpoint");
  ev->add_option("--phi-ckpt", o.phi_ckpt, "projection checkpoint");
  ev->add_option("--benchmark", o.benchmark, "records file or run directory");
  ev->add_option("--query-mode", o.query_mode, "composed | text-only | image-only | oracle");
  ev->add_option("--template", o.template_text, "inference prompt template");
  ev->add_option("--k", o.k, "ranks per query in results.csv");
  ev->add_flag("--include-reference", o.include_reference,
               "keep the reference image among candidates");

  add_common_flags(an, o);
  an->add_option("--n-samples", o.n_samples, "Monte-Carlo draws per row");
  an->add_option("--dims", o.dims, "comma-separated dimensions");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (ab->parsed()) return cmd_ablate(o);
    if (an->parsed()) return cmd_analyze_noise(o);
    throw Error("cli", "no command given");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: cli: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
