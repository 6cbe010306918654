// cptasr: synthetic data, each pipeline stage, the full pipeline, baselines,
// evaluation and report rendering.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 empty pseudo-label
// pool, 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cptasr/cptasr.hpp"

namespace fs = std::filesystem;
using namespace cptasr;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::string out;
};

RunConfig load(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.synth.seed = *c.seed;
  }
  if (c.threshold) cfg.threshold = *c.threshold;
  if (const char* env = std::getenv("CPTASR_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

fs::path data_path(const RunConfig& cfg, const std::optional<fs::path>& p, const char* name) {
  return p ? *p : cfg.output_dir / "data" / (std::string(name) + ".jsonl");
}

Dataset load_kind(const fs::path& path, DatasetKind kind) {
  Dataset ds = load_manifest(path);
  if (ds.kind != kind && !(ds.empty()))
    throw DataError(path.string() + ": expected a " + std::string(to_string(kind)) + " manifest, found " +
                    std::string(to_string(ds.kind)));
  ds.kind = kind;
  return ds;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_history_file(const TrainHistory& h, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  write_history(h, os);
}

void save_stage(const Parameters& p, const NetConfig& net, const Vocabulary& vocab, const TrainHistory& h,
                const fs::path& dir, const std::string& name) {
  save_checkpoint(p, net, vocab, dir / (name + ".ckpt"));
  write_history_file(h, dir / (name + "_history.jsonl"));
  std::cout << "wrote " << (dir / (name + ".ckpt")).string() << '\n';
}

int cmd_gen_data(const RunConfig& cfg) {
  const auto corpus = generate_synthetic_corpus(cfg.synth);
  Dataset labeled = corpus.labeled;
  std::optional<Dataset> eval;
  if (cfg.eval_count > 0) {
    auto [train, held] = speaker_disjoint_split(labeled, static_cast<std::size_t>(cfg.eval_count),
                                                fan_out_seed(cfg.seed).split);
    labeled = std::move(train);
    eval = std::move(held);
  }
  const auto dir = cfg.output_dir / "data";
  save_manifest(labeled, dir / "labeled.jsonl");
  save_manifest(corpus.unlabeled, dir / "unlabeled.jsonl");
  if (eval) save_manifest(*eval, dir / "eval.jsonl");
  save_transcripts(corpus.truth, dir / "truth.jsonl");
  std::cout << "labeled " << labeled.size() << " unlabeled " << corpus.unlabeled.size();
  if (eval) std::cout << " eval " << eval->size();
  std::cout << " -> " << dir.string() << '\n';
  if (corpus.unlabeled.empty()) std::cerr << "warning: unlabeled manifest is empty\n";
  return 0;
}

int cmd_split(const std::string& in, std::size_t eval_count, std::uint64_t seed, const std::string& train_out,
              const std::string& eval_out) {
  const auto ds = load_manifest(in);
  auto [train, eval] = speaker_disjoint_split(ds, eval_count, seed);
  save_manifest(train, train_out);
  save_manifest(eval, eval_out);
  std::cout << "train " << train.size() << " (" << train.speakers().size() << " speakers), eval " << eval.size()
            << " (" << eval.speakers().size() << " speakers)\n";
  return 0;
}

struct LabeledInputs {
  Dataset labeled;
  Vocabulary vocab;
  NetConfig net;
  LabeledSplit split;
};

LabeledInputs labeled_inputs(const RunConfig& cfg) {
  LabeledInputs in;
  in.labeled = load_kind(data_path(cfg, cfg.paths.labeled, "labeled"), DatasetKind::labeled);
  in.vocab = labeled_vocabulary(in.labeled);
  in.net = with_vocab(cfg.net, in.vocab);
  in.split = split_for_validation(in.labeled, cfg.val_fraction, fan_out_seed(cfg.seed).split);
  return in;
}

std::optional<Dataset> optional_eval(const RunConfig& cfg) {
  const auto path = data_path(cfg, cfg.paths.eval, "eval");
  if (!cfg.paths.eval && !fs::exists(path)) return std::nullopt;
  return load_kind(path, DatasetKind::labeled);
}

TrainOptions train_options() {
  TrainOptions o;
  o.log = &std::cerr;
  return o;
}

int cmd_train_labeler(const RunConfig& cfg) {
  const auto in = labeled_inputs(cfg);
  fs::create_directories(cfg.output_dir);
  auto r = train_stage(init_parameters(in.net, fan_out_seed(cfg.seed).init), in.net, in.vocab, in.split.train,
                       in.split.val, cfg.stage("stage1"), train_options());
  save_stage(r.params, in.net, in.vocab, r.history, cfg.output_dir, "labeler");
  const double val = r.history.best_wer();
  std::cout << "labeler validation WER " << val << '\n';
  if (val >= kLabelerWerGate)
    std::cerr << "warning: labeling model validation WER is not below " << kLabelerWerGate << '\n';
  return 0;
}

int cmd_pseudolabel(const RunConfig& cfg, std::string checkpoint) {
  if (checkpoint.empty()) checkpoint = (cfg.output_dir / "labeler.ckpt").string();
  const auto ck = load_checkpoint(checkpoint);
  const auto pool = load_kind(data_path(cfg, cfg.paths.unlabeled, "unlabeled"), DatasetKind::unlabeled);
  const auto r = generate_pseudo_labels(ck.params, ck.config, ck.vocab, pool, cfg.threshold);
  const nlohmann::json stats{{"threshold", cfg.threshold},
                             {"total", r.stats.total},
                             {"kept", r.stats.kept},
                             {"empty_dropped", r.stats.empty_dropped},
                             {"below_threshold", r.stats.below_threshold}};
  std::cout << stats.dump() << '\n';
  if (r.stats.kept == 0) throw EmptyPseudoPoolError("no pseudo-labels survived threshold " + std::to_string(cfg.threshold));
  save_manifest(r.dataset, cfg.output_dir / "pseudo.jsonl");
  write_json(stats, cfg.output_dir / "pseudo_stats.json");
  return 0;
}

int cmd_cpt(const RunConfig& cfg) {
  const auto in = labeled_inputs(cfg);
  Dataset pseudo = load_kind(cfg.output_dir / "pseudo.jsonl", DatasetKind::pseudo_labeled);
  if (pseudo.empty()) throw EmptyPseudoPoolError("pseudo-label manifest is empty");
  Parameters start = init_parameters(in.net, fan_out_seed(cfg.seed).init);
  if (cfg.cpt_init == CptInit::labeler) start = load_checkpoint(cfg.output_dir / "labeler.ckpt", in.net).params;
  if (cfg.mix_labeled_in_cpt)
    for (const auto& u : in.split.train.utterances) pseudo.utterances.push_back(u);
  auto r = train_stage(start, in.net, in.vocab, pseudo, in.split.val, cfg.stage("stage2-cpt"), train_options());
  save_stage(r.params, in.net, in.vocab, r.history, cfg.output_dir, "cpt");
  return 0;
}

int cmd_finetune(const RunConfig& cfg) {
  const auto in = labeled_inputs(cfg);
  const auto eval = optional_eval(cfg);
  const auto start = load_checkpoint(cfg.output_dir / "cpt.ckpt", in.net);
  if (!(start.vocab == in.vocab)) throw ConfigError("cpt checkpoint vocabulary differs from the labeled data");
  auto r = train_stage(start.params, in.net, in.vocab, in.split.train, in.split.val, cfg.stage("stage3-finetune"),
                       train_options());
  save_stage(r.params, in.net, in.vocab, r.history, cfg.output_dir, "final");
  if (eval) {
    const auto rep = evaluate_wer(round_to_float(r.params), in.net, in.vocab, *eval);
    write_json(to_json(rep), cfg.output_dir / "final_wer.json");
    std::cout << "final eval WER " << rep.wer << '\n';
  }
  return 0;
}

int cmd_baseline(const RunConfig& cfg, const std::string& labeled_override, const std::string& name) {
  const auto labeled_path = labeled_override.empty() ? data_path(cfg, cfg.paths.labeled, "labeled") : fs::path(labeled_override);
  const auto labeled = load_kind(labeled_path, DatasetKind::labeled);
  const auto eval = load_kind(data_path(cfg, cfg.paths.eval, "eval"), DatasetKind::labeled);
  fs::create_directories(cfg.output_dir);
  PipelineOptions po = cfg.pipeline_options();
  po.log = &std::cerr;
  const auto r = run_baseline(labeled, eval, cfg.stage("baseline"), cfg.net, po);
  save_stage(r.params, r.net, r.vocab, r.history, cfg.output_dir, name);
  write_json(to_json(r.eval), cfg.output_dir / (name + "_wer.json"));
  std::cout << name << " eval WER " << r.eval.wer << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& unit,
             const std::string& out) {
  const auto ck = load_checkpoint(checkpoint);
  const auto ds = load_kind(manifest, DatasetKind::labeled);
  std::vector<std::pair<std::string, std::string>> pairs;
  const auto decoded = decode_dataset(ck.params, ck.config, ck.vocab, ds);
  for (std::size_t i = 0; i < ds.size(); ++i) pairs.emplace_back(*ds.utterances[i].transcript, decoded[i].hypothesis);
  const auto rep = wer(pairs, unit == "char" ? ErrorUnit::character : ErrorUnit::word);
  const auto j = to_json(rep);
  if (!out.empty()) write_json(j, out);
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_pipeline(const RunConfig& cfg) {
  // Everything is loaded and checked before the first file is written.
  const auto labeled = load_kind(data_path(cfg, cfg.paths.labeled, "labeled"), DatasetKind::labeled);
  const auto pool = load_kind(data_path(cfg, cfg.paths.unlabeled, "unlabeled"), DatasetKind::unlabeled);
  const auto eval = load_kind(data_path(cfg, cfg.paths.eval, "eval"), DatasetKind::labeled);
  std::optional<Dataset> large;
  if (cfg.paths.baseline_labeled) large = load_kind(*cfg.paths.baseline_labeled, DatasetKind::labeled);
  labeled_vocabulary(labeled);
  if (pool.empty()) throw DataError("unlabeled pool is empty");

  PipelineOptions po = cfg.pipeline_options();
  po.log = &std::cerr;
  const auto baseline = run_baseline(labeled, eval, cfg.stage("baseline"), cfg.net, po);

  // Checkpoints land in a staging directory and are moved into place only on success.
  const auto staging = cfg.output_dir / ".staging";
  fs::remove_all(staging);
  fs::create_directories(staging);
  po.output_dir = staging;
  PipelineResult r;
  try {
    r = run_cpt_pipeline(labeled, pool, eval, cfg.pipeline_stages(), cfg.net, po, baseline.eval);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  for (const char* name : {"labeler", "cpt", "final"})
    fs::rename(staging / (std::string(name) + ".ckpt"), cfg.output_dir / (std::string(name) + ".ckpt"));
  fs::remove_all(staging);
  write_history_file(r.report.labeler_history, cfg.output_dir / "labeler_history.jsonl");
  write_history_file(r.report.cpt_history, cfg.output_dir / "cpt_history.jsonl");
  write_history_file(r.report.finetune_history, cfg.output_dir / "final_history.jsonl");
  save_manifest(r.pseudo.dataset, cfg.output_dir / "pseudo.jsonl");

  auto report = to_json(r.report);
  report["seed"] = cfg.seed;
  report["net"] = to_json(r.net);
  if (large) {
    const auto b = run_baseline(*large, eval, cfg.stage("baseline"), cfg.net, po);
    report["baseline_large_eval"] = to_json(b.eval);
    report["baseline_large_labeled"] = large->size();
    write_json(to_json(b.eval), cfg.output_dir / "baseline_large_wer.json");
  }
  write_json(to_json(baseline.eval), cfg.output_dir / "baseline_wer.json");
  write_json(to_json(r.report.final_eval), cfg.output_dir / "final_wer.json");
  write_json(report, cfg.output_dir / "pipeline_report.json");
  std::cout << "baseline WER " << baseline.eval.wer << ", CPT pipeline WER " << r.report.final_eval.wer
            << ", relative " << *r.report.relative_improvement_vs_baseline() * 100.0 << "%\n";
  std::cout << "report: " << (cfg.output_dir / "pipeline_report.json").string() << '\n';
  return 0;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Rows are "label=baseline.json,final.json" or "label=pipeline_report.json".
int cmd_report(const std::vector<std::string>& rows) {
  std::vector<ComparisonRow> table;
  for (const auto& spec : rows) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("report row '" + spec + "' must look like label=files");
    ComparisonRow row{spec.substr(0, eq)};
    const auto files = spec.substr(eq + 1);
    if (const auto comma = files.find(','); comma != std::string::npos) {
      row.baseline_wer = wer_report_from_json(read_json(files.substr(0, comma))).wer;
      row.final_wer = wer_report_from_json(read_json(files.substr(comma + 1))).wer;
    } else {
      const auto j = read_json(files);
      if (!j.contains("baseline_eval") || !j.contains("final_eval"))
        throw DataError(files + ": pipeline report has no baseline_eval/final_eval");
      row.baseline_wer = wer_report_from_json(j.at("baseline_eval")).wer;
      row.final_wer = wer_report_from_json(j.at("final_eval")).wer;
    }
    table.push_back(row);
  }
  std::cout << render_comparison_table(table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continued pretraining on pseudo-labels for CTC speech recognition (synthetic features)"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker thread cap (0 = all cores)");

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Top-level seed (overrides config)");
    sub->add_option("--threshold", common.threshold, "Pseudo-label confidence threshold (overrides config)");
    sub->add_option("-o,--out", common.out, "Output directory (overrides config and CPTASR_OUTPUT_DIR)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus and write manifests");
  add_common(gen);

  auto* split = app.add_subcommand("split", "Speaker-disjoint split of a manifest");
  std::string split_in, split_train, split_eval;
  std::size_t split_count = 0;
  std::uint64_t split_seed = 0;
  split->add_option("--in", split_in)->required()->check(CLI::ExistingFile);
  split->add_option("--eval-count", split_count)->required();
  split->add_option("--seed", split_seed);
  split->add_option("--train-out", split_train)->required();
  split->add_option("--eval-out", split_eval)->required();

  auto* labeler = app.add_subcommand("train-labeler", "Stage A: train the labeling model");
  add_common(labeler);
  auto* pseudo = app.add_subcommand("pseudolabel", "Stage B: decode and filter the unlabeled pool");
  add_common(pseudo);
  std::string pseudo_ckpt;
  pseudo->add_option("--checkpoint", pseudo_ckpt, "Labeling model (default <out>/labeler.ckpt)");
  auto* cpt = app.add_subcommand("cpt", "Stage C: continued pretraining on pseudo-labels");
  add_common(cpt);
  auto* finetune = app.add_subcommand("finetune", "Stage D: finetune the CPT checkpoint");
  add_common(finetune);

  auto* baseline = app.add_subcommand("baseline", "Direct finetuning from fresh init, no CPT");
  add_common(baseline);
  std::string baseline_labeled, baseline_name = "baseline";
  baseline->add_option("--labeled", baseline_labeled, "Labeled manifest (overrides config)");
  baseline->add_option("--name", baseline_name, "Output name prefix");

  auto* eval = app.add_subcommand("eval", "WER of a checkpoint on a labeled manifest");
  std::string eval_ckpt, eval_manifest, eval_unit = "word", eval_out;
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", eval_manifest)->required()->check(CLI::ExistingFile);
  eval->add_option("--unit", eval_unit)->check(CLI::IsMember({"word", "char"}));
  eval->add_option("--out", eval_out, "Write the report here as JSON");

  auto* pipeline = app.add_subcommand("pipeline", "Stages A-D plus the baseline, with a report");
  add_common(pipeline);

  auto* report = app.add_subcommand("report", "Render a baseline vs final comparison table");
  std::vector<std::string> report_rows;
  report->add_option("rows", report_rows, "label=baseline.json,final.json or label=pipeline_report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  thread_cap() = threads;

  try {
    if (*split) return cmd_split(split_in, split_count, split_seed, split_train, split_eval);
    if (*eval) return cmd_eval(eval_ckpt, eval_manifest, eval_unit, eval_out);
    if (*report) return cmd_report(report_rows);
    const RunConfig cfg = load(common);
    if (*gen) return cmd_gen_data(cfg);
    if (*labeler) return cmd_train_labeler(cfg);
    if (*pseudo) return cmd_pseudolabel(cfg, pseudo_ckpt);
    if (*cpt) return cmd_cpt(cfg);
    if (*finetune) return cmd_finetune(cfg);
    if (*baseline) return cmd_baseline(cfg, baseline_labeled, baseline_name);
    if (*pipeline) return cmd_pipeline(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const EmptyPseudoPoolError& e) {
    std::cerr << "empty pseudo-label pool: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
