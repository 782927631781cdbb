#include "stagechain/cli/app.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "stagechain/cli/experiment.hpp"
#include "stagechain/ctx/telemetry.hpp"
#include "stagechain/errors.hpp"
#include "stagechain/scene/drivelm.hpp"
#include "stagechain/eval/nli.hpp"
#include "stagechain/version.hpp"

namespace stagechain::cli {

namespace {

struct CommonOptions {
  std::string root;
  std::string config;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--root", o.root,
                  "Experiment directory (default: $STAGECHAIN_OUT, else ./stagechain-out)");
  cmd->add_option("--config", o.config,
                  "Experiment config or manifest JSON (default: <root>/config.json if present)");
}

std::string resolve_root(const CommonOptions& o) {
  if (!o.root.empty()) return o.root;
  if (const char* env = std::getenv("STAGECHAIN_OUT"); env && *env) return env;
  return "stagechain-out";
}

ExperimentConfig resolve_config(const CommonOptions& o, const std::string& root) {
  if (!o.config.empty()) return load_config(o.config);
  if (fs::exists(fs::path(root) / "config.json")) return load_config(fs::path(root) / "config.json");
  return ExperimentConfig{};
}

std::vector<std::uint64_t> seeds_or_config(const std::vector<std::uint64_t>& given,
                                           const ExperimentConfig& c) {
  return given.empty() ? c.seeds : given;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const MissingArtifactError*>(&e)) return kExitMissing;
  return kExitData;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Three-stage driving QA with prompt and latent context passing"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  CommonOptions common;

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "Generate the synthetic scene dataset");
  add_common(gen, common);
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_n;
  std::optional<double> gen_frac;
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--n", gen_n, "Number of scenes (>= 10)");
  gen->add_option("--train-frac", gen_frac, "Training fraction (default 0.8)");
  gen->add_option("--out", common.root, "Output directory (same as --root)");

  // pretrain-base
  CLI::App* pre = app.add_subcommand("pretrain-base", "Pretrain the backbone on answer text");
  add_common(pre, common);

  // baseline
  CLI::App* base = app.add_subcommand("baseline", "Train one flat stage adapter");
  add_common(base, common);
  std::string base_stage;
  std::vector<std::uint64_t> base_seeds;
  base->add_option("--stage", base_stage, "perc, pred or plan")
      ->required()
      ->check(CLI::IsMember({"perc", "pred", "plan"}));
  base->add_option("--seed", base_seeds, "Seed(s) (default: config seeds)");

  // train
  CLI::App* train = app.add_subcommand("train", "Run sequential training phase 1 or 2");
  add_common(train, common);
  int phase = 0;
  std::vector<std::uint64_t> train_seeds;
  bool skip = false, transfer = false, no_skip = false, no_transfer = false;
  std::string preset;
  train->add_option("--phase", phase, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--seed", train_seeds, "Seed(s) (default: config seeds)");
  train->add_flag("--skip", skip, "Train the perc->plan skip projector (phase 2)");
  train->add_flag("--no-skip", no_skip, "Disable the skip projector");
  train->add_flag("--transfer", transfer, "Initialize pred->plan from the phase-1 projector");
  train->add_flag("--no-transfer", no_transfer, "Disable weight transfer");
  train->add_option("--preset", preset, "Hyperparameter preset: desk or reference")
      ->check(CLI::IsMember({"desk", "reference"}));

  // infer
  CLI::App* inf = app.add_subcommand("infer", "Run chained inference over the validation split");
  add_common(inf, common);
  std::string mode;
  std::vector<std::uint64_t> infer_seeds;
  std::string infer_out, adapter_set = "flat";
  bool hard_zero = false;
  inf->add_option("--mode", mode, "flat, history, injection, latent or latent-skip")->required();
  inf->add_option("--seed", infer_seeds, "Seed(s) (default: config seeds)");
  inf->add_option("--out", infer_out, "Transcript JSONL (single seed only)");
  inf->add_flag("--hard-zero", hard_zero, "Close every projector gate exactly");
  inf->add_option("--adapters", adapter_set,
                  "Adapters for explicit modes: flat (baselines) or sequential (phase 1/2)")
      ->check(CLI::IsMember({"flat", "sequential"}));

  // run-matrix
  CLI::App* matrix = app.add_subcommand("run-matrix", "Run every configured mode");
  add_common(matrix, common);
  std::vector<std::uint64_t> matrix_seeds;
  std::vector<std::string> matrix_modes;
  matrix->add_option("--seed", matrix_seeds, "Seed(s) (default: config seeds)");
  matrix->add_option("--modes", matrix_modes, "Modes (default: config modes)");

  // eval
  CLI::App* ev = app.add_subcommand("eval", "Score transcripts and write the report");
  add_common(ev, common);
  std::vector<std::string> transcripts;
  std::string nli, eval_out;
  bool fallback = false;
  std::optional<std::size_t> resamples;
  ev->add_option("--transcripts", transcripts,
                 "Transcript files (default: every configured mode and seed under root)");
  ev->add_option("--nli", nli, "heuristic or http://host:port (default: $STAGECHAIN_NLI_URL, else config)");
  ev->add_flag("--nli-fallback", fallback, "Use the heuristic backend if the URL is unreachable");
  ev->add_option("--resamples", resamples, "Bootstrap resamples (default 10000)");
  ev->add_option("--out", eval_out, "Report directory (default <root>/report)");

  // telemetry
  CLI::App* tel = app.add_subcommand("telemetry", "Convert a telemetry log to CSV");
  std::string tel_log, tel_out;
  tel->add_option("--log", tel_log, "Telemetry JSONL")->required();
  tel->add_option("--out", tel_out, "CSV output")->required();

  // import-drivelm
  CLI::App* imp = app.add_subcommand(
      "import-drivelm", "Convert DriveLM v1.1 QA records to transcripts for eval (text only)");
  std::string imp_file, imp_out, imp_tag = "drivelm";
  imp->add_option("--file", imp_file, "DriveLM QA JSON")->required();
  imp->add_option("--out", imp_out, "Transcript JSONL")->required();
  imp->add_option("--condition", imp_tag, "Condition name in the report (default drivelm)");

  // run
  CLI::App* run = app.add_subcommand("run", "Full experiment: data, training, inference, report");
  add_common(run, common);

  // serve-nli
  CLI::App* serve = app.add_subcommand("serve-nli", "Serve the heuristic NLI backend over HTTP");
  std::string host = "127.0.0.1";
  int port = 8088;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (tel->parsed()) {
      std::ifstream in(tel_log);
      if (!in) throw MissingArtifactError("cannot open telemetry log " + tel_log);
      const ctx::TelemetryParse parsed = ctx::read_telemetry_jsonl(in);
      if (parsed.malformed > 0)
        std::cerr << "warning: skipped " << parsed.malformed << " malformed telemetry line(s)\n";
      if (parsed.records.empty()) std::cerr << "warning: telemetry log has no records\n";
      if (fs::path(tel_out).has_parent_path()) fs::create_directories(fs::path(tel_out).parent_path());
      std::ofstream out(tel_out, std::ios::binary);
      if (!out) throw DataError("cannot write " + tel_out);
      ctx::write_telemetry_csv(out, parsed.records);
      return kExitOk;
    }
    if (imp->parsed()) {
      const scene::DriveLMLoad load = scene::load_drivelm_qa(imp_file);
      if (load.skipped > 0)
        std::cerr << "warning: skipped " << load.skipped << " key frame(s) without all three stages\n";
      if (fs::path(imp_out).has_parent_path()) fs::create_directories(fs::path(imp_out).parent_path());
      std::ofstream out(imp_out, std::ios::binary);
      if (!out) throw DataError("cannot write " + imp_out);
      std::vector<pipeline::ChainTranscript> ts;
      for (const scene::QATriple& qa : load.records) {
        scene::SceneRecord r;
        r.scene.scene_id = qa.scene_id;
        r.qa = qa;
        ts.push_back(pipeline::gold_transcript(r));
        ts.back().mode = imp_tag;
      }
      pipeline::write_transcripts_jsonl(out, ts);
      std::cout << "wrote " << ts.size() << " transcript(s)\n";
      return kExitOk;
    }
    if (serve->parsed()) {
      eval::HeuristicNliServer server;
      const int bound = server.bind(host, port);
      std::cout << "serving heuristic NLI on http://" << host << ":" << bound << std::endl;
      server.listen();
      return kExitOk;
    }

    const std::string root = resolve_root(common);
    ExperimentConfig config = resolve_config(common, root);
    if (gen->parsed()) {
      if (gen_seed) config.dataset_seed = *gen_seed;
      if (gen_n) {
        if (*gen_n < 10) throw UsageError("--n must be at least 10");
        config.n_scenes = *gen_n;
      }
      if (gen_frac) config.train_frac = *gen_frac;
    }
    if (train->parsed()) {
      if (!preset.empty()) {
        const pipeline::TrainConfig p = pipeline::TrainConfig::preset_named(preset);
        const bool s = config.train.use_skip, t = config.train.use_transfer;
        config.train = p;
        config.train.use_skip = s;
        config.train.use_transfer = t;
      }
      if (skip) config.train.use_skip = true;
      if (no_skip) config.train.use_skip = false;
      if (transfer) config.train.use_transfer = true;
      if (no_transfer) config.train.use_transfer = false;
    }
    if (matrix->parsed() && !matrix_modes.empty()) {
      parse_modes(matrix_modes);
      config.modes = matrix_modes;
    }
    if (ev->parsed()) {
      if (!nli.empty()) {
        config.nli = nli;
      } else if (const char* env = std::getenv("STAGECHAIN_NLI_URL"); env && *env) {
        config.nli = env;
      }
      if (fallback) config.nli_fallback = true;
      if (resamples) config.n_resamples = *resamples;
    }

    Experiment exp(root, config);
    if (gen->parsed()) {
      exp.gen_data();
    } else if (pre->parsed()) {
      exp.pretrain_base();
    } else if (base->parsed()) {
      for (std::uint64_t s : seeds_or_config(base_seeds, config))
        exp.train_baseline(s, parse_stage(base_stage));
    } else if (train->parsed()) {
      for (std::uint64_t s : seeds_or_config(train_seeds, config)) {
        if (phase == 1) exp.train_phase1(s);
        else exp.train_phase2(s);
      }
      exp.export_telemetry();
    } else if (inf->parsed()) {
      const pipeline::Mode m = pipeline::parse_mode(mode);
      const auto seeds = seeds_or_config(infer_seeds, config);
      if (!infer_out.empty() && seeds.size() != 1)
        throw UsageError("--out needs exactly one --seed");
      for (std::uint64_t s : seeds) {
        pipeline::InjectionAudit audit;
        std::optional<fs::path> out;
        if (!infer_out.empty()) out = infer_out;
        exp.infer(s, m, out, hard_zero,
                  adapter_set == "sequential" ? AdapterSet::sequential : AdapterSet::flat, &audit);
        if (audit.checked > 0)
          std::cerr << "seed " << s << ": " << audit.checked << " injected prompts, "
                    << audit.one_row << " with one changed row, " << audit.zero_rows
                    << " unchanged, " << audit.violations << " violations\n";
      }
    } else if (matrix->parsed()) {
      for (std::uint64_t s : seeds_or_config(matrix_seeds, config)) exp.run_matrix(s);
    } else if (ev->parsed()) {
      std::vector<fs::path> files(transcripts.begin(), transcripts.end());
      if (files.empty()) {
        for (std::uint64_t s : config.seeds)
          for (const std::string& m : config.modes) files.push_back(exp.transcripts_path(s, m));
      }
      const EvalResult r = exp.evaluate(files, eval_out.empty() ? exp.report_dir() : fs::path(eval_out));
      std::cout << "wrote report for " << r.reports.size() << " condition/slice rows\n";
    } else if (run->parsed()) {
      exp.run_all();
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace stagechain::cli
