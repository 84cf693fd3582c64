// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

// eend_lab: command-line driver.
//
// Exit codes: 0 success, 1 input / parse / runtime failure, 2 configuration
// error or bad usage.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eend/checkpoint.hpp"
#include "eend/config.hpp"
#include "eend/gradcheck.hpp"
#include "eend/pipeline.hpp"

namespace {

using namespace eend;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 0;
};

std::size_t resolve_jobs(std::size_t flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("EEND_LAB_JOBS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("EEND_LAB_JOBS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

RunConfig effective_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) set_seed(c, *g.seed);
  c.train.jobs = resolve_jobs(g.jobs);
  return c;
}

std::string need_out(const Globals& g, const char* cmd) {
  if (g.out.empty()) throw ConfigError(std::string(cmd) + ": --out DIR is required");
  ensure_dir(g.out);
  return g.out;
}

void echo(const std::string& dir, const RunConfig& c) { write_text(dir + "/config.echo.json", echo_config(c)); }

int run_featurize(const Globals& g, const std::string& data) {
  const RunConfig c = effective_config(g);
  const std::string out = g.out.empty() ? data : g.out;
  const std::size_t n = featurize_dir(data, out, c.feature.n_mels);
  std::cout << "featurized\t" << n << '\n';
  return 0;
}

int run_simulate(const Globals& g, const std::string& manifest, std::optional<std::size_t> count,
                 const std::string& prefix) {
  const RunConfig c = effective_config(g);
  const std::string out = need_out(g, "simulate");
  UtterancePool pool = build_pool(manifest, c.sim.min_utt_len);
  load_pool_audio(pool);
  const auto mixtures = simulate_corpus(pool, c.sim, load_augment_pools(c.sim), c.seed, count.value_or(c.sim.n_mixtures), prefix);
  write_data_dir(out, mixtures);
  std::vector<Annotation> ann;
  for (const auto& m : mixtures) ann.push_back(m.annotation);
  const std::string stats = format_stats(prefix, c.sim.min_utt_len, corpus_stats(ann));
  write_text(out + "/stats.tsv", stats);
  echo(out, c);
  std::cout << stats;
  return 0;
}

int run_stats(const Globals& g, const std::vector<std::string>& inputs, const std::string& name) {
  const RunConfig c = effective_config(g);
  std::vector<Annotation> all;
  for (const auto& in : inputs)
    for (auto& a : as_list(load_annotations(in))) all.push_back(std::move(a));
  const std::string stats = format_stats(name, c.sim.min_utt_len, corpus_stats(all));
  if (!g.out.empty()) write_text(need_out(g, "stats") + "/stats.tsv", stats);
  std::cout << stats;
  return 0;
}

int run_similarity(const Globals& g, const std::string& a, const std::string& b) {
  const RunConfig c = effective_config(g);
  const std::string text =
      format_similarity(compare_corpora(as_list(load_annotations(a)), as_list(load_annotations(b)), c.score.gamma, c.score.bin_width));
  if (!g.out.empty()) write_text(need_out(g, "similarity") + "/similarity.tsv", text);
  std::cout << text;
  return 0;
}

int run_train(const Globals& g, const std::string& data, const std::string& init) {
  const RunConfig c = effective_config(g);
  const std::string out = need_out(g, "train");
  const auto corpus = load_examples(data, c.encoder.n_speakers);
  EncoderParams start;
  if (init.empty()) {
    Rng rng(derive_seed(c.seed, 5));
    start = init_params(c.encoder, rng);
  } else {
    start = load_checkpoint(init);
  }
  echo(out, c);
  const TrainResult r = train_to_dir(corpus, start, c.train, out);
  std::printf("steps\t%zu\nfirst_loss\t%.6f\nlast_loss\t%.6f\n", r.log.size(), r.log.front().loss, r.log.back().loss);
  return 0;
}

int run_average(const Globals& g, const std::vector<std::string>& ckpts) {
  const std::string out = need_out(g, "average");
  save_checkpoint(out + "/avg.ckpt", average_checkpoints(ckpts));
  std::cout << "averaged\t" << ckpts.size() << '\n';
  return 0;
}

int run_finetune(const Globals& g, const std::string& model, const std::string& adapt, const std::string& dev) {
  const RunConfig c = effective_config(g);
  const std::string out = need_out(g, "finetune");
  const EncoderParams base = load_checkpoint(model);
  const auto a = load_examples(adapt, base.config.n_speakers);
  const auto d = load_examples(dev, base.config.n_speakers);
  const auto results = finetune_grid(base, a, d, c.train, c.score.decode());
  const std::string report = format_finetune_report(results);
  write_text(out + "/finetune.tsv", report);
  echo(out, c);
  std::cout << report;
  return 0;
}

int run_infer(const Globals& g, const std::string& model, const std::string& data) {
  const RunConfig c = effective_config(g);
  const std::string out = need_out(g, "infer");
  const EncoderParams p = load_checkpoint(model);
  const auto corpus = load_examples(data, p.config.n_speakers);
  write_text(out + "/hyp.rttm", emit_rttm(infer_corpus(corpus, p, c.score.decode())));
  echo(out, c);
  std::cout << "inferred\t" << corpus.size() << '\n';
  return 0;
}

int run_score(const Globals& g, const std::string& ref, const std::string& hyp) {
  const RunConfig c = effective_config(g);
  const std::string table = format_der_table(score_corpus(load_annotations(ref), load_rttm(hyp), c.score.collar, c.score.skip_missing));
  if (!g.out.empty()) write_text(need_out(g, "score") + "/der.tsv", table);
  std::cout << table;
  return 0;
}

int run_gradcheck(const Globals& g, const std::string& arch, const std::string& frontend) {
  const std::uint64_t seed = g.seed.value_or(0);
  double worst = 0.0;
  for (Arch a : {Arch::transformer, Arch::conformer}) {
    if (!arch.empty() && parse_arch(arch) != a) continue;
    for (FrontendKind f : {FrontendKind::stacked, FrontendKind::conv_subsample}) {
      if (!frontend.empty() && parse_frontend(frontend) != f) continue;
      const GradCheckReport r = gradient_check(toy_config(a, f), seed);
      std::printf("%s\t%s\tseed=%llu\tmax_rel_err=%.3e\tworst=%s[%zu]\tparams=%zu\n", to_string(a).c_str(),
                  to_string(f).c_str(), static_cast<unsigned long long>(seed), r.max_relative_error,
                  r.worst_parameter.c_str(), r.worst_index, r.checked);
      worst = std::max(worst, r.max_relative_error);
    }
  }
  std::printf("max_relative_error\t%.3e\n", worst);
  if (worst > 1e-4) {
    std::cerr << "gradcheck: max relative error " << worst << " exceeds 1e-4\n";
    return 1;
  }
  return 0;
}

int run_paramcount(const Globals& g, bool ledger) {
  const RunConfig c = effective_config(g);
  std::size_t total = 0;
  for (const auto& t : parameter_layout(c.encoder)) {
    const std::size_t n = t.rows * t.cols;
    total += n;
    if (ledger) std::printf("%s\t%zux%zu\t%zu\n", t.name.c_str(), t.rows, t.cols, n);
  }
  std::printf("total\t%zu\n", total);
  return 0;
}

int run_smoke(const Globals& g) {
  RunConfig c = g.config.empty() ? smoke_config() : load_run_config(g.config);
  if (g.seed) set_seed(c, *g.seed);
  c.train.jobs = resolve_jobs(g.jobs);
  const std::string out = need_out(g, "smoke");
  const SmokeReport r = pipeline_smoke(out, c, &std::cerr);
  std::cout << format_smoke_summary(r);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eend_lab: end-to-end neural diarization lab"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "seed (overrides the config)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--jobs", g.jobs, "worker threads (default: $EEND_LAB_JOBS or 1)")->check(CLI::PositiveNumber);

  std::string data, manifest, prefix = "mix", name = "corpus", init, model, adapt, dev, ref, hyp, a, b, arch, frontend;
  std::optional<std::size_t> count;
  std::vector<std::string> inputs, ckpts;
  bool ledger = false;

  auto* featurize = app.add_subcommand("featurize", "log-Mel features for <data>/wav/*.wav");
  featurize->add_option("--data", data, "data directory")->required();

  auto* simulate = app.add_subcommand("simulate", "simulate a two-speaker corpus");
  simulate->add_option("--manifest", manifest, "speaker<TAB>wav<TAB>duration manifest")->required();
  simulate->add_option("--count", count, "number of mixtures (default: sim.n_mixtures)");
  simulate->add_option("--prefix", prefix, "recording id prefix");

  auto* stats = app.add_subcommand("stats", "corpus statistics of RTTM files or data directories");
  stats->add_option("inputs", inputs, "RTTM files or data directories")->required();
  stats->add_option("--name", name, "corpus name in the report");

  auto* sim = app.add_subcommand("similarity", "overlap/silence similarity between two corpora");
  sim->add_option("--train", a, "first corpus (RTTM or data directory)")->required();
  sim->add_option("--test", b, "second corpus (RTTM or data directory)")->required();

  auto* trn = app.add_subcommand("train", "train on <data>/feats with <data>/ref.rttm");
  trn->add_option("--data", data, "data directory")->required();
  trn->add_option("--init", init, "initial checkpoint");

  auto* avg = app.add_subcommand("average", "elementwise mean of checkpoints");
  avg->add_option("checkpoints", ckpts, "checkpoint files")->required();

  auto* ft = app.add_subcommand("finetune", "fine-tuning grid ranked by dev DER");
  ft->add_option("--model", model, "base checkpoint")->required();
  ft->add_option("--adapt", adapt, "adaptation data directory")->required();
  ft->add_option("--dev", dev, "development data directory")->required();

  auto* inf = app.add_subcommand("infer", "decode <data>/feats to RTTM");
  inf->add_option("--model", model, "checkpoint")->required();
  inf->add_option("--data", data, "data directory")->required();

  auto* score = app.add_subcommand("score", "DER of a hypothesis RTTM");
  score->add_option("--ref", ref, "reference RTTM or data directory")->required();
  score->add_option("--hyp", hyp, "hypothesis RTTM")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check on toy models");
  gc->add_option("--arch", arch, "transformer|conformer (default: both)");
  gc->add_option("--frontend", frontend, "stacked|conv_subsample (default: both)");

  auto* pc = app.add_subcommand("paramcount", "parameter count of the configured encoder");
  pc->add_flag("--ledger", ledger, "print every tensor");

  auto* smoke = app.add_subcommand("smoke", "end-to-end smoke pipeline");
  app.add_subcommand("pipeline_smoke", "alias of smoke")->alias("pipeline-smoke");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*featurize) return run_featurize(g, data);
    if (*simulate) return run_simulate(g, manifest, count, prefix);
    if (*stats) return run_stats(g, inputs, name);
    if (*sim) return run_similarity(g, a, b);
    if (*trn) return run_train(g, data, init);
    if (*avg) return run_average(g, ckpts);
    if (*ft) return run_finetune(g, model, adapt, dev);
    if (*inf) return run_infer(g, model, data);
    if (*score) return run_score(g, ref, hyp);
    if (*gc) return run_gradcheck(g, arch, frontend);
    if (*pc) return run_paramcount(g, ledger);
    if (*smoke || app.got_subcommand("pipeline_smoke")) return run_smoke(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cerr << app.help();
  return 2;
}
