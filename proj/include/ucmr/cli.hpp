#pragma once

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ucmr/bundle.hpp"
#include "ucmr/corpus.hpp"
#include "ucmr/dialog_engine.hpp"
#include "ucmr/encoder.hpp"
#include "ucmr/entailment_gan.hpp"
#include "ucmr/error.hpp"
#include "ucmr/evalharness.hpp"
#include "ucmr/question_gen.hpp"
#include "ucmr/segmentation.hpp"
#include "ucmr/service.hpp"
#include "ucmr/spectral_rules.hpp"

namespace ucmr::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitPipeline = 2;

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::PipelineError:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::EigensolveFailure:
    case ErrorCode::RemoteUnavailable:
    case ErrorCode::MissingEmbedding:
    case ErrorCode::InvalidState: return kExitPipeline;
    default: return kExitValidation;
  }
}

/// Directory whose config.json a command updates: the parent of its output
/// path, ignoring a trailing separator.
inline fs::path bundle_dir_of(const std::string& output) {
  fs::path p(output);
  if (!p.has_filename()) p = p.parent_path();
  fs::path parent = p.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

struct EncoderFlags {
  std::optional<std::string> backend;
  std::optional<int> dim;
  std::optional<std::string> remote_url;
  std::optional<std::string> store;

  void add_to(CLI::App* app) {
    app->add_option("--encoder", backend, "Encoder backend: hashing, filestore or remote");
    app->add_option("--dim", dim, "Embedding dimension");
    app->add_option("--remote-url", remote_url, "Remote encoder URL");
    app->add_option("--store", store, "Embedding store file for the filestore backend");
  }

  encoder::EncoderConfig resolve(const fs::path& bundle_dir) const {
    encoder::EncoderConfig c = bundle::load_config(bundle_dir).encoder;
    if (backend) c.backend = encoder::backend_from_string(*backend);
    if (dim) c.dim = *dim;
    if (remote_url) c.remote_url = *remote_url;
    if (store) c.store_path = *store;
    if (c.dim < 1) throw Error(ErrorCode::Validation, "--dim must be positive");
    return c;
  }
};

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error(ErrorCode::Validation, "cannot write " + p.string());
  out << s;
}

inline std::vector<std::string> texts_of(const std::vector<corpus::Sentence>& doc) {
  std::vector<std::string> out;
  for (const auto& s : doc) out.push_back(s.text);
  return out;
}

inline void print_turn(std::ostream& out, const dialog::Turn& t, bool json) {
  if (json) {
    out << dialog::to_json(t).dump() << std::endl;
  } else {
    out << "system [" << t.cls.value_or("") << "]: " << t.text << std::endl;
  }
}

/// Line-oriented REPL: a scenario line, a question line, then one reply line
/// per inquiry. Repeats until end of input.
inline void chat_loop(const dialog::Engine& engine, std::istream& in, std::ostream& out, std::ostream& prompts, bool json) {
  std::string scenario, question, reply;
  while (true) {
    prompts << "scenario> " << std::flush;
    if (!std::getline(in, scenario)) return;
    prompts << "question> " << std::flush;
    if (!std::getline(in, question)) return;
    dialog::DialogState st;
    dialog::Turn t;
    try {
      t = engine.start(st, scenario, question);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Validation) throw;
      prompts << "error: " << e.what() << std::endl;
      continue;
    }
    print_turn(out, t, json);
    while (st.awaiting_answer()) {
      prompts << "you> " << std::flush;
      if (!std::getline(in, reply)) return;
      if (text::trim(reply).empty()) {
        prompts << "error: answer must not be empty" << std::endl;
        continue;
      }
      t = engine.respond(st, reply);
      print_turn(out, t, json);
    }
  }
}

namespace detail {
inline service::HttpService* g_server = nullptr;
inline void stop_server(int) {
  if (g_server) g_server->stop();
}

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}
}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::istream& in = std::cin, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Unsupervised conversational machine reading", "ucmr"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // ingest
  std::string ingest_src, ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Split rule text files into a sentence corpus");
  ingest->add_option("src_dir", ingest_src, "Directory of .txt rule documents")->required();
  ingest->add_option("-o,--output", ingest_out, "Output corpus.jsonl")->required();

  // segment
  std::string seg_in, seg_out;
  double seg_sigma = 1.0;
  std::optional<double> seg_theta;
  EncoderFlags seg_enc;
  auto* seg = app.add_subcommand("segment", "Detect subject spans in a corpus");
  seg->add_option("corpus", seg_in, "corpus.jsonl")->required();
  seg->add_option("--sigma", seg_sigma, "Gaussian similarity width")->capture_default_str();
  seg->add_option("--theta", seg_theta, "Boundary threshold (default: mean + 0.5 std of the series)");
  seg->add_option("-o,--output", seg_out, "Output spans.json")->required();
  seg_enc.add_to(seg);

  // extract
  std::string ex_in, ex_out;
  std::optional<std::string> ex_corpus;
  std::optional<double> ex_sigma, ex_merge;
  std::optional<std::uint64_t> ex_seed;
  EncoderFlags ex_enc;
  auto* ex = app.add_subcommand("extract", "Cluster each span into rules and build the rule universe");
  ex->add_option("spans", ex_in, "spans.json")->required();
  ex->add_option("--corpus", ex_corpus, "corpus.jsonl (default: next to spans.json)");
  ex->add_option("--sigma", ex_sigma, "Similarity width for the rule graph");
  ex->add_option("--seed", ex_seed, "k-means seed");
  ex->add_option("--merge-cosine", ex_merge, "Centroid cosine above which rules from different spans merge");
  ex->add_option("-o,--output", ex_out, "Output rules.json")->required();
  ex_enc.add_to(ex);

  // train-gan
  std::string tg_rules, tg_corpus, tg_out;
  std::optional<int> tg_steps;
  std::optional<std::uint64_t> tg_seed;
  EncoderFlags tg_enc;
  auto* tg = app.add_subcommand("train-gan", "Train the rule entailment generator");
  tg->add_option("rules", tg_rules, "rules.json")->required();
  tg->add_option("corpus", tg_corpus, "corpus.jsonl")->required();
  tg->add_option("--steps", tg_steps, "Total alternating steps (even)");
  tg->add_option("--seed", tg_seed, "Training seed");
  tg->add_option("-o,--output", tg_out, "Checkpoint directory (bundle/gan)")->required();
  tg_enc.add_to(tg);

  // train-qg
  std::string tq_pairs, tq_out;
  std::optional<int> tq_steps, tq_hidden, tq_embed;
  std::optional<std::uint64_t> tq_seed;
  std::optional<double> tq_lr;
  std::optional<std::string> tq_objective;
  EncoderFlags tq_enc;
  auto* tq = app.add_subcommand("train-qg", "Train the follow-up question generator");
  tq->add_option("pairs", tq_pairs, "JSONL of {source, question} pairs")->required();
  tq->add_option("--steps", tq_steps, "Maximum Adam steps");
  tq->add_option("--seed", tq_seed, "Training seed");
  tq->add_option("--lr", tq_lr, "Learning rate");
  tq->add_option("--hidden", tq_hidden, "Decoder hidden size");
  tq->add_option("--embed", tq_embed, "Word embedding size");
  tq->add_option("--objective", tq_objective, "logit or bounded");
  tq->add_option("-o,--output", tq_out, "Output qg.ckpt")->required();
  tq_enc.add_to(tq);

  // eval
  std::string ev_data, ev_bundle;
  std::optional<std::string> ev_out;
  auto* ev = app.add_subcommand("eval", "Score a pipeline on a labelled dialog dataset");
  ev->add_option("dataset", ev_data, "dataset.jsonl")->required();
  ev->add_option("--bundle", ev_bundle, "Bundle directory")->required();
  ev->add_option("-o,--output", ev_out, "Output report.json");

  // chat
  std::string chat_bundle;
  bool chat_json = false;
  auto* chat = app.add_subcommand("chat", "Interactive dialog over a bundle (reads stdin)");
  chat->add_option("--bundle", chat_bundle, "Bundle directory")->required();
  chat->add_flag("--json", chat_json, "Print each system turn as a JSON line");

  // serve
  std::optional<std::string> sv_bundle, sv_corpus_dir, sv_addr, sv_log_dir;
  std::string sv_cors = "*";
  auto* sv = app.add_subcommand("serve", "Run the HTTP session service");
  sv->add_option("--bundle", sv_bundle, "Serve a single bundle directory");
  sv->add_option("--corpus-dir", sv_corpus_dir, "Serve every bundle under this directory [env UCMR_CORPUS_DIR]");
  sv->add_option("--addr", sv_addr, "host:port [env UCMR_ADDR, default 127.0.0.1:8080]");
  sv->add_option("--log-dir", sv_log_dir, "Session event log directory [env UCMR_LOG_DIR]");
  sv->add_option("--cors-origin", sv_cors, "Allowed browser origin")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitValidation;
  }

  try {
    if (*ingest) {
      auto doc = corpus::build_rule_document(corpus::load_sources(ingest_src));
      std::ostringstream ss;
      corpus::write_jsonl(ss, doc);
      write_text(ingest_out, ss.str());
      bundle::merge_config(bundle_dir_of(ingest_out), nlohmann::json::object());
      out << "ingest: " << doc.size() << " sentences -> " << ingest_out << '\n';
    } else if (*seg) {
      const fs::path dir = bundle_dir_of(seg_out);
      auto enc_cfg = seg_enc.resolve(dir);
      auto enc = encoder::make_encoder(enc_cfg);
      auto doc = corpus::load_corpus(seg_in);
      auto emb = enc->encode_all(texts_of(doc));
      auto s = segmentation::segment(emb, seg_sigma, seg_theta);
      write_text(seg_out, segmentation::to_json(s).dump(2) + "\n");
      bundle::merge_config(dir, {{"encoder", encoder::to_json(enc_cfg)},
                                 {"segmentation", bundle::segmentation_json(seg_sigma, seg_theta)}});
      out << "segment: " << s.spans.size() << " spans, theta " << s.theta << " -> " << seg_out << '\n';
    } else if (*ex) {
      const fs::path dir = bundle_dir_of(ex_out);
      auto cfg = bundle::load_config(dir);
      if (ex_sigma) cfg.spectral.sigma = *ex_sigma;
      if (ex_seed) cfg.spectral.seed = *ex_seed;
      if (ex_merge) cfg.spectral.merge_cosine = *ex_merge;
      auto enc_cfg = ex_enc.resolve(dir);
      auto enc = encoder::make_encoder(enc_cfg);
      const fs::path corpus_path = ex_corpus ? fs::path(*ex_corpus) : bundle_dir_of(ex_in) / "corpus.jsonl";
      auto doc = corpus::load_corpus(corpus_path);
      auto emb = enc->encode_all(texts_of(doc));
      auto s = segmentation::segmentation_from_json(bundle::read_json(ex_in));
      std::vector<spectral::RuleSet> sets;
      for (const auto& span : s.spans) sets.push_back(spectral::extract_rules(span, emb, cfg.spectral));
      auto u = spectral::build_universe(sets, cfg.spectral.merge_cosine);
      write_text(ex_out, spectral::to_json(u).dump(2) + "\n");
      bundle::merge_config(dir, {{"encoder", encoder::to_json(enc_cfg)}, {"spectral", bundle::spectral_json(cfg.spectral)}});
      out << "extract: " << u.size() << " rules in " << u.subjects.size() << " subjects -> " << ex_out << '\n';
    } else if (*tg) {
      const fs::path dir = bundle_dir_of(tg_out);
      auto cfg = bundle::load_config(dir);
      if (tg_steps) cfg.gan.total_steps = *tg_steps;
      if (tg_seed) cfg.gan.seed = *tg_seed;
      gan::validate(cfg.gan);
      auto enc_cfg = tg_enc.resolve(dir);
      auto enc = encoder::make_encoder(enc_cfg);
      auto doc = corpus::load_corpus(tg_corpus);
      auto u = bundle::load_universe(tg_rules, doc, *enc);
      auto data = bundle::training_examples(doc, u, *enc);
      fs::create_directories(tg_out);
      gan::GanState state(cfg.gan, enc->dim(), u.size());
      gan::train(state, data, fs::path(tg_out), [&](const gan::LossReport& r) {
        if (r.step % 200 == 1) {
          err << "step " << r.step << " d_adv " << r.d_adversarial << " g_adv " << r.g_adversarial << " pair " << r.pair
              << '\n';
        }
      });
      gan::save_checkpoint(state, fs::path(tg_out) / "gan.json");
      double jac = 0.0;
      for (const auto& e : data) {
        auto pred = gan::threshold_indices(state.generator.forward(e.tokens), cfg.gan.threshold);
        auto gold = gan::threshold_indices(e.target, 0.5);
        jac += gan::jaccard(pred, gold);
      }
      bundle::merge_config(dir, {{"encoder", encoder::to_json(enc_cfg)}, {"gan", gan::to_json(cfg.gan)}});
      out << "train-gan: " << state.step << " steps, " << data.size() << " examples, mean jaccard "
          << jac / static_cast<double>(data.size()) << " -> " << tg_out << '\n';
    } else if (*tq) {
      const fs::path dir = bundle_dir_of(tq_out);
      qg::QgConfig cfg;
      const fs::path cfg_path = dir / "config.json";
      if (fs::exists(cfg_path)) {
        auto j = bundle::read_json(cfg_path);
        if (j.contains("qg")) cfg = qg::qg_config_from_json(j["qg"]);
      }
      if (tq_steps) cfg.steps = *tq_steps;
      if (tq_seed) cfg.seed = *tq_seed;
      if (tq_lr) cfg.lr = *tq_lr;
      if (tq_hidden) cfg.hidden = *tq_hidden;
      if (tq_embed) cfg.embed = *tq_embed;
      if (tq_objective) cfg.objective = qg::objective_from_string(*tq_objective);
      auto enc_cfg = tq_enc.resolve(dir);
      auto enc = encoder::make_encoder(enc_cfg);
      auto pairs = qg::load_pairs(tq_pairs);
      qg::TrainReport rep;
      auto model = qg::train_qg(pairs, *enc, cfg, &rep);
      qg::save_qg(model, enc_cfg, tq_out);
      bundle::merge_config(dir, {{"qg", qg::to_json(cfg)}});
      out << "train-qg: " << rep.steps << " steps, loss " << rep.first_loss << " -> " << rep.last_loss
          << (rep.reproduced ? ", all targets reproduced" : ", targets not all reproduced") << " -> " << tq_out << '\n';
    } else if (*ev) {
      auto b = bundle::load_bundle(ev_bundle);
      auto dataset = eval::load_dataset(ev_data);
      auto report = eval::run_e2e_eval(dataset, dialog::make_pipeline(b));
      if (ev_out) write_text(*ev_out, eval::to_json(report).dump(2) + "\n");
      out << "micro " << report.micro << '\n' << "macro " << report.macro << '\n';
      out << "bleu1 " << (report.bleu1 ? std::to_string(*report.bleu1) : "n/a") << '\n';
      out << "bleu4 " << (report.bleu4 ? std::to_string(*report.bleu4) : "n/a") << '\n';
    } else if (*chat) {
      dialog::Engine engine(bundle::load_bundle(chat_bundle));
      chat_loop(engine, in, out, err, chat_json);
    } else if (*sv) {
      const std::string addr = sv_addr.value_or(detail::env_or("UCMR_ADDR", "127.0.0.1:8080"));
      std::optional<fs::path> log_dir;
      if (sv_log_dir) log_dir = *sv_log_dir;
      else if (const char* v = std::getenv("UCMR_LOG_DIR"); v && *v) log_dir = v;
      std::map<std::string, std::shared_ptr<const dialog::Engine>> engines;
      if (sv_bundle) {
        engines = service::load_engines(*sv_bundle, false);
      } else {
        const std::string corpus_dir = sv_corpus_dir.value_or(detail::env_or("UCMR_CORPUS_DIR", ""));
        if (corpus_dir.empty()) throw Error(ErrorCode::Validation, "serve needs --bundle or --corpus-dir");
        engines = service::load_engines(corpus_dir, true);
      }
      service::SessionStore store(std::move(engines), log_dir);
      for (const auto& s : store.skipped_logs()) err << "replay skipped " << s << '\n';
      service::HttpService http(store, sv_cors);
      auto [host, port] = service::parse_addr(addr);
      const int bound = http.bind(host, port);
      if (bound < 0) throw Error(ErrorCode::Validation, "cannot bind " + addr);
      err << "listening on " << host << ":" << bound << " (" << store.size() << " sessions restored)" << std::endl;
      detail::g_server = &http;
      std::signal(SIGINT, detail::stop_server);
      std::signal(SIGTERM, detail::stop_server);
      http.run();
      detail::g_server = nullptr;
    }
  } catch (const Error& e) {
    err << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const nlohmann::json::exception& e) {
    err << "error: Validation: " << e.what() << '\n';
    return kExitValidation;
  } catch (const fs::filesystem_error& e) {
    err << "error: Validation: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: PipelineError: " << e.what() << '\n';
    return kExitPipeline;
  }
  return kExitOk;
}

}  // namespace ucmr::cli
