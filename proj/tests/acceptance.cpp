// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "support/bleu_oracle.hpp"
#include "support/finite_diff.hpp"
#include "support/gan_synthetic.hpp"
#include "support/graph_oracles.hpp"
#include "support/policy_oracle.hpp"
#include "support/qg_pairs.hpp"
#include "support/toy_bundle.hpp"
#include "ucmr/dialog_policy.hpp"
#include "ucmr/entailment_gan.hpp"
#include "ucmr/evalharness.hpp"
#include "ucmr/question_gen.hpp"
#include "ucmr/service.hpp"
#include "ucmr/spectral_rules.hpp"

namespace {

using namespace ucmr;
using nlohmann::json;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream ss;
  ss << x;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

Outcome laplacian_suite() {
  const auto start = std::chrono::steady_clock::now();
  auto s = oracle::run_laplacian_suite(200, 17);
  const double secs = seconds_since(start);
  const bool ok = s.graphs == 200 && s.failures == 0 && s.max_asymmetry == 0.0 && s.max_row_sum <= 1e-9 &&
                  s.min_eigenvalue >= -1e-8 && secs < 10.0;
  std::string detail = std::to_string(s.graphs) + " graphs, " + std::to_string(s.failures) +
                       " failures, max row sum " + fmt(s.max_row_sum) + ", min eigenvalue " +
                       fmt(s.min_eigenvalue) + ", " + fmt(secs) + " s";
  if (!s.first_failure.empty()) detail += ", first failure: " + s.first_failure;
  return {ok, detail};
}

Outcome spectral_recovery() {
  const auto start = std::chrono::steady_clock::now();
  encoder::HashingEncoder enc;
  bool ok = true;
  std::string aris;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = oracle::planted_span(3, 3, seed, enc);
    spectral::SpectralConfig cfg;
    cfg.seed = seed;
    cfg.sigma = 0.5;
    auto rs = spectral::extract_rules({0, {0, 1, 2, 3, 4, 5, 6, 7, 8}}, p.embeddings, cfg);
    std::vector<std::vector<int>> clusters;
    for (const auto& r : rs.rules) clusters.push_back(r.member_sentence_ids);
    const double ari = oracle::adjusted_rand_index(oracle::labels_of(clusters, 9), p.groups);
    ok = ok && rs.rules.size() == 3 && ari == 1.0;
    aris += (aris.empty() ? "" : " ") + fmt(ari);
  }
  const double secs = seconds_since(start);
  return {ok && secs < 5.0, "ARI per seed " + aris + ", " + fmt(secs) + " s"};
}

Outcome decision_table() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(23);
  int cases = 0, mismatches = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto q = oracle::random_q(rng, 6);
    for (unsigned m = 0; m < 64; ++m) {
      auto p = oracle::subset_of(m, 6);
      ++cases;
      if (!(policy::decide(p, q) == oracle::table_oracle(p, q))) ++mismatches;
    }
  }
  const double secs = seconds_since(start);
  return {mismatches == 0 && secs < 5.0,
          std::to_string(cases) + " cases, " + std::to_string(mismatches) + " mismatches, " + fmt(secs) + " s"};
}

Outcome gan_gradients() {
  constexpr double tol = 1e-4;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  auto tokens = [&](int n) {
    TokenMatrix m(n, 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
  };
  auto indicator = [&] {
    gan::Vec v(16);
    for (int i = 0; i < 16; ++i) v[i] = ud(rng);
    return v;
  };

  gan::Generator g({4, 16, 30, 3});
  g.init(rng);
  TokenMatrix x = tokens(6);
  gan::Vec w = indicator();
  auto g_grads = g.params().zeros_like();
  auto gc = g.forward_cached(x);
  g.backward(gc, w.cwiseProduct(gc.probs.cwiseProduct((1.0 - gc.probs.array()).matrix())), g_grads);
  const double e_gen =
      oracle::check_gradients(g.params(), g_grads, [&] { return w.dot(g.forward(x)); }, 1e-5).max_rel_error;

  gan::Discriminator d({16});
  d.init(rng);
  gan::Vec dx_in = indicator();
  auto d_grads = d.params().zeros_like();
  gan::Vec dx = d.backward(d.forward_cached(dx_in, false), 1.0, &d_grads);
  double e_disc =
      oracle::check_gradients(d.params(), d_grads, [&] { return d.forward(dx_in); }, 1e-5).max_rel_error;
  for (int i = 0; i < 16; ++i) {
    gan::Vec up = dx_in, down = dx_in;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    e_disc = std::max(e_disc, oracle::rel_error(dx[i], (d.forward(up) - d.forward(down)) / 2e-5));
  }

  gan::Vec real = gan::Vec::Zero(16);
  for (int i = 0; i < 16; i += 3) real[i] = 1.0;
  gan::Vec fake = indicator();
  const double eps = 0.61;
  auto gp_grads = d.params().zeros_like();
  gan::gradient_penalty_with_grad(d, eps * real + (1.0 - eps) * fake, false, nullptr, 1.0, gp_grads);
  const double e_gp = oracle::check_gradients(d.params(), gp_grads, [&] {
                        return gan::gradient_penalty(d, real, fake, eps);
                      }, 1e-5).max_rel_error;

  std::vector<gan::Vec> outs;
  for (int i = 0; i < 5; ++i) outs.push_back(indicator());
  auto sg = gan::smoothness_penalty_grad(outs);
  double e_smooth = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    for (int j = 0; j < 16; ++j) {
      auto up = outs, down = outs;
      up[i][j] += 1e-5;
      down[i][j] -= 1e-5;
      const double numeric = (gan::smoothness_penalty(up) - gan::smoothness_penalty(down)) / 2e-5;
      e_smooth = std::max(e_smooth, oracle::rel_error(sg[i][j], numeric));
    }
  }

  const bool ok = e_gen <= tol && e_disc <= tol && e_gp <= tol && e_smooth <= tol;
  return {ok, "max relative error generator " + fmt(e_gen) + ", discriminator " + fmt(e_disc) +
                  ", gradient penalty " + fmt(e_gp) + ", smoothness " + fmt(e_smooth)};
}

Outcome gan_recovery() {
  gan::TrainConfig cfg;
  auto a = oracle::run_synthetic_recovery(cfg, 1);
  auto b = oracle::run_synthetic_recovery(cfg, 1);
  const bool deterministic = a.predicted == b.predicted && a.mean_jaccard == b.mean_jaccard;
  const bool ok = a.steps == 2000 && a.mean_jaccard >= 0.9 && a.seconds < 600.0 && deterministic;
  return {ok, "mean Jaccard " + fmt(a.mean_jaccard) + " after " + std::to_string(a.steps) + " steps, " +
                  fmt(a.seconds) + " s, " + (deterministic ? "deterministic" : "not deterministic")};
}

Outcome qg_overfit() {
  encoder::HashingEncoder enc(64);
  qg::QgConfig cfg;
  cfg.hidden = 32;
  cfg.embed = 16;
  qg::TrainReport rep;
  auto m = qg::train_qg(fixture::toy_pairs(), enc, cfg, &rep);
  int exact = 0;
  for (const auto& p : fixture::toy_pairs()) {
    exact += qg::generate_question(p.source, m, enc) == qg::question_tokens(p.question) ? 1 : 0;
  }

  std::mt19937_64 rng(41);
  std::normal_distribution<double> nd;
  auto mat = [&](int r, int c) {
    qg::Mat x(r, c);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    return x;
  };
  qg::Decoder dec({12, 6, 8, 5});
  dec.init(rng);
  std::uniform_int_distribution<int> tok(3, 11), len(0, 8);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    qg::Decoder::Source src;
    src.tokens = mat(1 + trial % 5, 6);
    src.mean = mat(6, 1);
    std::vector<int> target(static_cast<std::size_t>(len(rng)));
    for (auto& y : target) y = tok(rng);
    qg::Vec h = dec.initial_hidden(src), c = qg::Vec::Zero(8);
    int prev = qg::Vocabulary::kBos;
    double log_product = 0.0;
    for (std::size_t t = 0; t <= target.size(); ++t) {
      const int y = t < target.size() ? target[t] : qg::Vocabulary::kEos;
      auto s = dec.step(prev, h, c, src.tokens);
      log_product += std::log(s.p[y]);
      h = s.h;
      c = s.c;
      prev = y;
    }
    worst = std::max(worst, std::abs(-dec.sequence_nll(src, target) - log_product));
  }

  const bool ok = rep.reproduced && rep.steps <= 2000 && exact == 8 && worst <= 1e-9;
  return {ok, std::to_string(exact) + "/8 exact after " + std::to_string(rep.steps) +
                  " steps, chain rule max deviation " + fmt(worst)};
}

Outcome bleu_oracle_check() {
  using Tokens = std::vector<std::string>;
  std::mt19937_64 rng(53);
  std::uniform_int_distribution<int> w(0, 4), len(0, 10), rlen(1, 10);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Tokens cand(static_cast<std::size_t>(len(rng))), ref(static_cast<std::size_t>(rlen(rng)));
    for (auto& t : cand) t = "w" + std::to_string(w(rng));
    for (auto& t : ref) t = "w" + std::to_string(w(rng));
    for (int n : {1, 4}) mismatches += eval::bleu(cand, ref, n) == oracle::bleu_oracle(cand, ref, n) ? 0 : 1;
  }
  const double hand = eval::bleu({"the", "the", "the"}, {"the", "cat", "sat"}, 1);
  const bool ok = mismatches == 0 && std::abs(hand - 1.0 / 3.0) <= 1e-9;
  return {ok, "50 pairs, " + std::to_string(mismatches) + " mismatches, hand case " + fmt(hand)};
}

const std::string kScript =
    "My dog barks at the mailman every morning.\n"
    "Should I buy a new leash?\n"
    "My bird is coughing and gasping for air.\n"
    "Does my bird have Newcastle disease?\n"
    "Yes.\n"
    "My bird is coughing and gasping for air.\n"
    "Does my bird have Newcastle disease?\n"
    "No.\n";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome scripted_dialog() {
  const fs::path bundle = fixture::shared_toy_bundle();
  auto dir = fixture::fresh_dir("ucmr_acceptance_chat");
  std::ofstream(dir / "in") << kScript;
  const std::string cmd = std::string(UCMR_CLI_PATH) + " chat --bundle " + bundle.string() + " <" +
                          (dir / "in").string() + " >" + (dir / "out").string() + " 2>" + (dir / "err").string();
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::istringstream out(slurp(dir / "out"));
  fs::remove_all(dir);

  std::vector<std::string> classes;
  for (std::string line; std::getline(out, line);) {
    const auto open = line.find('['), close = line.find(']');
    if (open != std::string::npos && close != std::string::npos && close > open) {
      classes.push_back(line.substr(open + 1, close - open - 1));
    }
  }
  const std::vector<std::string> want = {"irrelevant", "inquire", "yes", "inquire", "no"};
  std::string got;
  for (const auto& c : classes) got += (got.empty() ? "" : ", ") + c;
  return {code == 0 && classes == want, "exit " + std::to_string(code) + ", classes " + got};
}

Outcome service_integration() {
  const fs::path bundle = fixture::shared_toy_bundle();
  auto engines = service::load_engines(bundle, false);
  auto logs = fixture::fresh_dir("ucmr_acceptance_logs");

  struct Server {
    service::SessionStore store;
    service::HttpService http;
    int port = 0;
    std::thread thread;
    Server(const std::map<std::string, std::shared_ptr<const dialog::Engine>>& e, const fs::path& dir)
        : store(e, dir), http(store, "http://localhost:5173") {
      port = http.bind("127.0.0.1", 0);
      thread = std::thread([this] { http.run(); });
      http.wait_until_ready();
    }
    ~Server() {
      http.stop();
      thread.join();
    }
  };

  std::string id, first_class, final_class;
  json before_crash, after_restart, finished, replayed;
  {
    Server a(engines, logs);
    httplib::Client client("127.0.0.1", a.port);
    auto created = client.Post("/sessions",
                               json{{"corpus_ref", "toy"},
                                    {"scenario", "My bird is coughing and gasping for air."},
                                    {"question", "Does my bird have Newcastle disease?"}}
                                   .dump(),
                               "application/json");
    if (!created || created->status != 201) return {false, "create failed"};
    auto body = json::parse(created->body);
    id = body["session_id"];
    first_class = body["turn"]["class"];
    before_crash = json::parse(client.Get("/sessions/" + id)->body)["session"];
  }
  {
    Server b(engines, logs);
    httplib::Client client("127.0.0.1", b.port);
    after_restart = json::parse(client.Get("/sessions/" + id)->body)["session"];
    auto answered = client.Post("/sessions/" + id + "/answers", json{{"text", "Yes."}}.dump(), "application/json");
    if (!answered || answered->status != 200) return {false, "answer failed"};
    final_class = json::parse(answered->body)["turn"]["class"];
    finished = json::parse(client.Get("/sessions/" + id)->body)["session"];
  }
  {
    service::SessionStore c(engines, logs);
    replayed = c.get(id);
  }
  fs::remove_all(logs);

  const bool ok = first_class == "inquire" && final_class == "yes" && finished["status"] == "finished" &&
                  before_crash == after_restart && finished == replayed;
  return {ok, "classes " + first_class + ", " + final_class + "; replay " +
                  (before_crash == after_restart && finished == replayed ? "identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"laplacian_suite", laplacian_suite},
      {"spectral_recovery", spectral_recovery},
      {"decision_table_oracle", decision_table},
      {"gan_gradient_checks", gan_gradients},
      {"gan_synthetic_recovery", gan_recovery},
      {"question_generator_overfit", qg_overfit},
      {"bleu_oracle", bleu_oracle_check},
      {"scripted_dialog", scripted_dialog},
      {"service_integration", service_integration},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
