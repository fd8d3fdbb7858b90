// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when all pass.
//
//   eees_acceptance <path to eees cli> <work dir>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "eees/commands.hpp"
#include "eees/gradcheck.hpp"
#include "oracles.hpp"

using namespace eees;
namespace fs = std::filesystem;

namespace {

std::string g_cli;
fs::path g_work;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Runs the CLI, output goes to <work>/logs/<tag>.{out,err}. Returns the exit code.
int cli(const std::string& tag, const std::string& args) {
  fs::create_directories(g_work / "logs");
  const auto base = g_work / "logs" / tag;
  const std::string cmd = q(g_cli) + " " + args + " >" + q(base.string() + ".out") + " 2>" +
                          q(base.string() + ".err");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cli_err(const std::string& tag) { return slurp(g_work / "logs" / (tag + ".err")); }

nlohmann::ordered_json reference() {
  std::ifstream in(std::string(EEES_FIXTURES_DIR) + "/reference.json");
  return nlohmann::ordered_json::parse(in);
}

// Collects failed sub-checks so the summary line can name them.
struct Tally {
  std::vector<std::string> failed;
  int total = 0;
  void check(bool ok, const std::string& what) {
    ++total;
    if (!ok) failed.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream os;
    os << what << " (got " << std::setprecision(17) << got << ", want " << want << ")";
    check(std::abs(got - want) <= tol, os.str());
  }
};

struct Outcome {
  bool ok = false;
  std::string detail;
};

Outcome from_tally(const Tally& t, const std::string& extra = "") {
  Outcome o;
  o.ok = t.failed.empty();
  std::ostringstream os;
  os << (t.total - static_cast<int>(t.failed.size())) << "/" << t.total << " checks";
  if (!extra.empty()) os << ", " << extra;
  for (const auto& f : t.failed) os << "\n       failed: " << f;
  o.detail = os.str();
  return o;
}

Mat filled(std::size_t r, std::size_t c, double v) {
  Mat m(r, c);
  m.fill(v);
  return m;
}

Mat random_mat(Rng& rng, std::size_t r, std::size_t c) {
  Mat m(r, c);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

std::vector<std::vector<std::size_t>> candidates_of(const std::vector<int>& labels) {
  std::vector<std::vector<std::size_t>> c(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = 0; j < labels.size(); ++j)
      if (i != j && labels[i] == labels[j]) c[i].push_back(j);
  return c;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;  // 50 batches, h = 1e-5, tol = 1e-4
  auto summaries = run_gradcheck(opt);
  const double secs = seconds_since(t0);
  Tally t;
  for (const auto& name : gradcheck_loss_names()) {
    const LossCheckSummary* s = nullptr;
    for (const auto& x : summaries)
      if (x.loss == name) s = &x;
    if (!s) {
      t.check(false, name + " missing from the report");
      continue;
    }
    std::ostringstream os;
    os << name << ": " << s->batches << " batches, " << s->checked << " entries, max rel "
       << s->max_rel_error;
    t.check(s->batches >= 50, os.str() + " (fewer than 50 batches)");
    t.check(s->checked > 0, os.str() + " (nothing checked)");
    t.check(s->passed, os.str() + " " + s->first_failure);
  }
  t.check(secs < 60.0, "runtime " + std::to_string(secs) + " s exceeds 60 s");
  std::ostringstream extra;
  extra << std::fixed << std::setprecision(1) << secs << " s";
  return from_tally(t, extra.str());
}

Outcome analytic_suite() {
  constexpr double tol = 1e-10;
  Tally t;
  Rng rng(2024);

  auto p = softmax_stable(Vec{0.0, 0.0});
  t.check(p[0] == 0.5 && p[1] == 0.5, "softmax [0,0]");
  p = softmax_stable(Vec{1000.0, 1000.0});
  t.check(p[0] == 0.5 && p[1] == 0.5, "softmax [1000,1000]");
  const Vec a8{0.3, -1.2, 2.0, 0.0, 5.5, -0.7, 1.1, 9.0};
  t.check(euclidean_distance(a8, a8) == 0.0, "distance to self");
  t.near(euclidean_distance(Vec{0.0, 0.0}, Vec{3.0, 4.0}), 5.0, tol, "3-4-5 distance");
  t.near(cosine_similarity(a8, a8), 1.0, tol, "cosine to self");
  t.near(cosine_similarity(Vec{1.0, 0.0}, Vec{0.0, 1.0}), 0.0, tol, "orthogonal cosine");

  {
    ParamStore ps;
    ps.add("theta", Mat(1, 2, Vec{1.0, 2.0}));
    ps.grad("theta") = ps.value("theta");
    auto rep = finite_difference_check(
        [](const ParamStore& s) {
          double v = 0.0;
          for (double x : s.value("theta").data()) v += 0.5 * x * x;
          return v;
        },
        ps, 1e-5, 1e-4);
    t.check(rep.passed() && rep.max_error() < 1e-9, "quadratic finite differences");
    ParamStore flat;
    flat.add("theta", Mat(2, 2, Vec{0.3, -1.0, 4.0, 2.0}));
    rep = finite_difference_check([](const ParamStore&) { return 3.25; }, flat, 1e-5, 1e-4);
    t.check(rep.passed() && rep.max_error() <= 1e-9, "constant loss finite differences");
  }

  for (std::size_t c : {2u, 4u, 7u, 13u}) {
    Mat z(1, c);
    t.near(identity_loss(z, z, std::vector<int>{0}).value, 2.0 * std::log(static_cast<double>(c)),
           tol, "uniform identity loss C=" + std::to_string(c));
  }
  {
    Mat l(1, 3, Vec{0.0, 50.0, 0.0});
    t.check(identity_loss(l, l, std::vector<int>{1}).value < 1e-10, "saturated identity loss");
  }

  {
    Mat x(4, 3, Vec{1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
    t.near(wrt_loss(x, std::vector<int>{0, 0, 1, 1}).value, std::log(2.0), tol, "balanced wrt");
    Mat far(4, 1, Vec{0.0, 0.0, 1000.0, 1000.0});
    t.check(wrt_loss(far, std::vector<int>{0, 0, 1, 1}).value < 1e-10, "far negatives wrt");
  }

  {
    Mat f = random_mat(rng, 1, 3), tt = random_mat(rng, 1, 3);
    t.check(contrastive_pair_loss(f, tt, 0.07).value == 0.0, "contrastive N=1");
    EmbeddingSet one{random_mat(rng, 1, 3), random_mat(rng, 1, 3), random_mat(rng, 1, 3),
                     random_mat(rng, 1, 3), {0}};
    t.check(contrastive_o(one, 0.07).value == 0.0, "contrastive_o N=1");
    t.check(contrastive_m(fuse_multiview(one, candidates_of({0}), 1, 0), 0.07).value == 0.0,
            "contrastive_m N=1");
    Mat same(5, 2, Vec{1, 2, 1, 2, 1, 2, 1, 2, 1, 2});
    Mat tsame(5, 2, Vec{-0.5, 3, -0.5, 3, -0.5, 3, -0.5, 3, -0.5, 3});
    t.near(contrastive_pair_loss(same, tsame, 0.07).value, 2.0 * std::log(5.0), tol,
           "contrastive equal similarities");
    Mat c = filled(4, 2, 0.5);
    EmbeddingSet flat{c, c, c, c, {0, 1, 2, 3}};
    t.near(contrastive_o(flat, 0.07).value, 4.0 * std::log(4.0), tol, "contrastive_o uniform");
  }

  {
    const std::vector<int> y{0, 0, 1, 1};
    EmbeddingSet e{random_mat(rng, 4, 3), random_mat(rng, 4, 3), random_mat(rng, 4, 3),
                   random_mat(rng, 4, 3), y};
    auto f0 = fuse_multiview(e, candidates_of(y), 0, 17);
    t.check(f0.fm_v == e.f_v && f0.fm_r == e.f_r && f0.tm_v == e.t_v && f0.tm_r == e.t_r,
            "fusion M=0 is the identity");
    t.check(contrastive_m(f0, 0.07).value == contrastive_o(e, 0.07).value,
            "contrastive_m equals contrastive_o at M=0");
    t.check(kd_loss(e, f0).value == 0.0, "kd zero at M=0");

    Mat m(2, 2, Vec{1, 2, 1, 2});
    EmbeddingSet dup{m, m, m, m, {0, 0}};
    t.check(fuse_multiview(dup, candidates_of({0, 0}), 1, 5).fm_v == m, "fusion with itself");
    Mat basis(2, 2, Vec{1, 0, 0, 1});
    EmbeddingSet b{basis, basis, basis, basis, {0, 0}};
    auto fb = fuse_multiview(b, candidates_of({0, 0}), 1, 5);
    t.check(fb.fm_v(0, 0) == 0.5 && fb.fm_v(0, 1) == 0.5, "two-point mean");

    Mat z(1, 4);
    EmbeddingSet ez{z, z, z, z, {0}};
    FusedSet fz{z, z, z, z, 0, {}};
    fz.tm_r.fill(1.0);
    t.near(kd_loss(ez, fz).value, 4.0, tol, "kd one block off by ones");
  }

  {
    EmbeddingSet e{random_mat(rng, 3, 4), random_mat(rng, 3, 4), random_mat(rng, 3, 4),
                   random_mat(rng, 3, 4), {0, 1, 2}};
    e.t_r = e.t_v;
    t.check(cmsp_loss(e).value == 0.0, "cmsp with equal texts");
    EmbeddingSet r{random_mat(rng, 1, 3), random_mat(rng, 1, 3), random_mat(rng, 1, 3),
                   random_mat(rng, 1, 3), {0}};
    const double base = cmsp_loss(r).value;
    for (Mat* mm : {&r.f_v, &r.f_r, &r.t_v, &r.t_r}) *mm *= 3.0;
    t.near(cmsp_loss(r).value, 9.0 * base, 1e-10 * (1.0 + 9.0 * base), "cmsp homogeneity");
  }

  {
    const std::vector<int> y{0, 0, 1, 1};
    EmbeddingSet e{random_mat(rng, 4, 3), random_mat(rng, 4, 3), random_mat(rng, 4, 3),
                   random_mat(rng, 4, 3), y};
    auto fused = fuse_multiview(e, candidates_of(y), 1, 3);
    Mat lv = random_mat(rng, 4, 3), lr = random_mat(rng, 4, 3);
    LossWeights w;
    w.lambda1 = w.lambda2 = w.lambda3 = w.lambda4 = 0.0;
    auto r = total_loss(e, fused, lv, lr, w);
    t.check(r.breakdown.l_total == r.breakdown.l_id, "total with zero weights");
    w = LossWeights{};
    r = total_loss(e, fused, lv, lr, w);
    const auto& b = r.breakdown;
    const double sum = identity_loss(lv, lr, y).value + 0.25 * wrt_loss(e.f_v, e.f_r, y).value +
                       0.2 * (contrastive_o(e, w.tau).value + contrastive_m(fused, w.tau).value) +
                       0.08 * kd_loss(e, fused).value + 0.01 * cmsp_loss(e).value;
    t.near(b.l_total, sum, tol, "total is the weighted sum");
  }
  return from_tally(t);
}

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  Tally t;
  std::size_t max_q = 0, max_g = 0, ties = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const bool tie_heavy = seed % 2 == 0;
    auto in = oracle::random_instance(1000 + seed, tie_heavy);
    max_q = std::max(max_q, in.q.rows());
    max_g = std::max(max_g, in.g.rows());
    ties += tie_heavy;
    auto got = score_rankings(in.q, in.q_ids, in.g, in.g_ids, in.g_sids);
    auto want = oracle::retrieval(in.q, in.q_ids, in.g, in.g_ids, in.g_sids);
    const std::string tag = "instance " + std::to_string(seed);
    t.check(got.cmc == want.cmc, tag + " cmc");
    t.check(got.map == want.map, tag + " mAP");
    t.check(got.n_queries == want.n_queries && got.n_excluded == want.n_excluded,
            tag + " query counts");
  }
  const double secs = seconds_since(t0);
  t.check(max_q <= 10 && max_g <= 20, "instance exceeds 10 x 20");
  t.check(secs < 10.0, "runtime " + std::to_string(secs) + " s exceeds 10 s");
  std::ostringstream extra;
  extra << "100 instances up to " << max_q << "x" << max_g << ", " << ties << " tie-heavy, "
        << std::fixed << std::setprecision(3) << secs << " s";
  return from_tally(t, extra.str());
}

Outcome hand_values() {
  constexpr double tol = 1e-5;
  Tally t;
  Mat lv(1, 2, Vec{1.0, 0.0}), lr(1, 2, Vec{0.0, 1.0});
  t.near(identity_loss(lv, lr, std::vector<int>{0}).value, 1.62652, tol, "binary identity loss");
  Mat basis(2, 2, Vec{1, 0, 0, 1});
  t.near(contrastive_pair_loss(basis, basis, 1.0).value, 0.62652, tol, "symmetric contrastive");
  EmbeddingSet e{Mat(1, 1, Vec{0.0}), Mat(1, 1, Vec{2.0}), Mat(1, 1, Vec{1.0}),
                 Mat(1, 1, Vec{3.0}), {0}};
  t.near(cmsp_loss(e).value, 4.0, tol, "1-D cmsp");
  auto p = softmax_stable(Vec{1.0, 2.0});
  t.near(p[0], 0.26894, tol, "softmax [1,2] first");
  t.near(p[1], 0.73106, tol, "softmax [1,2] second");
  t.near(cosine_similarity(Vec{1.0, 1.0}, Vec{1.0, 0.0}), 0.70711, tol, "cosine at 45 degrees");
  return from_tally(t);
}

// Dataset shared by the benchmark, the sweep and the determinism checks.
fs::path data_dir() { return g_work / "data"; }

struct CellMeans {
  double rank1 = 0, map = 0, sens = 0, gap = 0, untrained_gap = 0;
  int n = 0;
};

Outcome benchmark() {
  const auto t0 = Clock::now();
  Tally t;
  const int gen_code = cli("gen", "gen --seed 0 --out " + q(data_dir()));
  t.check(gen_code == 0, "gen exited " + std::to_string(gen_code) + ": " + cli_err("gen"));
  if (gen_code != 0) return from_tally(t);
  const int code = cli("ablate", "ablate --data " + q(data_dir()) + " --out " + q(g_work / "ablate"));
  const double secs = seconds_since(t0);
  t.check(code == 0, "ablate exited " + std::to_string(code) + ": " + cli_err("ablate"));
  if (code != 0) return from_tally(t);

  std::map<std::string, CellMeans> cells;
  const auto csv = lines_of(slurp(g_work / "ablate" / "ablation.csv"));
  for (std::size_t i = 2; i < csv.size(); ++i) {
    auto f = split_csv(csv[i]);
    if (f.size() != 10) continue;
    auto& c = cells[f[0]];
    c.rank1 += std::stod(f[5]);
    c.map += std::stod(f[6]);
    c.gap += std::stod(f[7]);
    c.untrained_gap += std::stod(f[8]);
    c.sens += std::stod(f[9]);
    ++c.n;
  }
  for (const char* m : {"baseline", "ese", "ese_cvsc", "ese_cmsp", "full"})
    t.check(cells[m].n == 5, std::string(m) + " has " + std::to_string(cells[m].n) + " seeds");
  if (!t.failed.empty()) return from_tally(t);
  for (auto& [_, c] : cells) {
    c.rank1 /= c.n;
    c.map /= c.n;
    c.gap /= c.n;
    c.untrained_gap /= c.n;
    c.sens /= c.n;
  }

  const auto margins = reference()["ablation"]["margins"];
  const double m_a = margins["full_minus_baseline_rank1"].get<double>();
  const double m_b = margins["cvsc_map_gain"].get<double>();
  const double m_c = margins["cmsp_sensitivity_reduction"].get<double>();
  const double m_d = margins["untrained_minus_trained_gap"].get<double>();

  std::ostringstream os;
  os << std::fixed << std::setprecision(5);
  const double da = cells["full"].rank1 - cells["baseline"].rank1;
  os.str("");
  os << "(a) full rank1 " << cells["full"].rank1 << " - baseline " << cells["baseline"].rank1
     << " = " << da << " < " << m_a;
  t.check(da >= m_a, os.str());
  const double db = cells["ese_cvsc"].map - cells["ese"].map;
  os.str("");
  os << "(b) ese_cvsc mAP " << cells["ese_cvsc"].map << " - ese " << cells["ese"].map << " = "
     << db << " < " << m_b;
  t.check(db >= m_b, os.str());
  // CMSP on vs off over the cells that have the text branch, so only the CMSP switch differs.
  const double on = (cells["ese_cmsp"].sens + cells["full"].sens) / 2.0;
  const double off = (cells["ese"].sens + cells["ese_cvsc"].sens) / 2.0;
  os.str("");
  os << "(c) sensitivity cmsp-on " << on << " vs off " << off;
  t.check(off - on > m_c, os.str());
  const double dd = cells["full"].untrained_gap - cells["full"].gap;
  os.str("");
  os << "(d) full gap untrained " << cells["full"].untrained_gap << " - trained "
     << cells["full"].gap << " = " << dd << " < " << m_d;
  t.check(dd >= m_d, os.str());
  t.check(secs < 300.0, "runtime " + std::to_string(secs) + " s exceeds 300 s");

  std::ostringstream extra;
  extra << std::fixed << std::setprecision(4) << "rank1 gain " << da << ", mAP gain " << db
        << ", sensitivity " << on << " vs " << off << ", gap drop " << dd << ", "
        << std::setprecision(1) << secs << " s";
  return from_tally(t, extra.str());
}

Outcome sweep() {
  Tally t;
  if (!fs::exists(data_dir() / "train.jsonl")) {
    t.check(cli("gen-sweep", "gen --seed 0 --out " + q(data_dir())) == 0, "gen failed");
  }
  const auto t0 = Clock::now();
  const int code = cli("sweep", "sweep --param M --values 0,1,2,3 --seeds 1 --data " +
                                    q(data_dir()) + " --out " + q(g_work / "sweep"));
  const double secs = seconds_since(t0);
  t.check(code == 0, "sweep exited " + std::to_string(code) + ": " + cli_err("sweep"));
  if (code != 0) return from_tally(t);
  const auto csv = lines_of(slurp(g_work / "sweep" / "sweep.csv"));
  t.check(csv.size() == 6, "expected 6 lines, got " + std::to_string(csv.size()));
  if (csv.size() != 6) return from_tally(t);
  t.check(csv[0] == kSweepCsvVersion, "version line '" + csv[0] + "'");
  t.check(csv[1] == kSweepCsvHeader, "header '" + csv[1] + "'");
  const auto header = split_csv(csv[1]);
  std::ostringstream summary;
  for (int m = 0; m < 4; ++m) {
    const auto& line = csv[static_cast<std::size_t>(m) + 2];
    auto f = split_csv(line);
    t.check(f.size() == header.size(), "field count: " + line);
    if (f.size() != header.size()) continue;
    t.check(f[0] == "M" && f[1] == std::to_string(m) && f[2] == "0" && f[3] == "single",
            "row keys: " + line);
    for (std::size_t k : {4u, 5u}) {
      std::size_t used = 0;
      double v = NAN;
      try {
        v = std::stod(f[k], &used);
      } catch (const std::exception&) {
      }
      t.check(used == f[k].size() && v >= 0.0 && v <= 1.0, "metric out of [0,1]: " + line);
    }
    summary << (m ? ", " : "") << "M=" << m << " rank1 " << f[4].substr(0, 6);
  }
  std::ostringstream extra;
  extra << summary.str() << ", " << std::fixed << std::setprecision(1) << secs << " s";
  return from_tally(t, extra.str());
}

// Re-runs a manifest into a fresh directory and compares every listed output.
void rerun_matches(Tally& t, const std::string& name, const fs::path& dir) {
  const auto again = dir.string() + "-rerun";
  fs::remove_all(again);
  const int code = cli("rerun-" + name, "rerun --manifest " + q(dir / "manifest.json") +
                                            " --out " + q(again));
  t.check(code == 0, name + " rerun exited " + std::to_string(code) + ": " +
                         cli_err("rerun-" + name));
  if (code != 0) return;
  auto m1 = nlohmann::ordered_json::parse(slurp(dir / "manifest.json"));
  auto m2 = nlohmann::ordered_json::parse(slurp(fs::path(again) / "manifest.json"));
  t.check(!m1["outputs"].empty(), name + " manifest lists no outputs");
  for (const auto& f : m1["outputs"]) {
    const auto rel = f.get<std::string>();
    t.check(fs::exists(dir / rel) && slurp(dir / rel) == slurp(fs::path(again) / rel),
            name + " output differs: " + rel);
  }
  for (auto* m : {&m1, &m2}) {
    m->erase("wall_clock_seconds");
    m->erase("out");
  }
  t.check(m1 == m2, name + " manifests differ beyond out and wall clock");
}

Outcome determinism() {
  Tally t;
  const auto d = data_dir();
  if (!fs::exists(d / "train.jsonl"))
    t.check(cli("gen-det", "gen --seed 0 --out " + q(d)) == 0, "gen failed");

  const auto g1 = g_work / "gen-a", g2 = g_work / "gen-b", g3 = g_work / "gen-c";
  t.check(cli("gen-a", "gen --seed 11 --out " + q(g1)) == 0, "gen seed 11 failed");
  t.check(cli("gen-b", "gen --seed 11 --out " + q(g2)) == 0, "second gen seed 11 failed");
  t.check(cli("gen-c", "gen --seed 12 --out " + q(g3)) == 0, "gen seed 12 failed");
  for (const char* f : {"train.jsonl", "test.jsonl", "meta.json"}) {
    t.check(!slurp(g1 / f).empty() && slurp(g1 / f) == slurp(g2 / f),
            std::string("equal seeds, different ") + f);
  }
  t.check(slurp(g1 / "train.jsonl") != slurp(g3 / "train.jsonl"), "seed does not change data");

  const auto tr = g_work / "train", ev = g_work / "eval", gc = g_work / "gradcheck";
  t.check(cli("train", "train --data " + q(d) + " --out " + q(tr) + " --loss.M 2") == 0,
          "train failed: " + cli_err("train"));
  t.check(cli("eval", "eval --data " + q(d) + " --checkpoint " + q(tr / "checkpoint.jsonl") +
                          " --shots both --out " + q(ev)) == 0,
          "eval failed: " + cli_err("eval"));
  t.check(cli("gradcheck", "gradcheck --batches 10 --out " + q(gc)) == 0,
          "gradcheck failed: " + cli_err("gradcheck"));

  rerun_matches(t, "gen", g1);
  rerun_matches(t, "train", tr);
  rerun_matches(t, "eval", ev);
  rerun_matches(t, "gradcheck", gc);
  if (fs::exists(g_work / "sweep" / "manifest.json")) rerun_matches(t, "sweep", g_work / "sweep");
  if (fs::exists(g_work / "ablate" / "manifest.json"))
    rerun_matches(t, "ablate", g_work / "ablate");
  return from_tally(t);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: eees_acceptance <eees cli> <work dir>\n";
    return 1;
  }
  g_cli = fs::absolute(argv[1]).string();
  g_work = fs::absolute(argv[2]);
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 gradient checks", gradients},
      {"2 analytic zero/identity suite", analytic_suite},
      {"3 retrieval oracle equivalence", oracle_equivalence},
      {"4 hand-computed loss values", hand_values},
      {"5 synthetic benchmark directions", benchmark},
      {"6 M sweep", sweep},
      {"7 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.ok;
    std::cout << (o.ok ? "[PASS] " : "[FAIL] ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failed ? 2 : 0;
}
