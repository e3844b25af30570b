// Acceptance suite: one [PASS]/[FAIL] line per criterion.
#include "elgan/lane_eval.hpp"
#include "elgan/lane_postprocess.hpp"
#include "elgan/losses.hpp"
#include "elgan/trainer.hpp"
#include "../oracles.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

using namespace elgan;
namespace fs = std::filesystem;

namespace {

struct Options {
  fs::path work;
  fs::path sweep;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int scenes = 200;
};

// Collects failed requirements; the first few are printed with the verdict.
struct Verdict {
  std::vector<std::string> failures;
  std::string summary;
  void require(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  bool pass() const { return failures.empty(); }
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

template <typename Scalar>
Tensor<Scalar> uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

template <typename Scalar>
Tensor<Scalar> two_class(Index n, Index h, Index w, Rng& rng) {
  Tensor<Scalar> t(Shape{n, 2, h, w});
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h * w; ++i) {
      const auto v = static_cast<Scalar>(rng.uniform(0.05, 0.95));
      t.plane_ptr(b, 1)[i] = v;
      t.plane_ptr(b, 0)[i] = Scalar(1) - v;
    }
  return t;
}

template <typename Net>
void collect(Net& net, Index stride, std::vector<double*>& coords, std::vector<double>& analytic) {
  for (auto& p : net.params())
    for (Index i = 0; i < p.value.size(); i += stride) {
      coords.push_back(p.value.data() + i);
      analytic.push_back(p.grad.data()[i]);
    }
}

// ---------------------------------------------------------------------------

Verdict losses_and_gradients(const Options&) {
  Verdict v;
  Tensor<double> half(Shape{2, 2, 3, 3}, 0.5), onehot(Shape{2, 2, 3, 3});
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 9; ++i) onehot.plane_ptr(b, i % 2)[i] = 1.0;
  v.require(std::abs(loss_cce(half, onehot) - std::log(2.0)) <= 1e-6, "cce of a uniform map is not ln 2");
  v.require(std::abs(loss_bce(Tensor<double>(Shape{1, 1, 4, 4}, 0.5), 1.0) - std::log(2.0)) <= 1e-6,
            "bce of 0.5 scores is not ln 2");
  v.require(std::abs(loss_bce(Tensor<double>(Shape{1, 1, 3, 3}, 0.9), 0.0) + std::log(0.1)) <= 1e-6,
            "bce of 0.9 against 0 is not -ln 0.1");
  Tensor<double> a(Shape{1, 2, 1, 1}), zero(Shape{1, 2, 1, 1});
  a.data()[0] = 3.0;
  a.data()[1] = 4.0;
  v.require(std::abs(loss_emb(a, zero) - 5.0) <= 1e-6, "emb of (3,4) against 0 is not 5");

  // ReLU kinks make central differences meaningless, so the desk layout runs with ELU
  GeneratorSpec gs = GeneratorSpec::desk();
  gs.nonlinearity = Nonlinearity::elu;
  DiscriminatorSpec ds = DiscriminatorSpec::desk();
  ds.nonlinearity = Nonlinearity::elu;
  Rng rng(21);
  const auto x = uniform<double>(Shape{2, 3, 8, 8}, rng, 0.0, 1.0);
  const auto y = two_class<double>(2, 8, 8, rng);
  double worst = 0.0;
  for (AdvLoss adv : {AdvLoss::cross_entropy, AdvLoss::embedding}) {
    Generator<double> gen(gs, 4);
    Discriminator<double> disc(ds, 5);
    LossSelection sel;
    sel.generator_adv = adv;
    sel.discriminator = adv;
    gen.params().zero_grad();
    disc.params().zero_grad();
    generator_loss(x, y, gen, disc, sel, Mode::train, 77);
    std::vector<double*> coords;
    std::vector<double> analytic;
    collect(gen, 97, coords, analytic);
    const auto g_check = oracle::central_difference(coords, analytic, [&] {
      Graph<double> g;
      LossValue lv;
      generator_objective(g, g.input(x), g.input(y), gen, disc, sel, Mode::train, 77, lv);
      return lv.total;
    });

    gen.params().zero_grad();
    disc.params().zero_grad();
    discriminator_loss(x, y, gen, disc, sel);
    coords.clear();
    analytic.clear();
    collect(disc, 23, coords, analytic);
    const Tensor<double> pred = gen.predict(x);
    const auto d_check = oracle::central_difference(coords, analytic, [&] {
      Graph<double> g;
      return g.scalar(discriminator_objective(g, g.input(x), g.input(y), g.input(pred), disc, sel));
    });
    for (const auto& [name, c] : {std::pair{"generator", g_check}, std::pair{"discriminator", d_check}}) {
      v.require(c.max_rel < 1e-4, std::string(name) + " " + to_string(adv) + " gradient rel error " + fmt(c.max_rel));
      v.require(c.checked > 500, std::string(name) + " gradient check covered too few coordinates");
      worst = std::max(worst, c.max_rel);
    }
  }
  v.summary = "closed forms within 1e-6, worst gradient rel error " + fmt(worst);
  return v;
}

Verdict embedding_identities(const Options&) {
  Verdict v;
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{2, 3, 4, 4};
    const auto a = uniform<double>(s, rng, -1, 1), b = uniform<double>(s, rng, -1, 1), c = uniform<double>(s, rng, -1, 1);
    v.require(loss_emb(a, a) == 0.0, "emb(a, a) != 0");
    v.require(loss_emb(a, b) == loss_emb(b, a), "emb not symmetric");
    v.require(loss_emb(a, c) <= loss_emb(a, b) + loss_emb(b, c) + 1e-12, "triangle inequality broken");
  }
  Discriminator<float> disc(DiscriminatorSpec::desk(), 3);
  LossSelection sel;
  sel.discriminator = AdvLoss::embedding;
  double most = -1e300;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = uniform<float>(Shape{2, 3, 32, 32}, rng, 0.0, 1.0);
    const auto y = two_class<float>(2, 32, 32, rng);
    const auto p = two_class<float>(2, 32, 32, rng);
    Graph<float> g;
    const double other = g.scalar(discriminator_objective(g, g.input(x), g.input(y), g.input(p), disc, sel));
    Graph<float> h;
    const double same = h.scalar(discriminator_objective(h, h.input(x), h.input(y), h.input(y), disc, sel));
    v.require(other <= 0.0, "discriminator embedding loss positive: " + fmt(other));
    v.require(same == 0.0, "discriminator embedding loss at prediction == label is " + fmt(same));
    most = std::max(most, other);
  }
  v.summary = "100 triples, discriminator variant max " + fmt(most);
  return v;
}

Verdict stop_gradient(const Options&) {
  Verdict v;
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.schedule.gen_pretrain_iters = 0;
  cfg.schedule.disc_pretrain_iters = 0;
  cfg.schedule.gen_phase_len = 1;
  cfg.schedule.disc_phase_len = 1;
  std::vector<SceneRecord> recs;
  for (std::uint64_t i = 0; i < 2; ++i) recs.push_back(synth_scene(i, RasterizeSpec{1.0, 64, 64}, Difficulty::easy));
  const Batch b = stack_records(recs, {0, 1});
  int combos = 0;
  for (AdvLoss gen_adv : {AdvLoss::cross_entropy, AdvLoss::embedding})
    for (AdvLoss disc_adv : {AdvLoss::cross_entropy, AdvLoss::embedding}) {
      cfg.loss.generator_adv = gen_adv;
      cfg.loss.discriminator = disc_adv;
      const std::string tag = to_string(gen_adv) + "/" + to_string(disc_adv);
      RunState st(cfg);
      const auto disc_before = st.disc.params();
      const auto gen_before = st.gen.params();
      train_step(st, b);
      v.require(st.disc.params() == disc_before, tag + ": generator step moved the discriminator");
      v.require(!(st.gen.params() == gen_before), tag + ": generator step left the generator unchanged");
      const auto gen_after = st.gen.params();
      const auto disc_mid = st.disc.params();
      train_step(st, b);
      v.require(st.gen.params() == gen_after, tag + ": discriminator step moved the generator");
      v.require(!(st.disc.params() == disc_mid), tag + ": discriminator step left the discriminator unchanged");
      ++combos;
    }
  v.summary = std::to_string(combos) + " loss combinations, bitwise over all parameters";
  return v;
}

Verdict schedule_and_lr(const Options&) {
  Verdict v;
  TrainSchedule s;
  s.total_iters = 10000;
  for (std::int64_t it = 0; it < 10000; ++it)
    if (phase_of(s, it) != (it % 500 < 300 ? Phase::gen : Phase::disc)) {
      v.require(false, "phase mismatch at iteration " + std::to_string(it));
      break;
    }
  OptimizerPolicy p;
  p.lr_init = 5e-4;
  p.lr_decay_power = 0.99;
  p.lr_decay_interval = 200;
  v.require(lr_at(p, 0) == 5e-4, "lr at 0");
  v.require(lr_at(p, 200) == 4.95e-4, "lr at 200");
  v.require(lr_at(p, 400) == 4.9005e-4, "lr at 400");
  v.summary = "10000 iterations, lr {5e-4, 4.95e-4, 4.9005e-4}";
  return v;
}

Verdict postprocess_oracles(const Options&) {
  Verdict v;
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    BinaryMap m(32, 32);
    const double density = rng.uniform(0.1, 0.6);
    for (auto& px : m.values) px = rng.bernoulli(density) ? 1 : 0;
    const std::vector<int> want = oracle::flood_fill(m.values, 32, 32);
    std::vector<int> got(m.values.size(), -1);
    const auto comps = connected_components(m);
    for (std::size_t k = 0; k < comps.size(); ++k)
      for (const auto& [r, c] : comps[k].pixels) got[static_cast<std::size_t>(r) * 32 + c] = static_cast<int>(k);
    v.require(got == want, "components differ from flood fill in trial " + std::to_string(trial));

    for (const Component& comp : comps) {
      std::map<int, std::pair<double, int>> rows;
      for (const auto& [r, c] : comp.pixels) {
        rows[r].first += c;
        rows[r].second += 1;
      }
      const Polyline pl = component_to_polyline_basic(comp, 1);
      for (const auto& [r, acc] : rows)
        v.require(pl.at_row(r) && *pl.at_row(r) == acc.first / acc.second,
                  "basic polyline differs from the row mean in trial " + std::to_string(trial));
    }
  }
  // Y: stem at column 30 forking into two diagonal branches
  Tensor<float> y(Shape{1, 1, 64, 64});
  for (int r = 0; r < 50; ++r) {
    const int d = r < 12 ? 0 : (r - 10) / 2;
    y.data()[r * 64 + 30 - d] = 1.0f;
    y.data()[r * 64 + 30 + d] = 1.0f;
  }
  ExtractOptions opt;
  opt.variant = PostprocessVariant::basic;
  const auto basic = extract_lanes(y, opt).size();
  opt.variant = PostprocessVariant::basicpp;
  const auto split = extract_lanes(y, opt).size();
  v.require(basic == 1, "basic found " + std::to_string(basic) + " lanes in the Y");
  v.require(split == 2, "basic++ found " + std::to_string(split) + " lanes in the Y");
  v.summary = "200 maps, Y gives " + std::to_string(basic) + " / " + std::to_string(split) + " lanes";
  return v;
}

Verdict pipeline_closure(const Options&) {
  Verdict v;
  const ExperimentConfig cfg = ExperimentConfig::desk();
  ExtractOptions opt;
  opt.variant = PostprocessVariant::basicpp;
  opt.stride = cfg.post.stride;
  std::vector<LaneSet> preds, gts;
  double err_sum = 0.0;
  long err_count = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const SceneRecord r = synth_scene(seed, RasterizeSpec{cfg.sigma, 128, 128}, Difficulty::easy, cfg.label_stride);
    const LaneSet lanes = extract_lanes(rasterize_lanes(r.lanes, RasterizeSpec{cfg.sigma, 128, 128}), opt);
    // x-error against the closest extracted lane by mean horizontal distance
    for (const Polyline& g : r.lanes) {
      double best = 1e300;
      long best_n = 0;
      for (const Polyline& p : lanes) {
        double sum = 0.0;
        long n = 0;
        for (std::size_t k = 0; k < g.xs.size(); ++k) {
          const auto px = p.at_row(g.y_at(k));
          if (g.xs[k] && px) {
            sum += std::abs(*px - *g.xs[k]);
            ++n;
          }
        }
        if (n && sum / static_cast<double>(n) < best) {
          best = sum / static_cast<double>(n);
          best_n = n;
        }
      }
      if (best_n) {
        err_sum += best * static_cast<double>(best_n);
        err_count += best_n;
      }
    }
    preds.push_back(lanes);
    gts.push_back(r.lanes);
  }
  const EvalReport rep = evaluate_corpus(preds, gts, 128);
  const double err = err_count ? err_sum / static_cast<double>(err_count) : 1e300;
  v.require(rep.accuracy >= 0.99, "accuracy " + fmt(rep.accuracy));
  v.require(err <= 1.0, "mean x-error " + fmt(err) + " px");
  v.summary = "100 scenes, accuracy " + fmt(rep.accuracy) + ", mean x-error " + fmt(err) + " px";
  return v;
}

Polyline flat(int y0, int y1, double x) {
  Polyline p;
  p.y0 = y0;
  p.stride = 1;
  p.xs.assign(static_cast<std::size_t>(y1 - y0 + 1), x);
  return p;
}

Verdict metric_correctness(const Options&) {
  Verdict v;
  const LaneSet three = {flat(0, 9, 10), flat(0, 9, 40), flat(3, 9, 70)};
  const EvalReport perfect = evaluate(three, three, 128);
  v.require(perfect.accuracy == 1.0 && perfect.fp == 0.0 && perfect.fn == 0.0, "perfect report");
  const EvalReport empty = evaluate({}, {flat(0, 9, 10), flat(0, 9, 40)}, 128);
  v.require(empty.accuracy == 0.0 && empty.fp == 0.0 && empty.fn == 1.0, "empty report");
  const EvalReport mixed = evaluate({flat(0, 9, 10), flat(0, 9, 100)}, {flat(0, 9, 10), flat(0, 9, 40)}, 128);
  v.require(mixed.accuracy == 0.5 && mixed.fp == 0.5 && mixed.fn == 0.5, "mixed report");

  Rng rng(8);
  auto random_lanes = [&](int count) {
    LaneSet out;
    for (int i = 0; i < count; ++i) {
      const double anchor = 10.0 * static_cast<double>(rng.uniform_int(1, 4));
      Polyline p;
      p.stride = 1;
      for (int k = 0; k < 10; ++k) {
        if (rng.bernoulli(0.2)) p.xs.push_back(std::nullopt);
        else p.xs.push_back(anchor + rng.uniform(-4, 4));
      }
      out.push_back(p);
    }
    return out;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const LaneSet gt = random_lanes(3), pred = random_lanes(4);
    const MatchResult m = match_lanes(pred, gt, 128);
    const auto counts = oracle::match_counts(pred, gt, 128);
    int total = 0;
    for (std::size_t g = 0; g < m.assignment.size(); ++g)
      if (m.assignment[g] >= 0) total += counts[g][static_cast<std::size_t>(m.assignment[g])];
    v.require(m.counts == counts, "match counts differ in trial " + std::to_string(trial));
    v.require(total == oracle::best_assignment_total(counts), "assignment not optimal in trial " + std::to_string(trial));
  }
  v.summary = "3 hand reports, 50 assignment instances";
  return v;
}

Verdict overfit_one_batch(const Options&) {
  Verdict v;
  ExperimentConfig cfg = ExperimentConfig::desk();
  cfg.schedule.gen_pretrain_iters = 2000;
  cfg.schedule.disc_pretrain_iters = 0;
  cfg.schedule.total_iters = 2000;
  cfg.pretrain_early_stop = false;
  std::vector<SceneRecord> recs;
  for (std::uint64_t i = 0; i < 4; ++i)
    recs.push_back(synth_scene(i, RasterizeSpec{cfg.sigma, 128, 128}, Difficulty::easy, cfg.label_stride));
  const Batch b = stack_records(recs, {0, 1, 2, 3});
  RunState st(cfg);
  double cce = loss_cce(st.gen.predict(b.images), b.labels);
  const double start = cce;
  std::int64_t reached = -1;
  while (st.iteration < 2000) {
    train_step(st, b);
    if (st.iteration % 25 == 0) {
      cce = loss_cce(st.gen.predict(b.images), b.labels);
      if (cce < 0.05) {
        reached = st.iteration;
        break;
      }
    }
  }
  v.require(reached > 0, "cce still " + fmt(cce) + " after 2000 steps");
  v.summary = "cce " + fmt(start) + " -> " + fmt(cce) + " at step " + std::to_string(reached);
  return v;
}

Verdict stability_trend(const Options& o) {
  Verdict v;
  const ExperimentConfig cfg = ExperimentConfig::desk();
  std::vector<SceneRecord> recs;
  for (int i = 0; i < o.scenes; ++i)
    recs.push_back(synth_scene(derive_seed(1, static_cast<std::uint64_t>(i)), RasterizeSpec{cfg.sigma, 128, 128},
                               Difficulty::occluded, cfg.label_stride));
  const auto rows = run_loss_matrix(cfg, recs, o.sweep, o.seeds);
  std::cout << matrix_table(rows);
  write_file_atomic(o.sweep / "stability.txt", matrix_table(rows));
  write_file_atomic(o.sweep / "stability.svg", stability_svg(rows));

  int agreeing = 0;
  for (const std::uint64_t seed : o.seeds) {
    std::vector<const MatrixRow*> emb, ce;
    for (const auto& r : rows)
      if (r.seed == seed) (r.label.rfind("emb/", 0) == 0 ? emb : ce).push_back(&r);
    bool lower = true;
    for (const MatrixRow* e : emb) {
      v.require(!e->collapsed, "seed " + std::to_string(seed) + " " + e->label + " collapsed");
      for (const MatrixRow* c : ce) lower = lower && e->stats.variance < c->stats.variance;
    }
    if (lower) ++agreeing;
  }
  const int needed = (3 * static_cast<int>(o.seeds.size()) + 4) / 5;
  v.require(agreeing >= needed, "emb rows below every ce row in " + std::to_string(agreeing) + " of " +
                                    std::to_string(o.seeds.size()) + " seeds");
  v.summary = "emb variance below ce in " + std::to_string(agreeing) + " of " + std::to_string(o.seeds.size()) + " seeds";
  return v;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(ELGAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict reproducibility(const Options& o) {
  Verdict v;
  const fs::path dir = o.work / "repro";
  fs::remove_all(dir);
  const std::string data = (dir / "data").string();
  const std::string sets =
      " --set gen_pretrain_iters=100 --set disc_pretrain_iters=50 --set total_iters=300 --set pretrain_early_stop=false";
  v.require(cli("synth --out " + data + " --count 40 --seed 7 --difficulty occluded") == 0, "synth failed");
  for (const std::string run : {"a", "b"})
    v.require(cli("train --data " + data + " --out " + (dir / run).string() + sets) == 0, "train " + run + " failed");
  v.require(cli("train --data " + data + " --out " + (dir / "c").string() + sets + " --resume " +
                (dir / "b" / "checkpoints" / "iter_150.ckpt").string()) == 0,
            "resumed train failed");
  if (!v.pass()) return v;
  v.require(read_file(dir / "a" / "metrics.jsonl") == read_file(dir / "b" / "metrics.jsonl"), "metrics of a and b differ");
  v.require(read_file(dir / "a" / "metrics.jsonl") == read_file(dir / "c" / "metrics.jsonl"), "resumed metrics differ");
  const RunState a = load_checkpoint(dir / "a" / "checkpoints" / "iter_300.ckpt");
  const RunState c = load_checkpoint(dir / "c" / "checkpoints" / "iter_300.ckpt");
  v.require(a.gen.params() == c.gen.params(), "resumed generator differs");
  v.require(a.disc.params() == c.disc.params(), "resumed discriminator differs");
  v.summary = "identical metric logs, resume from 150 bitwise equal at 300";
  if (v.pass()) fs::remove_all(dir);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("EL-GAN acceptance suite");
  Options o;
  std::vector<int> only;
  app.add_option("--only", only, "Criteria to run (default all)");
  std::string work = (fs::temp_directory_path() / ("elgan_acceptance_" + std::to_string(::getpid()))).string();
  std::string sweep = "acceptance_sweep";
  app.add_option("--work", work, "Scratch directory")->capture_default_str();
  app.add_option("--sweep-dir", sweep, "Loss matrix directory; finished cells are reused")->capture_default_str();
  app.add_option("--seeds", o.seeds, "Matrix seeds")->capture_default_str();
  app.add_option("--scenes", o.scenes, "Matrix corpus size")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  o.work = work;
  o.sweep = fs::absolute(sweep);
  fs::create_directories(o.work);

  using Fn = Verdict (*)(const Options&);
  const std::vector<std::pair<std::string, Fn>> criteria = {
      {"loss values and gradients", losses_and_gradients},
      {"embedding loss identities", embedding_identities},
      {"stop-gradient contract", stop_gradient},
      {"schedule and learning rate", schedule_and_lr},
      {"post-processing oracles", postprocess_oracles},
      {"pipeline closure", pipeline_closure},
      {"metric correctness", metric_correctness},
      {"single-batch overfit", overfit_one_batch},
      {"stability trend", stability_trend},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second(o);
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (v.pass() ? "[PASS]" : "[FAIL]") << " criterion " << n << ": " << criteria[i].first;
    if (!v.summary.empty()) std::cout << " (" << v.summary << ")";
    std::cout << " [" << fmt(secs) << " s]\n";
    for (std::size_t k = 0; k < std::min<std::size_t>(v.failures.size(), 5); ++k) std::cout << "    " << v.failures[k] << "\n";
    std::cout.flush();
    if (!v.pass()) ++failed;
  }
  if (failed == 0) fs::remove_all(o.work);
  return failed == 0 ? 0 : 1;
}
