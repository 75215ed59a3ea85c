// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only N]... [--skip N]... [--artifacts DIR] [--reuse]
//
// Criterion 8 trains six full GridWorld runs and takes most of an hour on
// one core; ctest runs it as a separate test.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "setcon/config.hpp"
#include "setcon/evaluation.hpp"
#include "setcon/figures.hpp"
#include "setcon/gradient_gate.hpp"
#include "setcon/harness.hpp"
#include "setcon/objectives.hpp"
#include "setcon/rng.hpp"

using namespace setcon;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor<double> normal(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> n(0, 1);
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

double setcon_value(const Tensor<double>& zs, const Tensor<double>& zp, std::size_t B, std::size_t T) {
  Tape<double> tape;
  return objectives::setcon_loss(tape.constant(zs), tape.constant(zp), B, T).value()[0];
}

double slotwise_value(const Tensor<double>& s, const Tensor<double>& p, std::size_t B, std::size_t T,
                      std::size_t K) {
  Tape<double> tape;
  return objectives::slotwise_loss(tape.constant(s), tape.constant(p), B, T, K).value()[0];
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<data::VideoSequence> gridworld_seqs(std::size_t n, std::uint64_t seed) {
  std::vector<data::VideoSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(data::gridworld_sequence(seed + i));
  return out;
}

ExperimentConfig small_run(std::size_t steps) {
  auto c = default_config(DatasetKind::gridworld);
  c.precision = Precision::f64;
  c.train.batch_size = 4;
  c.train.steps = steps;
  c.train.eval_batches = 2;
  c.train.log_every = 1;
  c.train.checkpoint_every = 2;
  return c;
}

// 1 -----------------------------------------------------------------------------

Outcome gradient_gate(const fs::path&) {
  const auto start = std::chrono::steady_clock::now();
  const auto cases = gate::run_gradient_gate({});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::size_t failed = 0;
  double worst = 0;
  std::string worst_name;
  for (const auto& c : cases) {
    if (!c.passed) ++failed;
    if (c.result.max_rel_error >= worst) worst = c.result.max_rel_error, worst_name = c.name;
  }
  const bool pass = failed == 0 && secs < 120;
  return {pass, std::to_string(cases.size()) + " checks, " + std::to_string(failed) + " failed, worst " +
                    fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1f", secs) + " s"};
}

// 2 -----------------------------------------------------------------------------

Outcome loss_oracle(const fs::path&) {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t B = 1 + i % 3, T = 3 + i % 3, K = 1 + i % 4, D = 2 + i % 4;
    const auto zs = normal(Shape{B * T, D}, rng), zp = normal(Shape{B * (T - 2), D}, rng);
    const auto s = normal(Shape{B * T * K, D}, rng), p = normal(Shape{B * (T - 2) * K, D}, rng);
    const double ref_set = oracle::brute_setcon(zs, zp, B, T, 0.5, false);
    const double ref_slot = oracle::brute_slotwise(s, p, B, T, K, 0.5);
    worst = std::max(worst, std::abs(setcon_value(zs, zp, B, T) - ref_set) / std::max(1.0, std::abs(ref_set)));
    worst = std::max(worst, std::abs(slotwise_value(s, p, B, T, K) - ref_slot) / std::max(1.0, std::abs(ref_slot)));
  }
  double worst_log = 0;
  for (auto [B, T] : {std::pair<std::size_t, std::size_t>{1, 3}, {2, 3}, {2, 5}, {4, 8}}) {
    const Tensor<double> zs(Shape{B * T, 5}, 0.7), zp(Shape{B * (T - 2), 5}, 0.7);
    worst_log = std::max(worst_log, std::abs(setcon_value(zs, zp, B, T) - std::log(double(B * T + B * (T - 2)))));
  }
  return {worst <= 1e-10 && worst_log <= 1e-9,
          "brute-force rel err " + fmt("%.2e", worst) + " (tol 1e-10), log M err " + fmt("%.2e", worst_log) +
              " (tol 1e-9)"};
}

// 3 -----------------------------------------------------------------------------

Outcome degeneracy(const fs::path&) {
  model::ModelConfig mc;
  const std::size_t B = 2, T = 4, K = mc.num_slots, D = mc.slot_dim, P = T - 2;
  std::size_t changed = 0;
  double worst_slotwise = 0, smallest_change = INFINITY;
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    std::mt19937_64 rng(derive_seed(7, "degeneracy", draw));
    const auto params = model::init_model<double>(mc, derive_seed(7, "degeneracy-init", draw));
    const auto s = normal(Shape{B * T * K, D}, rng), p = normal(Shape{B * P * K, D}, rng);
    auto dup = [&](const Tensor<double>& x) {
      Tensor<double> out(x.shape());
      for (std::size_t r = 0; r < x.rows(); ++r) std::copy_n(x.ptr() + (r - r % K) * D, D, out.ptr() + r * D);
      return out;
    };
    auto slot0 = [&](const Tensor<double>& x) {
      Tensor<double> out(Shape{x.rows() / K, D});
      for (std::size_t r = 0; r < out.rows(); ++r) std::copy_n(x.ptr() + r * K * D, D, out.ptr() + r * D);
      return out;
    };
    const auto sd = dup(s), pd = dup(p);
    worst_slotwise =
        std::max(worst_slotwise, std::abs(slotwise_value(sd, pd, B, T, K) - slotwise_value(slot0(s), slot0(p), B, T, 1)));
    Tape<double> tape;
    BoundParameters<double> bp(tape, params, false);
    auto z = [&](const Tensor<double>& x) { return model::set_encode(bp, K, tape.constant(x)).value(); };
    const double delta = std::abs(setcon_value(z(sd), z(pd), B, T) - setcon_value(z(s), z(p), B, T));
    smallest_change = std::min(smallest_change, delta);
    if (delta > 1e-6) ++changed;
  }
  return {worst_slotwise <= 1e-9 && changed >= 95,
          "slotwise |delta| max " + fmt("%.2e", worst_slotwise) + " (tol 1e-9); setcon changed on " +
              std::to_string(changed) + "/100 (need 95), smallest |delta| " + fmt("%.2e", smallest_change)};
}

// 4 -----------------------------------------------------------------------------

Outcome permutation_invariance(const fs::path&) {
  model::ModelConfig mc;
  double worst = 0;
  std::size_t perms = 0;
  for (std::uint64_t draw = 0; draw < 10; ++draw) {
    const auto params = model::init_model<float>(mc, draw);
    std::mt19937_64 rng(derive_seed(4, "perm", draw));
    const auto slots = normal(Shape{4, mc.slot_dim}, rng).cast<float>();
    Tape<float> tape;
    BoundParameters<float> p(tape, params, false);
    const auto ref = model::set_encode(p, 4, tape.constant(slots)).value();
    std::vector<std::size_t> perm{0, 1, 2, 3};
    do {
      Tensor<float> shuffled(slots.shape());
      for (std::size_t k = 0; k < 4; ++k)
        std::copy_n(slots.ptr() + perm[k] * mc.slot_dim, mc.slot_dim, shuffled.ptr() + k * mc.slot_dim);
      worst = std::max(worst, double(max_abs_diff(model::set_encode(p, 4, tape.constant(shuffled)).value(), ref)));
      ++perms;
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
  return {worst <= 1e-6 && perms == 240,
          std::to_string(perms / 10) + " orders x 10 draws, max |diff| " + fmt("%.2e", worst) + " (tol 1e-6, f32)"};
}

// 5 -----------------------------------------------------------------------------

Outcome ari(const fs::path&) {
  std::mt19937_64 rng(5);
  double worst = 0;
  bool perfect = true;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng() % 50;
    const int ka = 1 + int(rng() % 7), kb = 1 + int(rng() % 7);
    std::vector<int> a(n), b(n);
    for (auto& v : a) v = int(rng() % ka);
    for (auto& v : b) v = int(rng() % kb);
    worst = std::max(worst, std::abs(*eval::adjusted_rand_index(a, b) - oracle::pair_count_ari(a, b)));
    std::vector<int> relabel(ka);
    std::iota(relabel.begin(), relabel.end(), 100);
    std::shuffle(relabel.begin(), relabel.end(), rng);
    std::vector<int> permuted;
    for (int v : a) permuted.push_back(relabel[v]);
    perfect = perfect && std::abs(*eval::adjusted_rand_index(a, a) - 1.0) <= 1e-12 &&
              std::abs(*eval::adjusted_rand_index(a, permuted) - 1.0) <= 1e-12;
  }
  const std::vector<int> gt{1, 1, 2, 2}, pred{1, 1, 1, 2};
  const double worked = *eval::adjusted_rand_index(gt, pred);
  return {worst <= 1e-12 && perfect && std::abs(worked) <= 1e-12,
          "oracle max err " + fmt("%.2e", worst) + " (tol 1e-12), perfect/permuted = 1: " +
              (perfect ? "yes" : "no") + ", worked example " + fmt("%.3g", worked)};
}

// 6 -----------------------------------------------------------------------------

Outcome dataset_oracles(const fs::path&) {
  std::size_t mismatched = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto seq = data::gridworld_sequence(seed, 3, 3);
    const auto ref = oracle::oracle_gridworld(seed, 3, 3);
    if (!std::equal(ref.frames.begin(), ref.frames.end(), seq.frames.ptr()) || ref.masks != seq.masks) ++mismatched;
  }
  const auto count = data::gridworld_state_count(3);
  const data::BallsConfig bc;
  double worst_speed = 0;
  std::size_t out_of_bounds = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ep = data::bouncing_balls_episode(seed, data::balls_palette(seed), bc);
    for (const auto& frame : ep.states)
      for (const auto& b : frame) {
        worst_speed = std::max(worst_speed, std::abs(std::hypot(b.vx, b.vy) - bc.speed));
        if (b.x < b.radius || b.x > 1 - b.radius || b.y < b.radius || b.y > 1 - b.radius) ++out_of_bounds;
      }
  }
  return {mismatched == 0 && count == 970200 && worst_speed <= 1e-9 && out_of_bounds == 0,
          "gridworld mismatches " + std::to_string(mismatched) + "/1000, state count " + std::to_string(count) +
              ", balls speed err " + fmt("%.2e", worst_speed) + ", out-of-bounds centers " +
              std::to_string(out_of_bounds)};
}

// 7 -----------------------------------------------------------------------------

Outcome probe_isolation(const fs::path&) {
  model::ModelConfig mc;
  eval::DecoderConfig dc;
  const auto model = model::init_model<double>(mc, derive_seed(0, "init", 0));
  const auto before = model;
  auto decoder = eval::init_decoder<double>(dc, derive_seed(0, "init", 1));
  const auto decoder_before = decoder;
  auto opt = OptimizerState<double>::init(decoder, AdamConfig{harness::resolve_lr(3e-4, 8)});
  for (std::size_t step = 0; step < 100; ++step) {
    const auto frames = eval::stack_frames<double>(gridworld_seqs(8, derive_seed(0, "data", step)));
    Tape<double> tape;
    BoundParameters<double> p(tape, model, true);
    auto out = model::forward_sequence(p, mc, tape.constant(frames), nullptr);
    eval::probe_train_step(decoder, opt, dc, out.slots.value(), out.predictions.value(), frames);
  }
  std::size_t changed = 0;
  for (const auto& [name, p] : model)
    if (!bit_equal(p.value, before.at(name))) ++changed;
  const bool decoder_moved = !bit_equal(decoder, decoder_before);
  return {changed == 0 && decoder_moved && opt.step == 100,
          std::to_string(changed) + "/" + std::to_string(model.size()) +
              " model tensors changed after 100 probe steps; decoder updated: " + (decoder_moved ? "yes" : "no")};
}

// 8 -----------------------------------------------------------------------------

// Fraction of frames (over `frames` eval sequences) in which the visible
// objects are claimed by pairwise distinct slots, where an object's slot is
// the one with the largest summed attention over its pixels.
double distinct_slot_rate(const fs::path& ckpt, std::size_t frames_n, std::size_t* two_plus) {
  const auto c = harness::checkpoint_config(ckpt);
  const auto mc = c.model_config();
  auto ck = load_checkpoint<float>(ckpt);
  const auto seqs = harness::evaluation_sequences(c, nullptr);
  std::size_t distinct = 0, total = 0;
  *two_plus = 0;
  for (std::size_t i = 0; i < std::min(frames_n, seqs.size()); ++i) {
    const auto& seq = seqs[i];
    Tape<float> tape;
    BoundParameters<float> p(tape, ck.trees.at("model"), false);
    auto noise = make_rng(c.seed, "eval-noise", 0);
    const auto frames = eval::stack_frames<float>(std::span(&seq, 1));
    auto enc = model::encode_frames(p, mc, tape.constant(frames.reshaped(Shape{seq.length(), 5, 5, 3})), &noise);
    const auto& attn = enc.attention.value();
    const std::size_t K = mc.num_slots, N = 25;
    for (std::size_t t = 0; t < seq.length(); ++t) {
      std::vector<std::vector<double>> mass(seq.num_objects + 1, std::vector<double>(K, 0.0));
      for (std::size_t n = 0; n < N; ++n) {
        const auto id = seq.masks[t * N + n];
        for (std::size_t k = 0; k < K; ++k) mass[id][k] += attn[(t * N + n) * K + k];
      }
      std::set<std::size_t> slots;
      std::size_t visible = 0;
      for (std::size_t id = 1; id <= seq.num_objects; ++id) {
        if (std::all_of(mass[id].begin(), mass[id].end(), [](double v) { return v == 0; })) continue;
        ++visible;
        slots.insert(std::size_t(std::max_element(mass[id].begin(), mass[id].end()) - mass[id].begin()));
      }
      ++total;
      if (slots.size() == visible) ++distinct;
      if (slots.size() >= 2) ++*two_plus;
    }
  }
  return total ? double(distinct) / double(total) : 0.0;
}

Outcome ordering(const fs::path& artifacts, bool reuse) {
  const fs::path root = artifacts / "ordering";
  fs::create_directories(root);
  std::map<std::string, std::vector<double>> mse;
  std::ostringstream table;
  for (const auto* loss : {"setcon", "slotwise"})
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto c = default_config(DatasetKind::gridworld);
      c.seed = seed;
      c.loss.kind = std::string(loss) == "setcon" ? LossKind::setcon : LossKind::slotwise;
      c.train.log_every = 500;
      const fs::path dir = root / (std::string(loss) + "_seed" + std::to_string(seed));
      if (!reuse) fs::remove_all(dir);
      harness::TrainOptions o{dir};
      o.progress = &std::cerr;
      const auto r = harness::train(c, o);
      if (r.diverged) return {false, std::string(loss) + " seed " + std::to_string(seed) + " diverged: " + r.error};
      mse[loss].push_back(r.slot_mse());
      const auto ckpt = dir / harness::kCheckpointDir;
      const auto eval_seq = harness::evaluation_sequences(c, nullptr).front();
      figures::plot_sequence(ckpt, eval_seq, root / (std::string("attention_") + loss + "_seed" + std::to_string(seed) + ".png"));
      std::size_t two_plus = 0;
      const double rate = distinct_slot_rate(ckpt, 16, &two_plus);
      table << "    " << loss << " seed " << seed << ": slot MSE " << fmt("%.5f", r.slot_mse())
            << ", frames with visible objects in distinct slots " << fmt("%.2f", rate) << ", frames with >=2 objects in distinct slots "
            << two_plus << "/128\n";
    }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double ms = median(mse["setcon"]), mw = median(mse["slotwise"]);
  std::cout << table.str();
  return {ms < mw, "median slot MSE setcon " + fmt("%.5f", ms) + " vs slotwise " + fmt("%.5f", mw) +
                       "; attention PNGs in " + root.string()};
}

// 9 -----------------------------------------------------------------------------

Outcome rollout_contract(const fs::path& artifacts) {
  model::ModelConfig mc;
  const auto params = model::init_model<double>(mc, 9);
  const auto frames = eval::stack_frames<double>(gridworld_seqs(4, 90));
  const auto roll = eval::rollout(params, mc, frames, 1);
  const std::size_t K = mc.num_slots, per = 75;
  Tensor<double> context(Shape{8, 5, 5, 3});
  for (std::size_t b = 0; b < 4; ++b) std::copy_n(frames.ptr() + b * 8 * per, 2 * per, context.ptr() + b * 2 * per);
  Tape<double> tape;
  BoundParameters<double> p(tape, params, false);
  auto slots = model::encode_frames(p, mc, tape.constant(context), nullptr).slots;
  std::vector<std::size_t> s0, s1;
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t k = 0; k < K; ++k) s0.push_back(2 * b * K + k), s1.push_back((2 * b + 1) * K + k);
  const bool k1 = bit_equal(roll.at(0), model::transition(p, ops::gather_rows(slots, s0), ops::gather_rows(slots, s1)).value());

  const fs::path dir = artifacts / "rollout_run";
  fs::remove_all(dir);
  auto c = small_run(20);
  harness::train(c, {dir});
  const auto report = harness::rollout_checkpoint(dir / harness::kCheckpointDir,
                                                  harness::evaluation_sequences(c, nullptr), eval::kMaxRolloutSteps);
  bool finite = report.mse.size() == eval::kMaxRolloutSteps;
  std::string values;
  for (std::size_t s = 0; s < report.mse.size(); ++s) {
    finite = finite && std::isfinite(report.mse[s]);
    values += (s ? ", " : "") + std::string("k=") + std::to_string(s + 1) + " " + fmt("%.4f", report.mse[s]);
  }
  bool rejects = false;
  try {
    eval::rollout(params, mc, frames, eval::kMaxRolloutSteps + 1);
  } catch (const ArgumentError&) {
    rejects = true;
  }
  return {k1 && finite && rejects, std::string("k=1 bit-equal: ") + (k1 ? "yes" : "no") + "; per-step MSE " + values +
                                       "; k=6 rejected: " + (rejects ? "yes" : "no")};
}

// 10 ----------------------------------------------------------------------------

Outcome reproducibility(const fs::path& artifacts) {
  const fs::path a = artifacts / "repro_a", b = artifacts / "repro_b", split = artifacts / "repro_split";
  for (const auto& d : {a, b, split}) fs::remove_all(d);
  const auto c = small_run(6);
  harness::train(c, {a});
  harness::train(c, {b});
  const auto blob = [](const fs::path& d) { return slurp(d / harness::kCheckpointDir / kCheckpointBlob); };
  const bool identical = blob(a) == blob(b) && checkpoint_metadata(a / harness::kCheckpointDir) ==
                                                   checkpoint_metadata(b / harness::kCheckpointDir);
  harness::TrainOptions first{split};
  first.stop_after = 3;
  harness::train(c, first);
  harness::train(c, {split});
  const bool resumed = blob(a) == blob(split);
  return {identical && resumed, std::string("f64 repeat bit-identical: ") + (identical ? "yes" : "no") +
                                    "; stop at 3 + resume equals uninterrupted 6 steps: " + (resumed ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SetCon acceptance runner"};
  std::vector<int> only, skip;
  std::string artifacts = "acceptance_artifacts";
  bool reuse = false;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--skip", skip, "Skip these criteria");
  app.add_option("--artifacts", artifacts, "Directory for runs and figures");
  app.add_flag("--reuse", reuse, "Continue ordering runs found in the artifacts directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path art(artifacts);
  fs::create_directories(art);
  const std::vector<Criterion> criteria{
      {1, "gradient gate", gradient_gate},
      {2, "loss oracle", loss_oracle},
      {3, "slot duplication", degeneracy},
      {4, "set encoder permutation invariance", permutation_invariance},
      {5, "adjusted rand index", ari},
      {6, "dataset oracles", dataset_oracles},
      {7, "probe isolation", probe_isolation},
      {8, "desk-scale ordering", [reuse](const fs::path& d) { return ordering(d, reuse); }},
      {9, "rollout contract", rollout_contract},
      {10, "reproducibility", reproducibility},
  };

  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    if (std::find(skip.begin(), skip.end(), c.id) != skip.end()) continue;
    Outcome o;
    try {
      o = c.run(art);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    if (!o.pass) ++failed;
    std::printf("%s [%2d] %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
