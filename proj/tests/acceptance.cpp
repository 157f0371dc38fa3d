// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "attnfool/experiment.hpp"
#include "test_util.hpp"

using namespace afool;
using afool::test::contracted;
using afool::test::gradient_error;
using afool::test::randn;
using afool::test::randu;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void info(const std::string& what) { notes.push_back("     " + what); }
};

std::string num(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------- 1

Verdict gradient_suite() {
  Verdict v;
  constexpr std::size_t kInstances = 20;
  constexpr double kTol = 1e-4;
  using Op = std::function<Var(Var)>;
  struct Case {
    std::string name;
    Shape in;
    Op f;  // scalar-valued
    double lo = -1.0, hi = 1.0;
  };
  auto halves = [](Var x) {
    const std::size_t r = x.shape()[0] / 2;
    return std::pair{slice(x, 0, 0, r), slice(x, 0, r, 2 * r)};
  };
  std::vector<Case> cases;
  auto add_contracted = [&](std::string name, Shape in, Shape out, Op op, double lo = -1.0, double hi = 1.0) {
    cases.push_back({std::move(name), std::move(in), contracted(std::move(op), out, 77), lo, hi});
  };
  add_contracted("add", {6, 3}, {3, 3}, [&](Var x) { auto [a, b] = halves(x); return add(a, b); });
  add_contracted("sub", {6, 3}, {3, 3}, [&](Var x) { auto [a, b] = halves(x); return sub(a, b); });
  add_contracted("mul", {6, 3}, {3, 3}, [&](Var x) { auto [a, b] = halves(x); return mul(a, b); });
  add_contracted("scale", {3, 4}, {3, 4}, [](Var x) { return scale(x, -2.5); });
  add_contracted("add_scalar", {3, 4}, {3, 4}, [](Var x) { return mul(add_scalar(x, 0.7), x); });
  add_contracted("mul_scalar", {3, 4}, {3, 4}, [](Var x) { return mul_scalar(x, element(reshape(x, {12}), 5)); });
  add_contracted("div_scalar", {3, 4}, {3, 4}, [](Var x) { return div_scalar(x, add_scalar(exp(element(reshape(x, {12}), 2)), 0.5)); });
  add_contracted("add_row", {4, 3}, {3, 3}, [](Var x) { return add_row(slice(x, 0, 0, 3), reshape(slice(x, 0, 3, 4), {3})); });
  add_contracted("matmul", {8, 4}, {4, 4}, [&](Var x) { auto [a, b] = halves(x); return matmul(a, b); });
  add_contracted("transpose", {3, 5}, {5, 3}, [](Var x) { return transpose(x); });
  add_contracted("reshape", {3, 4}, {2, 6}, [](Var x) { return reshape(x, {2, 6}); });
  add_contracted("concat0", {4, 3}, {7, 3}, [](Var x) { return concat({x, slice(x, 0, 1, 4)}, 0); });
  add_contracted("concat1", {4, 3}, {4, 5}, [](Var x) { return concat({x, slice(x, 1, 0, 2)}, 1); });
  add_contracted("slice", {5, 4}, {5, 2}, [](Var x) { return slice(x, 1, 1, 3); });
  add_contracted("gather", {3, 4}, {2, 3}, [](Var x) { return gather(x, {0, 5, 5, 11, 3, 7}, Shape{2, 3}); });
  add_contracted("sum_lastdim", {4, 5}, {4}, [](Var x) { return sum_lastdim(x); });
  add_contracted("exp", {3, 4}, {3, 4}, [](Var x) { return exp(x); });
  add_contracted("log", {3, 4}, {3, 4}, [](Var x) { return log(x); }, 0.2, 2.0);
  add_contracted("sqrt", {3, 4}, {3, 4}, [](Var x) { return sqrt(x); }, 0.2, 2.0);
  add_contracted("softmax_lastdim", {4, 5}, {4, 5}, [](Var x) { return softmax_lastdim(scale(x, 3.0)); });
  add_contracted("gelu", {4, 5}, {4, 5}, [](Var x) { return gelu(scale(x, 3.0)); });
  add_contracted("layernorm", {6, 5}, {4, 5}, [](Var x) {
    return layernorm(slice(x, 0, 0, 4), reshape(slice(x, 0, 4, 5), {5}), reshape(slice(x, 0, 5, 6), {5}), 1e-6);
  });
  cases.push_back({"sum", {3, 4}, [](Var x) { return sum(mul(x, x)); }});
  cases.push_back({"mean", {3, 4}, [](Var x) { return mean(exp(x)); }});
  cases.push_back({"element", {3, 4}, [](Var x) { return mul(element(reshape(x, {12}), 7), element(reshape(x, {12}), 2)); }});
  cases.push_back({"max_all", {3, 4}, [](Var x) { return max_all(mul(x, x)); }});
  cases.push_back({"logsumexp", {6}, [](Var x) { return logsumexp(scale(x, 4.0)); }});
  cases.push_back({"cross_entropy", {5}, [](Var x) { return cross_entropy(scale(x, 3.0), 2); }});
  cases.push_back({"stack_scalars", {4}, [](Var x) {
    return sum(mul(stack_scalars({element(x, 0), mul(element(x, 1), element(x, 2)), exp(element(x, 3))}), x.tape().constant(Tensor::vector({1.0, -2.0, 0.5}))));
  }});

  double worst_op = 0.0;
  std::string worst_name;
  for (const Case& c : cases) {
    for (std::uint64_t s = 0; s < kInstances; ++s) {
      const double e = gradient_error(c.f, randu(c.in, 1000 + s, c.lo, c.hi));
      if (e > worst_op) worst_op = e, worst_name = c.name;
    }
  }
  v.check(worst_op <= kTol, std::to_string(cases.size()) + " primitive ops x " + std::to_string(kInstances) +
                                " instances, worst relative error " + num(worst_op, 3) + " (" + worst_name + ")");

  // total_loss through the toy ViT, gradient with respect to the image.
  ViTConfig mc;
  mc.image_size = 8;
  mc.d_model = 16;
  mc.depth = 2;
  mc.heads = 2;
  mc.mlp_hidden = 16;
  mc.num_classes = 3;
  struct Terms {
    const char* name;
    bool ce, kq, kq_star, pf;
  };
  const Terms term_sets[] = {{"ce", true, false, false, false},
                             {"kq", false, true, false, false},
                             {"kq_star", false, false, true, false},
                             {"patch_fool", false, false, false, true},
                             {"ce+kq", true, true, false, false}};
  const Aggregation aggs[] = {Aggregation::smax, Aggregation::mean, Aggregation::max};
  std::size_t configs = 0;
  double worst_loss = 0.0;
  std::string worst_cfg;
  for (const Terms& t : term_sets) {
    for (bool normalize : {true, false}) {
      for (Aggregation agg : aggs) {
        ++configs;
        LossConfig cfg;
        cfg.ce = t.ce;
        cfg.kq = t.kq;
        cfg.kq_star = t.kq_star;
        cfg.patch_fool = t.pf;
        cfg.normalize = normalize;
        cfg.head_aggregation = cfg.layer_aggregation = agg;
        for (std::uint64_t s = 0; s < kInstances; ++s) {
          const ViTModel model = init_vit(mc, 300 + s);
          cfg.target_key = 1 + s % 4;
          const std::size_t label = s % 3;
          auto f = [&](Var img) {
            Tape& tape = img.tape();
            ForwardResult fr = forward(tape, model, img);
            return total_loss(fr.logits, fr.trace, label, cfg).total;
          };
          const double e = gradient_error(f, randu({3, 8, 8}, 5000 + s));
          if (e > worst_loss) {
            worst_loss = e;
            worst_cfg = std::string(t.name) + (normalize ? "/norm/" : "/raw/") + to_string(agg);
          }
        }
      }
    }
  }
  v.check(worst_loss <= kTol, std::to_string(configs) + " loss configs x " + std::to_string(kInstances) +
                                  " ViT instances, worst relative error " + num(worst_loss, 3) + " (" + worst_cfg + ")");
  return v;
}

// ---------------------------------------------------------------- 2, 3

Verdict controlled_sweep_check() {
  Verdict v;
  const ControlledGrid grid;  // mu {0.1,0.5,1}, w {1,2,4}, d_k {16,64,256}
  ControlledConfig base;
  base.n = 64;
  const std::vector<SweepCell> cells = controlled_sweep(grid, controlled_seeds(0, 5), base);
  const auto violations = check_sweep_monotone(cells, grid, 0.02);
  std::size_t attained = 0;
  for (const SweepCell& c : cells) attained += c.attained();
  v.info(std::to_string(cells.size()) + " cells, " + std::to_string(attained) + " with finite median epsilon*");
  v.check(violations.empty(), "median epsilon* non-increasing along mu, w, d_k: " + std::to_string(violations.size()) + " violations");
  return v;
}

Verdict silhouette_check() {
  Verdict v;
  ControlledConfig c;
  c.n = 64;
  c.d_k = 64;
  c.w = 1.0;
  const std::vector<std::uint64_t> seeds = controlled_seeds(0, 5);
  std::vector<double> med;
  std::string line;
  for (double mu : {0.1, 0.5, 1.0}) {
    c.mu = mu;
    std::vector<double> s;
    for (std::uint64_t seed : seeds) s.push_back(controlled_silhouette(c, seed));
    med.push_back(median(s));
    line += (line.empty() ? "" : ", ") + ("mu=" + num(mu, 2) + ": " + num(med.back(), 4));
  }
  v.check(med[0] < med[1] && med[1] < med[2], "median silhouette strictly increasing (" + line + ")");
  return v;
}

// ---------------------------------------------------------------- 4

AttentionParams random_attention(std::size_t heads, std::size_t dm, std::size_t dk, std::size_t dv, std::uint64_t seed) {
  const double s = 1.0 / std::sqrt(static_cast<double>(dm));
  AttentionParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::uint64_t b = seed * 131 + h * 17;
    p.heads.push_back(HeadParams{randn({dm, dk}, b + 1, s), randn({dm, dk}, b + 2, s), randn({dm, dv}, b + 3, s), randn({dk}, b + 4, 0.1),
                                 randn({dk}, b + 5, 0.1), randn({dv}, b + 6, 0.1)});
  }
  p.w_o = randn({heads * dv, dm}, seed * 131 + 99, s);
  p.b_o = randn({dm}, seed * 131 + 98, 0.1);
  return p;
}

Verdict decomposition_check() {
  Verdict v;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const std::size_t n = 2 + s % 7, dm = 4 + s % 5, dk = 2 + s % 3, dv = 2 + s % 4;
    const AttentionParams p = random_attention(2, dm, dk, dv, 9000 + s);
    const Tensor x = randn({n, dm}, 9100 + s, 1.5);
    const Tensor cot = randn({n, dv}, 9200 + s);
    const PathGradients pg = gradient_path_decomposition(x, p, s % 2, cot);
    const Tensor full = head_input_gradient(x, p, s % 2, cot);
    for (std::size_t i = 0; i < full.numel(); ++i) worst = std::max(worst, std::abs(pg.g_attn[i] + pg.g_val[i] - full[i]));
  }
  v.check(worst <= 1e-10, "g_attn + g_val vs full gradient on 50 instances, max abs diff " + num(worst, 3));
  bool zero = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const AttentionParams p = random_attention(1, 5, 3, 3, 9300 + s);
    const PathGradients pg = gradient_path_decomposition(randn({1, 5}, 9400 + s, 2.0), p, 0, randn({1, 3}, 9500 + s));
    for (double g : pg.g_attn.values()) zero = zero && g == 0.0;
  }
  v.check(zero, "n = 1 gives g_attn exactly zero (20 instances)");
  return v;
}

// ---------------------------------------------------------------- 5, 6

struct ToyRun {
  ViTModel model;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  double train_accuracy = 0.0;
};

ToyRun train_default_toy() {
  const RunConfig rc = parse_run_config("train", IniConfig{}, 0);
  DatasetSpec spec;
  spec.num_classes = rc.model.num_classes;
  spec.channels = rc.model.channels;
  spec.image_size = rc.model.image_size;
  spec.samples_per_class = rc.data.samples_per_class;
  spec.noise = rc.data.noise;
  const SyntheticDataset train = generate_synthetic_dataset(spec, rc.seed, 0);
  TrainResult tr = train_toy(rc.model, train, rc.train);
  const SyntheticDataset test = detail::test_split(rc.model, rc.seed, rc.data);
  ToyRun out{std::move(tr.model), {}, {}, tr.train_accuracy};
  const std::size_t n = std::min<std::size_t>(64, test.size());
  out.images.assign(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(n));
  out.labels.assign(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

AttackConfig toy_attack(const ViTModel& model, bool ce, bool kq, bool kq_star, std::uint64_t seed) {
  AttackConfig a;  // N = 250, alpha0 = 8/255, beta = 0.9
  a.loss.ce = ce;
  a.loss.kq = kq;
  a.loss.kq_star = kq_star;
  a.loss.target_key = token_index(model.config, 0, 0);
  a.seed = seed;
  return a;
}

double mean_of(const RobustnessReport& r, bool attacked) {
  double s = 0.0;
  for (const ImageRecord& rec : r.records) s += attacked ? rec.attn_attacked : rec.attn_clean;
  return s / static_cast<double>(r.records.size());
}

struct ToyResults {
  Verdict five, six;
  ToyRun toy;
};

ToyResults toy_attack_checks(std::size_t threads) {
  ToyResults out;
  Verdict& v = out.five;
  out.toy = train_default_toy();
  const ToyRun& toy = out.toy;
  v.check(toy.train_accuracy >= 0.95, "default toy ViT train accuracy " + num(toy.train_accuracy, 4) + " (>= 0.95)");
  v.check(toy.images.size() == 64, std::to_string(toy.images.size()) + " test images");
  const PatchPlacement pl{0, 0, toy.model.config.patch_size, toy.model.config.patch_size};

  std::vector<double> robust_ce, robust_star;
  bool attention_rose = true;
  std::string attn_line;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RobustnessReport ce = evaluate_robust_accuracy(toy.model, toy.images, toy.labels, pl, toy_attack(toy.model, true, false, false, seed), threads);
    const RobustnessReport st = evaluate_robust_accuracy(toy.model, toy.images, toy.labels, pl, toy_attack(toy.model, true, false, true, seed), threads);
    robust_ce.push_back(ce.robust_accuracy);
    robust_star.push_back(st.robust_accuracy);
    const double before = mean_of(st, false), after = mean_of(st, true);
    attention_rose = attention_rose && after > before;
    v.info("seed " + std::to_string(seed) + ": clean " + num(ce.clean_accuracy, 4) + ", robust {ce} " + num(ce.robust_accuracy, 4) +
           ", robust {ce,kq_star} " + num(st.robust_accuracy, 4) + ", attention to i* " + num(before, 4) + " -> " + num(after, 4));
  }
  const double mce = median(robust_ce), mst = median(robust_star);
  v.check(mst <= mce + 0.02, "(a) median robust accuracy {ce,kq_star} " + num(mst, 4) + " <= {ce} " + num(mce, 4) + " + 0.02");
  v.check(attention_rose, "(b) mean final-layer attention to i* rises under {ce,kq_star} for every seed");

  // {kq} alone, reused for key replacement.
  const RobustnessReport kq = evaluate_robust_accuracy(toy.model, toy.images, toy.labels, pl, toy_attack(toy.model, false, true, false, 0), threads);
  const double kb = mean_of(kq, false), ka = mean_of(kq, true);
  v.check(ka > kb, "(b) mean final-layer attention to i* rises under {kq}: " + num(kb, 4) + " -> " + num(ka, 4));

  Verdict& w = out.six;
  std::size_t raised = 0, raised_lowered = 0, flipped = 0, flipped_lowered = 0;
  for (std::size_t i = 0; i < kq.records.size(); ++i) {
    const ImageRecord& r = kq.records[i];
    const bool rose = r.attn_attacked > r.attn_clean;
    if (!rose && !r.success) continue;
    const KeyReplacementRecord k = key_replacement_ablation(toy.model, toy.images[i], r.patch);
    if (rose) {
      ++raised;
      raised_lowered += k.attn_replaced < k.attn_adv;
    }
    if (r.success) {
      ++flipped;
      flipped_lowered += k.attn_replaced < k.attn_adv;
    }
  }
  w.info("{kq} attack: attention to i* raised on " + std::to_string(raised) + " of " + std::to_string(kq.records.size()) +
         " images, prediction flipped on " + std::to_string(flipped));
  w.check(raised > 0 && 2 * raised_lowered > raised, "attn_replaced < attn_adv on " + std::to_string(raised_lowered) + " of " +
                                                          std::to_string(raised) + " images where the attack raised attention to i*");
  if (flipped > 0) {
    w.info("misclassified subset: attn_replaced < attn_adv on " + std::to_string(flipped_lowered) + " of " + std::to_string(flipped));
  }
  return out;
}

// ---------------------------------------------------------------- 7

HeadTrace head_from(Var p_q, Var p_k) {
  Var logits = scale(matmul(p_q, transpose(p_k)), 1.0 / std::sqrt(static_cast<double>(p_q.shape()[1])));
  return HeadTrace{p_q, p_k, logits, softmax_lastdim(logits)};
}

Verdict loss_algebra(const ToyRun& toy) {
  Verdict v;
  {
    Rng rng = make_rng(42, "smax-vectors");
    std::uniform_int_distribution<std::size_t> len(1, 16);
    std::uniform_real_distribution<double> spread(0.01, 50.0);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < 10000; ++i) {
      Tape tape;
      const std::size_t n = len(rng);
      std::normal_distribution<double> gauss(0.0, spread(rng));
      std::vector<Var> xs;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        const double x = gauss(rng);
        mx = std::max(mx, x);
        xs.push_back(tape.constant(Tensor::scalar(x)));
      }
      const double s = aggregate(xs, Aggregation::smax).value().item();
      bad += !(mx <= s && s <= mx + std::log(static_cast<double>(n)));
    }
    v.check(bad == 0, "max <= smax <= max + log(len) on 10^4 random vectors (" + std::to_string(bad) + " violations)");
  }
  {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
      Tape tape;
      const std::size_t rows = 1 + s % 20, cols = 1 + s % 7;
      const Tensor p = l12_normalize(tape.constant(randn({rows, cols}, 20000 + s, 0.01 + static_cast<double>(s % 13)))).value();
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sq += p.at(r, c) * p.at(r, c);
        total += std::sqrt(sq);
      }
      worst = std::max(worst, std::abs(total / static_cast<double>(rows) - 1.0));
    }
    v.check(worst <= 1e-12, "l12-normalized projections have mean row norm 1, worst deviation " + num(worst, 3) + " (1000 matrices)");
  }
  {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 200; ++s) {
      Tape tape;
      AttentionTrace a, b;
      Rng rng = make_rng(s, "scale");
      std::uniform_real_distribution<double> logc(-3.0, 3.0);
      for (std::size_t l = 0; l < 3; ++l) {
        LayerTrace la, lb;
        for (std::size_t h = 0; h < 2; ++h) {
          const Tensor q = randn({6, 4}, 30000 + s * 10 + l * 2 + h), k = randn({6, 4}, 31000 + s * 10 + l * 2 + h);
          la.push_back(head_from(tape.constant(q), tape.constant(k)));
          Tensor q2 = q, k2 = k;
          const double cq = std::pow(10.0, logc(rng)), ck = std::pow(10.0, logc(rng));
          for (double& x : q2.values()) x *= cq;
          for (double& x : k2.values()) x *= ck;
          lb.push_back(head_from(tape.constant(q2), tape.constant(k2)));
        }
        a.push_back(la);
        b.push_back(lb);
      }
      LossConfig cfg;
      cfg.ce = false;
      cfg.target_key = 1 + s % 5;
      cfg.target_query = s % 6;
      for (Aggregation agg : {Aggregation::smax, Aggregation::mean, Aggregation::max}) {
        cfg.head_aggregation = cfg.layer_aggregation = agg;
        worst = std::max(worst, std::abs(loss_kq(a, cfg).value().item() - loss_kq(b, cfg).value().item()));
        worst = std::max(worst, std::abs(loss_kq_star(a, cfg).value().item() - loss_kq_star(b, cfg).value().item()));
      }
    }
    v.check(worst <= 1e-10, "normalized kq / kq_star invariant to positive per-head scaling, max diff " + num(worst, 3));
  }
  {
    const PatchPlacement pl{0, 0, toy.model.config.patch_size, toy.model.config.patch_size};
    bool identical = true;
    for (std::size_t i = 0; i < 4; ++i) {
      AttackConfig with = toy_attack(toy.model, true, false, true, 3);
      with.momentum = 0.0;
      AttackConfig without = with;
      without.use_momentum = false;
      const AttackResult a = pgd_attack(toy.model, toy.images[i], toy.labels[i], pl, with, i);
      const AttackResult b = pgd_attack(toy.model, toy.images[i], toy.labels[i], pl, without, i);
      identical = identical && a.patch.pixels == b.patch.pixels && a.final_loss.total == b.final_loss.total;
      for (std::size_t t = 0; t < a.history.size(); ++t) identical = identical && a.history[t].total == b.history[t].total;
    }
    v.check(identical, "beta = 0 momentum run equals the memoryless run bit-exactly (4 images, N = 250)");
  }
  return v;
}

// ---------------------------------------------------------------- 8

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool same_outputs(const fs::path& a, const fs::path& b) {
  const std::string manifest = slurp(a / OutputBundle::kManifestName);
  if (manifest.empty() || manifest != slurp(b / OutputBundle::kManifestName)) return false;
  for (const auto& e : fs::directory_iterator(a)) {
    if (slurp(e.path()) != slurp(b / e.path().filename())) return false;
  }
  return true;
}

Verdict determinism_check(std::size_t threads) {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "attnfool_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  auto cfg = [&](const std::string& name, const std::string& text) {
    const fs::path p = root / (name + ".ini");
    std::ofstream(p) << text;
    return p.string();
  };
  const std::string model =
      "[global]\nseed = 11\n[model]\nimage_size = 8\nd_model = 16\ndepth = 2\nheads = 2\nmlp_hidden = 32\nnum_classes = 2\n"
      "[data]\nsamples_per_class = 16\ntest_samples_per_class = 8\n[train]\nepochs = 3\n";
  const std::string ck = (root / "train_a" / "checkpoint.json").string();
  const std::string init = (root / "train_a" / "init_checkpoint.json").string();
  const std::vector<std::pair<std::string, std::string>> runs = {
      {"train", cfg("train", model)},
      {"attack", cfg("attack", "[global]\nseed = 11\n[data]\ntest_samples_per_class = 8\n[attack]\ncheckpoint = " + ck +
                                   "\nimages = 8\niterations = 40\n[loss]\nterms = ce, kq_star\n")},
      {"controlled", cfg("controlled", "[global]\nseed = 11\n[controlled]\nmus = 0.5, 1\nws = 1, 2\nd_ks = 16, 64\nn = 32\nseeds = 3\n")},
      {"diagnose", cfg("diagnose", "[global]\nseed = 11\n[data]\ntest_samples_per_class = 8\n[attack]\niterations = 40\n[diagnose]\ncheckpoint = " +
                                       ck + "\ninit_checkpoint = " + init + "\ncompare_init = true\nimages = 4\nattack_images = 4\n")}};
  for (const auto& [command, path] : runs) {
    int codes[2];
    for (int k = 0; k < 2; ++k) {
      CommonOptions o;
      o.config_path = path;
      o.out_dir = (root / (command + (k ? "_b" : "_a"))).string();
      o.threads = threads;
      std::ostringstream log, err;
      codes[k] = run_command(command, o, log, err);
      if (codes[k] != 0) v.info(command + ": " + err.str());
    }
    const fs::path a = root / (command + "_a"), b = root / (command + "_b");
    const bool ok = codes[0] == 0 && codes[1] == 0 && same_outputs(a, b);
    std::size_t files = 0;
    if (fs::exists(a)) files = static_cast<std::size_t>(std::distance(fs::directory_iterator(a), fs::directory_iterator{}));
    v.check(ok, command + ": re-run byte-identical (" + std::to_string(files) + " files, manifest compared)");
  }
  fs::remove_all(root);
  return v;
}

// ---------------------------------------------------------------- 9

Verdict schedule_check(const ToyRun& toy) {
  Verdict v;
  bool ends = true;
  for (double a0 : {8.0 / 255.0, 0.1, 1.0, 0.0}) {
    for (std::size_t n : {2u, 10u, 250u, 1000u}) {
      ends = ends && cosine_step(a0, 0, n) == a0 && cosine_step(a0, n, n) == 0.0 && cosine_step(a0, n / 2, n) == a0 / 2.0;
    }
  }
  v.check(ends, "cosine_step: t = 0 -> alpha0, t = N -> 0, t = N/2 -> alpha0/2 exactly");

  const PatchPlacement pl{4, 8, 4, 4};
  bool feasible = true, local = true;
  std::size_t iterates = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    AttackConfig cfg = toy_attack(toy.model, true, true, false, 5);
    cfg.loss.target_key = token_for_pixel(toy.model.config, pl.row, pl.col);
    const AttackResult r = pgd_attack(toy.model, toy.images[i], toy.labels[i], pl, cfg, i, [&](std::size_t, const Tensor& p) {
      ++iterates;
      for (double x : p.values()) feasible = feasible && x >= 0.0 && x <= 1.0;
    });
    const Tensor& clean = toy.images[i];
    const Tensor adv = apply_patch(clean, r.patch);
    for (std::size_t c = 0; c < clean.dim(0); ++c)
      for (std::size_t y = 0; y < clean.dim(1); ++y)
        for (std::size_t x = 0; x < clean.dim(2); ++x) {
          const bool inside = y >= pl.row && y < pl.row + pl.height && x >= pl.col && x < pl.col + pl.width;
          const std::size_t idx = (c * clean.dim(1) + y) * clean.dim(2) + x;
          if (!inside) local = local && adv[idx] == clean[idx];
          else local = local && adv[idx] == r.patch.pixels[(c * pl.height + (y - pl.row)) * pl.width + (x - pl.col)];
        }
  }
  v.check(feasible, "every PGD iterate within [0,1] (" + std::to_string(iterates) + " iterates over 4 images)");
  v.check(local, "attacked image differs from clean only inside the patch box");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t threads = 1;
  if (argc > 1) threads = std::max<std::size_t>(1, std::stoul(argv[1]));
  bool all = true;
  auto report = [&](int id, const std::string& title, const Verdict& v, double seconds) {
    all = all && v.pass;
    std::cout << "CRITERION " << id << " " << (v.pass ? "PASS" : "FAIL") << ": " << title << " [" << num(seconds, 3) << " s]\n";
    for (const std::string& n : v.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  };
  using clock = std::chrono::steady_clock;
  auto timed = [](auto&& f) {
    const auto t0 = clock::now();
    auto r = f();
    return std::pair{std::move(r), std::chrono::duration<double>(clock::now() - t0).count()};
  };

  {
    auto [v, s] = timed(gradient_suite);
    report(1, "autodiff gradients match central differences", v, s);
  }
  {
    auto [v, s] = timed(controlled_sweep_check);
    report(2, "controlled-setting epsilon* monotone on the default grid", v, s);
  }
  {
    auto [v, s] = timed(silhouette_check);
    report(3, "silhouette increases with the input mean", v, s);
  }
  {
    auto [v, s] = timed(decomposition_check);
    report(4, "gradient path decomposition is exact", v, s);
  }
  auto [toy, s5] = timed([&] { return toy_attack_checks(threads); });
  report(5, "toy attack efficacy", toy.five, s5);
  report(6, "key replacement lowers adversarial attention", toy.six, 0.0);
  {
    auto [v, s] = timed([&] { return loss_algebra(toy.toy); });
    report(7, "loss algebra", v, s);
  }
  {
    auto [v, s] = timed([&] { return determinism_check(threads); });
    report(8, "CLI determinism", v, s);
  }
  {
    auto [v, s] = timed([&] { return schedule_check(toy.toy); });
    report(9, "schedule and update correctness", v, s);
  }
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << "\n";
  return all ? 0 : 1;
}
