#include "setcon/gradient_gate.hpp"

#include <functional>
#include <map>
#include <random>

#include "setcon/datasets.hpp"
#include "setcon/errors.hpp"
#include "setcon/evaluation.hpp"
#include "setcon/model.hpp"
#include "setcon/objectives.hpp"
#include "setcon/rng.hpp"

namespace setcon::gate {

using namespace setcon::ops;
using D = double;

namespace {

struct Draw {
  std::mt19937_64 rng;

  std::size_t dim(std::size_t lo = 1, std::size_t hi = 4) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  Tensor<D> tensor(Shape s, double lo = -1, double hi = 1) {
    Tensor<D> t(std::move(s));
    for (auto& v : t.storage()) v = uniform(lo, hi);
    return t;
  }
  bool coin() { return dim(0, 1) == 1; }
};

// Random projection of an output to a scalar, so every output coordinate
// contributes its own weight to the gradient.
Var<D> readout(Var<D> y, Draw& d) {
  return sum(mul(y, y.tape().constant(d.tensor(y.shape()))));
}

struct Case {
  ParameterTree<D> inputs;
  ScalarTreeFn fn;
};

using Builder = std::function<Case(Draw&)>;

Case unary(Draw& d, std::function<Var<D>(Var<D>)> op, Shape shape, double lo = -1, double hi = 1) {
  Case c;
  c.inputs.add("x", d.tensor(shape, lo, hi), Role::weight);
  const auto seed = d.rng();
  c.fn = [op, seed](Tape<D>&, const BoundParameters<D>& p) {
    Draw r{std::mt19937_64(seed)};
    return readout(op(p["x"]), r);
  };
  return c;
}

// Most builders need a fixed readout: the readout draw must be identical on
// every evaluation, so each closure re-seeds its own generator.
Case binary(Draw& d, std::function<Var<D>(Var<D>, Var<D>)> op, Shape a, Shape b) {
  Case c;
  c.inputs.add("a", d.tensor(a), Role::weight);
  c.inputs.add("b", d.tensor(b), Role::weight);
  const auto seed = d.rng();
  c.fn = [op, seed](Tape<D>&, const BoundParameters<D>& p) {
    Draw r{std::mt19937_64(seed)};
    return readout(op(p["a"], p["b"]), r);
  };
  return c;
}

Shape random_shape(Draw& d, std::size_t rank) {
  Shape s;
  for (std::size_t i = 0; i < rank; ++i) s.push_back(d.dim());
  return s;
}

const std::map<std::string, Builder>& builders() {
  static const std::map<std::string, Builder> table = {
      {"matmul",
       [](Draw& d) {
         const auto r = d.dim(), i = d.dim(), o = d.dim();
         return binary(d, [](Var<D> x, Var<D> w) { return matmul(x, w); }, {r, i}, {i, o});
       }},
      {"linear",
       [](Draw& d) {
         const auto r = d.dim(), i = d.dim(), o = d.dim();
         Case c;
         c.inputs.add("x", d.tensor({r, i}), Role::weight);
         c.inputs.add("w", d.tensor({i, o}), Role::weight);
         c.inputs.add("b", d.tensor({o}), Role::bias);
         const auto seed = d.rng();
         c.fn = [seed](Tape<D>&, const BoundParameters<D>& p) {
           Draw r{std::mt19937_64(seed)};
           return readout(linear(p["x"], p["w"], p["b"]), r);
         };
         return c;
       }},
      {"add", [](Draw& d) { auto s = random_shape(d, d.dim(1, 3)); return binary(d, add<D>, s, s); }},
      {"sub", [](Draw& d) { auto s = random_shape(d, d.dim(1, 3)); return binary(d, sub<D>, s, s); }},
      {"mul", [](Draw& d) { auto s = random_shape(d, d.dim(1, 3)); return binary(d, mul<D>, s, s); }},
      {"affine",
       [](Draw& d) {
         const double a = d.uniform(-2, 2), b = d.uniform(-2, 2);
         return unary(d, [a, b](Var<D> x) { return affine(x, a, b); }, random_shape(d, 2));
       }},
      {"relu", [](Draw& d) { return unary(d, relu<D>, random_shape(d, 2)); }},
      {"sigmoid", [](Draw& d) { return unary(d, sigmoid<D>, random_shape(d, 2), -4, 4); }},
      {"tanh", [](Draw& d) { return unary(d, ops::tanh<D>, random_shape(d, 2), -2, 2); }},
      {"softmax",
       [](Draw& d) {
         const std::size_t axis = d.dim(0, 2);
         return unary(d, [axis](Var<D> x) { return softmax(x, axis); }, random_shape(d, 3), -3, 3);
       }},
      {"normalize_sum",
       [](Draw& d) {
         const std::size_t axis = d.dim(0, 2);
         return unary(d, [axis](Var<D> x) { return normalize_sum(x, axis); }, random_shape(d, 3), 0.2, 1.5);
       }},
      {"layer_norm",
       [](Draw& d) {
         const auto r = d.dim(), w = d.dim(2, 6);
         Case c;
         c.inputs.add("x", d.tensor({r, w}), Role::weight);
         c.inputs.add("gain", d.tensor({w}, 0.5, 1.5), Role::gain);
         c.inputs.add("offset", d.tensor({w}), Role::offset);
         const auto seed = d.rng();
         c.fn = [seed](Tape<D>&, const BoundParameters<D>& p) {
           Draw r{std::mt19937_64(seed)};
           return readout(layer_norm(p["x"], p["gain"], p["offset"]), r);
         };
         return c;
       }},
      {"bmm",
       [](Draw& d) {
         const auto g = d.dim(1, 3), n = d.dim(), k = d.dim(), m = d.dim();
         const bool ta = d.coin(), tb = d.coin(), shared = d.coin();
         const Shape a = ta ? Shape{g, k, n} : Shape{g, n, k};
         const Shape b = tb ? Shape{shared ? 1 : g, m, k} : Shape{shared ? 1 : g, k, m};
         return binary(d, [ta, tb](Var<D> x, Var<D> y) { return bmm(x, y, ta, tb); }, a, b);
       }},
      {"transpose_last2", [](Draw& d) { return unary(d, transpose_last2<D>, random_shape(d, 3)); }},
      {"reshape",
       [](Draw& d) {
         const auto a = d.dim(), b = d.dim(), c = d.dim();
         return unary(d, [a, b, c](Var<D> x) { return reshape(x, Shape{a * b, c}); }, {a, b, c});
       }},
      {"concat",
       [](Draw& d) {
         const auto r = d.dim();
         return binary(d, [](Var<D> x, Var<D> y) { return concat<D>({x, y, x}); }, {r, d.dim()}, {r, d.dim()});
       }},
      {"concat_rows",
       [](Draw& d) {
         const auto c = d.dim();
         return binary(d, [](Var<D> x, Var<D> y) { return concat_rows<D>({y, x}); }, {d.dim(), c}, {d.dim(), c});
       }},
      {"slice",
       [](Draw& d) {
         const auto w = d.dim(2, 6);
         const auto begin = d.dim(0, w - 1);
         const auto end = d.dim(begin + 1, w);
         return unary(d, [begin, end](Var<D> x) { return slice(x, begin, end); }, {d.dim(), w});
       }},
      {"gather_rows",
       [](Draw& d) {
         const auto rows = d.dim();
         std::vector<std::size_t> idx(d.dim(1, 6));
         for (auto& i : idx) i = d.dim(0, rows - 1);
         return unary(d, [idx](Var<D> x) { return gather_rows(x, idx); }, {rows, d.dim()});
       }},
      {"group_sum",
       [](Draw& d) {
         const auto g = d.dim();
         return unary(d, [g](Var<D> x) { return group_sum(x, g); }, {g * d.dim(), d.dim()});
       }},
      {"tile_add",
       [](Draw& d) {
         const auto n = d.dim(), c = d.dim();
         return binary(d, tile_add<D>, {n * d.dim(), c}, {n, c});
       }},
      {"broadcast_add",
       [](Draw& d) {
         const auto c = d.dim();
         return binary(d, broadcast_add<D>, {d.dim(), c}, {d.dim(), c});
       }},
      {"composite",
       [](Draw& d) {
         const auto r = d.dim(1, 2), k = d.dim(), n = d.dim(), ch = d.dim(1, 3);
         Case c;
         c.inputs.add("alpha", d.tensor({r, k, n}, 0, 1), Role::weight);
         c.inputs.add("rgb", d.tensor({r, k, n, ch}), Role::weight);
         const auto seed = d.rng();
         c.fn = [seed](Tape<D>&, const BoundParameters<D>& p) {
           Draw rr{std::mt19937_64(seed)};
           return readout(composite(p["alpha"], p["rgb"]), rr);
         };
         return c;
       }},
      {"sum", [](Draw& d) { return unary(d, sum<D>, random_shape(d, 2)); }},
      {"mse",
       [](Draw& d) {
         auto s = random_shape(d, 2);
         auto target = d.tensor(s);
         return unary(d, [target](Var<D> x) { return mse(x, target); }, s);
       }},
      {"info_nce",
       [](Draw& d) {
         const auto a = d.dim(1, 4), m = d.dim(2, 6), dim = d.dim(1, 4);
         std::vector<std::size_t> positive(a);
         std::vector<long> excluded(a, -1);
         for (std::size_t i = 0; i < a; ++i) {
           positive[i] = d.dim(0, m - 1);
           if (d.coin()) excluded[i] = long((positive[i] + d.dim(1, m - 1)) % m);
         }
         const double tau = d.uniform(0.3, 1.0);
         return binary(
             d, [=](Var<D> x, Var<D> y) { return info_nce(x, y, positive, excluded, tau); }, {a, dim}, {m, dim});
       }},
  };
  return table;
}

// Micro-batch: 2 GridWorld sequences cut to 3 frames.
Tensor<D> micro_frames(std::uint64_t seed) {
  constexpr std::size_t B = 2, L = 3, S = data::kGridSize;
  Tensor<D> frames(Shape{B, L, S, S, 3});
  for (std::size_t b = 0; b < B; ++b) {
    const auto seq = data::gridworld_sequence(derive_seed(seed, "gate-data", b));
    const auto src = seq.frames.data();
    std::copy_n(src.begin(), L * S * S * 3, frames.ptr() + b * L * S * S * 3);
  }
  return frames;
}

struct ObjectiveSetup {
  model::ModelConfig model;
  std::string loss;
  objectives::ContrastiveOptions options;
  bool decoder = false;
  bool decoder_only = false;
};

ObjectiveSetup objective_setup(const std::string& name) {
  ObjectiveSetup s;
  if (name == "setcon") {
    s.loss = "setcon";
  } else if (name == "setcon_exclude_self") {
    s.loss = "setcon";
    s.options.denominator = objectives::DenominatorMode::exclude_self;
  } else if (name == "slotwise") {
    s.loss = "slotwise";
  } else if (name == "reconstruction") {
    s.loss = "reconstruction";
    s.decoder = true;
  } else if (name == "setcon_fm_mlp") {
    s.loss = "setcon";
    s.model.encoder = model::Encoder::fm_mlp;
  } else if (name == "setcon_random_init_3_iterations") {
    s.loss = "setcon";
    s.model.slot_init = model::SlotInit::random;
    s.model.attention_iterations = 3;
  } else if (name == "decoder_probe") {
    s.loss = "reconstruction";
    s.decoder = true;
    s.decoder_only = true;
  } else {
    throw ArgumentError("unknown objective check: " + name);
  }
  return s;
}

}  // namespace

std::vector<std::string> primitive_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : builders()) names.push_back(name);
  return names;
}

std::vector<std::string> objective_names() {
  return {"setcon",         "setcon_exclude_self", "slotwise", "reconstruction", "setcon_fm_mlp",
          "setcon_random_init_3_iterations", "decoder_probe"};
}

GradCheckResult check_primitive(const std::string& name, std::uint64_t seed) {
  const auto it = builders().find(name);
  if (it == builders().end()) throw ArgumentError("unknown primitive check: " + name);
  Draw d{make_rng(seed, name)};
  auto c = it->second(d);
  return grad_check(c.fn, c.inputs);
}

GradCheckResult check_objective(const std::string& name, std::uint64_t seed, double eps) {
  const auto setup = objective_setup(name);
  const auto frames = micro_frames(seed);
  const std::size_t B = frames.dim(0), L = frames.dim(1);
  const auto mc = setup.model;
  eval::DecoderConfig dc;
  dc.height = mc.height;
  dc.width = mc.width;
  dc.num_slots = mc.num_slots;
  dc.slot_dim = mc.slot_dim;

  const auto model_params = model::init_model<D>(mc, derive_seed(seed, "gate-init", 0));
  const auto decoder_params = eval::init_decoder<D>(dc, derive_seed(seed, "gate-init", 1));
  ParameterTree<D> theta;
  if (!setup.decoder_only)
    for (const auto& [n, p] : model_params) theta.add(n, p.value, p.role);
  if (setup.decoder)
    for (const auto& [n, p] : decoder_params) theta.add(n, p.value, p.role);

  const std::uint64_t noise_seed = derive_seed(seed, "gate-noise", 0);
  ScalarTreeFn fn = [=](Tape<D>& tape, const BoundParameters<D>& p) {
    // The decoder-only case reads the model as constants; the slots it sees
    // carry no gradient path to the encoder.
    std::optional<BoundParameters<D>> frozen;
    if (setup.decoder_only) frozen.emplace(tape, model_params, false);
    const auto& mp = setup.decoder_only ? *frozen : p;
    std::mt19937_64 noise(noise_seed);
    auto out = model::forward_sequence(mp, mc, tape.constant(frames), &noise);
    if (setup.loss == "setcon") return objectives::setcon_loss(out.set_slots, out.set_predictions, B, L, setup.options);
    if (setup.loss == "slotwise")
      return objectives::slotwise_loss(out.slots, out.predictions, B, L, mc.num_slots, setup.options);
    auto slots = setup.decoder_only ? tape.constant(out.slots.value()) : out.slots;
    auto preds = setup.decoder_only ? tape.constant(out.predictions.value()) : out.predictions;
    auto ds = eval::broadcast_decode(p, dc, slots);
    auto dp = eval::broadcast_decode(p, dc, preds);
    return objectives::reconstruction_loss(ds.composite, dp.composite, frames);
  };
  return grad_check(fn, theta, eps, setup.decoder_only ? 1 : 7);
}

std::vector<GateCase> run_gradient_gate(const GateOptions& o) {
  std::vector<GateCase> out;
  for (const auto& name : primitive_names()) {
    GateCase worst{name, {}, true};
    for (std::size_t trial = 0; trial < o.trials; ++trial) {
      const auto r = check_primitive(name, derive_seed(o.seed, "gate-trial", trial));
      if (trial == 0 || r.max_rel_error > worst.result.max_rel_error) worst.result = r;
    }
    worst.passed = worst.result.max_rel_error <= o.tolerance;
    out.push_back(worst);
  }
  if (o.objectives)
    for (const auto& name : objective_names()) {
      const auto r = check_objective(name, o.seed);
      out.push_back({name, r, r.max_rel_error <= o.tolerance});
    }
  return out;
}

}  // namespace setcon::gate
