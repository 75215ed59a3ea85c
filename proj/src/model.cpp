#include "setcon/model.hpp"

#include <cmath>

#include "setcon/rng.hpp"

namespace setcon::model {

using namespace setcon::ops;

std::string to_string(Encoder e) { return e == Encoder::slot_attention ? "slot_attention" : "fm_mlp"; }
std::string to_string(SlotInit s) { return s == SlotInit::learned ? "learned" : "random"; }

void ModelConfig::validate() const {
  if (height == 0 || width == 0) throw ArgumentError("model: frame extents must be positive");
  if (num_slots == 0) throw ArgumentError("model: num_slots must be at least 1");
  if (slot_dim == 0 || enc_dim == 0 || hidden == 0) throw ArgumentError("model: widths must be positive");
  if (attention_iterations == 0) throw ArgumentError("model: attention_iterations must be at least 1");
}

namespace {

template <typename T>
void add_linear(ParameterTree<T>& tree, const std::string& prefix, std::size_t in, std::size_t out,
                std::mt19937_64& rng, const char* w = "w", const char* b = "b") {
  tree.add(prefix + "." + w, init_weight<T>(in, out, rng), Role::weight);
  tree.add(prefix + "." + b, Tensor<T>(Shape{out}, T(0)), Role::bias);
}

template <typename T>
void add_mlp(ParameterTree<T>& tree, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t out, std::mt19937_64& rng) {
  add_linear(tree, prefix, in, hidden, rng, "w1", "b1");
  add_linear(tree, prefix, hidden, out, rng, "w2", "b2");
}

template <typename T>
void add_norm(ParameterTree<T>& tree, const std::string& prefix, std::size_t width) {
  tree.add(prefix + ".gain", Tensor<T>(Shape{width}, T(1)), Role::gain);
  tree.add(prefix + ".offset", Tensor<T>(Shape{width}, T(0)), Role::offset);
}

template <typename T>
Var<T> norm(const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  return layer_norm(x, p[prefix + ".gain"], p[prefix + ".offset"]);
}

template <typename T>
Var<T> dense(const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  return linear(x, p[prefix + ".w"], p[prefix + ".b"]);
}

std::vector<std::size_t> tiled_rows(std::size_t groups, std::size_t per_group) {
  std::vector<std::size_t> idx(groups * per_group);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < per_group; ++k) idx[g * per_group + k] = k;
  return idx;
}

}  // namespace

template <typename T>
ParameterTree<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  auto rng = make_rng(seed, "init");
  ParameterTree<T> tree;
  const std::size_t E = c.enc_dim, D = c.slot_dim, H = c.hidden, K = c.num_slots;

  add_mlp(tree, "encoder.mlp1", 3, E, E, rng);
  add_linear(tree, "encoder.pos", 2, E, rng);
  add_norm(tree, "encoder.norm", E);
  add_mlp(tree, "encoder.mlp2", E, E, E, rng);

  if (c.encoder == Encoder::slot_attention) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    if (c.slot_init == SlotInit::learned) {
      Tensor<T> init(Shape{K, D});
      for (auto& v : init.storage()) v = static_cast<T>(normal(rng) * scale);
      tree.add("slots.init", std::move(init), Role::slot_init);
    } else {
      Tensor<T> mu(Shape{1, D});
      for (auto& v : mu.storage()) v = static_cast<T>(normal(rng) * scale);
      tree.add("slots.mu", std::move(mu), Role::slot_init);
      tree.add("slots.sigma", Tensor<T>(Shape{1, D}, static_cast<T>(scale)), Role::slot_init);
    }
    add_norm(tree, "slots.norm_inputs", E);
    add_norm(tree, "slots.norm_slots", D);
    add_linear(tree, "slots.key", E, D, rng);
    add_linear(tree, "slots.query", D, D, rng);
    add_linear(tree, "slots.value", E, D, rng);
    for (const char* gate : {"z", "r", "h"}) {
      tree.add(std::string("slots.gru.w") + gate, init_weight<T>(D, D, rng), Role::weight);
      tree.add(std::string("slots.gru.u") + gate, init_weight<T>(D, D, rng), Role::weight);
      tree.add(std::string("slots.gru.b") + gate, Tensor<T>(Shape{D}, T(0)), Role::bias);
    }
    add_norm(tree, "slots.norm_mlp", D);
    add_mlp(tree, "slots.mlp", D, H, D, rng);
  } else {
    add_linear(tree, "fm.linear", E, K, rng);
    add_mlp(tree, "fm.mlp", c.num_pixels(), H, D, rng);
  }

  add_linear(tree, "transition.down", 3 * D, H, rng);
  add_norm(tree, "transition.norm", H);
  add_linear(tree, "transition.up", H, D, rng);

  add_mlp(tree, "set.inner", D, H, H, rng);
  add_norm(tree, "set.norm", H);
  add_mlp(tree, "set.outer", H, H, D, rng);
  return tree;
}

template <typename T>
Tensor<T> position_ramp(std::size_t height, std::size_t width) {
  Tensor<T> ramp(Shape{height * width, 2});
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      ramp.at(r * width + c, 0) = height > 1 ? T(r) / T(height - 1) : T(0);
      ramp.at(r * width + c, 1) = width > 1 ? T(c) / T(width - 1) : T(0);
    }
  return ramp;
}

template <typename T>
Var<T> mlp(const BoundParameters<T>& p, const std::string& prefix, Var<T> x) {
  auto hidden = relu(linear(x, p[prefix + ".w1"], p[prefix + ".b1"]));
  return linear(hidden, p[prefix + ".w2"], p[prefix + ".b2"]);
}

template <typename T>
Var<T> gru_cell(const BoundParameters<T>& p, const std::string& prefix, Var<T> h, Var<T> x) {
  if (h.shape() != x.shape())
    throw DimensionError("gru_cell: state " + shape_string(h.shape()) + " and input " + shape_string(x.shape()) +
                         " differ");
  auto gate = [&](const char* g, Var<T> state) {
    const std::string s(g);
    return add(linear(x, p[prefix + ".w" + s], p[prefix + ".b" + s]), matmul(state, p[prefix + ".u" + s]));
  };
  auto z = sigmoid(gate("z", h));
  auto r = sigmoid(gate("r", h));
  auto candidate = tanh(gate("h", mul(r, h)));
  // (1 - z) * h + z * c  ==  h + z * (c - h)
  return add(h, mul(z, sub(candidate, h)));
}

template <typename T>
Var<T> encode_backbone(const BoundParameters<T>& p, const ModelConfig& c, Var<T> frames) {
  const auto& shape = frames.shape();
  if (shape.size() != 4 || shape[3] != 3)
    throw DimensionError("encode_backbone: expected frames [G,H,W,3], got " + shape_string(shape));
  if (shape[1] != c.height || shape[2] != c.width)
    throw DimensionError("encode_backbone: frame " + shape_string(shape) + " does not match configured " +
                         std::to_string(c.height) + "x" + std::to_string(c.width));
  auto& tape = frames.tape();
  auto pixels = reshape(frames, Shape{shape[0] * c.num_pixels(), 3});
  auto ramp = tape.constant(position_ramp<T>(c.height, c.width));
  auto h1 = tile_add(mlp(p, "encoder.mlp1", pixels), dense(p, "encoder.pos", ramp));
  return mlp(p, "encoder.mlp2", norm(p, "encoder.norm", h1));
}

template <typename T>
Var<T> slot_init(const BoundParameters<T>& p, const ModelConfig& c, std::size_t groups, std::mt19937_64* rng) {
  const std::size_t K = c.num_slots, D = c.slot_dim;
  if (c.slot_init == SlotInit::learned) {
    if (!p.contains("slots.init")) throw StructuralError("slot_init: learned mode needs slots.init");
    return gather_rows(p["slots.init"], tiled_rows(groups, K));
  }
  if (!p.contains("slots.mu") || !p.contains("slots.sigma"))
    throw StructuralError("slot_init: random mode needs slots.mu and slots.sigma");
  if (rng == nullptr) throw ArgumentError("slot_init: random mode needs a noise generator");
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> eps(Shape{groups * K, D});
  for (auto& v : eps.storage()) v = static_cast<T>(normal(*rng));
  const std::vector<std::size_t> zeros(groups * K, 0);
  auto mu = gather_rows(p["slots.mu"], zeros);
  auto sigma = gather_rows(p["slots.sigma"], zeros);
  return add(mu, mul(p["slots.mu"].tape().constant(std::move(eps)), sigma));
}

template <typename T>
SlotResult<T> slot_attention(const BoundParameters<T>& p, const ModelConfig& c, Var<T> features,
                             Var<T> initial_slots, std::size_t iterations) {
  const std::size_t K = c.num_slots, D = c.slot_dim, N = c.num_pixels();
  if (K == 0) throw ArgumentError("slot_attention: need at least one slot");
  if (iterations == 0) throw ArgumentError("slot_attention: need at least one iteration");
  if (features.value().cols() != c.enc_dim || features.value().rows() % N != 0)
    throw DimensionError("slot_attention: features " + shape_string(features.shape()) + " do not match " +
                         std::to_string(N) + " pixels x " + std::to_string(c.enc_dim));
  const std::size_t G = features.value().rows() / N;
  const std::size_t init_rows = initial_slots.value().rows();
  // Initial slots may be given once ([K, D]) and shared by every frame.
  const bool shared = init_rows == K && G != 1;
  if (initial_slots.value().cols() != D || (!shared && init_rows != G * K))
    throw DimensionError("slot_attention: initial slots " + shape_string(initial_slots.shape()) +
                         " do not match " + std::to_string(G) + " frames x " + std::to_string(K) + " slots");

  auto inputs = norm(p, "slots.norm_inputs", features);
  auto keys = reshape(dense(p, "slots.key", inputs), Shape{G, N, D});
  auto values = reshape(dense(p, "slots.value", inputs), Shape{G, N, D});
  const T scale = T(1) / std::sqrt(T(D));

  Var<T> slots = initial_slots;
  Var<T> attention;
  for (std::size_t it = 0; it < iterations; ++it) {
    const bool shared_now = shared && it == 0;
    auto queries = dense(p, "slots.query", norm(p, "slots.norm_slots", slots));
    queries = reshape(queries, Shape{shared_now ? 1 : G, K, D});
    auto logits = affine(bmm(keys, queries, false, true), scale, T(0));  // [G, N, K]
    attention = softmax(logits, 2);
    auto weights = normalize_sum(attention, 1);  // per slot, over pixels
    auto updates = reshape(bmm(weights, values, true, false), Shape{G * K, D});
    auto previous = shared_now ? gather_rows(slots, tiled_rows(G, K)) : slots;
    auto next = gru_cell(p, "slots.gru", previous, updates);
    slots = add(next, mlp(p, "slots.mlp", norm(p, "slots.norm_mlp", next)));
  }
  return {slots, attention};
}

template <typename T>
Var<T> fm_mlp_slots(const BoundParameters<T>& p, const ModelConfig& c, Var<T> features) {
  const std::size_t K = c.num_slots, N = c.num_pixels();
  if (features.value().cols() != c.enc_dim || features.value().rows() % N != 0)
    throw DimensionError("fm_mlp_slots: features " + shape_string(features.shape()) + " do not match " +
                         std::to_string(N) + " pixels x " + std::to_string(c.enc_dim));
  if (p["fm.mlp.w1"].value().dim(0) != N)
    throw DimensionError("fm_mlp_slots: frame has " + std::to_string(N) + " pixels, slot MLP expects " +
                         std::to_string(p["fm.mlp.w1"].value().dim(0)));
  const std::size_t G = features.value().rows() / N;
  auto channels = reshape(dense(p, "fm.linear", features), Shape{G, N, K});
  auto raw = reshape(transpose_last2(channels), Shape{G * K, N});
  return mlp(p, "fm.mlp", raw);
}

template <typename T>
Var<T> transition(const BoundParameters<T>& p, Var<T> slots_t, Var<T> slots_t1) {
  if (slots_t.shape() != slots_t1.shape())
    throw DimensionError("transition: slot sets " + shape_string(slots_t.shape()) + " and " +
                         shape_string(slots_t1.shape()) + " differ");
  auto joined = concat<T>({slots_t, slots_t1, sub(slots_t1, slots_t)});
  auto delta = dense(p, "transition.up", norm(p, "transition.norm", dense(p, "transition.down", joined)));
  return add(slots_t1, delta);
}

template <typename T>
Var<T> set_encode(const BoundParameters<T>& p, std::size_t num_slots, Var<T> slots) {
  if (num_slots == 0) throw ArgumentError("set_encode: need at least one slot");
  auto pooled = group_sum(mlp(p, "set.inner", slots), num_slots);
  return mlp(p, "set.outer", norm(p, "set.norm", pooled));
}

template <typename T>
SlotResult<T> encode_frames(const BoundParameters<T>& p, const ModelConfig& c, Var<T> frames,
                            std::mt19937_64* slot_noise) {
  const std::size_t G = frames.shape().at(0);
  auto features = encode_backbone(p, c, frames);
  if (c.encoder == Encoder::fm_mlp) return {fm_mlp_slots(p, c, features), Var<T>{}};
  auto init = c.slot_init == SlotInit::learned ? p["slots.init"] : slot_init(p, c, G, slot_noise);
  return slot_attention(p, c, features, init, c.attention_iterations);
}

template <typename T>
SequenceOutput<T> forward_sequence(const BoundParameters<T>& p, const ModelConfig& c, Var<T> frames,
                                   std::mt19937_64* slot_noise) {
  const auto& shape = frames.shape();
  if (shape.size() != 5) throw DimensionError("forward_sequence: expected frames [B,T,H,W,3]");
  const std::size_t B = shape[0], T_len = shape[1], K = c.num_slots;
  if (T_len < 3) throw ArgumentError("forward_sequence: need at least 3 frames to form a prediction target");

  SequenceOutput<T> out;
  out.batch = B;
  out.length = T_len;
  auto flat = reshape(frames, Shape{B * T_len, shape[2], shape[3], shape[4]});
  auto encoded = encode_frames(p, c, flat, slot_noise);
  out.slots = encoded.slots;
  if (encoded.attention.valid()) out.attention = encoded.attention;

  const std::size_t P = T_len - 2;
  std::vector<std::size_t> rows_t, rows_t1;
  rows_t.reserve(B * P * K);
  rows_t1.reserve(B * P * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < P; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        rows_t.push_back((b * T_len + t) * K + k);
        rows_t1.push_back((b * T_len + t + 1) * K + k);
      }
  out.predictions = transition(p, gather_rows(out.slots, rows_t), gather_rows(out.slots, rows_t1));
  out.set_slots = set_encode(p, K, out.slots);
  out.set_predictions = set_encode(p, K, out.predictions);
  return out;
}

#define SETCON_INSTANTIATE_MODEL(T)                                                                           \
  template ParameterTree<T> init_model(const ModelConfig&, std::uint64_t);                                    \
  template Tensor<T> position_ramp(std::size_t, std::size_t);                                                 \
  template Var<T> mlp(const BoundParameters<T>&, const std::string&, Var<T>);                                 \
  template Var<T> gru_cell(const BoundParameters<T>&, const std::string&, Var<T>, Var<T>);                    \
  template Var<T> encode_backbone(const BoundParameters<T>&, const ModelConfig&, Var<T>);                     \
  template Var<T> slot_init(const BoundParameters<T>&, const ModelConfig&, std::size_t, std::mt19937_64*);    \
  template SlotResult<T> slot_attention(const BoundParameters<T>&, const ModelConfig&, Var<T>, Var<T>,        \
                                        std::size_t);                                                         \
  template Var<T> fm_mlp_slots(const BoundParameters<T>&, const ModelConfig&, Var<T>);                        \
  template Var<T> transition(const BoundParameters<T>&, Var<T>, Var<T>);                                      \
  template Var<T> set_encode(const BoundParameters<T>&, std::size_t, Var<T>);                                 \
  template SlotResult<T> encode_frames(const BoundParameters<T>&, const ModelConfig&, Var<T>, std::mt19937_64*); \
  template SequenceOutput<T> forward_sequence(const BoundParameters<T>&, const ModelConfig&, Var<T>,          \
                                              std::mt19937_64*);

SETCON_INSTANTIATE_MODEL(float)
SETCON_INSTANTIATE_MODEL(double)

#undef SETCON_INSTANTIATE_MODEL

}  // namespace setcon::model
