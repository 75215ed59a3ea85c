#include "setcon/config.hpp"

#include <fstream>
#include <set>

#include "setcon/errors.hpp"

namespace setcon {

using nlohmann::json;

std::string to_string(DatasetKind d) { return d == DatasetKind::gridworld ? "gridworld" : "balls"; }
std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::setcon: return "setcon";
    case LossKind::slotwise: return "slotwise";
    case LossKind::reconstruction: return "reconstruction";
  }
  return "?";
}
std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

namespace {

class Reader {
 public:
  Reader(const json& j, std::string prefix, std::set<std::string> known) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
    for (const auto& [key, _] : j_.items())
      if (!known.count(key)) throw ConfigError(path(key), "unknown key");
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& section(const std::string& key) const {
    static const json empty = json::object();
    return has(key) ? j_.at(key) : empty;
  }

  void get(const std::string& key, std::size_t& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned())
      throw ConfigError(path(key), "expected a non-negative integer, got " + v.dump());
    out = v.get<std::size_t>();
  }
  void get(const std::string& key, double& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(path(key), "expected a number, got " + v.dump());
    out = v.get<double>();
  }
  void get(const std::string& key, std::string& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(path(key), "expected a string, got " + v.dump());
    out = v.get<std::string>();
  }
  template <typename E>
  void get_enum(const std::string& key, E& out, std::initializer_list<E> values) const {
    if (!has(key)) return;
    std::string s;
    get(key, s);
    std::string allowed;
    for (E e : values) {
      if (to_string(e) == s) {
        out = e;
        return;
      }
      allowed += (allowed.empty() ? "" : ", ") + to_string(e);
    }
    throw ConfigError(path(key), "expected one of {" + allowed + "}, got \"" + s + "\"");
  }

 private:
  const json& j_;
  std::string prefix_;
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(data.num_colors >= 1, "data.num_colors", "must be at least 1");
  require(data.num_objects >= 1, "data.num_objects", "must be at least 1");
  if (data.dataset == DatasetKind::gridworld) {
    require(data.num_objects <= data::kGridStates, "data.num_objects", "GridWorld holds at most 100 objects");
  } else {
    require(data.resolution >= 2, "data.resolution", "must be at least 2");
    require(data.eval_sequences >= 1, "data.eval_sequences", "must be at least 1");
    require(data.num_sequences > data.eval_sequences, "data.num_sequences",
            "must exceed data.eval_sequences so the training split is non-empty");
  }
  require(model.num_slots >= 1, "model.num_slots", "must be at least 1");
  require(model.slot_dim >= 1, "model.slot_dim", "must be at least 1");
  require(model.enc_dim >= 1, "model.enc_dim", "must be at least 1");
  require(model.hidden >= 1, "model.hidden", "must be at least 1");
  require(model.attention_iterations == 1 || model.attention_iterations == 3, "model.attention_iterations",
          "must be 1 or 3");
  require(model.decoder_filters >= 1, "model.decoder_filters", "must be at least 1");
  require(loss.tau > 0, "loss.tau", "must be positive");
  require(train.lr > 0, "train.lr", "must be positive");
  require(train.batch_size >= 1, "train.batch_size", "must be at least 1");
  require(train.steps >= 1, "train.steps", "must be at least 1");
  require(train.weight_decay >= 0, "train.weight_decay", "must be non-negative");
  require(train.log_every >= 1, "train.log_every", "must be at least 1");
  require(train.checkpoint_every >= 1, "train.checkpoint_every", "must be at least 1");
  require(train.eval_batches >= 1, "train.eval_batches", "must be at least 1");
}

std::size_t ExperimentConfig::frame_size() const {
  return data.dataset == DatasetKind::gridworld ? std::size_t(data::kGridSize) : data.resolution;
}

model::ModelConfig ExperimentConfig::model_config() const {
  model::ModelConfig m;
  m.height = m.width = frame_size();
  m.num_slots = model.num_slots;
  m.slot_dim = model.slot_dim;
  m.enc_dim = model.enc_dim;
  m.hidden = model.hidden;
  m.encoder = model.encoder;
  m.slot_init = model.slot_init;
  m.attention_iterations = model.attention_iterations;
  return m;
}

eval::DecoderConfig ExperimentConfig::decoder_config() const {
  eval::DecoderConfig d;
  d.height = d.width = frame_size();
  d.num_slots = model.num_slots;
  d.slot_dim = model.slot_dim;
  d.filters = model.decoder_filters;
  return d;
}

objectives::ContrastiveOptions ExperimentConfig::contrastive_options() const {
  return {loss.tau, loss.denominator_mode};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader root(j, "", {"seed", "precision", "data", "model", "loss", "train"});
  root.get("seed", c.seed);
  root.get_enum("precision", c.precision, {Precision::f32, Precision::f64});

  Reader d(root.section("data"), "data",
           {"dataset", "num_colors", "num_objects", "path", "num_sequences", "eval_sequences", "resolution"});
  d.get_enum("dataset", c.data.dataset, {DatasetKind::gridworld, DatasetKind::balls});
  if (c.data.dataset == DatasetKind::balls) {
    // Bouncing Balls defaults differ from GridWorld's; explicit keys still win below.
    c.model.decoder_filters = 32;
    c.train.batch_size = 32;
    c.train.steps = 10000;
  }
  d.get("num_colors", c.data.num_colors);
  d.get("num_objects", c.data.num_objects);
  d.get("path", c.data.path);
  d.get("num_sequences", c.data.num_sequences);
  d.get("eval_sequences", c.data.eval_sequences);
  d.get("resolution", c.data.resolution);

  Reader m(root.section("model"), "model",
           {"encoder", "num_slots", "slot_dim", "enc_dim", "hidden", "slot_init", "attention_iterations",
            "decoder_filters"});
  m.get_enum("encoder", c.model.encoder, {model::Encoder::slot_attention, model::Encoder::fm_mlp});
  m.get("num_slots", c.model.num_slots);
  m.get("slot_dim", c.model.slot_dim);
  m.get("enc_dim", c.model.enc_dim);
  m.get("hidden", c.model.hidden);
  m.get_enum("slot_init", c.model.slot_init, {model::SlotInit::learned, model::SlotInit::random});
  m.get("attention_iterations", c.model.attention_iterations);
  m.get("decoder_filters", c.model.decoder_filters);

  Reader l(root.section("loss"), "loss", {"kind", "tau", "denominator_mode"});
  l.get_enum("kind", c.loss.kind, {LossKind::setcon, LossKind::slotwise, LossKind::reconstruction});
  l.get("tau", c.loss.tau);
  l.get_enum("denominator_mode", c.loss.denominator_mode,
             {objectives::DenominatorMode::literal, objectives::DenominatorMode::exclude_self});

  Reader t(root.section("train"), "train",
           {"lr", "batch_size", "steps", "weight_decay", "log_every", "checkpoint_every", "eval_batches"});
  t.get("lr", c.train.lr);
  t.get("batch_size", c.train.batch_size);
  t.get("steps", c.train.steps);
  t.get("weight_decay", c.train.weight_decay);
  t.get("log_every", c.train.log_every);
  t.get("checkpoint_every", c.train.checkpoint_every);
  t.get("eval_batches", c.train.eval_batches);

  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  return {
      {"seed", c.seed},
      {"precision", to_string(c.precision)},
      {"data",
       {{"dataset", to_string(c.data.dataset)},
        {"num_colors", c.data.num_colors},
        {"num_objects", c.data.num_objects},
        {"path", c.data.path},
        {"num_sequences", c.data.num_sequences},
        {"eval_sequences", c.data.eval_sequences},
        {"resolution", c.data.resolution}}},
      {"model",
       {{"encoder", model::to_string(c.model.encoder)},
        {"num_slots", c.model.num_slots},
        {"slot_dim", c.model.slot_dim},
        {"enc_dim", c.model.enc_dim},
        {"hidden", c.model.hidden},
        {"slot_init", model::to_string(c.model.slot_init)},
        {"attention_iterations", c.model.attention_iterations},
        {"decoder_filters", c.model.decoder_filters}}},
      {"loss",
       {{"kind", to_string(c.loss.kind)},
        {"tau", c.loss.tau},
        {"denominator_mode", objectives::to_string(c.loss.denominator_mode)}}},
      {"train",
       {{"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"steps", c.train.steps},
        {"weight_decay", c.train.weight_decay},
        {"log_every", c.train.log_every},
        {"checkpoint_every", c.train.checkpoint_every},
        {"eval_batches", c.train.eval_batches}}},
  };
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t begin = 0;
  while (true) {
    const auto dot = key.find('.', begin);
    const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (part.empty()) throw ConfigError(key, "empty key component");
    if (!node->is_object()) throw ConfigError(key, "parent is not a section");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    begin = dot + 1;
  }
}

ExperimentConfig default_config(DatasetKind dataset) {
  return config_from_json({{"data", {{"dataset", to_string(dataset)}}}});
}

}  // namespace setcon
