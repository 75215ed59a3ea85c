#include "setcon/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace setcon {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

std::string role_name(Role role) {
  switch (role) {
    case Role::weight: return "weight";
    case Role::bias: return "bias";
    case Role::gain: return "gain";
    case Role::offset: return "offset";
    case Role::slot_init: return "slot_init";
  }
  return "weight";
}

Role role_from_name(const std::string& name) {
  if (name == "weight") return Role::weight;
  if (name == "bias") return Role::bias;
  if (name == "gain") return Role::gain;
  if (name == "offset") return Role::offset;
  if (name == "slot_init") return Role::slot_init;
  throw StructuralError("unknown parameter role '" + name + "'");
}

template <typename T>
void ParameterTree<T>::add(const std::string& name, Tensor<T> value, Role role) {
  if (!entries_.emplace(name, Parameter<T>{std::move(value), role}).second)
    throw StructuralError("duplicate parameter '" + name + "'");
}

template <typename T>
Tensor<T>& ParameterTree<T>::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second.value;
}

template <typename T>
const Tensor<T>& ParameterTree<T>::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second.value;
}

template <typename T>
Role ParameterTree<T>::role(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second.role;
}

template <typename T>
std::size_t ParameterTree<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : entries_) n += p.value.size();
  return n;
}

template <typename T>
std::vector<std::string> ParameterTree<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

template <typename T>
ParameterTree<T> ParameterTree<T>::zeros_like() const {
  ParameterTree out;
  for (const auto& [name, p] : entries_) out.add(name, Tensor<T>(p.value.shape(), T(0)), p.role);
  return out;
}

template <typename T>
bool ParameterTree<T>::congruent(const ParameterTree& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [name, p] : entries_) {
    if (it->first != name || it->second.value.shape() != p.value.shape()) return false;
    ++it;
  }
  return true;
}

template <typename T>
void ParameterTree<T>::require_congruent(const ParameterTree& other, const std::string& context) const {
  for (const auto& [name, p] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end()) throw StructuralError(context + ": missing '" + name + "'");
    if (it->second.value.shape() != p.value.shape())
      throw StructuralError(context + ": shape of '" + name + "' is " + shape_string(it->second.value.shape()) +
                            ", expected " + shape_string(p.value.shape()));
  }
  for (const auto& [name, _] : other.entries_)
    if (!entries_.count(name)) throw StructuralError(context + ": unexpected '" + name + "'");
}

template <typename T>
bool ParameterTree<T>::all_finite() const {
  for (const auto& [_, p] : entries_)
    if (!p.value.all_finite()) return false;
  return true;
}

template <typename T>
Tensor<T> init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> w(Shape{fan_in, fan_out});
  for (auto& v : w.storage()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
BoundParameters<T>::BoundParameters(Tape<T>& tape, const ParameterTree<T>& tree, bool trainable)
    : tape_(&tape), tree_(&tree) {
  for (const auto& [name, p] : tree)
    vars_.emplace(name, trainable ? tape.variable(p.value) : tape.constant(p.value));
}

template <typename T>
Var<T> BoundParameters<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw StructuralError("missing parameter '" + name + "'");
  return it->second;
}

template <typename T>
ParameterTree<T> BoundParameters<T>::gradients() const {
  ParameterTree<T> out;
  for (const auto& [name, var] : vars_) out.add(name, tape_->grad(var), tree_->role(name));
  return out;
}

template <>
std::string dtype_name<float>() {
  return "f32";
}
template <>
std::string dtype_name<double>() {
  return "f64";
}

namespace {

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kCheckpointManifest);
  if (!in) throw FormatError("cannot open " + (dir / kCheckpointManifest).string(), 0);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what(), e.byte);
  }
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& dir, const Checkpoint<T>& checkpoint) {
  fs::create_directories(dir);
  json tensors = json::array();
  std::ofstream blob(dir / kCheckpointBlob, std::ios::binary | std::ios::trunc);
  if (!blob) throw FormatError("cannot write " + (dir / kCheckpointBlob).string(), 0);
  std::uint64_t offset = 0;
  for (const auto& [tree_name, tree] : checkpoint.trees) {
    for (const auto& [name, p] : tree) {
      const std::uint64_t length = p.value.size() * sizeof(T);
      blob.write(reinterpret_cast<const char*>(p.value.ptr()), static_cast<std::streamsize>(length));
      tensors.push_back({{"tree", tree_name},
                         {"name", name},
                         {"role", role_name(p.role)},
                         {"shape", p.value.shape()},
                         {"dtype", dtype_name<T>()},
                         {"offset", offset},
                         {"length", length}});
      offset += length;
    }
  }
  blob.close();
  if (!blob) throw FormatError("short write to " + (dir / kCheckpointBlob).string(), offset);
  json manifest = {{"format", "setcon-checkpoint"},
                   {"version", 1},
                   {"dtype", dtype_name<T>()},
                   {"blob", kCheckpointBlob},
                   {"blob_bytes", offset},
                   {"metadata", checkpoint.metadata},
                   {"tensors", tensors}};
  std::ofstream out(dir / kCheckpointManifest, std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  if (manifest.value("format", "") != "setcon-checkpoint") throw FormatError("not a checkpoint manifest", 0);
  if (manifest.value("dtype", "") != dtype_name<T>())
    throw FormatError("checkpoint dtype " + manifest.value("dtype", std::string("?")) + " does not match requested " +
                          dtype_name<T>(),
                      0);
  std::ifstream blob(dir / manifest.value("blob", std::string(kCheckpointBlob)), std::ios::binary);
  if (!blob) throw FormatError("cannot open checkpoint blob", 0);
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  const std::uint64_t expected = manifest.value("blob_bytes", std::uint64_t{0});
  if (bytes.size() != expected) throw FormatError("checkpoint blob size mismatch", bytes.size());

  Checkpoint<T> out;
  out.metadata = manifest.value("metadata", json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto length = entry.at("length").get<std::uint64_t>();
    const Shape shape = entry.at("shape").get<Shape>();
    if (entry.at("dtype").get<std::string>() != dtype_name<T>()) throw FormatError("mixed dtypes", offset);
    if (offset + length > bytes.size() || length != shape_size(shape) * sizeof(T))
      throw FormatError("tensor '" + entry.at("name").get<std::string>() + "' extends past blob", offset);
    Tensor<T> value(shape);
    std::memcpy(value.ptr(), bytes.data() + offset, length);
    out.trees[entry.at("tree").get<std::string>()].add(entry.at("name").get<std::string>(), std::move(value),
                                                         role_from_name(entry.at("role").get<std::string>()));
  }
  return out;
}

std::string checkpoint_dtype(const fs::path& dir) { return read_manifest(dir).value("dtype", std::string{}); }

json checkpoint_metadata(const fs::path& dir) { return read_manifest(dir).value("metadata", json::object()); }

template class ParameterTree<float>;
template class ParameterTree<double>;
template class BoundParameters<float>;
template class BoundParameters<double>;
template Tensor<float> init_weight(std::size_t, std::size_t, std::mt19937_64&);
template Tensor<double> init_weight(std::size_t, std::size_t, std::mt19937_64&);
template void save_checkpoint(const fs::path&, const Checkpoint<float>&);
template void save_checkpoint(const fs::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint(const fs::path&);
template Checkpoint<double> load_checkpoint(const fs::path&);

}  // namespace setcon
