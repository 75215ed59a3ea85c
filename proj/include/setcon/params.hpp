#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "setcon/autodiff.hpp"

namespace setcon {

enum class Role { weight, bias, gain, offset, slot_init };

std::string role_name(Role role);
Role role_from_name(const std::string& name);

template <typename T>
struct Parameter {
  Tensor<T> value;
  Role role = Role::weight;
};

/// Named learnable arrays, iterated in lexicographic name order.
template <typename T>
class ParameterTree {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  void add(const std::string& name, Tensor<T> value, Role role);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  Role role(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

  typename Map::iterator begin() { return entries_.begin(); }
  typename Map::iterator end() { return entries_.end(); }
  typename Map::const_iterator begin() const { return entries_.begin(); }
  typename Map::const_iterator end() const { return entries_.end(); }

  /// Same names, shapes and roles; all values zero.
  ParameterTree zeros_like() const;
  /// True when both trees hold the same names with the same shapes.
  bool congruent(const ParameterTree& other) const;
  /// Throws StructuralError naming the first disagreement.
  void require_congruent(const ParameterTree& other, const std::string& context) const;
  bool all_finite() const;

  template <typename U>
  ParameterTree<U> cast() const {
    ParameterTree<U> out;
    for (const auto& [name, p] : entries_) out.add(name, p.value.template cast<U>(), p.role);
    return out;
  }

  friend bool bit_equal(const ParameterTree& a, const ParameterTree& b) {
    if (!a.congruent(b)) return false;
    auto it = b.entries_.begin();
    for (const auto& [name, p] : a.entries_) {
      if (!setcon::bit_equal(p.value, it->second.value) || p.role != it->second.role) return false;
      ++it;
    }
    return true;
  }

 private:
  Map entries_;
};

/// Fan-in scaled uniform weights, zero biases and offsets, unit gains.
template <typename T>
Tensor<T> init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// A ParameterTree placed on a tape as variable (or constant) leaves.
template <typename T>
class BoundParameters {
 public:
  BoundParameters(Tape<T>& tape, const ParameterTree<T>& tree, bool trainable = true);

  Var<T> operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  /// Gradients from the tape's last backward pass, congruent to the tree.
  ParameterTree<T> gradients() const;

 private:
  Tape<T>* tape_;
  const ParameterTree<T>* tree_;
  std::map<std::string, Var<T>> vars_;
};

// Checkpoint container: manifest.json + one little-endian blob.

template <typename T>
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, ParameterTree<T>> trees;
};

/// Element type tag used in manifests ("f32" / "f64").
template <typename T>
std::string dtype_name();

inline constexpr const char* kCheckpointManifest = "manifest.json";
inline constexpr const char* kCheckpointBlob = "tensors.bin";

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& checkpoint);

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir);

/// Reads only the manifest and reports the stored dtype.
std::string checkpoint_dtype(const std::filesystem::path& dir);
nlohmann::json checkpoint_metadata(const std::filesystem::path& dir);

extern template class ParameterTree<float>;
extern template class ParameterTree<double>;
extern template class BoundParameters<float>;
extern template class BoundParameters<double>;

}  // namespace setcon
