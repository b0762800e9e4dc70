#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tipnet/autodiff.hpp"

namespace tipnet {

/// Initialization class of a parameter: Xavier-uniform weights, zero biases,
/// unit gains (layer-norm scale).
enum class ParamKind { Weight, Bias, Gain };

template <typename T>
struct Parameter {
  std::string name;
  ad::Tensor<T> tensor;
  ParamKind kind = ParamKind::Weight;
  int fan_in = 1;
  int fan_out = 1;
};

/// Ordered set of named trainable tensors. Registration order is the
/// checkpoint order and the optimizer order.
template <typename T>
class ParamStore {
 public:
  /// Registers a zero-filled variable. Throws ConfigError on duplicate names.
  ad::Tensor<T> add(const std::string& name, ad::Shape shape, ParamKind kind, int fan_in = 1,
                    int fan_out = 1);

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }
  const Parameter<T>* find(const std::string& name) const;
  /// Parameters whose name starts with `prefix`.
  std::vector<const Parameter<T>*> with_prefix(const std::string& prefix) const;

  std::size_t count() const;
  void zero_grad();

  /// Copies values by name from another store (possibly of another precision).
  /// Every parameter of this store must exist in `other` with the same shape.
  template <typename U>
  void copy_values_from(const ParamStore<U>& other);

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Checkpoint: `<stem>.json` manifest (names, shapes, offsets, extra metadata)
/// next to `<stem>.f32` holding the concatenated little-endian float32 values.
void save_checkpoint(const std::filesystem::path& stem, const ParamStore<float>& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
/// Loads values into an already-built store. Names and shapes must match
/// exactly. Returns the manifest metadata.
nlohmann::json load_checkpoint(const std::filesystem::path& stem, ParamStore<float>& params);
/// Manifest metadata alone, without touching the payload.
nlohmann::json read_checkpoint_metadata(const std::filesystem::path& stem);

}  // namespace tipnet
