#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <vector>

#include "mad/numerics/tensor.hpp"
#include "mad/rng.hpp"

namespace mad {

// Named parameter collection with stable addresses (tapes keep raw pointers).
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::deque<Parameter>& all() noexcept { return params_; }
  const std::deque<Parameter>& all() const noexcept { return params_; }
  std::vector<Parameter*> pointers();

  void zero_grad();
  void set_frozen(bool frozen);
  bool frozen() const;
  std::size_t scalar_count() const;

  // Copies values from a store with the same names and shapes.
  void copy_values_from(const ParameterStore& other);
  bool same_values(const ParameterStore& other) const;

 private:
  std::deque<Parameter> params_;
};

// Initialisers.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);
// N(0, 1/fan_in) for a [fan_in, fan_out] weight.
Tensor fan_in_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Flat binary weight file: "MADW", u32 version, u32 count, then per array a
// u32 name length, the name bytes, u32 rank, u64 extents and f64 values.
void save_weights(const ParameterStore& store, const std::filesystem::path& path);
ParameterStore load_weights(const std::filesystem::path& path);

}  // namespace mad
