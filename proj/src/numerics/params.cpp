#include "mad/numerics/params.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mad/error.hpp"

namespace mad {

Parameter& ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw Error(ErrorCode::SpecInvalid, "duplicate parameter " + name);
  return params_.emplace_back(name, std::move(value));
}

Parameter& ParameterStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw Error(ErrorCode::SpecInvalid, "no parameter named " + name);
}

const Parameter& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw Error(ErrorCode::SpecInvalid, "no parameter named " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return true;
  return false;
}

std::vector<Parameter*> ParameterStore::pointers() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParameterStore::set_frozen(bool frozen) {
  for (auto& p : params_) p.frozen = frozen;
}

bool ParameterStore::frozen() const {
  for (const auto& p : params_)
    if (!p.frozen) return false;
  return true;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (auto& p : params_) {
    const Parameter& q = other.get(p.name);
    if (q.value.shape() != p.value.shape())
      throw Error(ErrorCode::ArchMismatch, "shape differs for " + p.name);
    p.value = q.value;
  }
}

bool ParameterStore::same_values(const ParameterStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name) return false;
    if (!(params_[i].value == other.params_[i].value)) return false;
  }
  return true;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor fan_in_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

namespace {

constexpr char kMagic[4] = {'M', 'A', 'D', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::ifstream& f, const std::filesystem::path& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw Error(ErrorCode::ParseError, "truncated weight file " + path.string());
  return v;
}

}  // namespace

void save_weights(const ParameterStore& store, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f.write(kMagic, 4);
  put<std::uint32_t>(f, kVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& p : store.all()) {
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p.name.size()));
    f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) put<std::uint64_t>(f, e);
    f.write(reinterpret_cast<const char*>(p.value.data().data()),
            static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!f) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

ParameterStore load_weights(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw Error(ErrorCode::ParseError, path.string() + " is not a weight file");
  if (take<std::uint32_t>(f, path) != kVersion)
    throw Error(ErrorCode::ParseError, "unsupported weight file version in " + path.string());
  const auto count = take<std::uint32_t>(f, path);
  ParameterStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(take<std::uint32_t>(f, path), '\0');
    f.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(take<std::uint32_t>(f, path));
    for (auto& e : shape) e = take<std::uint64_t>(f, path);
    std::vector<double> data(shape_numel(shape));
    f.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!f) throw Error(ErrorCode::ParseError, "truncated weight file " + path.string());
    store.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

}  // namespace mad
