#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

// Named trainable tensors. Names are unique and shapes never change after
// `add`; iteration order is lexicographic by name.
template <typename T>
class BasicParamStore {
 public:
  BasicTensor<T>& add(const std::string& name, Shape shape, std::vector<T> values);
  BasicTensor<T>& add(const std::string& name, const BasicTensor<T>& tensor);

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  const BasicTensor<T>& get(std::string_view name) const;
  BasicTensor<T>& get(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const;
  void zero_grad();

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::uint64_t step_count = 0;

 private:
  std::map<std::string, BasicTensor<T>, std::less<>> entries_;
};

using ParamStore = BasicParamStore<float>;
using ParamStoreD = BasicParamStore<double>;

// Deep copy with element type conversion; the copy's tensors require grad.
template <typename To, typename From>
BasicParamStore<To> cast_params(const BasicParamStore<From>& src) {
  BasicParamStore<To> out;
  for (const auto& [name, t] : src) out.add(name, tensor_cast<To>(t));
  out.step_count = src.step_count;
  return out;
}

// Deep copy sharing nothing with `src`.
ParamStore clone_params(const ParamStore& src);

// "BFL1" container: magic, u32 count, then per entry u32 name length,
// UTF-8 name, u32 rank, u32 dims, raw float32 payload. All little-endian.
std::string serialize_params(const ParamStore& store);
ParamStore deserialize_params(std::string_view bytes);

void save_params(const ParamStore& store, const std::filesystem::path& path);
ParamStore load_params(const std::filesystem::path& path);

// Writes to a sibling temporary and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

extern template class BasicParamStore<float>;
extern template class BasicParamStore<double>;

}  // namespace bevfuse
