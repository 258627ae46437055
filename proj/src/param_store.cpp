#include "bevfuse/param_store.hpp"

#include <fstream>
#include <sstream>

#include "bevfuse/binary_io.hpp"

namespace bevfuse {

namespace {
constexpr std::string_view kParamMagic = "BFL1";
}

template <typename T>
BasicTensor<T>& BasicParamStore<T>::add(const std::string& name, Shape shape, std::vector<T> values) {
  return add(name, BasicTensor<T>(std::move(shape), std::move(values), true));
}

template <typename T>
BasicTensor<T>& BasicParamStore<T>::add(const std::string& name, const BasicTensor<T>& tensor) {
  if (name.empty()) throw ConfigError("parameter name must not be empty");
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  auto [it, inserted] = entries_.emplace(name, tensor);
  it->second.set_requires_grad(true);
  return it->second;
}

template <typename T>
const BasicTensor<T>& BasicParamStore<T>::get(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
BasicTensor<T>& BasicParamStore<T>::get(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
std::size_t BasicParamStore<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

template <typename T>
void BasicParamStore<T>::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

template class BasicParamStore<float>;
template class BasicParamStore<double>;

ParamStore clone_params(const ParamStore& src) {
  ParamStore out;
  for (const auto& [name, t] : src) out.add(name, t.clone());
  out.step_count = src.step_count;
  return out;
}

std::string serialize_params(const ParamStore& store) {
  binio::Writer w;
  w.put_bytes(kParamMagic);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_array(t.data().data(), t.numel());
  }
  return std::move(w.str());
}

ParamStore deserialize_params(std::string_view bytes) {
  binio::Reader r(bytes);
  if (r.get_bytes(kParamMagic.size(), "magic") != kParamMagic) {
    throw IoError("not a parameter file: bad magic", 0);
  }
  const auto count = r.get<std::uint32_t>("entry count");
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto entry_offset = static_cast<std::int64_t>(r.offset());
    std::string name = r.get_string("parameter name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw IoError("implausible rank " + std::to_string(rank) + " for '" + name + "'", entry_offset);
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("dimension");
    std::vector<float> values(shape_numel(shape));
    r.get_array(values.data(), values.size(), "parameter payload");
    if (store.contains(name)) throw IoError("duplicate parameter '" + name + "'", entry_offset);
    store.add(name, std::move(shape), std::move(values));
  }
  if (!r.at_end()) throw IoError("trailing bytes after parameter entries", static_cast<std::int64_t>(r.offset()));
  return store;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_params(const ParamStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_params(store));
}

ParamStore load_params(const std::filesystem::path& path) { return deserialize_params(read_file(path)); }

}  // namespace bevfuse
