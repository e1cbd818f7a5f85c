#include "hmeta/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include <nlohmann/json.hpp>

#include "hmeta/errors.hpp"

namespace hmeta {

namespace {

constexpr char kMagic[8] = {'H', 'M', 'E', 'T', 'A', 'C', 'K', 'P'};
constexpr std::uint8_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_i64(std::ostream& os, std::int64_t v) {
  const std::uint64_t u = static_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::int64_t read_i64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<std::int64_t>(v);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  os.put(static_cast<char>(kVersion));
  write_u32(os, static_cast<std::uint32_t>(params.count()));
  nlohmann::json sidecar = nlohmann::json::array();
  for (const auto& p : params.all()) {
    write_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_u32(os, static_cast<std::uint32_t>(p->value.ndim()));
    for (std::int64_t e : p->value.shape()) write_i64(os, e);
    os.write(reinterpret_cast<const char*>(p->value.data()),
             static_cast<std::streamsize>(p->value.size() * 8));
    sidecar.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  }
  if (!os) throw ConfigError("short write to checkpoint: " + path);
  std::ofstream js(path + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
}

void load_checkpoint(const std::string& path, ParamRegistry& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != std::string(kMagic, 8))
    throw ConfigError("bad checkpoint magic in " + path);
  const int version = is.get();
  if (version != kVersion)
    throw ConfigError("unsupported checkpoint version " +
                      std::to_string(version));
  const std::uint32_t count = read_u32(is);
  if (count != params.count())
    throw ConfigError("checkpoint has " + std::to_string(count) +
                      " parameters, model has " + std::to_string(params.count()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = read_u32(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    Parameter& p = *params.all()[i];
    if (name != p.name)
      throw ConfigError("checkpoint parameter '" + name +
                        "' does not match model parameter '" + p.name + "'");
    const std::uint32_t ndim = read_u32(is);
    std::vector<std::int64_t> shape(ndim);
    for (auto& e : shape) e = read_i64(is);
    if (shape != p.value.shape())
      throw ConfigError("shape mismatch for '" + name + "': checkpoint " +
                        Tensor::shape_str(shape) + " vs model " +
                        p.value.shape_str());
    is.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(p.value.size() * 8));
    if (!is) throw ConfigError("truncated checkpoint: " + path);
  }
}

}  // namespace hmeta
