#include "seqa/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace seqa::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as host doubles and declared little-endian");

using nlohmann::json;

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  fail("checkpoint: no tensor named " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  require(!c.kind.empty(), "checkpoint: kind required");

  json header;
  header["kind"] = c.kind;
  header["config"] = json::parse(c.config_json.empty() ? "{}" : c.config_json);
  header["registry_hash"] = std::to_string(c.registry_hash);
  json tl = json::array();
  for (const auto& t : c.tensors) {
    require(!t.name.empty(), "checkpoint: tensor name required");
    json e;
    e["name"] = t.name;
    e["shape"] = t.tensor.shape;
    tl.push_back(e);
  }
  header["tensors"] = tl;
  const std::string head = header.dump();
  require(head.size() < (1u << 30), "checkpoint: header too large");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "checkpoint: cannot write " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(head.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(lb), 4);
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& t : c.tensors)
    f.write(reinterpret_cast<const char*>(t.tensor.data.data()),
            static_cast<std::streamsize>(t.tensor.data.size() * sizeof(double)));
  f.close();
  require(f.good(), "checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "checkpoint: cannot open " + path);
  unsigned char lb[4];
  f.read(reinterpret_cast<char*>(lb), 4);
  require(f.gcount() == 4, "checkpoint: truncated header length in " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                            (static_cast<std::uint32_t>(lb[1]) << 8) |
                            (static_cast<std::uint32_t>(lb[2]) << 16) |
                            (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string head(len, '\0');
  f.read(head.data(), static_cast<std::streamsize>(len));
  require(f.gcount() == static_cast<std::streamsize>(len),
          "checkpoint: truncated header in " + path);

  json header;
  try {
    header = json::parse(head);
  } catch (const json::exception& e) {
    fail("checkpoint: bad header in " + path + ": " + e.what());
  }

  Checkpoint c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.config_json = header.at("config").dump();
    c.registry_hash = std::stoull(header.at("registry_hash").get<std::string>());
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      t.tensor = Tensor::zeros(shape);
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    fail("checkpoint: malformed header fields in " + path + ": " + e.what());
  }

  for (auto& t : c.tensors) {
    f.read(reinterpret_cast<char*>(t.tensor.data.data()),
           static_cast<std::streamsize>(t.tensor.data.size() * sizeof(double)));
    require(f.gcount() == static_cast<std::streamsize>(t.tensor.data.size() * sizeof(double)),
            "checkpoint: truncated tensor blob in " + path);
  }
  for (const auto& t : c.tensors)
    for (double v : t.tensor.data)
      require(std::isfinite(v), "checkpoint: non-finite parameter in " + path);
  return c;
}

}  // namespace seqa::ckpt
