#include "sfpn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sfpn/config.hpp"

namespace sfpn {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'P', 'N'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError(std::string("truncated checkpoint at ") + what);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string get_bytes(std::istream& in, std::uint32_t n, const char* what) {
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw CheckpointError(std::string("truncated checkpoint at ") + what);
  return s;
}

}  // namespace

std::map<std::string, ag::Tensor> Checkpoint::by_name() const {
  std::map<std::string, ag::Tensor> out;
  for (const auto& t : tensors) out.emplace(t.name, t.tensor);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, 4);
    out.put(static_cast<char>(kCheckpointVersion));
    const std::string header = ckpt.header.dump();
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    std::vector<char> buf;
    for (const auto& [name, t] : ckpt.tensors) {
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
      buf.resize(t.size() * 4);
      auto d = t.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(d[i]));
        for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>(bits >> (8 * k));
      }
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const int version = in.get();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::string header = get_bytes(in, get_u32(in, "header length"), "header");
  try {
    ckpt.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  const std::uint32_t count = get_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_bytes(in, get_u32(in, "name length"), "name");
    const std::uint32_t rank = get_u32(in, "rank");
    if (rank > 8) throw CheckpointError(path.string() + ": implausible rank for " + name);
    ag::Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get_u32(in, "dims")));
    ag::Tensor t(shape);
    const std::string raw = get_bytes(in, static_cast<std::uint32_t>(t.size() * 4), "tensor data");
    auto d = t.data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[k * 4 + b])) << (8 * b);
      d[k] = std::bit_cast<float>(bits);
    }
    ckpt.tensors.push_back({std::move(name), t});
  }
  return ckpt;
}

Checkpoint make_checkpoint(const SpikeFpn& net, nlohmann::json meta) {
  Checkpoint c;
  c.header = std::move(meta);
  c.header["network"] = to_json(net.spec());
  c.tensors = net.state();
  return c;
}

SpikeFpn network_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("network")) throw CheckpointError("checkpoint header has no network spec");
  SpikeFpn net(network_spec_from_json(ckpt.header.at("network")), 0);
  net.load_state(ckpt.by_name());
  return net;
}

}  // namespace sfpn
