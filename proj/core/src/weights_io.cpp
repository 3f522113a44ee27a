#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mao/encoder.hpp"

namespace mao {
namespace {

constexpr char kMagic[] = "MAOW1\n";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little,
              "weights serialization assumes a little-endian host");

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[offset + i]) << (8 * i);
  return v;
}

std::string config_line(const WeightStore& w) {
  const auto& c = w.config;
  std::ostringstream out;
  out << "config image_side=" << c.image_side << " patch_side=" << c.patch_side
      << " layers=" << c.layers << " heads=" << c.heads << " embed_dim=" << c.embed_dim
      << " mlp_dim=" << c.mlp_dim() << " channels=" << c.channels << " seed=" << c.seed
      << " adapter_rank=" << w.adapter_rank << '\n';
  return out.str();
}

void parse_config_line(const std::string& line, WeightStore& w) {
  std::istringstream in(line);
  std::string word;
  in >> word;
  if (word != "config") throw Error("weights header: expected config line, got '" + line + "'");
  int mlp_dim = -1;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw Error("weights header: malformed field '" + word + "'");
    const std::string key = word.substr(0, eq);
    const std::string value = word.substr(eq + 1);
    try {
      if (key == "image_side") w.config.image_side = std::stoi(value);
      else if (key == "patch_side") w.config.patch_side = std::stoi(value);
      else if (key == "layers") w.config.layers = std::stoi(value);
      else if (key == "heads") w.config.heads = std::stoi(value);
      else if (key == "embed_dim") w.config.embed_dim = std::stoi(value);
      else if (key == "mlp_dim") mlp_dim = std::stoi(value);
      else if (key == "channels") w.config.channels = std::stoi(value);
      else if (key == "seed") w.config.seed = std::stoull(value);
      else if (key == "adapter_rank") w.adapter_rank = std::stoi(value);
      else throw Error("weights header: unknown config key '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error("weights header: bad value for '" + key + "'");
    }
  }
  if (mlp_dim <= 0 || w.config.embed_dim <= 0) throw Error("weights header: missing mlp_dim");
  w.config.mlp_ratio = static_cast<double>(mlp_dim) / w.config.embed_dim;
  w.config.validate();
  if (w.config.mlp_dim() != mlp_dim) throw Error("weights header: inconsistent mlp_dim");
}

}  // namespace

std::vector<std::uint8_t> serialize_weights(const WeightStore& weights) {
  std::string header = config_line(weights);
  for (const auto& [name, t] : weights.tensors) {
    if (name.find_first_of(" \n") != std::string::npos) {
      throw Error("persist_weights: tensor name '" + name + "' contains whitespace");
    }
    header += name + " f64 ";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
      if (i) header += ',';
      header += std::to_string(t.shape[i]);
    }
    header += '\n';
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + kMagicSize);
  append_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& [name, t] : weights.tensors) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), bytes, bytes + t.data.size() * sizeof(double));
  }
  return out;
}

WeightStore deserialize_weights(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagicSize + 8 || std::memcmp(bytes.data(), kMagic, kMagicSize) != 0) {
    throw Error("weights file: bad magic");
  }
  const std::uint64_t header_size = read_u64(bytes, kMagicSize);
  const std::size_t header_begin = kMagicSize + 8;
  if (header_size > bytes.size() - header_begin) throw Error("weights file: truncated header");
  const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(header_begin),
                           bytes.begin() + static_cast<std::ptrdiff_t>(header_begin + header_size));

  WeightStore store;
  std::istringstream lines(header);
  std::string line;
  if (!std::getline(lines, line)) throw Error("weights file: empty header");
  parse_config_line(line, store);

  std::size_t offset = header_begin + header_size;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::string name, dtype, dims;
    if (!(fields >> name >> dtype >> dims)) {
      throw Error("weights file: malformed header line '" + line + "'");
    }
    if (dtype != "f64") throw Error("weights file: tensor '" + name + "' has dtype " + dtype);
    std::vector<std::size_t> shape;
    std::istringstream dim_stream(dims);
    std::string dim;
    while (std::getline(dim_stream, dim, ',')) {
      try {
        shape.push_back(std::stoull(dim));
      } catch (const std::logic_error&) {
        throw Error("weights file: tensor '" + name + "' has bad shape '" + dims + "'");
      }
    }
    const std::size_t count = shape_product(shape);
    const std::size_t nbytes = count * sizeof(double);
    if (nbytes > bytes.size() - offset) {
      throw Error("weights file: truncated data for tensor '" + name + "'");
    }
    Tensor t(shape);
    std::memcpy(t.data.data(), bytes.data() + offset, nbytes);
    offset += nbytes;
    if (!store.tensors.emplace(name, std::move(t)).second) {
      throw Error("weights file: duplicate tensor '" + name + "'");
    }
  }
  if (offset != bytes.size()) throw Error("weights file: trailing bytes after last tensor");

  // Shape check against a reference layout for the recorded config.
  WeightStore reference = init_encoder(store.config);
  if (store.adapter_rank > 0) add_adapters(reference, store.adapter_rank, 0);
  for (const auto& [name, ref] : reference.tensors) {
    auto it = store.tensors.find(name);
    if (it == store.tensors.end()) throw Error("weights file: missing tensor '" + name + "'");
    if (it->second.shape != ref.shape) {
      throw Error("weights file: tensor '" + name + "' has shape " +
                  shape_string(it->second.shape) + ", expected " + shape_string(ref.shape));
    }
  }
  if (store.tensors.size() != reference.tensors.size()) {
    for (const auto& [name, t] : store.tensors) {
      if (!reference.has(name)) throw Error("weights file: unexpected tensor '" + name + "'");
    }
  }
  return store;
}

void persist_weights(const WeightStore& weights, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(weights);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

WeightStore load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace mao
