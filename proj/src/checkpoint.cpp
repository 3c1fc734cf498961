#include "bvit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "bvit/config.hpp"
#include "bvit/ternary.hpp"

namespace bvit {

namespace {

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_name(const std::string& s) {
    put(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at offset " +
                            std::to_string(pos_));
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what).data(), sizeof(U));
    return v;
  }
  std::string name() {
    const auto n = get<std::uint16_t>("name length");
    const auto s = take(n, "name");
    return {s.begin(), s.end()};
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string config_string(const ViTConfig& c) { return to_json(c).dump(); }

Reader open(std::span<const std::uint8_t> bytes, ViTConfig& config) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "BVTC", 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto len = r.get<std::uint32_t>("config length");
  const auto text = r.take(len, "config");
  try {
    config = vit_config_from_json(nlohmann::json::parse(text.begin(), text.end()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  return r;
}

template <typename T>
void read_tensors(Reader& r, ViTModel<T>& model) {
  std::map<std::string, Tensor<T>*> by_name;
  for (auto& p : model.params()) by_name[p.name] = p.value;
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != by_name.size())
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(by_name.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.name();
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint tensor '" + name + "' is not a model parameter");
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>("dimension");
    Tensor<T>& dst = *it->second;
    if (shape != dst.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                            shape_str(dst.shape()));
    const auto raw = r.take(dst.size() * sizeof(float), "tensor values");
    for (std::size_t k = 0; k < dst.size(); ++k) {
      float v;
      std::memcpy(&v, raw.data() + k * sizeof(float), sizeof(float));
      dst[k] = static_cast<T>(v);
    }
  }
}

template <typename T>
void read_substrates(Reader& r, ViTModel<T>& model) {
  std::map<std::string, const Tensor<T>*> latent;
  for (auto& p : model.params())
    if (p.group == group::kSubstrate) latent[p.name] = p.value;
  const auto count = r.get<std::uint32_t>("substrate count");
  if (count != latent.size()) throw CheckpointError("checkpoint substrate snapshot count does not match the model");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.name();
    const auto len = r.get<std::uint32_t>("substrate length");
    const auto packed = r.take(len, "substrate payload");
    const auto it = latent.find(name);
    if (it == latent.end()) throw CheckpointError("substrate snapshot '" + name + "' has no latent tensor");
    TernaryMatrix snap;
    try {
      snap = unpack(packed);
    } catch (const FormatError& e) {
      throw CheckpointError("substrate snapshot '" + name + "': " + e.what());
    }
    const TernaryMatrix fresh = absmean_quantize(*it->second);
    if (snap.rows != fresh.rows || snap.cols != fresh.cols || snap.trits != fresh.trits)
      throw CheckpointError("substrate snapshot '" + name + "' does not match its latent weights");
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(ViTModel<T>& model) {
  Writer w;
  w.put_bytes("BVTC", 4);
  w.put(kCheckpointVersion);
  const std::string cfg = config_string(model.config());
  w.put(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  const ParamList<T> params = model.params();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_name(p.name);
    w.put(static_cast<std::uint8_t>(p.value->rank()));
    for (std::size_t d : p.value->shape()) w.put(static_cast<std::uint32_t>(d));
    for (const T& v : p.value->values()) w.put(static_cast<float>(v));
  }
  std::uint32_t n_sub = 0;
  for (const auto& p : params) n_sub += p.group == group::kSubstrate;
  w.put(n_sub);
  for (const auto& p : params) {
    if (p.group != group::kSubstrate) continue;
    // Snapshot of the weights as stored (f32), so a reload reproduces it exactly.
    const auto packed = pack(absmean_quantize(p.value->template cast<float>()));
    w.put_name(p.name);
    w.put(static_cast<std::uint32_t>(packed.size()));
    w.put_bytes(packed.data(), packed.size());
  }
  return std::move(w.bytes);
}

ViTConfig checkpoint_config(std::span<const std::uint8_t> bytes) {
  ViTConfig c;
  open(bytes, c);
  return c;
}

template <typename T>
ViTModel<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ViTConfig c;
  Reader r = open(bytes, c);
  ViTModel<T> model(c);
  read_tensors(r, model);
  read_substrates(r, model);
  return model;
}

template <typename T>
void restore_checkpoint(std::span<const std::uint8_t> bytes, ViTModel<T>& model) {
  ViTConfig c;
  Reader r = open(bytes, c);
  if (config_string(c) != config_string(model.config()))
    throw CheckpointError("checkpoint config does not match the model: stored " + config_string(c) + ", model " +
                          config_string(model.config()));
  read_tensors(r, model);
  read_substrates(r, model);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ViTModel<T>& model) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

template <typename T>
ViTModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

#define BVIT_INSTANTIATE_CHECKPOINT(T)                                                         \
  template std::vector<std::uint8_t> serialize_checkpoint(ViTModel<T>&);                       \
  template ViTModel<T> deserialize_checkpoint<T>(std::span<const std::uint8_t>);               \
  template void restore_checkpoint(std::span<const std::uint8_t>, ViTModel<T>&);               \
  template void save_checkpoint(const std::filesystem::path&, ViTModel<T>&);                   \
  template ViTModel<T> load_checkpoint<T>(const std::filesystem::path&);

BVIT_INSTANTIATE_CHECKPOINT(float)
BVIT_INSTANTIATE_CHECKPOINT(double)

}  // namespace bvit
