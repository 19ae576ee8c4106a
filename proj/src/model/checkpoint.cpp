#include "mmgpt/model/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mmgpt::model {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'M', 'M', 'G', 'P', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_adapter_entry(const std::string& name) {
  return ends_with(name, ".lora_a") || ends_with(name, ".lora_b") || ends_with(name, ".gate_attn") ||
         ends_with(name, ".gate_ffw");
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    std::uint8_t b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    out.insert(out.end(), b, b + sizeof(U));
  }
  void put_bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint8_t b[sizeof(U)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(origin_ + ": corrupt checkpoint: " + what + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("unexpected end of data");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

nlohmann::json architecture(const ModelConfig& c) {
  auto j = c.to_json();
  j.erase("lora_rank");
  j.erase("lora_alpha");
  j.erase("lora_targets");
  j.erase("init_seed");
  return j;
}

template <typename T>
void fill(Tensor<T>& dst, const CheckpointEntry& e) {
  if (dst.shape != e.shape)
    throw DimensionError("checkpoint entry '" + e.name + "' has shape " + nn::shape_str(e.shape) + ", model expects " +
                         nn::shape_str(dst.shape));
  for (std::size_t i = 0; i < e.values.size(); ++i) dst.data[i] = static_cast<T>(e.values[i]);
  dst.requires_grad = e.trainable;
}

bool has_adapters(const Checkpoint& ckpt) {
  for (const auto& e : ckpt.entries)
    if (ends_with(e.name, ".lora_a")) return true;
  return false;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.put_bytes(std::string(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kVersion);
  nlohmann::json header{{"config", ckpt.config.to_json()}, {"kind", ckpt.kind == CheckpointKind::Full ? "full" : "lora"}};
  const std::string text = header.dump();
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text);
  w.put<std::uint64_t>(ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    if (nn::numel(e.shape) != e.values.size()) throw DimensionError("checkpoint entry '" + e.name + "' size mismatch");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(e.trainable ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(d);
    for (float v : e.values) w.put<float>(v);
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.get_bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) r.fail("bad magic");
  if (const auto version = r.get<std::uint32_t>(); version != kVersion)
    r.fail("unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto header_len = r.get<std::uint64_t>();
  try {
    const auto header = nlohmann::json::parse(r.get_bytes(header_len));
    ckpt.config = ModelConfig::from_json(header.at("config"));
    const auto kind = header.at("kind").get<std::string>();
    if (kind != "full" && kind != "lora") r.fail("unknown kind '" + kind + "'");
    ckpt.kind = kind == "full" ? CheckpointKind::Full : CheckpointKind::Lora;
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("bad header: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.get_bytes(r.get<std::uint32_t>());
    const auto flag = r.get<std::uint8_t>();
    if (flag > 1) r.fail("bad manifest flag for '" + e.name + "'");
    e.trainable = flag == 1;
    const auto ndim = r.get<std::uint32_t>();
    if (ndim == 0 || ndim > 8) r.fail("bad rank for '" + e.name + "'");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (std::uint64_t{1} << 32)) r.fail("bad extent for '" + e.name + "'");
      e.shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    if (n > bytes.size()) r.fail("entry '" + e.name + "' larger than file");
    e.values.resize(n);
    for (auto& v : e.values) v = r.get<float>();
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) r.fail("trailing bytes");
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, CheckpointKind kind) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.kind = kind;
  if (kind == CheckpointKind::Lora && !model.has_lora()) throw ConfigError("model has no LoRA adapters to save");
  for (const auto* p : model.params().all()) {
    if (kind == CheckpointKind::Lora && !is_adapter_entry(p->name)) continue;
    CheckpointEntry e;
    e.name = p->name;
    e.shape = p->tensor.shape;
    e.trainable = p->tensor.requires_grad;
    e.values.assign(p->tensor.data.begin(), p->tensor.data.end());
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const fs::path& path, CheckpointKind kind) {
  write_checkpoint(make_checkpoint(model, kind), path);
}

template <typename T>
std::unique_ptr<Model<T>> model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != CheckpointKind::Full)
    throw ConfigError("a LoRA-only checkpoint needs a base checkpoint to attach onto");
  auto model = std::make_unique<Model<T>>(ckpt.config);
  if (has_adapters(ckpt)) model->inject_lora();
  if (ckpt.entries.size() != model->params().size())
    throw ConfigError("checkpoint has " + std::to_string(ckpt.entries.size()) + " entries, model has " +
                      std::to_string(model->params().size()));
  for (const auto& e : ckpt.entries) {
    Tensor<T>* t = model->params().find(e.name);
    if (t == nullptr) throw ConfigError("checkpoint entry '" + e.name + "' does not match any parameter");
    fill(*t, e);
  }
  return model;
}

template <typename T>
std::unique_ptr<Model<T>> load_model(const fs::path& path) {
  return model_from_checkpoint<T>(read_checkpoint(path));
}

template <typename T>
void attach_lora(Model<T>& model, const Checkpoint& lora) {
  if (lora.kind != CheckpointKind::Lora) throw ConfigError("expected a LoRA checkpoint");
  if (architecture(lora.config) != architecture(model.config()))
    throw ConfigError("LoRA checkpoint was trained on a different base architecture");
  if (model.has_lora()) throw ConfigError("model already has LoRA adapters attached");
  model.configure_lora(lora.config.lora_rank, lora.config.lora_alpha, lora.config.lora_targets);
  model.inject_lora();
  for (const auto& e : lora.entries) {
    Tensor<T>* t = model.params().find(e.name);
    if (t == nullptr) throw ConfigError("LoRA entry '" + e.name + "' does not match any parameter");
    fill(*t, e);
  }
}

template <typename T>
void attach_lora(Model<T>& model, const fs::path& lora_path) {
  attach_lora(model, read_checkpoint(lora_path));
}

#define MMGPT_INSTANTIATE_CKPT(T)                                                   \
  template Checkpoint make_checkpoint(const Model<T>&, CheckpointKind);            \
  template void save_checkpoint(const Model<T>&, const fs::path&, CheckpointKind); \
  template std::unique_ptr<Model<T>> model_from_checkpoint<T>(const Checkpoint&);  \
  template std::unique_ptr<Model<T>> load_model<T>(const fs::path&);               \
  template void attach_lora(Model<T>&, const Checkpoint&);                         \
  template void attach_lora(Model<T>&, const fs::path&);

MMGPT_INSTANTIATE_CKPT(float)
MMGPT_INSTANTIATE_CKPT(double)

#undef MMGPT_INSTANTIATE_CKPT

}  // namespace mmgpt::model
