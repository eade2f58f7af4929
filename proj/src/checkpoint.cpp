#include "rlrr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <system_error>

#include "rlrr/error.hpp"

namespace rlrr::io {

namespace fs = std::filesystem;

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename T>
StoredTensor StoredTensor::from(const Tensor<T>& t) {
  StoredTensor s;
  s.shape = t.shape();
  if constexpr (std::is_same_v<T, float>) {
    s.dtype = DType::f32;
    s.f32.assign(t.data().begin(), t.data().end());
  } else {
    s.dtype = DType::f64;
    s.f64.assign(t.data().begin(), t.data().end());
  }
  return s;
}

template <typename T>
Tensor<T> StoredTensor::as(const std::string& name, bool allow_narrowing) const {
  if constexpr (std::is_same_v<T, float>) {
    if (dtype == DType::f32) return Tensor<T>(shape, f32);
    if (!allow_narrowing) {
      throw BindingError("tensor '" + name + "' is f64; loading it as f32 narrows (enable narrowing)");
    }
    return Tensor<T>(shape, std::vector<float>(f64.begin(), f64.end()));
  } else {
    if (dtype == DType::f64) return Tensor<T>(shape, f64);
    return Tensor<T>(shape, std::vector<double>(f32.begin(), f32.end()));
  }
}

std::size_t encoded_size(const Checkpoint& ckpt) {
  std::size_t n = sizeof(kMagic) + 4 + 8;
  for (const auto& [name, t] : ckpt)
    n += 4 + name.size() + 4 + 4 + 8 * t.shape.size() + dtype_size(t.dtype) * t.numel();
  return n;
}

namespace {

template <typename U>
void put(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_bytes(std::vector<unsigned char>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::string source) : b_(b), src_(std::move(source)) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    if (n) std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(src_ + ": " + msg + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) fail(std::string("truncated while reading ") + what);
  }

  const std::vector<unsigned char>& b_;
  std::string src_;
  std::size_t pos_ = 0;
};

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

template <typename F>
void put_floats(std::vector<unsigned char>& out, const std::vector<F>& v) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  for (F x : v) {
    Bits bits;
    std::memcpy(&bits, &x, sizeof(F));
    put(out, bits);
  }
}

template <typename F>
std::vector<F> get_floats(Reader& r, std::size_t n) {
  using Bits = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  if (n > r.remaining() / sizeof(F)) r.fail("truncated tensor data");
  std::vector<F> v(n);
  for (auto& x : v) {
    Bits bits = r.get<Bits>("tensor data");
    std::memcpy(&x, &bits, sizeof(F));
  }
  return v;
}

}  // namespace

std::vector<unsigned char> encode(const Checkpoint& ckpt) {
  std::vector<unsigned char> out;
  out.reserve(encoded_size(ckpt));
  put_bytes(out, kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, ckpt.size());
  for (const auto& [name, t] : ckpt) {
    if (numel(t.shape) != t.numel()) {
      throw ContractError("checkpoint entry '" + name + "' has shape " + shape_str(t.shape) +
                          " but " + std::to_string(t.numel()) + " values");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) put<std::uint64_t>(out, e);
    if (t.dtype == DType::f32) put_floats(out, t.f32); else put_floats(out, t.f64);
  }
  return out;
}

Checkpoint decode(const std::vector<unsigned char>& bytes, const std::string& source) {
  Reader r(bytes, source);
  char magic[8];
  r.bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("bad magic (not a checkpoint)");
  const auto version = r.get<std::uint32_t>("version");
  if (version > kVersion) {
    throw VersionError(source + ": checkpoint version " + std::to_string(version) +
                       " is newer than this reader (" + std::to_string(kVersion) + ")");
  }
  if (version == 0) r.fail("invalid version 0");
  const auto count = r.get<std::uint64_t>("entry count");
  Checkpoint out;
  std::string prev;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    if (len > r.remaining()) r.fail("truncated entry name");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "entry name");
    if (i > 0 && !(prev < name)) r.fail("entry '" + name + "' is duplicated or out of order");
    StoredTensor t;
    const auto dtype = r.get<std::uint32_t>("dtype");
    if (dtype != 1 && dtype != 2) r.fail("entry '" + name + "' has unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("entry '" + name + "' has implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint64_t>("extent");
      if (e != 0 && n > r.remaining() / e) r.fail("entry '" + name + "' is larger than the file");
      n *= e;
      t.shape.push_back(e);
    }
    if (t.dtype == DType::f32) t.f32 = get_floats<float>(r, n); else t.f64 = get_floats<double>(r, n);
    prev = name;
    out.emplace(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move checkpoint into place at '" + path.string() + "'");
  }
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = encode(ckpt);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const fs::path& path) { return decode(read_file(path), path.string()); }

// ---------------------------------------------------------------------------

template <typename T>
Checkpoint model_checkpoint(const vit::Model<T>& model) {
  Checkpoint c;
  for (const auto& s : model.slots()) {
    c[s.slot.name() + ".w"] = StoredTensor::from(s.w);
    if (s.has_bias()) c[s.slot.name() + ".b"] = StoredTensor::from(s.b);
  }
  return c;
}

template <typename T>
void bind_model(const Checkpoint& ckpt, vit::Model<T>& model, bool allow_narrowing) {
  std::size_t used = 0;
  for (auto& s : model.slots()) {
    auto load = [&](const std::string& name, Tensor<T>& dst) {
      auto it = ckpt.find(name);
      if (it == ckpt.end()) throw BindingError("checkpoint lacks '" + name + "' for slot " + s.slot.name());
      if (it->second.shape != dst.shape()) {
        throw BindingError("slot " + s.slot.name() + ": checkpoint '" + name + "' has shape " +
                           shape_str(it->second.shape) + ", model expects " + shape_str(dst.shape()));
      }
      dst = it->second.template as<T>(name, allow_narrowing);
      ++used;
    };
    load(s.slot.name() + ".w", s.w);
    if (s.has_bias()) load(s.slot.name() + ".b", s.b);
  }
  for (const auto& [name, t] : ckpt) {
    if (name.rfind(kAdapterPrefix, 0) == 0) continue;
    bool known = false;
    for (const auto& s : model.slots())
      known = known || name == s.slot.name() + ".w" || (s.has_bias() && name == s.slot.name() + ".b");
    if (!known) throw BindingError("checkpoint tensor '" + name + "' matches no model slot");
  }
}

template <typename T>
Checkpoint adapter_checkpoint(const peft::AdapterSet<T>& set) {
  Checkpoint c;
  const std::string prefix = std::string(kAdapterPrefix) + peft::method_name(set.spec().method) + ".";
  for (const auto& [name, t] : set.tensors()) c[prefix + name] = StoredTensor::from(t);
  return c;
}

std::string adapter_method(const Checkpoint& ckpt) {
  std::string method;
  for (const auto& [name, t] : ckpt) {
    if (name.rfind(kAdapterPrefix, 0) != 0) continue;
    const std::string rest = name.substr(std::strlen(kAdapterPrefix));
    const std::string m = rest.substr(0, rest.find('.'));
    if (!method.empty() && m != method) {
      throw FormatError("checkpoint mixes adapter methods '" + method + "' and '" + m + "'");
    }
    method = m;
  }
  if (method.empty()) throw FormatError("checkpoint holds no adapter tensors");
  return method;
}

template <typename T>
peft::AdapterSet<T> bind_adapters(const Checkpoint& ckpt, const peft::MethodSpec& spec,
                                  const vit::ViTConfig& cfg, bool allow_narrowing) {
  const std::string method = peft::method_name(spec.method);
  const std::string prefix = std::string(kAdapterPrefix) + method + ".";
  peft::AdapterSet<T> set(spec);
  bool any_adapter = false;
  for (const auto& [name, t] : ckpt) {
    if (name.rfind(kAdapterPrefix, 0) != 0) continue;
    any_adapter = true;
    if (name.rfind(prefix, 0) != 0) {
      throw BindingError("adapter tensor '" + name + "' does not belong to method " + method);
    }
  }
  const auto plan = peft::plan_attachment(spec, cfg);
  if (!any_adapter && !plan.empty()) throw BindingError("checkpoint holds no " + method + " adapter tensors");
  for (const auto& p : plan) {
    auto it = ckpt.find(prefix + p.name);
    if (it == ckpt.end()) {
      throw BindingError("checkpoint lacks '" + prefix + p.name + "' for slot " + p.slot.name());
    }
    set.put(p.name, it->second.template as<T>(it->first, allow_narrowing), p.trainable);
  }
  for (const auto& [name, t] : ckpt)
    if (name.rfind(prefix, 0) == 0 && !set.has(name.substr(prefix.size())))
      throw BindingError("adapter tensor '" + name + "' is not part of the " + method + " plan");
  peft::validate_adapters(set, cfg);
  return set;
}

#define RLRR_CKPT_INSTANTIATE(T)                                                           \
  template StoredTensor StoredTensor::from(const Tensor<T>&);                              \
  template Tensor<T> StoredTensor::as(const std::string&, bool) const;                     \
  template Checkpoint model_checkpoint(const vit::Model<T>&);                              \
  template void bind_model(const Checkpoint&, vit::Model<T>&, bool);                       \
  template Checkpoint adapter_checkpoint(const peft::AdapterSet<T>&);                      \
  template peft::AdapterSet<T> bind_adapters(const Checkpoint&, const peft::MethodSpec&,   \
                                             const vit::ViTConfig&, bool);

RLRR_CKPT_INSTANTIATE(float)
RLRR_CKPT_INSTANTIATE(double)

}  // namespace rlrr::io
