#pragma once

// Binary tensor container. Layout, little-endian:
//
//   "RLRRCKPT"  u32 version  u64 count
//   count × { u32 name_len, name bytes, u32 dtype, u32 rank, rank × u64, data }
//
// Entries are unique and sorted by name.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rlrr/peft.hpp"
#include "rlrr/tensor.hpp"
#include "rlrr/vit.hpp"

namespace rlrr::io {

inline constexpr char kMagic[8] = {'R', 'L', 'R', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

const char* dtype_name(DType d);
std::size_t dtype_size(DType d);

struct StoredTensor {
  DType dtype = DType::f64;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;

  template <typename T>
  static StoredTensor from(const Tensor<T>& t);

  std::size_t numel() const { return dtype == DType::f32 ? f32.size() : f64.size(); }

  /// f32 → f64 widens exactly; f64 → f32 needs allow_narrowing.
  template <typename T>
  Tensor<T> as(const std::string& name, bool allow_narrowing = false) const;

  bool operator==(const StoredTensor&) const = default;
};

using Checkpoint = std::map<std::string, StoredTensor>;

/// 20-byte header plus Σ (4 + |name| + 4 + 4 + 8·rank + dtype_size·numel).
std::size_t encoded_size(const Checkpoint& ckpt);

std::vector<unsigned char> encode(const Checkpoint& ckpt);
/// FormatError on bad magic, truncation or trailing bytes, VersionError when
/// the file is newer than the reader. `source` prefixes messages.
Checkpoint decode(const std::vector<unsigned char>& bytes, const std::string& source = "checkpoint");

/// Writes through a temporary file and a rename. IoError names the path.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes bytes to path atomically.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::vector<unsigned char> read_file(const std::filesystem::path& path);

// Model and adapter views.

/// "<slot>.w" and, for slots with a bias, "<slot>.b".
template <typename T>
Checkpoint model_checkpoint(const vit::Model<T>& model);

/// Overwrites every model tensor from the checkpoint. BindingError naming the
/// slot for a missing entry or a shape mismatch.
template <typename T>
void bind_model(const Checkpoint& ckpt, vit::Model<T>& model, bool allow_narrowing = false);

inline constexpr const char* kAdapterPrefix = "adapter.";

/// "adapter.<method>.<tensor>" for every adapter tensor.
template <typename T>
Checkpoint adapter_checkpoint(const peft::AdapterSet<T>& set);

/// The method name stored in an adapter checkpoint; FormatError when the
/// checkpoint holds no adapter entries or mixes methods.
std::string adapter_method(const Checkpoint& ckpt);

/// Rebuilds an adapter set for `spec`, validating names and shapes against
/// the attachment plan. Trainability follows the plan.
template <typename T>
peft::AdapterSet<T> bind_adapters(const Checkpoint& ckpt, const peft::MethodSpec& spec,
                                  const vit::ViTConfig& cfg, bool allow_narrowing = false);

}  // namespace rlrr::io
