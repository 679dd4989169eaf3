#include "p2v/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "p2v/common.hpp"

namespace p2v {

namespace {

constexpr char kMagic[4] = {'P', '2', 'V', 'C'};
constexpr uint8_t kDtypeF32 = 0;

template <typename T>
void write_pod(std::ostream& out, T value) {
  // The build targets little-endian hosts; payloads are raw memory.
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  check<DataError>(in.gcount() == sizeof(T), "checkpoint '", path,
                   "': truncated file");
  return value;
}

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& tensor) {
  check(find(name) == nullptr, "checkpoint: duplicate tensor name '", name,
        "'");
  check(tensor.defined(), "checkpoint: undefined tensor '", name, "'");
  tensors.emplace_back(name, tensor);
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void checkpoint_save(const Checkpoint& checkpoint, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check<DataError>(out.good(), "cannot write checkpoint '", path, "'");
  out.write(kMagic, 4);
  write_pod<uint32_t>(out, checkpoint.version);
  // nlohmann::json keeps object keys sorted, so the dump is stable across a
  // load/save round trip.
  const std::string meta = checkpoint.metadata.dump();
  write_pod<uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, tensor] : checkpoint.tensors) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(out, kDtypeF32);
    write_pod<uint8_t>(out, static_cast<uint8_t>(tensor.rank()));
    for (const int64_t d : tensor.shape()) {
      write_pod<uint64_t>(out, static_cast<uint64_t>(d));
    }
    const auto values = tensor.values();
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
  check<DataError>(out.good(), "write failed for checkpoint '", path, "'");
}

Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check<DataError>(in.good(), "cannot open checkpoint '", path, "'");
  char magic[4] = {};
  in.read(magic, 4);
  check<DataError>(in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0,
                   "checkpoint '", path, "': bad magic");
  Checkpoint checkpoint;
  checkpoint.version = read_pod<uint32_t>(in, path);
  check<DataError>(checkpoint.version == Checkpoint::kFormatVersion,
                   "checkpoint '", path, "': unsupported format version ",
                   checkpoint.version);
  const uint64_t meta_len = read_pod<uint64_t>(in, path);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  check<DataError>(static_cast<uint64_t>(in.gcount()) == meta_len,
                   "checkpoint '", path, "': truncated file");
  try {
    checkpoint.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& err) {
    throw DataError(concat("checkpoint '", path, "': bad metadata: ",
                           err.what()));
  }
  const uint32_t count = read_pod<uint32_t>(in, path);
  checkpoint.tensors.reserve(count);
  for (uint32_t t = 0; t < count; ++t) {
    const uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    check<DataError>(static_cast<uint32_t>(in.gcount()) == name_len,
                     "checkpoint '", path, "': truncated file");
    const uint8_t dtype = read_pod<uint8_t>(in, path);
    check<DataError>(dtype == kDtypeF32, "checkpoint '", path,
                     "': unsupported dtype code ", int(dtype), " for '", name,
                     "'");
    const uint8_t rank = read_pod<uint8_t>(in, path);
    std::vector<int64_t> shape(rank);
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int64_t>(read_pod<uint64_t>(in, path));
      numel *= shape[d];
    }
    std::vector<float> values(numel);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    check<DataError>(in.gcount() ==
                         static_cast<std::streamsize>(numel * sizeof(float)),
                     "checkpoint '", path, "': truncated file");
    checkpoint.add(name,
                   Tensor::from_values(std::move(shape), std::move(values)));
  }
  return checkpoint;
}

}  // namespace p2v
