#include "deepmts/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "deepmts/error.hpp"

namespace deepmts::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError("checkpoint: truncated file");
  return v;
}

template <class T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

}  // namespace

template <class T>
void write_checkpoint(std::ostream& out, const ParamStore<T>& store) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [key, param] : store) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
    out.write(key.data(), static_cast<std::streamsize>(key.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(param.value.rank()));
    for (std::size_t e : param.value.shape()) put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(param.value.data()), static_cast<std::streamsize>(param.value.size() * sizeof(T)));
  }
  if (!out) throw RuntimeFailure("checkpoint: write failed");
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("checkpoint: cannot open " + path.string());
  write_checkpoint(out, store);
}

std::vector<CheckpointRecord> read_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw ValidationError("checkpoint: bad magic");
  const auto count = get<std::uint32_t>(in);
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    CheckpointRecord rec;
    rec.key.resize(get<std::uint32_t>(in));
    in.read(rec.key.data(), static_cast<std::streamsize>(rec.key.size()));
    const auto code = get<std::uint8_t>(in);
    if (code != 1 && code != 2) throw ValidationError("checkpoint: unknown dtype code " + std::to_string(code));
    rec.dtype = static_cast<DType>(code);
    rec.shape.resize(get<std::uint32_t>(in));
    for (auto& e : rec.shape) e = get<std::uint64_t>(in);
    const std::size_t n = element_count(rec.shape);
    rec.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) rec.values[i] = rec.dtype == DType::f32 ? get<float>(in) : get<double>(in);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<CheckpointRecord> load_checkpoint_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

template <class T>
void restore_checkpoint(const std::vector<CheckpointRecord>& records, ParamStore<T>& store) {
  std::set<std::string> seen;
  for (const auto& rec : records) {
    if (!store.contains(rec.key)) throw ValidationError("checkpoint: unexpected parameter '" + rec.key + "'");
    Param<T>& p = store.at(rec.key);
    if (p.value.shape() != rec.shape) {
      throw ValidationError("checkpoint: '" + rec.key + "' has shape " + to_string(rec.shape) + ", model expects " +
                            to_string(p.value.shape()));
    }
    for (std::size_t i = 0; i < rec.values.size(); ++i) p.value[i] = static_cast<T>(rec.values[i]);
    seen.insert(rec.key);
  }
  for (const auto& [key, p] : store) {
    if (!seen.count(key)) throw ValidationError("checkpoint: missing parameter '" + key + "'");
  }
}

template void write_checkpoint(std::ostream&, const ParamStore<float>&);
template void write_checkpoint(std::ostream&, const ParamStore<double>&);
template void save_checkpoint(const std::filesystem::path&, const ParamStore<float>&);
template void save_checkpoint(const std::filesystem::path&, const ParamStore<double>&);
template void restore_checkpoint(const std::vector<CheckpointRecord>&, ParamStore<float>&);
template void restore_checkpoint(const std::vector<CheckpointRecord>&, ParamStore<double>&);

}  // namespace deepmts::nn
