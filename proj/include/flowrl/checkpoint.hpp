#pragma once

// Versioned little-endian binary checkpoint container.
//
//   "FLOWRLCK" | u32 version | u8 scalar bytes | str config JSON
//   | i32 x 6 net shape | vec policy | vec target | u64 adam steps | vec m | vec v
//   | u64 global step | u64 phase | u64 episode in phase | str rng state
//   | train log | u8 has replay [| replay storage]
//
// Strings and vectors are length-prefixed with a u64. Doubles are stored as
// raw IEEE-754 bits, so a save/load round trip is exact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "flowrl/dqn.hpp"
#include "flowrl/error.hpp"

namespace flowrl {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'L', 'O', 'W', 'R', 'L', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <typename T>
  void put_array(const T* data, std::size_t n) {
    put<std::uint64_t>(n);
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
  }

  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put_array(v.data(), v.size());
  }

  void put_string(const std::string& s) { put_array(s.data(), s.size()); }

  template <typename Derived>
  void put_eigen(const Eigen::PlainObjectBase<Derived>& m) {
    put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    put_array(m.data(), static_cast<std::size_t>(m.size()));
  }

  bool ok() const { return static_cast<bool>(out_); }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw FormatError("checkpoint: unexpected end of file");
    return v;
  }

  template <typename T>
  std::vector<T> get_vector() {
    const auto n = get<std::uint64_t>();
    if (n > (std::uint64_t{1} << 36)) throw FormatError("checkpoint: implausible array length");
    std::vector<T> v(n);
    read_raw(v.data(), n * sizeof(T));
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > (std::uint64_t{1} << 32)) throw FormatError("checkpoint: implausible string length");
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }

  template <typename MatrixT>
  MatrixT get_eigen() {
    const auto rows = get<std::uint64_t>();
    const auto cols = get<std::uint64_t>();
    const auto n = get<std::uint64_t>();
    if (n != rows * cols) throw FormatError("checkpoint: matrix size mismatch");
    MatrixT m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    read_raw(m.data(), n * sizeof(typename MatrixT::Scalar));
    return m;
  }

 private:
  void read_raw(void* dst, std::size_t bytes) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (in_.gcount() != static_cast<std::streamsize>(bytes)) throw FormatError("checkpoint: unexpected end of file");
  }

  std::istream& in_;
};

inline void write_shape(BinaryWriter& w, const NetShape& s) {
  for (int v : {s.vision_in, s.temp_in, s.vision_hidden, s.temp_hidden, s.hidden, s.outputs}) w.put<std::int32_t>(v);
}

inline NetShape read_shape(BinaryReader& r) {
  NetShape s;
  s.vision_in = r.get<std::int32_t>();
  s.temp_in = r.get<std::int32_t>();
  s.vision_hidden = r.get<std::int32_t>();
  s.temp_hidden = r.get<std::int32_t>();
  s.hidden = r.get<std::int32_t>();
  s.outputs = r.get<std::int32_t>();
  return s;
}

template <typename Scalar>
void write_params(BinaryWriter& w, const QNetwork<Scalar>& net) {
  w.put_array(net.params().data(), net.param_count());
}

template <typename Scalar>
void read_params_into(BinaryReader& r, QNetwork<Scalar>& net) {
  const auto v = r.get_vector<Scalar>();
  if (v.size() != net.param_count()) throw FormatError("checkpoint: parameter count does not match network shape");
  std::memcpy(net.params().data(), v.data(), v.size() * sizeof(Scalar));
}

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config;
  NetShape shape;
};

template <typename Scalar = double>
void write_header(BinaryWriter& w, const nlohmann::json& config, const NetShape& shape) {
  for (char c : kCheckpointMagic) w.put(c);
  w.put(kCheckpointVersion);
  w.put<std::uint8_t>(sizeof(Scalar));
  w.put_string(config.dump());
  write_shape(w, shape);
}

template <typename Scalar = double>
CheckpointHeader read_header(BinaryReader& r) {
  std::array<char, 8> magic{};
  for (auto& c : magic) c = r.get<char>();
  if (magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic (not a checkpoint file)");
  CheckpointHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(h.version));
  if (r.get<std::uint8_t>() != sizeof(Scalar)) throw FormatError("checkpoint: scalar precision mismatch");
  try {
    h.config = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: config section: ") + e.what());
  }
  h.shape = read_shape(r);
  return h;
}

// Reads just the header and the policy network of a checkpoint.
template <typename Scalar = double>
QNetwork<Scalar> load_policy(const std::filesystem::path& path, CheckpointHeader* header_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path.string());
  BinaryReader r(in);
  auto header = read_header<Scalar>(r);
  QNetwork<Scalar> net(header.shape);
  read_params_into(r, net);
  if (header_out) *header_out = std::move(header);
  return net;
}

}  // namespace flowrl
