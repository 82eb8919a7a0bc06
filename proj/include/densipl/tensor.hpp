#pragma once

// Dense tensors and the DPLT container format.
//
// DPLT layout (all integers little-endian):
//   bytes 0..7    magic "DPLT0001"
//   bytes 8..11   uint32 header length L
//   next L bytes  UTF-8 JSON {"dtype":...,"shape":[...]} padded with spaces so
//                 that the payload starts on an 8-byte boundary
//   remainder     row-major payload, little-endian, exactly prod(shape) values

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "densipl/error.hpp"

namespace densipl {

enum class DType : std::uint8_t { float32, uint16, uint8 };

inline std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::float32: return "float32";
    case DType::uint16: return "uint16";
    case DType::uint8: return "uint8";
  }
  return "?";
}

inline DType parse_dtype(std::string_view name) {
  if (name == "float32") return DType::float32;
  if (name == "uint16") return DType::uint16;
  if (name == "uint8") return DType::uint8;
  fail_input("unsupported dtype '" + std::string(name) + "'");
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::float32;
  else if constexpr (std::is_same_v<T, std::uint16_t>) return DType::uint16;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported tensor element type");
    return DType::uint8;
  }
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::float32: return 4;
    case DType::uint16: return 2;
    case DType::uint8: return 1;
  }
  return 0;
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Row-major tensor of one of the three supported element types.
class Tensor {
 public:
  using Storage =
      std::variant<std::vector<float>, std::vector<std::uint16_t>, std::vector<std::uint8_t>>;

  Tensor() : shape_{1}, data_(std::vector<float>(1, 0.0f)) {}

  template <class T>
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    check_shape();
    if (values_size() != shape_product(shape_)) {
      fail_invariant("tensor data length " + std::to_string(values_size()) +
                     " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(DType dtype, Shape shape) {
    const std::size_t n = shape_product(shape);
    switch (dtype) {
      case DType::float32: return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
      case DType::uint16: return Tensor(std::move(shape), std::vector<std::uint16_t>(n, 0));
      case DType::uint8: return Tensor(std::move(shape), std::vector<std::uint8_t>(n, 0));
    }
    fail_input("unsupported dtype");
  }

  DType dtype() const { return static_cast<DType>(data_.index()); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return shape_product(shape_); }

  template <class T>
  std::span<const T> values() const {
    if (dtype() != dtype_of<T>()) {
      fail_input("tensor has dtype " + std::string(dtype_name(dtype())) + ", expected " +
                 std::string(dtype_name(dtype_of<T>())));
    }
    return std::get<std::vector<T>>(data_);
  }

  template <class T>
  std::span<T> values() {
    if (dtype() != dtype_of<T>()) {
      fail_input("tensor has dtype " + std::string(dtype_name(dtype())) + ", expected " +
                 std::string(dtype_name(dtype_of<T>())));
    }
    return std::get<std::vector<T>>(data_);
  }

  /// Raw little-endian payload bytes.
  std::vector<std::uint8_t> payload_bytes() const;

  /// Bitwise equality: float payloads compare by representation, so -0.0 != 0.0.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.dtype() == b.dtype() &&
           a.payload_bytes() == b.payload_bytes();
  }

 private:
  std::size_t values_size() const {
    return std::visit([](const auto& v) { return v.size(); }, data_);
  }
  void check_shape() const {
    if (shape_.empty()) fail_invariant("tensor shape must have at least one dimension");
    for (auto d : shape_) {
      if (d == 0) fail_invariant("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Storage data_;
};

namespace detail {

inline constexpr std::array<char, 8> kMagic{'D', 'P', 'L', 'T', '0', '0', '0', '1'};

template <class T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t,
                               std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <class T>
T read_le(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t,
                               std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(U(p[i]) << (8 * i));
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline std::vector<std::uint8_t> Tensor::payload_bytes() const {
  std::vector<std::uint8_t> out;
  out.reserve(size() * dtype_size(dtype()));
  std::visit(
      [&](const auto& v) {
        for (auto x : v) detail::append_le(out, x);
      },
      data_);
  return out;
}

/// Serializes a tensor into DPLT bytes.
inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  nlohmann::json header;
  header["dtype"] = dtype_name(t.dtype());
  header["shape"] = t.shape();
  std::string text = header.dump();
  while ((detail::kMagic.size() + 4 + text.size()) % 8 != 0) text.push_back(' ');

  std::vector<std::uint8_t> out(detail::kMagic.begin(), detail::kMagic.end());
  detail::append_le(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const auto payload = t.payload_bytes();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t prefix = detail::kMagic.size() + 4;
  if (bytes.size() < prefix ||
      !std::equal(detail::kMagic.begin(), detail::kMagic.end(), bytes.begin())) {
    fail_input("bad magic: not a DPLT file");
  }
  const auto header_len = detail::read_le<std::uint32_t>(bytes.data() + detail::kMagic.size());
  if (bytes.size() - prefix < header_len) fail_input("size mismatch: header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + prefix, bytes.begin() + prefix + header_len);
  } catch (const nlohmann::json::exception& e) {
    fail_input(std::string("malformed DPLT header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("dtype") || !header.contains("shape") ||
      !header["dtype"].is_string() || !header["shape"].is_array()) {
    fail_input("DPLT header must contain string 'dtype' and array 'shape'");
  }
  const DType dtype = parse_dtype(header["dtype"].get<std::string>());
  Shape shape;
  for (const auto& d : header["shape"]) {
    if (!d.is_number_unsigned() || d.get<std::size_t>() == 0) {
      fail_input("DPLT shape entries must be positive integers");
    }
    shape.push_back(d.get<std::size_t>());
  }
  if (shape.empty()) fail_input("DPLT shape must be non-empty");

  const std::size_t count = shape_product(shape);
  const std::size_t payload = bytes.size() - prefix - header_len;
  if (payload != count * dtype_size(dtype)) {
    fail_input("size mismatch: payload has " + std::to_string(payload) + " bytes, shape " +
               shape_string(shape) + " needs " + std::to_string(count * dtype_size(dtype)));
  }
  const std::uint8_t* p = bytes.data() + prefix + header_len;

  switch (dtype) {
    case DType::float32: {
      std::vector<float> v(count);
      for (std::size_t i = 0; i < count; ++i) {
        v[i] = detail::read_le<float>(p + 4 * i);
        if (!std::isfinite(v[i])) {
          fail_input("non-finite value in payload at flat index " + std::to_string(i));
        }
      }
      return Tensor(std::move(shape), std::move(v));
    }
    case DType::uint16: {
      std::vector<std::uint16_t> v(count);
      for (std::size_t i = 0; i < count; ++i) v[i] = detail::read_le<std::uint16_t>(p + 2 * i);
      return Tensor(std::move(shape), std::move(v));
    }
    case DType::uint8:
      return Tensor(std::move(shape), std::vector<std::uint8_t>(p, p + count));
  }
  fail_input("unsupported dtype");
}

/// Writes bytes to `path` through a sibling temp file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail_input("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail_input("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail_input("cannot rename '" + tmp.string() + "': " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(
                              reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_input("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_tensor(bytes);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

/// H×W×C row-major grid, channel fastest. Used for maps that never touch disk
/// in double precision (logits, gradients, features) as well as float32 maps.
template <class T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, std::size_t c, T fill = T{})
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t pixels() const { return height * width; }
  T& at(std::size_t y, std::size_t x, std::size_t k) { return data[(y * width + x) * channels + k]; }
  const T& at(std::size_t y, std::size_t x, std::size_t k) const {
    return data[(y * width + x) * channels + k];
  }
  std::span<T> pixel(std::size_t i) { return {data.data() + i * channels, channels}; }
  std::span<const T> pixel(std::size_t i) const { return {data.data() + i * channels, channels}; }
  bool same_shape(std::size_t h, std::size_t w, std::size_t c) const {
    return height == h && width == w && channels == c;
  }
};

inline Tensor to_tensor(const Grid<float>& g) {
  return Tensor({g.height, g.width, g.channels}, g.data);
}

inline constexpr double kChannelSumTolerance = 1e-4;

/// Validated H×W×K softmax output.
class ProbabilityMap {
 public:
  ProbabilityMap() = default;

  /// Throws ErrorKind::invariant if any value is outside [0,1] or a pixel's
  /// channel sum is outside 1 ± 1e-4.
  explicit ProbabilityMap(Grid<float> probs) : probs_(std::move(probs)) { validate(); }

  std::size_t height() const { return probs_.height; }
  std::size_t width() const { return probs_.width; }
  std::size_t num_classes() const { return probs_.channels; }
  std::size_t pixels() const { return probs_.pixels(); }
  std::span<const float> pixel(std::size_t i) const { return probs_.pixel(i); }
  float at(std::size_t y, std::size_t x, std::size_t k) const { return probs_.at(y, x, k); }
  const Grid<float>& grid() const { return probs_; }
  Tensor to_tensor() const { return densipl::to_tensor(probs_); }

 private:
  void validate() const {
    if (probs_.channels == 0 || probs_.pixels() == 0) fail_invariant("probability map is empty");
    for (std::size_t i = 0; i < probs_.pixels(); ++i) {
      double sum = 0.0;
      for (float v : probs_.pixel(i)) {
        if (!(v >= 0.0f && v <= 1.0f)) {
          fail_invariant("probability out of range [0,1] at pixel " + std::to_string(i) + ": " +
                         std::to_string(v));
        }
        sum += v;
      }
      if (std::abs(sum - 1.0) > kChannelSumTolerance) {
        fail_invariant("channel sum " + std::to_string(sum) + " outside 1 +/- 1e-4 at pixel " +
                       std::to_string(i));
      }
    }
  }

  Grid<float> probs_;
};

inline ProbabilityMap validate_probability_map(const Tensor& t) {
  if (t.rank() != 3) fail_input("probability map must be rank 3 (H x W x K), got " + shape_string(t.shape()));
  if (t.dtype() != DType::float32) fail_input("probability map must be float32");
  Grid<float> g;
  g.height = t.shape()[0];
  g.width = t.shape()[1];
  g.channels = t.shape()[2];
  const auto v = t.values<float>();
  g.data.assign(v.begin(), v.end());
  return ProbabilityMap(std::move(g));
}

/// Index of the largest entry; ties go to the lowest index.
template <class T>
std::size_t argmax_lowest(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return best;
}

}  // namespace densipl
