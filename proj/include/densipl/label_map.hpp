#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "densipl/error.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

enum class LabelKind : std::uint8_t { unlabeled, hard, soft };

/// Per-pixel pseudo label: Unlabeled, Hard(class) or Soft(K-vector).
///
/// Stored as one uint16 code per pixel (class id, or a sentinel) plus a dense
/// H×W×K float buffer that only exists once a Soft entry has been written.
class LabelMap {
 public:
  static constexpr std::uint16_t kUnlabeled = 65535;
  static constexpr std::uint16_t kSoft = 65534;
  static constexpr std::size_t kMaxClasses = 65534;

  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, std::size_t num_classes)
      : height_(height), width_(width), classes_(num_classes), codes_(height * width, kUnlabeled) {
    if (num_classes == 0 || num_classes > kMaxClasses) {
      fail_invariant("label map class count must be in [1, 65534]");
    }
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t num_classes() const { return classes_; }
  std::size_t pixels() const { return codes_.size(); }

  LabelKind kind(std::size_t i) const {
    if (codes_[i] == kUnlabeled) return LabelKind::unlabeled;
    if (codes_[i] == kSoft) return LabelKind::soft;
    return LabelKind::hard;
  }
  bool is_hard(std::size_t i) const { return codes_[i] < kSoft; }
  bool is_unlabeled(std::size_t i) const { return codes_[i] == kUnlabeled; }

  /// Class id of a Hard pixel. Meaningless for other kinds.
  std::size_t hard_class(std::size_t i) const { return codes_[i]; }
  std::uint16_t code(std::size_t i) const { return codes_[i]; }

  std::span<const float> soft(std::size_t i) const {
    return {soft_.data() + i * classes_, classes_};
  }

  void set_unlabeled(std::size_t i) { codes_[i] = kUnlabeled; }

  void set_hard(std::size_t i, std::size_t cls) {
    if (cls >= classes_) {
      fail_invariant("class id " + std::to_string(cls) + " >= K=" + std::to_string(classes_));
    }
    codes_[i] = static_cast<std::uint16_t>(cls);
  }

  void set_soft(std::size_t i, std::span<const float> v) {
    if (v.size() != classes_) fail_invariant("soft label length does not match K");
    for (float x : v) {
      if (!(x >= 0.0f) || !std::isfinite(x)) fail_invariant("soft label entries must be finite and non-negative");
    }
    if (soft_.empty()) soft_.assign(codes_.size() * classes_, 0.0f);
    std::copy(v.begin(), v.end(), soft_.begin() + static_cast<std::ptrdiff_t>(i * classes_));
    codes_[i] = kSoft;
  }

  std::size_t count(LabelKind k) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < pixels(); ++i) n += kind(i) == k;
    return n;
  }
  std::size_t labeled_count() const { return pixels() - count(LabelKind::unlabeled); }
  bool has_soft() const { return count(LabelKind::soft) > 0; }

  /// Semantic equality: soft buffers compared only where pixels are Soft.
  friend bool operator==(const LabelMap& a, const LabelMap& b) {
    if (a.height_ != b.height_ || a.width_ != b.width_ || a.classes_ != b.classes_ || a.codes_ != b.codes_) {
      return false;
    }
    for (std::size_t i = 0; i < a.pixels(); ++i) {
      if (a.kind(i) != LabelKind::soft) continue;
      auto sa = a.soft(i), sb = b.soft(i);
      if (!std::equal(sa.begin(), sa.end(), sb.begin())) return false;
    }
    return true;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t classes_ = 0;
  std::vector<std::uint16_t> codes_;
  std::vector<float> soft_;
};

/// Hard/unlabeled maps become a uint16 H×W grid (65535 = Unlabeled); maps with
/// any Soft pixel become float32 H×W×K with one-hot Hard and zero Unlabeled.
inline Tensor label_map_to_tensor(const LabelMap& m) {
  if (!m.has_soft()) {
    std::vector<std::uint16_t> codes(m.pixels());
    for (std::size_t i = 0; i < m.pixels(); ++i) codes[i] = m.code(i);
    return Tensor({m.height(), m.width()}, std::move(codes));
  }
  const std::size_t k = m.num_classes();
  std::vector<float> v(m.pixels() * k, 0.0f);
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    switch (m.kind(i)) {
      case LabelKind::unlabeled: break;
      case LabelKind::hard: v[i * k + m.hard_class(i)] = 1.0f; break;
      case LabelKind::soft: {
        auto s = m.soft(i);
        std::copy(s.begin(), s.end(), v.begin() + static_cast<std::ptrdiff_t>(i * k));
        break;
      }
    }
  }
  return Tensor({m.height(), m.width(), k}, std::move(v));
}

/// Inverse of label_map_to_tensor. `num_classes` is required for uint16 grids;
/// for float32 maps it must match the channel count when given. A float32
/// vector that is exactly one-hot decodes as Hard, an all-zero one as Unlabeled.
inline LabelMap label_map_from_tensor(const Tensor& t, std::optional<std::size_t> num_classes) {
  if (t.dtype() == DType::uint16) {
    if (t.rank() != 2) fail_input("uint16 label map must be rank 2 (H x W)");
    if (!num_classes) fail_input("class count required to decode a uint16 label map");
    LabelMap m(t.shape()[0], t.shape()[1], *num_classes);
    const auto codes = t.values<std::uint16_t>();
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (codes[i] == LabelMap::kUnlabeled) continue;
      if (codes[i] >= *num_classes) {
        fail_invariant("label map class id " + std::to_string(codes[i]) + " >= K=" +
                       std::to_string(*num_classes));
      }
      m.set_hard(i, codes[i]);
    }
    return m;
  }
  if (t.dtype() == DType::float32) {
    if (t.rank() != 3) fail_input("float32 label map must be rank 3 (H x W x K)");
    const std::size_t k = t.shape()[2];
    if (num_classes && *num_classes != k) fail_input("soft label map channel count does not match K");
    LabelMap m(t.shape()[0], t.shape()[1], k);
    const auto v = t.values<float>();
    for (std::size_t i = 0; i < m.pixels(); ++i) {
      std::span<const float> s(v.data() + i * k, k);
      std::size_t nonzero = 0, one_at = k;
      for (std::size_t c = 0; c < k; ++c) {
        if (s[c] != 0.0f) ++nonzero;
        if (s[c] == 1.0f) one_at = c;
      }
      if (nonzero == 0) continue;
      if (nonzero == 1 && one_at < k) {
        m.set_hard(i, one_at);
      } else {
        m.set_soft(i, s);
      }
    }
    return m;
  }
  fail_input("label maps must be uint16 or float32");
}

inline void save_label_map(const LabelMap& m, const std::filesystem::path& path) {
  save_tensor(label_map_to_tensor(m), path);
}

inline LabelMap load_label_map(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  return label_map_from_tensor(load_tensor(path), num_classes);
}

/// 1 where the pixel carries any label, 0 where it is Unlabeled.
inline std::vector<std::uint8_t> labeled_mask(const LabelMap& m) {
  std::vector<std::uint8_t> mask(m.pixels());
  for (std::size_t i = 0; i < m.pixels(); ++i) mask[i] = !m.is_unlabeled(i);
  return mask;
}

}  // namespace densipl
