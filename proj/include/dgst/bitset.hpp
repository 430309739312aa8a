#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "dgst/common.hpp"

namespace dgst {

// Flat bit set over parameter scalar indices.
class Bitset {
 public:
  Bitset() = default;
  explicit Bitset(int64_t n, bool value = false)
      : size_(n), words_(size_t((n + 63) / 64), value ? ~uint64_t(0) : 0) {
    trim();
  }

  int64_t size() const { return size_; }

  void set(int64_t i, bool v = true) {
    if (v)
      words_[size_t(i >> 6)] |= (uint64_t(1) << (i & 63));
    else
      words_[size_t(i >> 6)] &= ~(uint64_t(1) << (i & 63));
  }

  bool test(int64_t i) const {
    return (words_[size_t(i >> 6)] >> (i & 63)) & 1;
  }

  void set_all() {
    for (auto& w : words_) w = ~uint64_t(0);
    trim();
  }

  void clear() {
    for (auto& w : words_) w = 0;
  }

  int64_t count() const {
    int64_t c = 0;
    for (uint64_t w : words_) c += std::popcount(w);
    return c;
  }

  // Set bits within [lo, hi), ascending.
  template <class F>
  void for_each_set_in(int64_t lo, int64_t hi, F&& f) const {
    for (int64_t wi = lo >> 6; wi <= (hi - 1) >> 6 && hi > lo; ++wi) {
      uint64_t w = words_[size_t(wi)];
      if (!w) continue;
      const int64_t base = wi << 6;
      while (w) {
        const int b = std::countr_zero(w);
        const int64_t idx = base + b;
        if (idx >= hi) return;
        if (idx >= lo) f(idx);
        w &= w - 1;
      }
    }
  }

  template <class F>
  void for_each_set(F&& f) const {
    for_each_set_in(0, size_, f);
  }

  bool operator==(const Bitset& other) const = default;

 private:
  void trim() {
    if (size_ & 63) words_.back() &= (uint64_t(1) << (size_ & 63)) - 1;
  }
  int64_t size_ = 0;
  std::vector<uint64_t> words_;
};

}  // namespace dgst
