#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace psvit {

// Arbitrary-precision unsigned integer, base 2^32 limbs. Just enough for
// exact search-space cardinalities ((S_t*S_f*S_s)^L easily overflows u64).
class BigUint {
public:
  BigUint() : limbs_{0} {}
  explicit BigUint(std::uint64_t v);

  static BigUint from_decimal(const std::string& digits);
  static BigUint pow(const BigUint& base, std::uint64_t exponent);

  BigUint operator*(const BigUint& rhs) const;
  bool operator==(const BigUint& rhs) const { return limbs_ == rhs.limbs_; }
  bool operator<(const BigUint& rhs) const;
  bool operator<=(const BigUint& rhs) const { return *this < rhs || *this == rhs; }

  bool is_zero() const { return limbs_.size() == 1 && limbs_[0] == 0; }
  std::string to_string() const;
  std::size_t digit_count() const { return to_string().size(); }

  // Leading-digits approximation, e.g. 1.0531e65.
  double to_double() const;

private:
  void trim();
  std::vector<std::uint32_t> limbs_;  // little-endian
};

}  // namespace psvit
