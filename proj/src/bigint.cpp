#include "psvit/bigint.hpp"

#include <algorithm>
#include <stdexcept>

namespace psvit {

BigUint::BigUint(std::uint64_t v) {
  limbs_.push_back(static_cast<std::uint32_t>(v & 0xffffffffULL));
  limbs_.push_back(static_cast<std::uint32_t>(v >> 32));
  trim();
}

void BigUint::trim() {
  while (limbs_.size() > 1 && limbs_.back() == 0) limbs_.pop_back();
}

BigUint BigUint::from_decimal(const std::string& digits) {
  if (digits.empty()) throw std::invalid_argument("BigUint: empty decimal string");
  BigUint r(0);
  const BigUint ten(10);
  for (char c : digits) {
    if (c < '0' || c > '9') throw std::invalid_argument("BigUint: bad decimal digit");
    r = r * ten;
    // add single digit
    std::uint64_t carry = static_cast<std::uint64_t>(c - '0');
    for (std::size_t i = 0; i < r.limbs_.size() && carry; ++i) {
      carry += r.limbs_[i];
      r.limbs_[i] = static_cast<std::uint32_t>(carry & 0xffffffffULL);
      carry >>= 32;
    }
    if (carry) r.limbs_.push_back(static_cast<std::uint32_t>(carry));
  }
  return r;
}

BigUint BigUint::operator*(const BigUint& rhs) const {
  std::vector<std::uint64_t> acc(limbs_.size() + rhs.limbs_.size(), 0);
  for (std::size_t i = 0; i < limbs_.size(); ++i) {
    std::uint64_t carry = 0;
    for (std::size_t j = 0; j < rhs.limbs_.size(); ++j) {
      const std::uint64_t cur = acc[i + j] +
                                static_cast<std::uint64_t>(limbs_[i]) * rhs.limbs_[j] + carry;
      acc[i + j] = cur & 0xffffffffULL;
      carry = cur >> 32;
    }
    std::size_t k = i + rhs.limbs_.size();
    while (carry) {
      const std::uint64_t cur = acc[k] + carry;
      acc[k] = cur & 0xffffffffULL;
      carry = cur >> 32;
      ++k;
    }
  }
  BigUint out(0);
  out.limbs_.assign(acc.size(), 0);
  for (std::size_t i = 0; i < acc.size(); ++i) out.limbs_[i] = static_cast<std::uint32_t>(acc[i]);
  out.trim();
  return out;
}

bool BigUint::operator<(const BigUint& rhs) const {
  if (limbs_.size() != rhs.limbs_.size()) return limbs_.size() < rhs.limbs_.size();
  for (std::size_t i = limbs_.size(); i-- > 0;) {
    if (limbs_[i] != rhs.limbs_[i]) return limbs_[i] < rhs.limbs_[i];
  }
  return false;
}

BigUint BigUint::pow(const BigUint& base, std::uint64_t exponent) {
  BigUint result(1);
  BigUint b = base;
  std::uint64_t e = exponent;
  while (e) {
    if (e & 1) result = result * b;
    b = b * b;
    e >>= 1;
  }
  return result;
}

std::string BigUint::to_string() const {
  std::vector<std::uint32_t> work(limbs_);
  std::string digits;
  auto all_zero = [&] {
    return std::all_of(work.begin(), work.end(), [](std::uint32_t v) { return v == 0; });
  };
  if (all_zero()) return "0";
  while (!all_zero()) {
    std::uint64_t rem = 0;
    for (std::size_t i = work.size(); i-- > 0;) {
      const std::uint64_t cur = (rem << 32) | work[i];
      work[i] = static_cast<std::uint32_t>(cur / 1000000000ULL);
      rem = cur % 1000000000ULL;
    }
    for (int k = 0; k < 9; ++k) {
      digits.push_back(static_cast<char>('0' + rem % 10));
      rem /= 10;
    }
  }
  while (digits.size() > 1 && digits.back() == '0') digits.pop_back();
  std::reverse(digits.begin(), digits.end());
  return digits;
}

double BigUint::to_double() const {
  double r = 0.0;
  for (std::size_t i = limbs_.size(); i-- > 0;) r = r * 4294967296.0 + limbs_[i];
  return r;
}

}  // namespace psvit
