#include "ntkcl/param_vector.hpp"

#include <algorithm>

#include "ntkcl/error.hpp"

namespace ntkcl {

std::size_t ParamVector::add(const std::string& name, std::size_t length) {
  require(!has(name), ErrorCode::kInvalidArgument, "duplicate segment name '" + name + "'");
  const std::size_t offset = values_.size();
  segments_.push_back({name, offset, length});
  values_.resize(offset + length, 0.0);
  return offset;
}

bool ParamVector::has(const std::string& name) const {
  return std::any_of(segments_.begin(), segments_.end(), [&](const Segment& s) { return s.name == name; });
}

const Segment& ParamVector::segment(const std::string& name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw Error(ErrorCode::kUnknownSegment, "no parameter segment named '" + name + "'");
}

std::span<double> ParamVector::view(const std::string& name) {
  const Segment& s = segment(name);
  return {values_.data() + s.offset, s.length};
}

std::span<const double> ParamVector::view(const std::string& name) const {
  const Segment& s = segment(name);
  return {values_.data() + s.offset, s.length};
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out = *this;
  std::fill(out.values_.begin(), out.values_.end(), 0.0);
  return out;
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.offset != b.offset || a.length != b.length) return false;
  }
  return true;
}

bool ParamVector::operator==(const ParamVector& other) const {
  return same_layout(other) && values_ == other.values_;
}

double squared_distance(const ParamVector& a, const ParamVector& b) {
  require(a.same_layout(b), ErrorCode::kShapeMismatch, "parameter layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return s;
}

void axpy(ParamVector& a, double scale, const ParamVector& b) {
  require(a.same_layout(b), ErrorCode::kShapeMismatch, "parameter layouts differ");
  for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += scale * b.values()[i];
}

}  // namespace ntkcl
