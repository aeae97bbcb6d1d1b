#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ntkcl {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Flat parameter storage with a named-segment index. Segment names are unique
/// and segments tile the storage in insertion order.
class ParamVector {
 public:
  ParamVector() = default;

  /// Appends a zero-filled segment and returns its offset.
  std::size_t add(const std::string& name, std::size_t length);

  bool has(const std::string& name) const;
  const Segment& segment(const std::string& name) const;
  const std::vector<Segment>& segments() const noexcept { return segments_; }

  std::span<double> view(const std::string& name);
  std::span<const double> view(const std::string& name) const;

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }

  /// Same segment layout, all values zero.
  ParamVector zeros_like() const;
  bool same_layout(const ParamVector& other) const;

  bool operator==(const ParamVector& other) const;

 private:
  std::vector<Segment> segments_;
  std::vector<double> values_;
};

double squared_distance(const ParamVector& a, const ParamVector& b);
/// a += scale·b over identical layouts.
void axpy(ParamVector& a, double scale, const ParamVector& b);

}  // namespace ntkcl
