#pragma once

namespace dit {

/// Axis-aligned box as (x, y, w, h) in pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w > 0.0 && h > 0.0 ? w * h : 0.0; }
  bool operator==(const Box&) const = default;
};

}  // namespace dit
