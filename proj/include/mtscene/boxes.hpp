#pragma once

#include <cstdint>

namespace mtscene {

// Axis-aligned box in pixels, half-open convention: pixels with
// x0 <= x < x1 and y0 <= y < y1 belong to the box.
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int cls = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
};

struct Detection {
    Box box;
    double score = 0.0;
};

}  // namespace mtscene
