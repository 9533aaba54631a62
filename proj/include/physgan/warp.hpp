#pragma once

#include <array>

#include "physgan/tensor.hpp"

namespace physgan {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// Four corners in pixel coordinates, fixed order: top-left, top-right,
// bottom-right, bottom-left. That winding has positive shoelace area in
// image coordinates (y grows downward); other windings are rejected.
struct Quad {
    std::array<Vec2, 4> corners{};

    double signed_area() const;
    // Finite corners, positive area above `min_area`, no three collinear.
    bool valid(double min_area = 1e-6) const;
    void require_valid(const char* who) const;  // GeometryError otherwise
    Vec2 min_corner() const;
    Vec2 max_corner() const;
};

// Axis-aligned rectangle (0,0)-(w,h) as a Quad.
Quad rect_quad(double width, double height);
Quad translated(const Quad& q, double dx, double dy);

// 3x3 projective map, normalized so the bottom-right entry is 1.
class Homography {
public:
    // Direct linear solve on the four correspondences (8x8 system, with
    // Hartley-style normalization for conditioning). GeometryError on
    // degenerate quads or a singular system.
    static Homography from_corners(const Quad& src, const Quad& dst);
    static Homography from_matrix(const std::array<double, 9>& m);

    Vec2 apply(const Vec2& p) const;
    Homography inverse() const;  // GeometryError when |det| <= 1e-12
    double det() const;
    const std::array<double, 9>& matrix() const { return m_; }

private:
    std::array<double, 9> m_{1, 0, 0, 0, 1, 0, 0, 0, 1};
};

// Pixel-center-inside-quad test: cross-product sign against the four edges,
// boundary counts as inside.
bool point_in_quad(const Quad& q, const Vec2& p);

// Replaces every frame pixel whose center lies inside `quad` with a bilinear
// sample of `sign` through the rectangle->quad homography; all other pixels
// are carried over bit-identically. Output is linear in the sign pixels and
// participates in the gradient tape. frame: [C,H,W], sign: [C,SH,SW].
Tensor composite(const Tensor& frame, const Tensor& sign, const Quad& quad);

// Inverse perspective mapping: resamples the quad interior of `frame` into an
// axis-aligned [C, out_h, out_w] patch (bilinear, border-clamped).
Tensor rectify(const Tensor& frame, const Quad& quad, int out_h, int out_w);

}  // namespace physgan
