//! Rotated rectangles in the BEV plane and their overlap.

use crate::scalar::Real;

/// A rotated rectangle. `length` runs along `heading`, `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedBox<T> {
    pub x: T,
    pub y: T,
    pub length: T,
    pub width: T,
    pub heading: T,
}

impl<T: Real> RotatedBox<T> {
    pub fn new(x: T, y: T, length: T, width: T, heading: T) -> Self {
        Self {
            x,
            y,
            length,
            width,
            heading,
        }
    }

    pub fn area(&self) -> T {
        self.length * self.width
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(T, T); 4] {
        let two = T::lit(2.0);
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / two, self.width / two);
        let (ux, uy) = (c * hl, s * hl);
        let (nx, ny) = (-s * hw, c * hw);
        [
            (self.x + ux + nx, self.y + uy + ny),
            (self.x - ux + nx, self.y - uy + ny),
            (self.x - ux - nx, self.y - uy - ny),
            (self.x + ux - nx, self.y + uy - ny),
        ]
    }

    /// Radius of the circumscribed circle.
    pub fn bounding_radius(&self) -> T {
        (self.length * self.length + self.width * self.width).sqrt() / T::lit(2.0)
    }

    /// Point expressed in the box frame (along heading, across heading).
    #[inline]
    fn to_local(&self, px: T, py: T) -> (T, T) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// Closed containment test.
    pub fn contains(&self, px: T, py: T) -> bool {
        let (lx, ly) = self.to_local(px, py);
        let two = T::lit(2.0);
        lx.abs() <= self.length / two && ly.abs() <= self.width / two
    }

    /// Strict (interior) containment test.
    pub fn contains_strict(&self, px: T, py: T) -> bool {
        let (lx, ly) = self.to_local(px, py);
        let two = T::lit(2.0);
        lx.abs() < self.length / two && ly.abs() < self.width / two
    }

    /// Whether the segment `a -> b` passes through the interior of the box.
    ///
    /// Liang-Barsky clipping against the closed box, then a strictness check
    /// on the midpoint of the clipped chord so that grazing contact along an
    /// edge or at a corner does not count.
    pub fn segment_intersects_interior(&self, a: (T, T), b: (T, T)) -> bool {
        let (ax, ay) = self.to_local(a.0, a.1);
        let (bx, by) = self.to_local(b.0, b.1);
        let two = T::lit(2.0);
        let (hl, hw) = (self.length / two, self.width / two);
        let (dx, dy) = (bx - ax, by - ay);
        let mut t0 = T::zero();
        let mut t1 = T::one();
        let clips = [(-dx, ax + hl), (dx, hl - ax), (-dy, ay + hw), (dy, hw - ay)];
        for (p, q) in clips {
            if p == T::zero() {
                if q < T::zero() {
                    return false;
                }
                continue;
            }
            let r = q / p;
            if p < T::zero() {
                if r > t1 {
                    return false;
                }
                if r > t0 {
                    t0 = r;
                }
            } else {
                if r < t0 {
                    return false;
                }
                if r < t1 {
                    t1 = r;
                }
            }
        }
        if t0 >= t1 {
            return false;
        }
        let tm = (t0 + t1) / two;
        let (mx, my) = (ax + dx * tm, ay + dy * tm);
        mx.abs() < hl && my.abs() < hw
    }
}

fn polygon_area<T: Real>(poly: &[(T, T)]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    (acc / T::lit(2.0)).abs()
}

/// Sutherland-Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_convex<T: Real>(subject: &[(T, T)], clip: &[(T, T)]) -> Vec<(T, T)> {
    let mut output: Vec<(T, T)> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (ex0, ey0) = clip[i];
        let (ex1, ey1) = clip[(i + 1) % clip.len()];
        let side = |p: (T, T)| (ex1 - ex0) * (p.1 - ey0) - (ey1 - ey0) * (p.0 - ex0);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            let cur_in = sc >= T::zero();
            let prev_in = sp >= T::zero();
            if cur_in != prev_in {
                let t = sp / (sp - sc);
                output.push((prev.0 + (cur.0 - prev.0) * t, prev.1 + (cur.1 - prev.1) * t));
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Area of overlap between two rotated boxes.
pub fn intersection_area<T: Real>(a: &RotatedBox<T>, b: &RotatedBox<T>) -> T {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    let reach = a.bounding_radius() + b.bounding_radius();
    if dx * dx + dy * dy >= reach * reach {
        return T::zero();
    }
    polygon_area(&clip_convex(&a.corners(), &b.corners()))
}

/// Intersection over union of two rotated boxes.
pub fn rotated_iou<T: Real>(a: &RotatedBox<T>, b: &RotatedBox<T>) -> T {
    let inter = intersection_area(a, b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::lit(std::f64::consts::TAU);
    let pi = T::lit(std::f64::consts::PI);
    let mut w = (a + pi) % two_pi;
    if w < T::zero() {
        w += two_pi;
    }
    let out = w - pi;
    if out >= pi {
        -pi
    } else {
        out
    }
}
