//! Adaptive-precision orientation and incircle predicates.
//!
//! Signs are exact; magnitudes are only meaningful as signs.

use crate::geom::Point2;

/// Positive when `a, b, c` turn counter-clockwise, negative when clockwise,
/// zero when collinear.
#[inline]
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    robust::orient2d(a.to_robust(), b.to_robust(), c.to_robust())
}

/// Positive when `d` lies strictly inside the circle through the
/// counter-clockwise triangle `a, b, c`, negative when strictly outside.
#[inline]
pub fn incircle(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    robust::incircle(a.to_robust(), b.to_robust(), c.to_robust(), d.to_robust())
}

/// For `p` collinear with `a` and `b`: true when `p` lies strictly between them.
#[inline]
pub fn strictly_between(p: Point2, a: Point2, b: Point2) -> bool {
    use crate::pointprocess::lex_less;
    (lex_less(a, p) && lex_less(p, b)) || (lex_less(b, p) && lex_less(p, a))
}
