use std::fmt;

/// Dense rank-4 layout: (batch, channels, height, width), row-major with
/// width contiguous.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    /// Same (b, h, w) with channel count either equal or 1 on one side:
    /// the broadcast rule used by mask blending.
    pub fn broadcasts_with(&self, other: &Shape) -> bool {
        self.b == other.b
            && self.h == other.h
            && self.w == other.w
            && (self.c == other.c || self.c == 1 || other.c == 1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}
