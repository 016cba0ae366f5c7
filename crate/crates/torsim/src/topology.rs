//! Torus geometry: coordinates, distances and link classification.
//!
//! Everything here is a pure function over immutable values; the simulation
//! engine layers node ids and queues on top of these primitives.

use smallvec::SmallVec;
use std::error::Error;
use std::fmt;

/// Per-dimension lengths of an n-dimensional torus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TorusShape {
    dims: SmallVec<[u32; 4]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShapeError {
    NoDimensions,
    DimTooSmall { dim: usize, len: u32 },
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeError::NoDimensions => write!(f, "torus needs at least one dimension"),
            ShapeError::DimTooSmall { dim, len } => {
                write!(f, "dimension {dim} has length {len}, minimum is 3")
            }
        }
    }
}

impl Error for ShapeError {}

impl TorusShape {
    /// Lengths below 3 would make the wraparound link coincide with the
    /// direct one, so they are rejected.
    pub fn new(dims: &[u32]) -> Result<Self, ShapeError> {
        if dims.is_empty() {
            return Err(ShapeError::NoDimensions);
        }
        for (i, &k) in dims.iter().enumerate() {
            if k < 3 {
                return Err(ShapeError::DimTooSmall { dim: i, len: k });
            }
        }
        Ok(TorusShape {
            dims: SmallVec::from_slice(dims),
        })
    }

    pub fn cubic(k: u32, n: usize) -> Result<Self, ShapeError> {
        Self::new(&vec![k; n])
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self, dim: usize) -> u32 {
        self.dims[dim]
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn nodes(&self) -> u64 {
        self.dims.iter().map(|&k| k as u64).product()
    }

    pub fn contains(&self, c: &Coord) -> bool {
        c.n() == self.n() && c.as_slice().iter().zip(self.dims.iter()).all(|(&ci, &k)| ci < k)
    }

    /// Row-major linearization: dimension 0 is the slowest-varying index.
    pub fn linear(&self, c: &Coord) -> u64 {
        debug_assert!(self.contains(c));
        let mut idx = 0u64;
        for (i, &k) in self.dims.iter().enumerate() {
            idx = idx * k as u64 + c.get(i) as u64;
        }
        idx
    }

    pub fn coord(&self, mut idx: u64) -> Coord {
        debug_assert!(idx < self.nodes());
        let mut c = SmallVec::<[u32; 4]>::from_elem(0, self.n());
        for i in (0..self.n()).rev() {
            let k = self.dims[i] as u64;
            c[i] = (idx % k) as u32;
            idx /= k;
        }
        Coord(c)
    }
}

/// A node position, one index per dimension, each in `[0, k_i)`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Coord(SmallVec<[u32; 4]>);

impl Coord {
    pub fn new(c: &[u32]) -> Self {
        Coord(SmallVec::from_slice(c))
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: u32) {
        self.0[i] = v;
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Debug for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl From<&[u32]> for Coord {
    fn from(c: &[u32]) -> Self {
        Coord::new(c)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// One of the 2n outgoing links of a node.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct LinkDir {
    pub dim: usize,
    pub sign: Sign,
}

impl LinkDir {
    pub fn new(dim: usize, sign: Sign) -> Self {
        LinkDir { dim, sign }
    }

    /// Port index used by occupancy snapshots and router state: `2*dim`
    /// for the positive link, `2*dim + 1` for the negative one.
    pub fn port(&self) -> usize {
        self.dim * 2
            + match self.sign {
                Sign::Plus => 0,
                Sign::Minus => 1,
            }
    }

    pub fn from_port(port: usize) -> Self {
        LinkDir {
            dim: port / 2,
            sign: if port % 2 == 0 { Sign::Plus } else { Sign::Minus },
        }
    }
}

/// Classification of one dimension as seen from the source.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DimClass {
    /// Source and destination differ in this dimension.
    MuNu,
    /// Source and destination agree; both links are non-minimal.
    NuNu,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum LinkKind {
    Mu,
    Nu,
}

/// Per-dimension link classes for a fixed source/destination pair.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct DimLinks {
    pub class: DimClass,
    pub plus: LinkKind,
    pub minus: LinkKind,
}

/// Offset from `a` to `b` moving in the positive direction.
#[inline]
pub(crate) fn fwd(a: u32, b: u32, k: u32) -> u32 {
    (b + k - a) % k
}

/// One-dimensional ring distance.
#[inline]
pub(crate) fn dist1(a: u32, b: u32, k: u32) -> u32 {
    let f = fwd(a, b, k);
    f.min(k - f)
}

/// Minimal movement signs in one dimension: (plus_minimal, minus_minimal).
/// Exactly one is true when a != b; the even-k midpoint tie resolves to the
/// positive direction, so every unresolved dimension has a single mu-link.
#[inline]
pub(crate) fn min_signs(a: u32, b: u32, k: u32) -> (bool, bool) {
    let f = fwd(a, b, k);
    if f == 0 {
        (false, false)
    } else {
        (f <= k - f, k - f < f)
    }
}

/// Hop distance between two nodes.
pub fn torus_distance(s: &Coord, t: &Coord, shape: &TorusShape) -> u32 {
    debug_assert!(shape.contains(s) && shape.contains(t), "coordinate out of bounds");
    (0..shape.n())
        .map(|i| dist1(s.get(i), t.get(i), shape.len(i)))
        .sum()
}

/// Classify every outgoing link of `s` with respect to destination `t`.
///
/// Every MuNu dimension has exactly one Mu link; the even-k midpoint tie
/// labels the positive sign Mu and the negative sign Nu.
pub fn classify_links(s: &Coord, t: &Coord, shape: &TorusShape) -> SmallVec<[DimLinks; 4]> {
    debug_assert!(shape.contains(s) && shape.contains(t), "coordinate out of bounds");
    (0..shape.n())
        .map(|i| {
            let (p, m) = min_signs(s.get(i), t.get(i), shape.len(i));
            let class = if s.get(i) == t.get(i) { DimClass::NuNu } else { DimClass::MuNu };
            let kind = |minimal: bool| if minimal { LinkKind::Mu } else { LinkKind::Nu };
            DimLinks { class, plus: kind(p), minus: kind(m) }
        })
        .collect()
}

/// All links out of `c` that lie on some shortest path to `dest`, ordered by
/// dimension with Plus before Minus. Empty iff `c == dest`.
pub fn minimal_next_hops(c: &Coord, dest: &Coord, shape: &TorusShape) -> SmallVec<[LinkDir; 8]> {
    debug_assert!(shape.contains(c) && shape.contains(dest), "coordinate out of bounds");
    let mut out = SmallVec::new();
    for i in 0..shape.n() {
        let (p, m) = min_signs(c.get(i), dest.get(i), shape.len(i));
        if p {
            out.push(LinkDir::new(i, Sign::Plus));
        }
        if m {
            out.push(LinkDir::new(i, Sign::Minus));
        }
    }
    out
}

/// Dimension-order successor used by the escape network: the minimal link of
/// the lowest-index dimension still unresolved. At the even-k midpoint the
/// positive direction is taken.
pub fn dim_order_next_hop(c: &Coord, dest: &Coord, shape: &TorusShape) -> LinkDir {
    debug_assert!(shape.contains(c) && shape.contains(dest), "coordinate out of bounds");
    for i in 0..shape.n() {
        let (p, m) = min_signs(c.get(i), dest.get(i), shape.len(i));
        if p {
            return LinkDir::new(i, Sign::Plus);
        }
        if m {
            return LinkDir::new(i, Sign::Minus);
        }
    }
    panic!("dim_order_next_hop called with c == dest");
}

/// Apply a link to a coordinate, wrapping around the ring.
pub fn step(c: &Coord, link: LinkDir, shape: &TorusShape) -> Coord {
    let mut out = c.clone();
    let k = shape.len(link.dim);
    let v = c.get(link.dim);
    out.set(
        link.dim,
        match link.sign {
            Sign::Plus => (v + 1) % k,
            Sign::Minus => (v + k - 1) % k,
        },
    );
    out
}

/// Precomputed id -> coordinate table for one shape.
pub struct CoordTable {
    coords: Vec<Coord>,
}

impl CoordTable {
    pub fn new(shape: &TorusShape) -> Self {
        let coords = (0..shape.nodes()).map(|i| shape.coord(i)).collect();
        CoordTable { coords }
    }

    pub fn get(&self, id: u32) -> &Coord {
        &self.coords[id as usize]
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(dims: &[u32]) -> TorusShape {
        TorusShape::new(dims).unwrap()
    }

    #[test]
    fn shape_rejects_short_dims() {
        assert_eq!(
            TorusShape::new(&[8, 2]),
            Err(ShapeError::DimTooSmall { dim: 1, len: 2 })
        );
        assert_eq!(TorusShape::new(&[]), Err(ShapeError::NoDimensions));
    }

    #[test]
    fn distance_examples() {
        let sh = shape(&[8, 8, 8]);
        let s = Coord::new(&[0, 0, 0]);
        assert_eq!(torus_distance(&s, &Coord::new(&[1, 2, 3]), &sh), 6);
        assert_eq!(torus_distance(&s, &Coord::new(&[7, 0, 0]), &sh), 1);
        assert_eq!(torus_distance(&s, &s, &sh), 0);
    }

    #[test]
    fn distance_is_a_metric_on_5x5() {
        // Exhaustive over all 25^3 triples.
        let sh = shape(&[5, 5]);
        let pts: Vec<Coord> = (0..sh.nodes()).map(|i| sh.coord(i)).collect();
        for a in &pts {
            for b in &pts {
                let dab = torus_distance(a, b, &sh);
                assert_eq!(dab, torus_distance(b, a, &sh));
                assert_eq!(dab == 0, a == b);
                for c in &pts {
                    assert!(dab + torus_distance(b, c, &sh) >= torus_distance(a, c, &sh));
                }
            }
        }
    }

    #[test]
    fn classify_examples() {
        let sh = shape(&[16, 16]);
        let s = Coord::new(&[0, 0]);
        let cl = classify_links(&s, &Coord::new(&[4, 6]), &sh);
        assert_eq!(cl[0].class, DimClass::MuNu);
        assert_eq!(cl[1].class, DimClass::MuNu);
        assert_eq!(cl[0].plus, LinkKind::Mu);
        assert_eq!(cl[0].minus, LinkKind::Nu);
        assert_eq!(cl[1].plus, LinkKind::Mu);
        assert_eq!(cl[1].minus, LinkKind::Nu);

        let cl = classify_links(&s, &Coord::new(&[6, 0]), &sh);
        assert_eq!(cl[0].class, DimClass::MuNu);
        assert_eq!(cl[0].plus, LinkKind::Mu);
        assert_eq!(cl[0].minus, LinkKind::Nu);
        assert_eq!(cl[1].class, DimClass::NuNu);
        assert_eq!(cl[1].plus, LinkKind::Nu);
        assert_eq!(cl[1].minus, LinkKind::Nu);

        let cl = classify_links(&s, &s, &sh);
        assert!(cl.iter().all(|d| d.class == DimClass::NuNu));
    }

    #[test]
    fn even_k_midpoint_tie_takes_positive_mu_link() {
        let sh = shape(&[8, 8, 8]);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[4, 0, 0]);
        let cl = classify_links(&s, &t, &sh);
        assert_eq!(cl[0].plus, LinkKind::Mu);
        assert_eq!(cl[0].minus, LinkKind::Nu);
        let hops = minimal_next_hops(&s, &t, &sh);
        assert_eq!(hops.as_slice(), &[LinkDir::new(0, Sign::Plus)]);
        // the reverse pair keeps Plus as well: ties do not depend on order
        let hops = minimal_next_hops(&t, &s, &sh);
        assert_eq!(hops.as_slice(), &[LinkDir::new(0, Sign::Plus)]);
    }

    #[test]
    fn minimal_next_hop_examples() {
        let sh = shape(&[8, 8, 8]);
        let c = Coord::new(&[0, 0, 0]);
        let hops = minimal_next_hops(&c, &Coord::new(&[2, 0, 7]), &sh);
        assert_eq!(
            hops.as_slice(),
            &[LinkDir::new(0, Sign::Plus), LinkDir::new(2, Sign::Minus)]
        );
        // adjacent node: singleton
        let hops = minimal_next_hops(&c, &Coord::new(&[0, 1, 0]), &sh);
        assert_eq!(hops.as_slice(), &[LinkDir::new(1, Sign::Plus)]);
    }

    #[test]
    fn dim_order_examples() {
        let sh = shape(&[8, 8, 8]);
        assert_eq!(
            dim_order_next_hop(&Coord::new(&[0, 0, 0]), &Coord::new(&[0, 2, 5]), &sh),
            LinkDir::new(1, Sign::Plus)
        );
        assert_eq!(
            dim_order_next_hop(&Coord::new(&[1, 1, 1]), &Coord::new(&[2, 2, 2]), &sh),
            LinkDir::new(0, Sign::Plus)
        );
        assert_eq!(
            dim_order_next_hop(&Coord::new(&[0, 0, 0]), &Coord::new(&[0, 0, 7]), &sh),
            LinkDir::new(2, Sign::Minus)
        );
    }

    #[test]
    fn dim_order_walk_is_minimal_and_ordered() {
        let sh = shape(&[5, 6, 7]);
        for sid in [0u64, 17, 89, 123, 209] {
            for tid in [3u64, 44, 101, 150, 208] {
                let s = sh.coord(sid);
                let t = sh.coord(tid);
                if s == t {
                    continue;
                }
                let mut c = s.clone();
                let mut steps = 0;
                let mut last_dim = 0;
                while c != t {
                    let l = dim_order_next_hop(&c, &t, &sh);
                    assert!(l.dim >= last_dim, "dimension order violated");
                    last_dim = l.dim;
                    let next = step(&c, l, &sh);
                    assert_eq!(
                        torus_distance(&next, &t, &sh) + 1,
                        torus_distance(&c, &t, &sh)
                    );
                    c = next;
                    steps += 1;
                }
                assert_eq!(steps, torus_distance(&s, &t, &sh));
            }
        }
    }

    #[test]
    fn linear_roundtrip() {
        let sh = shape(&[4, 5, 3]);
        for idx in 0..sh.nodes() {
            assert_eq!(sh.linear(&sh.coord(idx)), idx);
        }
    }
}
