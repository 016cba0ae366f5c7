//! Intermediate destination nodes: wraparound IDNs, outflank IDNs and the
//! candidate sets offered to the deroute decision.

use crate::policy::RoutePolicy;
use crate::topology::{
    classify_links, dist1, fwd, torus_distance, Coord, DimClass, LinkKind, Sign, TorusShape,
};
use smallvec::SmallVec;
use std::error::Error;
use std::fmt;

/// How a packet was (or would be) derouted.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum IdnKind {
    Widn { beta: SmallVec<[u8; 4]> },
    Oidn { lambda: SmallVec<[i8; 4]> },
}

/// A deroute target together with its path cost.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IdnCandidate {
    pub q: Coord,
    pub kind: IdnKind,
    /// d(s,q) + d(q,t)
    pub total_dist: u32,
    /// total_dist - d(s,t)
    pub dilation: u32,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum IdnError {
    /// An all-zero lambda vector performs no deroute and is not an OIDN.
    NullLambda,
    /// Outflank lambda sets are only defined for 2 and 3 dimensions.
    UnsupportedDims(usize),
}

impl fmt::Display for IdnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdnError::NullLambda => write!(f, "all-zero lambda performs no deroute"),
            IdnError::UnsupportedDims(n) => {
                write!(f, "outflank candidate sets are defined for 2 or 3 dimensions, got {n}")
            }
        }
    }
}

impl Error for IdnError {}

/// Wraparound IDN: the midpoint of the orthant selected by the binary
/// vector `beta`, componentwise floor((s_i + t_i + beta_i * k_i) / 2) mod k_i.
pub fn widn(s: &Coord, t: &Coord, beta: &[u8], shape: &TorusShape) -> Coord {
    assert!(shape.contains(s) && shape.contains(t), "coordinate out of bounds");
    assert_eq!(beta.len(), shape.n());
    let mut q = s.clone();
    for i in 0..shape.n() {
        let k = shape.len(i);
        let v = (s.get(i) + t.get(i) + beta[i] as u32 * k) / 2 % k;
        q.set(i, v);
    }
    q
}

/// Midpoint of the minimal one-dimensional path from `a` to `b`. Uses the
/// wraparound form when the minimal path wraps; at the even-k midpoint tie it
/// stays on the positive (mu) arc.
fn minimal_mid(a: u32, b: u32, k: u32) -> u32 {
    let f = fwd(a, b, k);
    if 2 * f == k {
        return (a + f / 2) % k;
    }
    let m0 = (a + b) / 2 % k;
    if dist1(a, m0, k) + dist1(m0, b, k) == dist1(a, b, k) {
        m0
    } else {
        (a + b + k) / 2 % k
    }
}

/// Outflank IDN for a lambda vector over {-1, 0, 1}.
///
/// For unequal (MuNu) dimensions a nonzero lambda steps `delta` outside the
/// minimal orthant, anchored at `s_i` when the chosen link is non-minimal and
/// at `t_i` when it is minimal; lambda zero keeps the minimal midpoint. For
/// equal (NuNu) dimensions the coordinate is offset by `lambda_i * delta`.
pub fn oidn(
    s: &Coord,
    t: &Coord,
    lambda: &[i8],
    delta: u32,
    shape: &TorusShape,
) -> Result<Coord, IdnError> {
    assert!(shape.contains(s) && shape.contains(t), "coordinate out of bounds");
    assert_eq!(lambda.len(), shape.n());
    assert!(delta >= 1);
    if lambda.iter().all(|&l| l == 0) {
        return Err(IdnError::NullLambda);
    }
    let classes = classify_links(s, t, shape);
    let mut q = s.clone();
    for i in 0..shape.n() {
        let k = shape.len(i);
        let (si, ti) = (s.get(i), t.get(i));
        let d = delta % k;
        let v = match classes[i].class {
            DimClass::MuNu => match lambda[i] {
                -1 => {
                    let anchor = if classes[i].minus == LinkKind::Nu { si } else { ti };
                    (anchor + k - d) % k
                }
                1 => {
                    let anchor = if classes[i].plus == LinkKind::Nu { si } else { ti };
                    (anchor + d) % k
                }
                0 => minimal_mid(si, ti, k),
                other => panic!("lambda component out of range: {other}"),
            },
            DimClass::NuNu => match lambda[i] {
                -1 => (si + k - d) % k,
                1 => (si + d) % k,
                0 => si,
                other => panic!("lambda component out of range: {other}"),
            },
        };
        q.set(i, v);
    }
    Ok(q)
}

/// Extra hops incurred by routing through `q` instead of going straight.
pub fn dilation(s: &Coord, q: &Coord, t: &Coord, shape: &TorusShape) -> u32 {
    torus_distance(s, q, shape) + torus_distance(q, t, shape) - torus_distance(s, t, shape)
}

// Lambda sets from the 3D outflank construction, with the dimensions in
// which source and destination agree listed first and minimal links taken
// as positively oriented.
const LAMBDA_3D_DIFF_ALL: &[[i8; 3]] = &[
    [0, -1, 1],
    [0, 1, -1],
    [-1, 0, 1],
    [1, 0, -1],
    [-1, 1, 0],
    [1, -1, 0],
];
const LAMBDA_3D_COPLANAR: &[[i8; 3]] = &[[0, -1, 1], [0, 1, -1], [1, 0, 0], [-1, 0, 0]];
const LAMBDA_3D_COLLINEAR: &[[i8; 3]] = &[[1, 0, 1], [-1, 0, 0], [0, 1, -1], [0, -1, 0]];

// 2D sets: the generic case uses the two mixed-sign vectors; the collinear
// case uses the reduced four-element cover with the smaller dilations.
const LAMBDA_2D_DIFF_ALL: &[[i8; 2]] = &[[1, -1], [-1, 1]];
const LAMBDA_2D_COLLINEAR: &[[i8; 2]] = &[[1, -1], [1, 0], [-1, 0], [-1, 1]];

/// Actual-axis lambda vectors for one (s, t) pair: the canonical list is
/// permuted so its leading positions land on the equal-coordinate dimensions,
/// and MuNu components are mirrored where the minimal link points negative.
fn lambda_vectors(
    s: &Coord,
    t: &Coord,
    shape: &TorusShape,
) -> Result<Vec<SmallVec<[i8; 4]>>, IdnError> {
    let n = shape.n();
    let classes = classify_links(s, t, shape);
    let mut order: SmallVec<[usize; 4]> = (0..n).filter(|&i| s.get(i) == t.get(i)).collect();
    let eq = order.len();
    order.extend((0..n).filter(|&i| s.get(i) != t.get(i)));

    let canonical: &[&[i8]] = match (n, eq) {
        (3, 0) => &[
            &LAMBDA_3D_DIFF_ALL[0],
            &LAMBDA_3D_DIFF_ALL[1],
            &LAMBDA_3D_DIFF_ALL[2],
            &LAMBDA_3D_DIFF_ALL[3],
            &LAMBDA_3D_DIFF_ALL[4],
            &LAMBDA_3D_DIFF_ALL[5],
        ],
        (3, 1) => &[
            &LAMBDA_3D_COPLANAR[0],
            &LAMBDA_3D_COPLANAR[1],
            &LAMBDA_3D_COPLANAR[2],
            &LAMBDA_3D_COPLANAR[3],
        ],
        (3, 2) => &[
            &LAMBDA_3D_COLLINEAR[0],
            &LAMBDA_3D_COLLINEAR[1],
            &LAMBDA_3D_COLLINEAR[2],
            &LAMBDA_3D_COLLINEAR[3],
        ],
        (2, 0) => &[&LAMBDA_2D_DIFF_ALL[0], &LAMBDA_2D_DIFF_ALL[1]],
        (2, 1) => &[
            &LAMBDA_2D_COLLINEAR[0],
            &LAMBDA_2D_COLLINEAR[1],
            &LAMBDA_2D_COLLINEAR[2],
            &LAMBDA_2D_COLLINEAR[3],
        ],
        (2 | 3, _) => unreachable!("s == t must be filtered by the caller"),
        (n, _) => return Err(IdnError::UnsupportedDims(n)),
    };

    let mut out = Vec::with_capacity(canonical.len());
    for canon in canonical {
        let mut lambda = SmallVec::<[i8; 4]>::from_elem(0, n);
        for (pos, &dim) in order.iter().enumerate() {
            let mut l = canon[pos];
            // Mirror where the minimal link is strictly negatively oriented.
            if classes[dim].class == DimClass::MuNu
                && classes[dim].minus == LinkKind::Mu
                && classes[dim].plus == LinkKind::Nu
            {
                l = -l;
            }
            lambda[dim] = l;
        }
        out.push(lambda);
    }
    Ok(out)
}

/// Deroute candidates for a source/destination pair.
///
/// POR sees the wraparound IDNs of the non-minimal orthants; OFR additionally
/// sees the outflank IDNs, listed first. ABR never deroutes and gets an empty
/// set. Candidates that coincide with `s` or `t` are dropped, as is the
/// all-mu orthant (its midpoint performs no deroute). Other orthants are kept
/// even at dilation zero: the opposite arc of a midpoint tie has equal length
/// but leaves the minimal orthant through a nu-link.
pub fn candidate_set(
    s: &Coord,
    t: &Coord,
    policy: RoutePolicy,
    delta: u32,
    shape: &TorusShape,
) -> Result<Vec<IdnCandidate>, IdnError> {
    if s == t || policy == RoutePolicy::Abr {
        return Ok(Vec::new());
    }
    let n = shape.n();
    let d = torus_distance(s, t, shape);
    let mut out = Vec::new();

    if policy == RoutePolicy::Ofr {
        for lambda in lambda_vectors(s, t, shape)? {
            let q = oidn(s, t, &lambda, delta, shape)?;
            if q == *s || q == *t {
                continue;
            }
            let total = torus_distance(s, &q, shape) + torus_distance(&q, t, shape);
            out.push(IdnCandidate {
                q,
                kind: IdnKind::Oidn { lambda },
                total_dist: total,
                dilation: total - d,
            });
        }
    }

    // midpoint of the all-mu orthant, the one orthant that never deroutes;
    // comparing coordinates sidesteps beta labels, which flip per dimension
    // when the raw coordinate sum wraps past k
    let mut q_mu = s.clone();
    for i in 0..n {
        q_mu.set(i, minimal_mid(s.get(i), t.get(i), shape.len(i)));
    }

    for bits in 0..(1u32 << n) {
        let beta: SmallVec<[u8; 4]> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
        let q = widn(s, t, &beta, shape);
        if q == q_mu || q == *s || q == *t {
            continue;
        }
        let total = torus_distance(s, &q, shape) + torus_distance(&q, t, shape);
        out.push(IdnCandidate {
            q,
            kind: IdnKind::Widn { beta },
            total_dist: total,
            dilation: total - d,
        });
    }
    Ok(out)
}

/// Travel directions used by a minimal walk from `a` to `b`, as signs per
/// dimension. At the even-k midpoint both signs are possible.
pub fn travel_signs(a: &Coord, b: &Coord, shape: &TorusShape) -> SmallVec<[(usize, Sign); 8]> {
    let mut out = SmallVec::new();
    for i in 0..shape.n() {
        let f = fwd(a.get(i), b.get(i), shape.len(i));
        let k = shape.len(i);
        if f == 0 {
            continue;
        }
        if f <= k - f {
            out.push((i, Sign::Plus));
        }
        if k - f <= f {
            out.push((i, Sign::Minus));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{minimal_next_hops, LinkDir};

    fn shape(dims: &[u32]) -> TorusShape {
        TorusShape::new(dims).unwrap()
    }

    fn c(v: &[u32]) -> Coord {
        Coord::new(v)
    }

    #[test]
    fn widn_examples() {
        let sh = shape(&[16, 16]);
        let s = c(&[0, 0]);
        let t = c(&[4, 6]);
        assert_eq!(widn(&s, &t, &[0, 0], &sh), c(&[2, 3]));
        assert_eq!(widn(&s, &t, &[1, 1], &sh), c(&[10, 11]));
        assert_eq!(widn(&s, &s, &[0, 0], &sh), s);
    }

    #[test]
    fn oidn_examples() {
        let sh = shape(&[16, 16]);
        let s = c(&[0, 0]);
        let t = c(&[6, 0]);
        let q = oidn(&s, &t, &[0, 1], 2, &sh).unwrap();
        assert_eq!(q, c(&[3, 2]));
        assert_eq!(dilation(&s, &q, &t, &sh), 4);
        let q = oidn(&s, &t, &[-1, 1], 2, &sh).unwrap();
        assert_eq!(q, c(&[14, 2]));
        assert_eq!(torus_distance(&s, &q, &sh), 4);
        assert_eq!(torus_distance(&q, &t, &sh), 10);
        assert_eq!(dilation(&s, &q, &t, &sh), 8);
    }

    #[test]
    fn oidn_rejects_null_lambda() {
        let sh = shape(&[16, 16]);
        assert_eq!(
            oidn(&c(&[0, 0]), &c(&[6, 0]), &[0, 0], 2, &sh),
            Err(IdnError::NullLambda)
        );
    }

    #[test]
    fn candidate_counts_3d() {
        let sh = shape(&[16, 16, 16]);
        let s = c(&[0, 0, 0]);
        let t = c(&[4, 5, 6]);
        let ofr = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        assert_eq!(ofr.len(), 13);
        assert_eq!(
            ofr.iter().filter(|cand| matches!(cand.kind, IdnKind::Oidn { .. })).count(),
            6
        );
        let por = candidate_set(&s, &t, RoutePolicy::Por, 2, &sh).unwrap();
        assert_eq!(por.len(), 7);
        assert!(por.iter().all(|cand| matches!(cand.kind, IdnKind::Widn { .. })));
        assert!(candidate_set(&s, &t, RoutePolicy::Abr, 2, &sh).unwrap().is_empty());
        assert!(candidate_set(&s, &s, RoutePolicy::Ofr, 2, &sh).unwrap().is_empty());
    }

    #[test]
    fn collinear_lambda_set_matches_listing() {
        // s and t differ only in dimension 3: the equal dimensions already
        // come first, so the published collinear list applies verbatim.
        let sh = shape(&[16, 16, 16]);
        let s = c(&[0, 0, 0]);
        let t = c(&[0, 0, 5]);
        let got = lambda_vectors(&s, &t, &sh).unwrap();
        let want: Vec<Vec<i8>> =
            vec![vec![1, 0, 1], vec![-1, 0, 0], vec![0, 1, -1], vec![0, -1, 0]];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.as_slice(), w.as_slice());
        }
    }

    #[test]
    fn collinear_2d_dilations() {
        // Example 1 reduced cover: two OIDNs at 2*delta, two at 4*delta.
        let sh = shape(&[16, 16]);
        let delta = 2;
        for d in 1..=6u32 {
            let s = c(&[0, 0]);
            let t = c(&[d, 0]);
            let cands = candidate_set(&s, &t, RoutePolicy::Ofr, delta, &sh).unwrap();
            let mut dils: Vec<u32> = cands
                .iter()
                .filter(|cand| matches!(cand.kind, IdnKind::Oidn { .. }))
                .map(|cand| cand.dilation)
                .collect();
            dils.sort_unstable();
            assert_eq!(dils, vec![2 * delta, 2 * delta, 4 * delta, 4 * delta], "d = {d}");
        }
    }

    #[test]
    fn oidn_dilation_bound_8cubed() {
        // delta = 2, n = 3: every outflank candidate dilates by at most 12.
        let sh = shape(&[8, 8, 8]);
        let delta = 2;
        let bound = 2 * 3 * delta;
        for sid in 0..sh.nodes() {
            let s = sh.coord(sid);
            for tid in 0..sh.nodes() {
                if sid == tid {
                    continue;
                }
                let t = sh.coord(tid);
                for cand in candidate_set(&s, &t, RoutePolicy::Ofr, delta, &sh).unwrap() {
                    if matches!(cand.kind, IdnKind::Oidn { .. }) {
                        assert!(
                            cand.dilation <= bound,
                            "s={s:?} t={t:?} q={:?} dilation={}",
                            cand.q,
                            cand.dilation
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn widn_orthant_property() {
        // Routing minimally s -> q(beta) -> t only ever moves along the
        // direction selected by beta in each unequal dimension.
        let sh = shape(&[16, 16, 16]);
        let s = c(&[1, 2, 3]);
        let t = c(&[6, 9, 14]);
        for bits in 0..8u32 {
            let beta: Vec<u8> = (0..3).map(|i| ((bits >> i) & 1) as u8).collect();
            let q = widn(&s, &t, &beta, &sh);
            let mut allowed = [None::<Sign>; 3];
            for i in 0..3 {
                // beta 0 keeps the minimal direction from s to t, beta 1 wraps
                // the other way; infer it from the first leg.
                let signs = travel_signs(&s, &q, &sh);
                for &(dim, sign) in &signs {
                    if dim == i {
                        allowed[i] = Some(sign);
                    }
                }
            }
            for legs in [(&s, &q), (&q, &t)] {
                for &(dim, sign) in &travel_signs(legs.0, legs.1, &sh) {
                    if let Some(a) = allowed[dim] {
                        assert_eq!(sign, a, "beta={beta:?} leg={legs:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_of_nu_links() {
        // Every non-minimal link out of s and into t is the first or last hop
        // of at least one OFR candidate's minimal routing.
        let sh = shape(&[8, 8, 8]);
        for (sid, tid) in [(0u64, 219u64), (5, 13), (100, 108), (0, 7), (3, 3 + 64)] {
            let s = sh.coord(sid);
            let t = sh.coord(tid);
            if s == t {
                continue;
            }
            let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
            let mut covered_out: Vec<LinkDir> = Vec::new();
            let mut covered_in: Vec<(usize, Sign)> = Vec::new();
            for cand in &cands {
                covered_out.extend(minimal_next_hops(&s, &cand.q, &sh));
                // last hops into t arrive along the travel signs of q -> t
                covered_in.extend(travel_signs(&cand.q, &t, &sh));
            }
            let classes = classify_links(&s, &t, &sh);
            let mu_travel = travel_signs(&s, &t, &sh);
            for i in 0..3 {
                for sign in [Sign::Plus, Sign::Minus] {
                    let kind = match sign {
                        Sign::Plus => classes[i].plus,
                        Sign::Minus => classes[i].minus,
                    };
                    if kind == LinkKind::Nu {
                        assert!(
                            covered_out.contains(&LinkDir::new(i, sign)),
                            "nu out-link ({i},{sign:?}) uncovered for s={s:?} t={t:?}"
                        );
                        // incoming nu link at t: arrival moving opposite to the
                        // minimal travel sign of that dimension (or any sign in
                        // an equal dimension)
                        let minimal_in = mu_travel.contains(&(i, sign));
                        if !minimal_in {
                            assert!(
                                covered_in.contains(&(i, sign)),
                                "nu in-link ({i},{sign:?}) uncovered for s={s:?} t={t:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn candidates_never_equal_endpoints() {
        let sh = shape(&[8, 8, 8]);
        for sid in [0u64, 7, 100] {
            for tid in 0..sh.nodes() {
                if sid == tid {
                    continue;
                }
                let s = sh.coord(sid);
                let t = sh.coord(tid);
                for pol in [RoutePolicy::Por, RoutePolicy::Ofr] {
                    for cand in candidate_set(&s, &t, pol, 2, &sh).unwrap() {
                        assert_ne!(cand.q, s);
                        assert_ne!(cand.q, t);
                        assert_eq!(
                            cand.total_dist,
                            torus_distance(&s, &cand.q, &sh) + torus_distance(&cand.q, &t, &sh)
                        );
                    }
                }
            }
        }
    }
}
