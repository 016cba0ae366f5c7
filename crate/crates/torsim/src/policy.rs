//! Injection-time deroute decision (profit scalarization over the candidate
//! IDNs) and per-hop output selection.

use crate::idn::IdnCandidate;
use crate::router::{bubble_admissible, InsertionKind, VcClass, NUM_VC_CLASSES};
use crate::topology::{dim_order_next_hop, minimal_next_hops, Coord, LinkDir, TorusShape};
use num_rational::Ratio;
use smallvec::SmallVec;
use std::fmt;
use std::str::FromStr;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Hash)]
pub enum RoutePolicy {
    Abr,
    Por,
    Ofr,
}

impl RoutePolicy {
    /// Empirically tuned profit weight from the reference experiments.
    pub fn default_eta(self) -> f64 {
        match self {
            RoutePolicy::Por => 1.0,
            _ => 2.0,
        }
    }
}

impl fmt::Display for RoutePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutePolicy::Abr => "abr",
            RoutePolicy::Por => "por",
            RoutePolicy::Ofr => "ofr",
        })
    }
}

impl FromStr for RoutePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "abr" => Ok(RoutePolicy::Abr),
            "por" => Ok(RoutePolicy::Por),
            "ofr" => Ok(RoutePolicy::Ofr),
            other => Err(format!("unknown policy: {other}")),
        }
    }
}

/// Profits are exact rationals so that argmax ties are reproducible.
pub type Profit = Ratio<i64>;

/// Used-slot counts of the local output ports at one instant, per VC class.
/// Derived from the credit counters, so in-flight packets count as used.
#[derive(Clone, Debug)]
pub struct OccupancySnapshot {
    used: SmallVec<[[u32; NUM_VC_CLASSES]; 8]>,
    capacity: u32,
}

impl OccupancySnapshot {
    pub fn new(ports: usize, capacity: u32) -> Self {
        OccupancySnapshot {
            used: SmallVec::from_elem([0; NUM_VC_CLASSES], ports),
            capacity,
        }
    }

    pub fn ports(&self) -> usize {
        self.used.len()
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn set_used(&mut self, port: usize, class: VcClass, used: u32) {
        assert!(used <= self.capacity, "count exceeds capacity");
        self.used[port][class.index()] = used;
    }

    pub fn used(&self, port: usize, class: VcClass) -> u32 {
        self.used[port][class.index()]
    }

    pub fn free(&self, port: usize, class: VcClass) -> u32 {
        self.capacity - self.used(port, class)
    }

    /// Mean used slots of one port across its VC classes.
    pub fn port_mean(&self, port: usize) -> Profit {
        let sum: u32 = self.used[port].iter().sum();
        Ratio::new(sum as i64, NUM_VC_CLASSES as i64)
    }
}

/// (u_target, u_star): mean and minimum occupancy of the output ports that
/// are minimal from `s` toward `target`. Ranging the minimum over the minimal
/// ports (rather than all 2n) is what lets an idle flank beat a jammed
/// minimal route: a candidate whose first hops avoid the mu-links then shows
/// u_q < u_star.
pub fn occupancy_stats(
    snap: &OccupancySnapshot,
    s: &Coord,
    target: &Coord,
    shape: &TorusShape,
) -> (Profit, Profit) {
    assert_ne!(s, target, "occupancy target equals source");
    let hops = minimal_next_hops(s, target, shape);
    debug_assert!(!hops.is_empty());
    let mut sum = Ratio::new(0, 1);
    let mut u_star: Option<Profit> = None;
    for l in &hops {
        let m = snap.port_mean(l.port());
        if u_star.map_or(true, |b| m < b) {
            u_star = Some(m);
        }
        sum += m;
    }
    let u_target = sum / Ratio::new(hops.len() as i64, 1);
    (u_target, u_star.expect("no minimal ports"))
}

/// Profit of routing through a candidate at distance `d_tilde` when the
/// direct distance is `d`: u_star/u_q + eta * d/d_tilde. The congestion
/// fraction is pinned to one when both occupancies are zero, and saturated at
/// a large constant when only u_q is zero (an idle flank under a loaded
/// minimal route) so ordering among such candidates falls to the dilation
/// term.
pub fn profit(u_star: Profit, u_q: Profit, d: u32, d_tilde: u32, eta: Profit) -> Profit {
    assert!(d >= 1 && d_tilde >= d);
    let congestion = if u_q == Ratio::new(0, 1) {
        if u_star == Ratio::new(0, 1) {
            Ratio::new(1, 1)
        } else {
            Ratio::new(1_000_000, 1)
        }
    } else {
        u_star / u_q
    };
    congestion + eta * Ratio::new(d as i64, d_tilde as i64)
}

/// Outcome of the injection-time decision. `chosen` indexes into the
/// candidate list; None routes minimally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerouteDecision {
    pub chosen: Option<usize>,
    pub profit: Profit,
}

/// Evaluate every candidate and the minimal route; deroute only when some
/// candidate strictly beats pi_0, breaking ties by candidate order.
pub fn choose_idn(
    s: &Coord,
    t: &Coord,
    snap: &OccupancySnapshot,
    candidates: &[IdnCandidate],
    eta: Profit,
    shape: &TorusShape,
) -> DerouteDecision {
    let d = crate::topology::torus_distance(s, t, shape);
    let (u_zero, u_star) = occupancy_stats(snap, s, t, shape);
    let pi_zero = profit(u_star, u_zero, d, d, eta);
    if candidates.is_empty() {
        return DerouteDecision { chosen: None, profit: pi_zero };
    }
    let mut best: Option<(usize, Profit)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        let (u_q, _) = occupancy_stats(snap, s, &cand.q, shape);
        let pi = profit(u_star, u_q, d, cand.total_dist, eta);
        match best {
            Some((_, b)) if pi <= b => {}
            _ => best = Some((i, pi)),
        }
    }
    let (idx, pi) = best.unwrap();
    if pi_zero >= pi {
        DerouteDecision { chosen: None, profit: pi_zero }
    } else {
        DerouteDecision { chosen: Some(idx), profit: pi }
    }
}

/// What a head-of-queue packet should do next.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum OutputChoice {
    Forward { link: LinkDir, class: VcClass },
    Hold,
}

/// Bubble-rule insertion kind for a transfer into `link`/`class`: continuing
/// in the same escape ring is progress, everything else is an injection.
pub fn insertion_kind(
    came_from: Option<(VcClass, LinkDir)>,
    link: LinkDir,
    class: VcClass,
) -> InsertionKind {
    if class == VcClass::Adaptive {
        return InsertionKind::Progress;
    }
    match came_from {
        Some((from_class, from_link)) if from_class == class && from_link == link => {
            InsertionKind::Progress
        }
        _ => InsertionKind::Injection,
    }
}

/// Per-hop output selection: prefer the least-occupied adaptive VC along a
/// minimal link toward `target`; fall back to the dimension-order escape VC
/// under the bubble rule; otherwise hold.
pub fn select_output(
    current: &Coord,
    target: &Coord,
    escape_class: VcClass,
    came_from: Option<(VcClass, LinkDir)>,
    snap: &OccupancySnapshot,
    shape: &TorusShape,
) -> OutputChoice {
    debug_assert_ne!(current, target);
    let mut best: Option<(u32, LinkDir)> = None;
    for l in minimal_next_hops(current, target, shape) {
        let used = snap.used(l.port(), VcClass::Adaptive);
        if used < snap.capacity() {
            match best {
                Some((bu, _)) if bu <= used => {}
                _ => best = Some((used, l)),
            }
        }
    }
    if let Some((_, link)) = best {
        return OutputChoice::Forward { link, class: VcClass::Adaptive };
    }
    let link = dim_order_next_hop(current, target, shape);
    let kind = insertion_kind(came_from, link, escape_class);
    if bubble_admissible(escape_class, snap.free(link.port(), escape_class), kind) {
        OutputChoice::Forward { link, class: escape_class }
    } else {
        OutputChoice::Hold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::idn::candidate_set;
    use crate::topology::Sign;

    fn shape3(k: u32) -> TorusShape {
        TorusShape::cubic(k, 3).unwrap()
    }

    fn r(n: i64, d: i64) -> Profit {
        Ratio::new(n, d)
    }

    #[test]
    fn profit_examples() {
        // empty network: 1 + 2 * (10/14)
        assert_eq!(profit(r(0, 1), r(0, 1), 10, 14, r(2, 1)), r(17, 7));
        // congested: 2/4 + 2 * (10/14)
        assert_eq!(profit(r(2, 1), r(4, 1), 10, 14, r(2, 1)), r(27, 14));
        // minimal-route profit with u_0 = u_star: 1 + eta
        assert_eq!(profit(r(3, 1), r(3, 1), 10, 10, r(2, 1)), r(3, 1));
        // idle flank under load: congestion saturates
        assert!(profit(r(3, 1), r(0, 1), 10, 14, r(2, 1)) > r(1000, 1));
    }

    #[test]
    fn occupancy_stats_examples() {
        let sh = shape3(8);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[2, 0, 7]);
        let mut snap = OccupancySnapshot::new(6, 8);
        // all empty
        let (u, us) = occupancy_stats(&snap, &s, &t, &sh);
        assert_eq!(u, r(0, 1));
        assert_eq!(us, r(0, 1));
        // minimal ports (dim 0 plus = port 0, dim 2 minus = port 5) hold
        // per-port means 4 and 6; the min ranges over those two only
        for class in VcClass::ALL {
            snap.set_used(0, class, 4);
            snap.set_used(5, class, 6);
            snap.set_used(2, class, 1);
            snap.set_used(1, class, 7);
            snap.set_used(3, class, 7);
            snap.set_used(4, class, 7);
        }
        let (u, us) = occupancy_stats(&snap, &s, &t, &sh);
        assert_eq!(u, r(5, 1));
        assert_eq!(us, r(4, 1));
        // single minimal port
        let t2 = Coord::new(&[1, 0, 0]);
        let (u, _) = occupancy_stats(&snap, &s, &t2, &sh);
        assert_eq!(u, r(4, 1));
    }

    #[test]
    fn empty_network_routes_minimally() {
        let sh = shape3(16);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[4, 5, 6]);
        let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        let snap = OccupancySnapshot::new(6, 8);
        let dec = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        assert_eq!(dec.chosen, None);
        assert_eq!(dec.profit, r(3, 1)); // 1 + eta
    }

    #[test]
    fn saturated_minimal_ports_trigger_deroute() {
        // Minimal ports full, an outflank direction empty: the deroute wins.
        let sh = shape3(16);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[7, 7, 0]);
        let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        let mut snap = OccupancySnapshot::new(6, 8);
        for port in [0, 2] {
            // (0,+) and (1,+) are the minimal ports
            for class in VcClass::ALL {
                snap.set_used(port, class, 8);
            }
        }
        let dec = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        let idx = dec.chosen.expect("must deroute");
        // only a candidate whose first hops are all idle can beat pi_0 here
        let q = &cands[idx].q;
        let first = minimal_next_hops(&s, q, &sh);
        assert!(first.iter().all(|l| l.port() != 0 && l.port() != 2));
        assert!(dec.profit > r(3, 1)); // beats pi_0 = 8/8 + eta
    }

    #[test]
    fn tie_breaks_to_lowest_candidate_index() {
        let sh = shape3(16);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[7, 7, 7]);
        let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        // minimal ports saturated, the rest idle: mirror-image candidates
        // share the same profit
        let mut snap = OccupancySnapshot::new(6, 8);
        for port in [0, 2, 4] {
            for class in VcClass::ALL {
                snap.set_used(port, class, 8);
            }
        }
        let dec = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        let idx = dec.chosen.unwrap();
        for (i, cand) in cands.iter().enumerate() {
            let (u_q, _) = occupancy_stats(&snap, &s, &cand.q, &sh);
            let pi = profit(r(8, 1), u_q, 21, cand.total_dist, r(2, 1));
            if pi == dec.profit {
                assert_eq!(idx, i, "first candidate at the max must win");
                break;
            }
        }
    }

    #[test]
    fn scale_invariance_of_argmax() {
        let sh = shape3(16);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[5, 3, 0]);
        let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        let mut snap = OccupancySnapshot::new(6, 8);
        let pattern = [3u32, 1, 0, 2, 1, 4];
        for (p, &u) in pattern.iter().enumerate() {
            for class in VcClass::ALL {
                snap.set_used(p, class, u);
            }
        }
        let base = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        let mut scaled = OccupancySnapshot::new(6, 8);
        for (p, &u) in pattern.iter().enumerate() {
            for class in VcClass::ALL {
                scaled.set_used(p, class, u * 2);
            }
        }
        let twice = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        assert_eq!(base.chosen, twice.chosen);
        let _ = scaled;
        let twice = choose_idn(&s, &t, &scaled, &cands, r(2, 1), &sh);
        assert_eq!(base.chosen, twice.chosen);
    }

    #[test]
    fn raising_a_candidates_occupancy_never_helps_it() {
        let sh = shape3(16);
        let s = Coord::new(&[0, 0, 0]);
        let t = Coord::new(&[5, 3, 7]);
        let cands = candidate_set(&s, &t, RoutePolicy::Ofr, 2, &sh).unwrap();
        let mut snap = OccupancySnapshot::new(6, 8);
        for p in 0..6 {
            for class in VcClass::ALL {
                snap.set_used(p, class, 4);
            }
        }
        let before = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        // bump occupancy of all ports minimal toward candidate 0
        let target = &cands[0].q;
        for l in minimal_next_hops(&s, target, &sh) {
            for class in VcClass::ALL {
                snap.set_used(l.port(), class, 6);
            }
        }
        let after = choose_idn(&s, &t, &snap, &cands, r(2, 1), &sh);
        if before.chosen != Some(0) {
            assert_ne!(after.chosen, Some(0));
        }
    }

    #[test]
    fn select_output_prefers_adaptive() {
        let sh = shape3(8);
        let cur = Coord::new(&[0, 0, 0]);
        let target = Coord::new(&[2, 0, 7]);
        let mut snap = OccupancySnapshot::new(6, 8);
        snap.set_used(0, VcClass::Adaptive, 3);
        snap.set_used(5, VcClass::Adaptive, 1);
        let got = select_output(&cur, &target, VcClass::EscapeVs2, None, &snap, &sh);
        assert_eq!(
            got,
            OutputChoice::Forward {
                link: LinkDir::new(2, Sign::Minus),
                class: VcClass::Adaptive
            }
        );
    }

    #[test]
    fn select_output_escape_fallback_and_hold() {
        let sh = shape3(8);
        let cur = Coord::new(&[0, 0, 0]);
        let target = Coord::new(&[2, 0, 7]);
        let mut snap = OccupancySnapshot::new(6, 8);
        for p in 0..6 {
            snap.set_used(p, VcClass::Adaptive, 8);
        }
        // escape of the dimension-order hop (dim 0, plus) has 2 free slots
        snap.set_used(0, VcClass::EscapeVs2, 6);
        let got = select_output(&cur, &target, VcClass::EscapeVs2, None, &snap, &sh);
        assert_eq!(
            got,
            OutputChoice::Forward {
                link: LinkDir::new(0, Sign::Plus),
                class: VcClass::EscapeVs2
            }
        );
        // only 1 free slot: an injection is refused
        snap.set_used(0, VcClass::EscapeVs2, 7);
        let got = select_output(&cur, &target, VcClass::EscapeVs2, None, &snap, &sh);
        assert_eq!(got, OutputChoice::Hold);
        // but a packet already progressing in that ring may continue
        let came = Some((VcClass::EscapeVs2, LinkDir::new(0, Sign::Plus)));
        let got = select_output(&cur, &target, VcClass::EscapeVs2, came, &snap, &sh);
        assert_eq!(
            got,
            OutputChoice::Forward {
                link: LinkDir::new(0, Sign::Plus),
                class: VcClass::EscapeVs2
            }
        );
    }
}
