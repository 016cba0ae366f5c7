//! Deterministic discrete-event core: message generators, store-and-forward
//! link timing, credit signalling and per-node output arbitration.

use crate::config::{ConfigError, SimConfig, Timing};
use crate::idn::{candidate_set, IdnCandidate, IdnKind};
use crate::policy::{choose_idn, select_output, OutputChoice, Profit};
use crate::router::{
    bubble_admissible, escape_class_for, DerouteKind, HeadAction, Packet, Phase, RouterNode,
    SourceIndex, VcClass,
};
use crate::topology::{torus_distance, Coord, CoordTable, LinkDir, TorusShape};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

/// One consumed packet, as handed to the sink.
#[derive(Clone, Debug)]
pub struct PacketRecord {
    pub id: u64,
    pub src: u32,
    pub dst: u32,
    pub deroute: DerouteKind,
    pub hops: u16,
    pub lifetime_ns: u64,
}

pub trait PacketSink {
    fn record(&mut self, rec: &PacketRecord);
}

pub struct NullSink;

impl PacketSink for NullSink {
    fn record(&mut self, _: &PacketRecord) {}
}

impl PacketSink for Vec<PacketRecord> {
    fn record(&mut self, rec: &PacketRecord) {
        self.push(rec.clone());
    }
}

/// Aggregated outcome of one run. Measurement counters cover consumptions
/// inside the measurement interval; `consumed`/`generated` cover the whole
/// run.
#[derive(Clone, Debug)]
pub struct RunStats {
    pub generated: u64,
    /// Packets whose message arrived inside the measurement interval.
    pub generated_measure: u64,
    /// Packets of messages rejected by a full source queue.
    pub dropped: u64,
    pub dropped_measure: u64,
    pub offered: u64,
    pub consumed: u64,
    pub consumed_measure: u64,
    pub mean_lifetime_ns: f64,
    pub mean_hops: f64,
    pub derouted_widn: u64,
    pub derouted_oidn: u64,
    /// Mean lifetime per measurement sub-window (0.0 when empty).
    pub window_mean_lifetime: Vec<f64>,
    pub window_consumed: Vec<u64>,
    /// Generator backlog sampled at each sub-window boundary, including both
    /// ends of the measurement interval.
    pub backlog_samples: Vec<u64>,
    pub stalls: u64,
    pub hop_violations: u64,
    pub phase_violations: u64,
    pub conservation_ok: bool,
    pub trace_hash: u64,
    /// Per-packet lifetimes from the measurement interval, if collected.
    pub lifetimes: Option<Vec<u64>>,
}

impl RunStats {
    /// Fraction of measured packets that took any deroute.
    pub fn deroute_fraction(&self) -> f64 {
        if self.consumed_measure == 0 {
            0.0
        } else {
            (self.derouted_widn + self.derouted_oidn) as f64 / self.consumed_measure as f64
        }
    }
}

pub fn run(cfg: &SimConfig) -> Result<RunStats, ConfigError> {
    run_with_sink(cfg, &mut NullSink)
}

pub fn run_with_sink(cfg: &SimConfig, sink: &mut dyn PacketSink) -> Result<RunStats, ConfigError> {
    cfg.validate()?;
    let timing = Timing::derive(cfg)?;
    Ok(Engine::new(cfg, timing, sink).run())
}

#[derive(Clone, Debug)]
enum Ev {
    /// Packet lands in vcs[port][class] (space was reserved via credits).
    Arrive { node: u32, port: u8, class: VcClass, pkt: Box<Packet> },
    /// Packet lands in the injection queue.
    InjectArrive { node: u32, pkt: Box<Packet> },
    /// Downstream queue freed a slot for output (port, class).
    Credit { node: u32, port: u8, class: VcClass },
    /// Deferred wakeup, e.g. when an output link goes idle.
    Service { node: u32 },
    Gen { node: u32 },
    Probe,
}

/// Wheel horizon in ns; must exceed every short scheduling delta
/// (transmission, link latency, watchdog). Only generator pacing and
/// probes reach further and they spill into the overflow map.
const WHEEL: usize = 1 << 16;

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
enum CachedAct {
    Stale,
    Hold,
    Act(HeadAction),
}

/// A message whose packets have not all been offered to the router yet.
struct MsgBatch {
    dst: u32,
    created_at: u64,
    remaining: u32,
}

struct Generator {
    backlog: VecDeque<MsgBatch>,
    backlog_packets: u64,
    /// Fixed per-node offset of the arrival grid, below one interval.
    phase_ns: u64,
    next_msg_at: u64,
    msg_index: u64,
    last_offer_at: u64,
    /// Packets between the generator and the injection queue.
    inflight: u32,
}

struct Stats {
    generated: u64,
    generated_measure: u64,
    dropped: u64,
    dropped_measure: u64,
    offered: u64,
    consumed: u64,
    consumed_measure: u64,
    life_sum: u128,
    hops_sum: u64,
    derouted_widn: u64,
    derouted_oidn: u64,
    win_consumed: Vec<u64>,
    win_life_sum: Vec<u128>,
    backlog_samples: Vec<u64>,
    stalls: u64,
    hop_violations: u64,
    phase_violations: u64,
    hasher: DefaultHasher,
    lifetimes: Option<Vec<u64>>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    timing: Timing,
    shape: TorusShape,
    coords: CoordTable,
    /// neighbors[v][port] = node one hop away through that port.
    neighbors: Vec<SmallVec<[u32; 8]>>,
    nodes: Vec<RouterNode>,
    /// Outgoing network links busy until; indexed like ports.
    link_busy: Vec<SmallVec<[u64; 8]>>,
    consume_busy: Vec<u64>,
    /// Round-robin pointers per node per output (0 = consumption link,
    /// 1 + port = network link).
    rr: Vec<SmallVec<[u32; 8]>>,
    /// Last computed head action per (node, source). Invalidated when that
    /// queue's head changes; Holds are also invalidated by credit returns.
    /// A cached Forward may be stale, but admissibility is re-verified at
    /// send time, so staleness only affects which legal port is picked.
    act_cache: Vec<SmallVec<[CachedAct; 20]>>,
    /// Per node per output: bitmask over sources whose cached action uses it.
    want: Vec<SmallVec<[u32; 8]>>,
    /// Per node: sources with a cached Hold, waiting on a credit return.
    hold_mask: Vec<u32>,
    /// Per node: stale sources with a head packet, pending recomputation.
    stale_mask: Vec<u32>,
    pending_service: Vec<u64>,
    /// Nodes touched by events at the current timestamp; serviced together
    /// once the timestamp's events are drained.
    dirty: Vec<u32>,
    dirty_at: Vec<u64>,
    gens: Vec<Generator>,
    // Timing-wheel event queue. Almost every event lands within a few
    // microseconds, so slot (time % WHEEL) holds exactly one timestamp's
    // batch in insertion order; rare far events wait in `overflow` and are
    // merged ahead of same-time wheel events, preserving push order.
    wheel: Vec<Vec<Ev>>,
    wheel_len: usize,
    now: u64,
    overflow: BTreeMap<u64, Vec<Ev>>,
    free_bufs: Vec<Vec<Ev>>,
    rng: ChaCha8Rng,
    /// OFR/POR candidate sets keyed by the (t - s) offset; candidate
    /// positions translate with the source on a torus.
    cache: HashMap<u64, Rc<Vec<IdnCandidate>>>,
    zero: Coord,
    eta: Profit,
    end: u64,
    next_packet_id: u64,
    /// Packets between being offered and being consumed.
    resident: u64,
    /// Packets on network links right now.
    net_inflight: u64,
    last_move: u64,
    stats: Stats,
    sink: &'a mut dyn PacketSink,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, timing: Timing, sink: &'a mut dyn PacketSink) -> Self {
        let shape = cfg.shape.clone();
        let coords = CoordTable::new(&shape);
        let n_nodes = shape.nodes() as usize;
        let ports = 2 * shape.n();
        assert!(1 + ports * 3 <= 32, "source bitmasks are u32");
        let neighbors = (0..n_nodes)
            .map(|v| {
                (0..ports)
                    .map(|p| {
                        let c = crate::topology::step(
                            coords.get(v as u32),
                            LinkDir::from_port(p),
                            &shape,
                        );
                        shape.linear(&c) as u32
                    })
                    .collect()
            })
            .collect();
        let nodes = (0..n_nodes)
            .map(|v| RouterNode::new(v as u32, ports, cfg.capacity))
            .collect();
        let windows = cfg.windows;
        Engine {
            cfg,
            timing,
            zero: Coord::new(&vec![0; shape.n()]),
            coords,
            neighbors,
            nodes,
            link_busy: vec![SmallVec::from_elem(0, ports); n_nodes],
            consume_busy: vec![0; n_nodes],
            rr: vec![SmallVec::from_elem(0, ports + 1); n_nodes],
            act_cache: vec![SmallVec::from_elem(CachedAct::Stale, 1 + ports * 3); n_nodes],
            want: vec![SmallVec::from_elem(0, ports + 1); n_nodes],
            hold_mask: vec![0; n_nodes],
            stale_mask: vec![0; n_nodes],
            pending_service: vec![u64::MAX; n_nodes],
            dirty: Vec::new(),
            dirty_at: vec![u64::MAX; n_nodes],
            gens: (0..n_nodes)
                .map(|_| Generator {
                    backlog: VecDeque::new(),
                    backlog_packets: 0,
                    next_msg_at: u64::MAX,
                    msg_index: 0,
                    last_offer_at: 0,
                    inflight: 0,
                })
                .collect(),
            wheel: (0..WHEEL).map(|_| Vec::new()).collect(),
            wheel_len: 0,
            now: 0,
            overflow: BTreeMap::new(),
            free_bufs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cache: HashMap::new(),
            eta: Ratio::approximate_float(cfg.eta).expect("eta is finite"),
            end: cfg.warmup_ns + cfg.measure_ns,
            next_packet_id: 0,
            resident: 0,
            net_inflight: 0,
            last_move: 0,
            stats: Stats {
                generated: 0,
                generated_measure: 0,
                dropped: 0,
                dropped_measure: 0,
                offered: 0,
                consumed: 0,
                consumed_measure: 0,
                life_sum: 0,
                hops_sum: 0,
                derouted_widn: 0,
                derouted_oidn: 0,
                win_consumed: vec![0; windows],
                win_life_sum: vec![0; windows],
                backlog_samples: Vec::with_capacity(windows + 1),
                stalls: 0,
                hop_violations: 0,
                phase_violations: 0,
                hasher: DefaultHasher::new(),
                lifetimes: if cfg.collect_lifetimes { Some(Vec::new()) } else { None },
            },
            sink,
            shape,
        }
    }

    fn push(&mut self, time: u64, ev: Ev) {
        debug_assert!(time >= self.now);
        if time - self.now < WHEEL as u64 {
            self.wheel[(time % WHEEL as u64) as usize].push(ev);
            self.wheel_len += 1;
        } else {
            self.overflow
                .entry(time)
                .or_insert_with(|| self.free_bufs.pop().unwrap_or_default())
                .push(ev);
        }
    }

    /// Advance to the next populated timestamp and take its whole batch.
    fn pop_next(&mut self) -> Option<(u64, Vec<Ev>)> {
        let far = self.overflow.keys().next().copied().unwrap_or(u64::MAX);
        if self.wheel_len == 0 {
            if far == u64::MAX {
                return None;
            }
            self.now = far;
        } else {
            while self.wheel[(self.now % WHEEL as u64) as usize].is_empty() && self.now < far {
                self.now += 1;
            }
        }
        let t = self.now;
        let mut batch = if t == far {
            self.overflow.pop_first().expect("key was just observed").1
        } else {
            self.free_bufs.pop().unwrap_or_default()
        };
        let slot = &mut self.wheel[(t % WHEEL as u64) as usize];
        self.wheel_len -= slot.len();
        // far events were pushed from strictly earlier instants than any
        // same-time wheel events, so they go first
        batch.append(slot);
        Some((t, batch))
    }

    fn schedule_service(&mut self, node: usize, time: u64) {
        if self.pending_service[node] == time {
            return;
        }
        self.pending_service[node] = time;
        self.push(time, Ev::Service { node: node as u32 });
    }

    fn window_of(&self, t: u64) -> Option<usize> {
        if t < self.cfg.warmup_ns || t >= self.end {
            return None;
        }
        let w = ((t - self.cfg.warmup_ns) as u128 * self.cfg.windows as u128
            / self.cfg.measure_ns as u128) as usize;
        Some(w.min(self.cfg.windows - 1))
    }

    fn run(mut self) -> RunStats {
        if self.timing.message_interval_ns != u64::MAX {
            for v in 0..self.nodes.len() {
                let first = self.grid_arrival(0);
                self.gens[v].next_msg_at = first;
                if first < self.end {
                    self.push(first, Ev::Gen { node: v as u32 });
                }
            }
        }
        for i in 0..=self.cfg.windows {
            let t = self.cfg.warmup_ns
                + (self.cfg.measure_ns as u128 * i as u128 / self.cfg.windows as u128) as u64;
            self.push(t, Ev::Probe);
        }

        while let Some((time, mut batch)) = self.pop_next() {
            if time > self.end {
                break;
            }
            self.watchdog(time);
            // handle the whole timestamp, then service touched nodes;
            // nothing an event or a service does can schedule work at the
            // same instant, so one batch per timestamp is exhaustive
            for ev in batch.drain(..) {
                self.handle(ev, time);
            }
            self.free_bufs.push(batch);
            for i in 0..self.dirty.len() {
                let v = self.dirty[i];
                self.service(v as usize, time);
            }
            for i in 0..self.dirty.len() {
                self.dirty_at[self.dirty[i] as usize] = u64::MAX;
            }
            self.dirty.clear();
        }
        self.watchdog(self.end);
        self.finish()
    }

    fn mark_dirty(&mut self, node: usize, time: u64) {
        if self.dirty_at[node] != time {
            self.dirty_at[node] = time;
            self.dirty.push(node as u32);
        }
    }

    fn handle(&mut self, ev: Ev, time: u64) {
        match ev {
            Ev::Arrive { node, port, class, mut pkt } => {
                self.net_inflight -= 1;
                if pkt.phase == Phase::ToIdn && pkt.idn == Some(node) {
                    pkt.phase = Phase::ToDest;
                    pkt.phase_switches += 1;
                }
                let vc = &mut self.nodes[node as usize].vcs[port as usize][class.index()];
                vc.push(*pkt);
                if vc.len() == 1 {
                    // a fresh head; its cache entry is already Stale
                    let idx = 1 + port as usize * 3 + class.index();
                    self.stale_mask[node as usize] |= 1 << idx;
                }
                self.moved(time);
                self.mark_dirty(node as usize, time);
            }
            Ev::InjectArrive { node, pkt } => {
                self.gens[node as usize].inflight -= 1;
                let inj = &mut self.nodes[node as usize].injection;
                inj.push_back(*pkt);
                if inj.len() == 1 {
                    self.stale_mask[node as usize] |= 1;
                }
                self.moved(time);
                self.mark_dirty(node as usize, time);
            }
            Ev::Credit { node, port, class } => {
                self.nodes[node as usize].return_credit(port as usize, class);
                // freed space downstream can unblock held heads
                let mut holds = self.hold_mask[node as usize];
                while holds != 0 {
                    let idx = holds.trailing_zeros() as usize;
                    holds &= holds - 1;
                    self.act_cache[node as usize][idx] = CachedAct::Stale;
                }
                self.stale_mask[node as usize] |= self.hold_mask[node as usize];
                self.hold_mask[node as usize] = 0;
                self.mark_dirty(node as usize, time);
            }
            Ev::Service { node } => {
                if self.pending_service[node as usize] == time {
                    self.pending_service[node as usize] = u64::MAX;
                }
                self.mark_dirty(node as usize, time);
            }
            Ev::Gen { node } => self.gen_tick(node as usize, time),
            Ev::Probe => self.probe(time),
        }
    }

    /// Count a stall for any watchdog-long interval without packet movement
    /// while packets were resident.
    fn watchdog(&mut self, t: u64) {
        if self.resident == 0 {
            self.last_move = t;
        } else if t >= self.last_move + self.timing.watchdog_ns {
            self.stats.stalls += 1;
            self.last_move = t;
        }
    }

    fn moved(&mut self, t: u64) {
        self.last_move = t;
    }

    /// Message m lands at m * interval plus a seeded +-10% jitter. The grid
    /// is shared by all nodes so the whole network stays in message phase
    /// (a renewal process would drift nodes apart and, for patterns keyed
    /// on the message index, quietly spread the load over extra dimensions)
    /// while the jitter keeps the injection instants from coinciding.
    fn grid_arrival(&mut self, msg_index: u64) -> u64 {
        let interval = self.timing.message_interval_ns;
        let base = (msg_index as u128 * interval as u128).min(u64::MAX as u128) as u64;
        let jitter = (self.rng.gen_range(-0.1..0.1) * interval as f64).round() as i64;
        base.saturating_add_signed(jitter)
    }

    fn gen_tick(&mut self, v: usize, t: u64) {
        if t >= self.end {
            return;
        }
        while self.gens[v].next_msg_at <= t {
            let arrival = self.gens[v].next_msg_at;
            let msg_index = self.gens[v].msg_index;
            self.gens[v].msg_index += 1;
            let dst = crate::traffic::destination_id(
                v as u64,
                msg_index,
                self.cfg.pattern,
                &self.shape,
                &mut self.rng,
            ) as u32;
            // fixed points of a permutation pattern are consumed locally
            if dst != v as u32 {
                if self.gens[v].backlog.len() >= self.cfg.source_queue_msgs as usize {
                    // source queue full: the message is lost, not deferred
                    self.stats.dropped += self.cfg.message_packets as u64;
                    if arrival >= self.cfg.warmup_ns {
                        self.stats.dropped_measure += self.cfg.message_packets as u64;
                    }
                } else {
                    self.gens[v].backlog.push_back(MsgBatch {
                        dst,
                        created_at: arrival,
                        remaining: self.cfg.message_packets,
                    });
                    self.gens[v].backlog_packets += self.cfg.message_packets as u64;
                    self.stats.generated += self.cfg.message_packets as u64;
                    if arrival >= self.cfg.warmup_ns {
                        self.stats.generated_measure += self.cfg.message_packets as u64;
                    }
                }
            }
            self.gens[v].next_msg_at = self.grid_arrival(self.gens[v].msg_index);
            debug_assert!(self.gens[v].next_msg_at > arrival);
        }
        // one offer per tick keeps the offered rate at the configured cap
        let node = &self.nodes[v];
        let room = node.injection_free() > self.gens[v].inflight;
        if room {
            let gen = &mut self.gens[v];
            if let Some(batch) = gen.backlog.front_mut() {
                let pkt = Packet::new(self.next_packet_id, v as u32, batch.dst, batch.created_at);
                self.next_packet_id += 1;
                batch.remaining -= 1;
                gen.backlog_packets -= 1;
                if batch.remaining == 0 {
                    gen.backlog.pop_front();
                }
                gen.inflight += 1;
                gen.last_offer_at = t;
                self.stats.offered += 1;
                self.resident += 1;
                let at = t + self.timing.tx_int_ns + self.timing.lat_int_ns;
                self.push(at, Ev::InjectArrive { node: v as u32, pkt: Box::new(pkt) });
            }
        }
        let next = if self.gens[v].backlog.is_empty() {
            self.gens[v]
                .next_msg_at
                .max(self.gens[v].last_offer_at + self.timing.gen_interval_ns)
        } else {
            t + self.timing.gen_interval_ns
        };
        if next < self.end {
            self.push(next, Ev::Gen { node: v as u32 });
        }
    }

    /// Deroute decision for a fresh head-of-injection packet. Happens once,
    /// against the local occupancy view at that moment.
    fn decide_injection_head(&mut self, v: usize) {
        let Some(pkt) = self.nodes[v].injection.front() else { return };
        if pkt.decided {
            return;
        }
        let dst = pkt.dst;
        if self.cfg.policy == crate::policy::RoutePolicy::Abr {
            self.nodes[v].injection.front_mut().unwrap().decided = true;
            return;
        }
        let s = self.coords.get(v as u32).clone();
        let t_c = self.coords.get(dst);
        let mut delta = self.zero.clone();
        for i in 0..self.shape.n() {
            let k = self.shape.len(i);
            delta.set(i, (t_c.get(i) + k - s.get(i)) % k);
        }
        let key = self.shape.linear(&delta);
        let cands = match self.cache.get(&key) {
            Some(c) => Rc::clone(c),
            None => {
                let c = Rc::new(
                    candidate_set(&self.zero, &delta, self.cfg.policy, self.cfg.delta, &self.shape)
                        .expect("dimension count validated at startup"),
                );
                self.cache.insert(key, Rc::clone(&c));
                c
            }
        };
        let snap = self.nodes[v].occupancy_snapshot();
        let dec = choose_idn(&self.zero, &delta, &snap, &cands, self.eta, &self.shape);
        let pkt = self.nodes[v].injection.front_mut().unwrap();
        pkt.decided = true;
        if let Some(i) = dec.chosen {
            let cand = &cands[i];
            let mut q = cand.q.clone();
            for d in 0..self.shape.n() {
                let k = self.shape.len(d);
                q.set(d, (q.get(d) + s.get(d)) % k);
            }
            pkt.idn = Some(self.shape.linear(&q) as u32);
            pkt.phase = Phase::ToIdn;
            pkt.deroute = match cand.kind {
                IdnKind::Widn { .. } => DerouteKind::Widn,
                IdnKind::Oidn { .. } => DerouteKind::Oidn,
            };
        }
    }

    fn head_action(
        &self,
        v: usize,
        src: SourceIndex,
        snap: &crate::policy::OccupancySnapshot,
    ) -> Option<HeadAction> {
        let node = &self.nodes[v];
        let pkt = node.head(src)?;
        let target_id = pkt.current_target();
        if target_id == v as u32 {
            return Some(HeadAction::Consume);
        }
        let here = self.coords.get(v as u32);
        let target = self.coords.get(target_id);
        match select_output(
            here,
            target,
            escape_class_for(pkt.phase),
            pkt.came_from,
            snap,
            &self.shape,
        ) {
            OutputChoice::Forward { link, class } => {
                let kind = crate::policy::insertion_kind(pkt.came_from, link, class);
                Some(HeadAction::Forward { link, class, kind })
            }
            OutputChoice::Hold => None,
        }
    }

    /// One arbitration pass: each queue dequeues at most one packet, each
    /// output link sends at most one, sources compete round-robin. Busy
    /// links re-trigger a service when they clear, so a backlogged queue
    /// still drains at full link rate.
    fn service(&mut self, v: usize, t: u64) {
        let n_sources = 1 + self.nodes[v].ports() * 3;
        let n_outputs = 1 + self.nodes[v].ports();
        loop {
            if self.stale_mask[v] & 1 != 0 {
                self.decide_injection_head(v);
            }
            let mut stale = self.stale_mask[v];
            if stale != 0 {
                self.stale_mask[v] = 0;
                let snap = self.nodes[v].occupancy_snapshot();
                while stale != 0 {
                    let idx = stale.trailing_zeros() as usize;
                    stale &= stale - 1;
                    match self.head_action(v, source_of(idx), &snap) {
                        Some(act) => {
                            self.act_cache[v][idx] = CachedAct::Act(act);
                            self.want[v][out_of(act)] |= 1 << idx;
                        }
                        None => {
                            self.act_cache[v][idx] = CachedAct::Hold;
                            self.hold_mask[v] |= 1 << idx;
                        }
                    }
                }
            }
            for out in 0..n_outputs {
                let mut mask = self.want[v][out];
                if mask == 0 {
                    continue;
                }
                let busy = if out == 0 {
                    self.consume_busy[v]
                } else {
                    self.link_busy[v][out - 1]
                };
                if busy > t {
                    self.schedule_service(v, busy);
                    continue;
                }
                // round robin: first wanting source at or after rr, else wrap;
                // a winner whose action fails its admissibility re-check is
                // dropped from the mask so the remaining contenders get the
                // link this very pass (a stale winner must not idle the port)
                while mask != 0 {
                    let rr = self.rr[v][out];
                    let above = mask & !((1u32 << rr) - 1);
                    let idx = if above != 0 { above } else { mask }.trailing_zeros() as usize;
                    let CachedAct::Act(act) = self.act_cache[v][idx] else {
                        unreachable!("want bit without a cached action");
                    };
                    if self.perform(v, idx, act, t) {
                        self.rr[v][out] = (idx as u32 + 1) % n_sources as u32;
                        break;
                    }
                    mask &= !(1u32 << idx);
                }
            }
            // performs uncache the next head in their queue; freshly computed
            // actions are admissible at this instant, so keep going until
            // this node is quiescent
            if self.stale_mask[v] == 0 {
                break;
            }
        }
    }

    /// Drop a source's cached action, marking it for recompute if a packet
    /// is still waiting behind it.
    fn uncache(&mut self, v: usize, idx: usize, act: HeadAction) {
        self.act_cache[v][idx] = CachedAct::Stale;
        self.want[v][out_of(act)] &= !(1u32 << idx);
        if self.nodes[v].head(source_of(idx)).is_some() {
            self.stale_mask[v] |= 1 << idx;
        }
    }

    fn perform(&mut self, v: usize, src_idx: usize, act: HeadAction, t: u64) -> bool {
        let src = source_of(src_idx);
        match act {
            HeadAction::Hold => false,
            HeadAction::Consume => {
                let pkt = self.nodes[v].pop(src);
                self.uncache(v, src_idx, act);
                self.consume_busy[v] = t + self.timing.tx_int_ns;
                self.release_slot(v, src, t);
                self.consume(pkt, t);
                self.moved(t);
                self.schedule_service(v, t + self.timing.tx_int_ns);
                true
            }
            HeadAction::Forward { link, class, kind } => {
                let port = link.port();
                let credit = self.nodes[v].credit(port, class);
                if !bubble_admissible(class, credit, kind) {
                    // downstream filled up since this action was cached
                    self.uncache(v, src_idx, act);
                    return false;
                }
                let mut pkt = self.nodes[v].pop(src);
                self.uncache(v, src_idx, act);
                self.nodes[v].spend_credit(port, class);
                self.link_busy[v][port] = t + self.timing.tx_ext_ns;
                self.release_slot(v, src, t);
                pkt.hops += 1;
                pkt.came_from = Some((class, link));
                let dst_node = self.neighbors[v][port];
                let in_port = LinkDir::new(link.dim, link.sign.flip()).port() as u8;
                self.net_inflight += 1;
                let at = t + self.timing.tx_ext_ns + self.timing.lat_ext_ns;
                self.push(at, Ev::Arrive { node: dst_node, port: in_port, class, pkt: Box::new(pkt) });
                self.moved(t);
                self.schedule_service(v, t + self.timing.tx_ext_ns);
                true
            }
        }
    }

    /// Tell the upstream router the dequeued slot is free again.
    fn release_slot(&mut self, v: usize, src: SourceIndex, t: u64) {
        if let SourceIndex::Vc { port, class } = src {
            let upstream = self.neighbors[v][port];
            // ports pair as 2*dim / 2*dim+1, so the reverse direction is ^1
            let up_port = (port ^ 1) as u8;
            self.push(
                t + self.timing.lat_ext_ns,
                Ev::Credit { node: upstream, port: up_port, class },
            );
        }
    }

    fn consume(&mut self, pkt: Packet, t: u64) {
        self.resident -= 1;
        let done = t + self.timing.tx_int_ns + self.timing.lat_int_ns;
        let lifetime = done - pkt.created_at;
        self.stats.consumed += 1;

        let s = self.coords.get(pkt.src);
        let d = self.coords.get(pkt.dst);
        let expected = match pkt.idn {
            None => torus_distance(s, d, &self.shape),
            Some(q) => {
                let qc = self.coords.get(q);
                torus_distance(s, qc, &self.shape) + torus_distance(qc, d, &self.shape)
            }
        };
        if pkt.hops as u32 != expected {
            self.stats.hop_violations += 1;
        }
        let expected_switches = if pkt.idn.is_some() { 1 } else { 0 };
        if pkt.phase_switches != expected_switches {
            self.stats.phase_violations += 1;
        }

        pkt.id.hash(&mut self.stats.hasher);
        pkt.src.hash(&mut self.stats.hasher);
        pkt.dst.hash(&mut self.stats.hasher);
        pkt.hops.hash(&mut self.stats.hasher);
        lifetime.hash(&mut self.stats.hasher);

        if let Some(w) = self.window_of(t) {
            self.stats.consumed_measure += 1;
            self.stats.life_sum += lifetime as u128;
            self.stats.hops_sum += pkt.hops as u64;
            self.stats.win_consumed[w] += 1;
            self.stats.win_life_sum[w] += lifetime as u128;
            match pkt.deroute {
                DerouteKind::None => {}
                DerouteKind::Widn => self.stats.derouted_widn += 1,
                DerouteKind::Oidn => self.stats.derouted_oidn += 1,
            }
            if let Some(ls) = &mut self.stats.lifetimes {
                ls.push(lifetime);
            }
        }
        self.sink.record(&PacketRecord {
            id: pkt.id,
            src: pkt.src,
            dst: pkt.dst,
            deroute: pkt.deroute,
            hops: pkt.hops,
            lifetime_ns: lifetime,
        });
    }

    fn probe(&mut self, _t: u64) {
        let backlog: u64 = self.gens.iter().map(|g| g.backlog_packets).sum();
        self.stats.backlog_samples.push(backlog);
        if self.cfg.audit {
            assert!(self.conservation_holds(), "packet conservation violated");
        }
    }

    fn conservation_holds(&self) -> bool {
        let queued: u64 = self
            .nodes
            .iter()
            .map(|n| {
                n.injection.len() as u64
                    + n.vcs
                        .iter()
                        .map(|p| p.iter().map(|vc| vc.len() as u64).sum::<u64>())
                        .sum::<u64>()
            })
            .sum();
        let inflight: u64 =
            self.gens.iter().map(|g| g.inflight as u64).sum::<u64>() + self.net_inflight;
        let resident_actual = queued + inflight;
        resident_actual == self.resident
            && self.stats.offered == self.stats.consumed + self.resident
            && self.stats.generated
                == self.stats.offered + self.gens.iter().map(|g| g.backlog_packets).sum::<u64>()
    }

    fn finish(self) -> RunStats {
        let st = self.stats;
        let conservation_ok = {
            // recompute with the moved-out stats
            let queued: u64 = self
                .nodes
                .iter()
                .map(|n| {
                    n.injection.len() as u64
                        + n.vcs
                            .iter()
                            .map(|p| p.iter().map(|vc| vc.len() as u64).sum::<u64>())
                            .sum::<u64>()
                })
                .sum();
            let inflight: u64 =
                self.gens.iter().map(|g| g.inflight as u64).sum::<u64>() + self.net_inflight;
            queued + inflight == self.resident
                && st.offered == st.consumed + self.resident
                && st.generated
                    == st.offered + self.gens.iter().map(|g| g.backlog_packets).sum::<u64>()
        };
        let window_mean_lifetime = st
            .win_consumed
            .iter()
            .zip(&st.win_life_sum)
            .map(|(&c, &s)| if c == 0 { 0.0 } else { s as f64 / c as f64 })
            .collect();
        RunStats {
            generated: st.generated,
            generated_measure: st.generated_measure,
            dropped: st.dropped,
            dropped_measure: st.dropped_measure,
            offered: st.offered,
            consumed: st.consumed,
            consumed_measure: st.consumed_measure,
            mean_lifetime_ns: if st.consumed_measure == 0 {
                0.0
            } else {
                st.life_sum as f64 / st.consumed_measure as f64
            },
            mean_hops: if st.consumed_measure == 0 {
                0.0
            } else {
                st.hops_sum as f64 / st.consumed_measure as f64
            },
            derouted_widn: st.derouted_widn,
            derouted_oidn: st.derouted_oidn,
            window_mean_lifetime,
            window_consumed: st.win_consumed,
            backlog_samples: st.backlog_samples,
            stalls: st.stalls,
            hop_violations: st.hop_violations,
            phase_violations: st.phase_violations,
            conservation_ok,
            trace_hash: st.hasher.finish(),
            lifetimes: st.lifetimes,
        }
    }
}

/// Output index an action competes for: 0 = consumption, 1 + port = link.
fn out_of(act: HeadAction) -> usize {
    match act {
        HeadAction::Consume => 0,
        HeadAction::Forward { link, .. } => 1 + link.port(),
        HeadAction::Hold => unreachable!("Hold is never cached as an action"),
    }
}

fn source_of(idx: usize) -> SourceIndex {
    if idx == 0 {
        SourceIndex::Injection
    } else {
        SourceIndex::Vc {
            port: (idx - 1) / 3,
            class: VcClass::ALL[(idx - 1) % 3],
        }
    }
}
