//! Per-node switching state: VC queues, bubble-rule admission, the split
//! escape subnetworks, and credit counters mirroring downstream buffers.

use crate::policy::{select_output, OccupancySnapshot, OutputChoice};
use crate::topology::{CoordTable, LinkDir, TorusShape};
use std::collections::VecDeque;

pub const NUM_VC_CLASSES: usize = 3;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Hash)]
pub enum VcClass {
    Adaptive,
    /// Escape subnetwork for packets still heading to an IDN.
    EscapeVs1,
    /// Escape subnetwork for packets heading to their final destination.
    EscapeVs2,
}

impl VcClass {
    pub const ALL: [VcClass; NUM_VC_CLASSES] =
        [VcClass::Adaptive, VcClass::EscapeVs1, VcClass::EscapeVs2];

    pub fn index(self) -> usize {
        match self {
            VcClass::Adaptive => 0,
            VcClass::EscapeVs1 => 1,
            VcClass::EscapeVs2 => 2,
        }
    }

    pub fn is_escape(self) -> bool {
        self != VcClass::Adaptive
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum InsertionKind {
    /// Continuing inside the same escape ring.
    Progress,
    /// Entering a queue from the generator, the adaptive network, another
    /// dimension, or across the VS1 -> VS2 boundary.
    Injection,
}

/// Bubble admission: adaptive queues take any packet that fits; escape
/// queues require two free slots for injections so a bubble always survives.
pub fn bubble_admissible(class: VcClass, free: u32, kind: InsertionKind) -> bool {
    match (class, kind) {
        (VcClass::Adaptive, _) => free >= 1,
        (_, InsertionKind::Progress) => free >= 1,
        (_, InsertionKind::Injection) => free >= 2,
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Phase {
    ToIdn,
    ToDest,
}

/// Escape class a packet is allowed to use, by travel phase.
pub fn escape_class_for(phase: Phase) -> VcClass {
    match phase {
        Phase::ToIdn => VcClass::EscapeVs1,
        Phase::ToDest => VcClass::EscapeVs2,
    }
}

/// Deroute category recorded per packet.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum DerouteKind {
    None,
    Widn,
    Oidn,
}

#[derive(Clone, Debug)]
pub struct Packet {
    pub id: u64,
    pub src: u32,
    pub dst: u32,
    pub idn: Option<u32>,
    pub deroute: DerouteKind,
    pub phase: Phase,
    pub hops: u16,
    pub phase_switches: u8,
    pub created_at: u64,
    /// Class and movement direction of the hop that delivered the packet
    /// here; None for packets still in the injection queue.
    pub came_from: Option<(VcClass, LinkDir)>,
    /// The deroute decision has been made (it happens once, at injection).
    pub decided: bool,
}

impl Packet {
    pub fn new(id: u64, src: u32, dst: u32, created_at: u64) -> Self {
        Packet {
            id,
            src,
            dst,
            idn: None,
            deroute: DerouteKind::None,
            phase: Phase::ToDest,
            hops: 0,
            phase_switches: 0,
            created_at,
            came_from: None,
            decided: false,
        }
    }

    /// Node the packet is currently being routed toward.
    pub fn current_target(&self) -> u32 {
        match self.phase {
            Phase::ToIdn => self.idn.expect("phase ToIdn without an IDN"),
            Phase::ToDest => self.dst,
        }
    }
}

/// A bounded FIFO of packets with a class tag.
#[derive(Clone, Debug)]
pub struct VirtualChannel {
    pub class: VcClass,
    capacity: u32,
    fifo: VecDeque<Packet>,
}

impl VirtualChannel {
    pub fn new(class: VcClass, capacity: u32) -> Self {
        VirtualChannel {
            class,
            capacity,
            fifo: VecDeque::with_capacity(capacity as usize),
        }
    }

    pub fn free(&self) -> u32 {
        self.capacity - self.fifo.len() as u32
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn admit(&self, kind: InsertionKind) -> bool {
        bubble_admissible(self.class, self.free(), kind)
    }

    pub fn push(&mut self, pkt: Packet) {
        assert!(self.free() >= 1, "virtual channel overfilled");
        self.fifo.push_back(pkt);
    }

    pub fn front(&self) -> Option<&Packet> {
        self.fifo.front()
    }

    pub fn pop(&mut self) -> Option<Packet> {
        self.fifo.pop_front()
    }
}

/// Index of a head-of-queue position inside one node: the injection queue or
/// one of the input VCs.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum SourceIndex {
    Injection,
    Vc { port: usize, class: VcClass },
}

/// What the router should do with a head-of-queue packet.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum HeadAction {
    /// Packet is at its destination: hand it to the sink.
    Consume,
    Forward {
        link: LinkDir,
        class: VcClass,
        kind: InsertionKind,
    },
    Hold,
}

/// Per-node switching state. The VC queues hold packets that have arrived on
/// each incoming direction; the credit counters mirror the free slots of the
/// matching queues one hop downstream.
pub struct RouterNode {
    pub id: u32,
    /// Packets delivered from the generator, waiting for their first hop.
    pub injection: VecDeque<Packet>,
    injection_capacity: u32,
    /// Input VCs indexed by arrival port, then class.
    pub vcs: Vec<[VirtualChannel; NUM_VC_CLASSES]>,
    /// Credits per output port and class.
    credits: Vec<[u32; NUM_VC_CLASSES]>,
    capacity: u32,
}

impl RouterNode {
    pub fn new(id: u32, ports: usize, capacity: u32) -> Self {
        let vcs = (0..ports)
            .map(|_| {
                [
                    VirtualChannel::new(VcClass::Adaptive, capacity),
                    VirtualChannel::new(VcClass::EscapeVs1, capacity),
                    VirtualChannel::new(VcClass::EscapeVs2, capacity),
                ]
            })
            .collect();
        RouterNode {
            id,
            injection: VecDeque::new(),
            injection_capacity: capacity,
            vcs,
            credits: vec![[capacity; NUM_VC_CLASSES]; ports],
            capacity,
        }
    }

    pub fn ports(&self) -> usize {
        self.vcs.len()
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn injection_free(&self) -> u32 {
        self.injection_capacity - self.injection.len() as u32
    }

    pub fn credit(&self, port: usize, class: VcClass) -> u32 {
        self.credits[port][class.index()]
    }

    /// A packet was sent to the downstream queue: one slot is now spoken for.
    pub fn spend_credit(&mut self, port: usize, class: VcClass) {
        let c = &mut self.credits[port][class.index()];
        assert!(*c > 0, "credit underflow on port {port}");
        *c -= 1;
    }

    /// The downstream queue released a slot.
    pub fn return_credit(&mut self, port: usize, class: VcClass) {
        let c = &mut self.credits[port][class.index()];
        assert!(*c < self.capacity, "credit overflow on port {port}");
        *c += 1;
    }

    /// Local congestion view used by both deroute and output selection.
    pub fn occupancy_snapshot(&self) -> OccupancySnapshot {
        let mut snap = OccupancySnapshot::new(self.ports(), self.capacity);
        for port in 0..self.ports() {
            for class in VcClass::ALL {
                snap.set_used(port, class, self.capacity - self.credit(port, class));
            }
        }
        snap
    }

    pub fn head(&self, src: SourceIndex) -> Option<&Packet> {
        match src {
            SourceIndex::Injection => self.injection.front(),
            SourceIndex::Vc { port, class } => self.vcs[port][class.index()].front(),
        }
    }

    pub fn pop(&mut self, src: SourceIndex) -> Packet {
        match src {
            SourceIndex::Injection => self.injection.pop_front().expect("empty injection queue"),
            SourceIndex::Vc { port, class } => {
                self.vcs[port][class.index()].pop().expect("empty VC")
            }
        }
    }

    /// Decide the next move for a head-of-queue packet. A packet standing on
    /// its IDN is treated as already being in the destination phase, so the
    /// VS1 -> VS2 transfer naturally counts as an injection.
    pub fn on_head_of_queue(
        &self,
        pkt: &Packet,
        coords: &CoordTable,
        shape: &TorusShape,
    ) -> HeadAction {
        let here = coords.get(self.id);
        let mut phase = pkt.phase;
        if phase == Phase::ToIdn && pkt.idn == Some(self.id) {
            phase = Phase::ToDest;
        }
        let target_id = match phase {
            Phase::ToIdn => pkt.idn.expect("ToIdn without IDN"),
            Phase::ToDest => pkt.dst,
        };
        if target_id == self.id {
            debug_assert_eq!(phase, Phase::ToDest);
            return HeadAction::Consume;
        }
        let target = coords.get(target_id);
        let snap = self.occupancy_snapshot();
        match select_output(here, target, escape_class_for(phase), pkt.came_from, &snap, shape) {
            OutputChoice::Forward { link, class } => {
                let kind = crate::policy::insertion_kind(pkt.came_from, link, class);
                HeadAction::Forward { link, class, kind }
            }
            OutputChoice::Hold => HeadAction::Hold,
        }
    }

    /// True when any queue in the node holds a packet.
    pub fn has_packets(&self) -> bool {
        !self.injection.is_empty()
            || self.vcs.iter().any(|port| port.iter().any(|vc| !vc.is_empty()))
    }
}
