//! Simulation configuration and the derived exact-integer timing constants.

use crate::policy::RoutePolicy;
use crate::topology::{ShapeError, TorusShape};
use crate::traffic::TrafficPattern;
use num_rational::Ratio;
use std::error::Error;
use std::fmt;

#[derive(Clone, Debug)]
pub enum ConfigError {
    Shape(ShapeError),
    Pattern(String),
    Value(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Shape(e) => write!(f, "shape: {e}"),
            ConfigError::Pattern(msg) => write!(f, "pattern: {msg}"),
            ConfigError::Value(msg) => write!(f, "config: {msg}"),
        }
    }
}

impl Error for ConfigError {}

impl From<ShapeError> for ConfigError {
    fn from(e: ShapeError) -> Self {
        ConfigError::Shape(e)
    }
}

/// One simulation run. Durations are simulated nanoseconds, bandwidths are
/// bits per second, sizes are bytes or packets.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub shape: TorusShape,
    pub policy: RoutePolicy,
    pub pattern: TrafficPattern,
    /// Offered load in gamma_0 units.
    pub gamma: f64,
    /// Packet size S in bytes.
    pub packet_bytes: u32,
    /// VC capacity C in packets.
    pub capacity: u32,
    /// Message size M in packets.
    pub message_packets: u32,
    /// Source queue bound in messages. A message arriving while the node
    /// already holds this many undelivered messages is dropped and counted;
    /// sustained drops are the definitive overload signal, since an
    /// unbounded source queue would smooth bursty patterns into apparent
    /// stability.
    pub source_queue_msgs: u32,
    pub lat_int_ns: u64,
    pub bw_int_bps: u64,
    pub lat_ext_ns: u64,
    pub bw_ext_bps: u64,
    /// Outflank offset.
    pub delta: u32,
    /// Profit weight.
    pub eta: f64,
    pub seed: u64,
    pub warmup_ns: u64,
    pub measure_ns: u64,
    /// Sub-windows the measurement interval is split into.
    pub windows: usize,
    /// Movement-free interval (in units of S/B_e + lat_ext) that counts as a
    /// stall.
    pub watchdog_factor: u32,
    /// Run ABR with only the VS2 escape VC allocated (sensitivity option;
    /// ABR never touches VS1 either way).
    pub abr_two_vcs: bool,
    /// Keep each consumed packet's lifetime for percentile statistics.
    pub collect_lifetimes: bool,
    /// Verify the credit/occupancy/in-flight balance at every probe.
    pub audit: bool,
}

impl SimConfig {
    /// Reference parameter set: S=512B, C=8, M=96, 80ns/64Gb/s internal,
    /// 200ns/20Gb/s external, delta=2, eta per policy.
    pub fn new(shape: TorusShape, policy: RoutePolicy, pattern: TrafficPattern) -> Self {
        SimConfig {
            shape,
            policy,
            pattern,
            gamma: 0.5,
            packet_bytes: 512,
            capacity: 8,
            message_packets: 96,
            source_queue_msgs: 4,
            lat_int_ns: 80,
            bw_int_bps: 64_000_000_000,
            lat_ext_ns: 200,
            bw_ext_bps: 20_000_000_000,
            delta: 2,
            eta: policy.default_eta(),
            seed: 1,
            warmup_ns: 250_000,
            measure_ns: 1_000_000,
            windows: 4,
            watchdog_factor: 10,
            abr_two_vcs: false,
            collect_lifetimes: true,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        crate::traffic::validate_pattern(self.pattern, &self.shape)?;
        if !(self.gamma >= 0.0) {
            return Err(ConfigError::Value("gamma must be non-negative".into()));
        }
        if self.packet_bytes == 0 || self.capacity == 0 || self.message_packets == 0 {
            return Err(ConfigError::Value("sizes must be positive".into()));
        }
        if self.source_queue_msgs == 0 {
            return Err(ConfigError::Value("source queue must hold at least one message".into()));
        }
        if self.bw_int_bps == 0 || self.bw_ext_bps == 0 {
            return Err(ConfigError::Value("bandwidths must be positive".into()));
        }
        if self.measure_ns == 0 || self.windows < 1 {
            return Err(ConfigError::Value("measurement window must be positive".into()));
        }
        if self.delta == 0 && self.policy == RoutePolicy::Ofr {
            return Err(ConfigError::Value("delta must be at least 1 for ofr".into()));
        }
        if self.policy == RoutePolicy::Ofr && !matches!(self.shape.n(), 2 | 3) {
            return Err(ConfigError::Value(
                "ofr candidate sets are defined for 2 or 3 dimensions".into(),
            ));
        }
        gamma0_rate(self)?;
        Ok(())
    }

    pub fn packet_bits(&self) -> u64 {
        self.packet_bytes as u64 * 8
    }
}

/// Per-node injection rate (packets/s) that saturates the bisection under
/// uniform traffic. For a k.k.k torus the bisection is 4k^2 unidirectional
/// channels crossed by half of all k^3*r injected packets, giving
/// r = 8 * (B_e / S_bits) / k; non-cubic shapes generalize with the longest
/// dimension, which must be even so the cut exists.
pub fn gamma0_rate(cfg: &SimConfig) -> Result<f64, ConfigError> {
    let k = *cfg.shape.dims().iter().max().unwrap();
    if k % 2 != 0 {
        return Err(ConfigError::Value(format!(
            "bisection normalization needs an even longest dimension, got {k}"
        )));
    }
    Ok(8.0 * (cfg.bw_ext_bps as f64 / cfg.packet_bits() as f64) / k as f64)
}

/// Integer-nanosecond timing constants derived from a config. Transmission
/// times round up so event ordering never depends on floating point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    /// Injection/consumption link transmission time per packet.
    pub tx_int_ns: u64,
    /// Network link transmission time per packet.
    pub tx_ext_ns: u64,
    pub lat_int_ns: u64,
    pub lat_ext_ns: u64,
    /// Spacing between generator offers: max of the injection-link rate and
    /// the 2.4 * gamma_0 offer rate.
    pub gen_interval_ns: u64,
    /// Mean spacing between messages at one node for the configured gamma.
    pub message_interval_ns: u64,
    pub watchdog_ns: u64,
}

fn div_ceil_u128(a: u128, b: u128) -> u128 {
    (a + b - 1) / b
}

impl Timing {
    pub fn derive(cfg: &SimConfig) -> Result<Timing, ConfigError> {
        let bits = cfg.packet_bits() as u128;
        let tx_int = div_ceil_u128(bits * 1_000_000_000, cfg.bw_int_bps as u128) as u64;
        let tx_ext = div_ceil_u128(bits * 1_000_000_000, cfg.bw_ext_bps as u128) as u64;

        let k = *cfg.shape.dims().iter().max().unwrap() as u128;
        // 1 / (2.4 * gamma_0) = 5 * S_bits * k / (96 * B_e), in seconds
        let offer =
            div_ceil_u128(5 * bits * k * 1_000_000_000, 96 * cfg.bw_ext_bps as u128) as u64;
        let gen_interval = tx_int.max(offer);

        // M / (gamma * gamma_0) with gamma as an exact rational; gamma = 0
        // means no traffic at all
        let gamma = Ratio::<i64>::approximate_float(cfg.gamma)
            .ok_or_else(|| ConfigError::Value("gamma is not finite".into()))?;
        let (gn, gd) = (*gamma.numer() as u128, *gamma.denom() as u128);
        if *gamma.numer() < 0 {
            return Err(ConfigError::Value("gamma must be non-negative".into()));
        }
        let message_interval = if gn == 0 {
            u64::MAX
        } else {
            let msg_num = cfg.message_packets as u128 * bits * k * 1_000_000_000 * gd;
            let msg_den = 8 * cfg.bw_ext_bps as u128 * gn;
            div_ceil_u128(msg_num, msg_den) as u64
        };

        Ok(Timing {
            tx_int_ns: tx_int,
            tx_ext_ns: tx_ext,
            lat_int_ns: cfg.lat_int_ns,
            lat_ext_ns: cfg.lat_ext_ns,
            gen_interval_ns: gen_interval,
            message_interval_ns: message_interval,
            watchdog_ns: cfg.watchdog_factor as u64 * (tx_ext + cfg.lat_ext_ns),
        })
    }
}
