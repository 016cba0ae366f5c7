use clap::Parser;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use torsim::config::SimConfig;
use torsim::engine::{run_with_sink, PacketRecord, PacketSink};
use torsim::harness::{find_gamma_star, write_csv, SaturationThresholds, SweepSpec};
use torsim::policy::RoutePolicy;
use torsim::router::DerouteKind;
use torsim::topology::TorusShape;
use torsim::traffic::TrafficPattern;

/// Torus interconnect simulator: adaptive routing policies under synthetic
/// traffic, with gamma sweeps and saturation detection.
#[derive(Parser, Debug)]
#[command(name = "torsim", version)]
struct Cli {
    /// Cubic torus side (k x k x k); overridden by --dims.
    #[arg(long)]
    k: Option<u32>,
    /// Explicit per-dimension sizes, e.g. 16,8,8.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<u32>>,
    /// abr | por | ofr
    #[arg(long)]
    policy: Option<RoutePolicy>,
    /// uniform | butterfly | transpose | transpose3d | bitrev
    #[arg(long)]
    pattern: Option<TrafficPattern>,
    /// Offered loads in gamma_0 units: a list "0.2,0.4" or a range
    /// "0.05:1.0:0.05" (start:end:step). Default 0.05:1.0:0.05.
    #[arg(long)]
    gamma: Option<String>,
    /// Outflank offset.
    #[arg(long)]
    delta: Option<u32>,
    /// Profit weight; defaults to 2.0 (OFR/ABR) or 1.0 (POR).
    #[arg(long)]
    eta: Option<f64>,
    /// VC buffer capacity in packets.
    #[arg(long)]
    capacity: Option<u32>,
    /// Packet size in bytes.
    #[arg(long = "packet-size")]
    packet_size: Option<u32>,
    /// Message size in packets.
    #[arg(long = "message-size")]
    message_size: Option<u32>,
    /// Source queue bound in messages; later arrivals are dropped.
    #[arg(long = "source-queue")]
    source_queue: Option<u32>,
    /// Node-router link latency, ns.
    #[arg(long = "lat-int")]
    lat_int: Option<u64>,
    /// Node-router link bandwidth, Gb/s.
    #[arg(long = "bw-int")]
    bw_int: Option<u64>,
    /// Network link latency, ns.
    #[arg(long = "lat-ext")]
    lat_ext: Option<u64>,
    /// Network link bandwidth, Gb/s.
    #[arg(long = "bw-ext")]
    bw_ext: Option<u64>,
    /// Replicate seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Warmup, ns. Default: time for ~50 messages per node, capped at 2 ms.
    #[arg(long)]
    warmup: Option<u64>,
    /// Measurement interval, ns.
    #[arg(long)]
    measure: Option<u64>,
    /// Measurement sub-windows for saturation detection.
    #[arg(long)]
    windows: Option<usize>,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-packet dump path; only valid with a single gamma and seed.
    #[arg(long = "emit-packets")]
    emit_packets: Option<PathBuf>,
    /// key=value file mirroring the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_gammas(s: &str) -> Result<Vec<f64>, String> {
    let vals: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("range must be start:end:step, got {s}"));
        }
        let (start, end, step): (f64, f64, f64) = (
            parts[0].parse().map_err(|e| format!("{e}"))?,
            parts[1].parse().map_err(|e| format!("{e}"))?,
            parts[2].parse().map_err(|e| format!("{e}"))?,
        );
        if step <= 0.0 {
            return Err("step must be positive".into());
        }
        let mut out = Vec::new();
        let mut i = 0;
        loop {
            let g = start + i as f64 * step;
            if g > end + 1e-9 {
                break;
            }
            out.push(g);
            i += 1;
        }
        out
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect::<Result<_, _>>()?
    };
    if vals.is_empty() || vals.windows(2).any(|w| w[1] <= w[0]) {
        return Err("gamma values must be non-empty and strictly increasing".into());
    }
    Ok(vals)
}

fn load_config_file(path: &PathBuf) -> Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value", path.display(), lineno + 1));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn file_val<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e| format!("config key {key}: {e}")),
    }
}

struct PacketCsv {
    w: BufWriter<File>,
}

impl PacketSink for PacketCsv {
    fn record(&mut self, r: &PacketRecord) {
        let kind = match r.deroute {
            DerouteKind::None => "none",
            DerouteKind::Widn => "widn",
            DerouteKind::Oidn => "oidn",
        };
        writeln!(
            self.w,
            "{},{},{},{},{},{}",
            r.id, r.src, r.dst, kind, r.hops, r.lifetime_ns
        )
        .expect("packet dump write failed");
    }
}

fn build(cli: &Cli) -> Result<(SweepSpec, Option<PathBuf>, Option<PathBuf>), String> {
    let file = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => HashMap::new(),
    };
    let dims: Option<Vec<u32>> = match &cli.dims {
        Some(d) => Some(d.clone()),
        None => file
            .get("dims")
            .map(|v| {
                v.split(|c| c == ',' || c == 'x')
                    .map(|p| p.trim().parse().map_err(|e| format!("dims: {e}")))
                    .collect::<Result<Vec<u32>, String>>()
            })
            .transpose()?,
    };
    let k = cli.k.or(file_val(&file, "k")?);
    let shape = match (dims, k) {
        (Some(d), _) => TorusShape::new(&d).map_err(|e| e.to_string())?,
        (None, Some(k)) => TorusShape::cubic(k, 3).map_err(|e| e.to_string())?,
        (None, None) => TorusShape::cubic(8, 3).unwrap(),
    };
    let policy = cli
        .policy
        .or(file_val(&file, "policy")?)
        .unwrap_or(RoutePolicy::Abr);
    let pattern = cli
        .pattern
        .or(file_val(&file, "pattern")?)
        .unwrap_or(TrafficPattern::Uniform);

    let mut cfg = SimConfig::new(shape, policy, pattern);
    if let Some(v) = cli.delta.or(file_val(&file, "delta")?) {
        cfg.delta = v;
    }
    cfg.eta = cli
        .eta
        .or(file_val(&file, "eta")?)
        .unwrap_or(policy.default_eta());
    if let Some(v) = cli.capacity.or(file_val(&file, "capacity")?) {
        cfg.capacity = v;
    }
    if let Some(v) = cli.packet_size.or(file_val(&file, "packet-size")?) {
        cfg.packet_bytes = v;
    }
    if let Some(v) = cli.message_size.or(file_val(&file, "message-size")?) {
        cfg.message_packets = v;
    }
    if let Some(v) = cli.source_queue.or(file_val(&file, "source-queue")?) {
        cfg.source_queue_msgs = v;
    }
    if let Some(v) = cli.lat_int.or(file_val(&file, "lat-int")?) {
        cfg.lat_int_ns = v;
    }
    if let Some(v) = cli.bw_int.or(file_val(&file, "bw-int")?) {
        cfg.bw_int_bps = v * 1_000_000_000;
    }
    if let Some(v) = cli.lat_ext.or(file_val(&file, "lat-ext")?) {
        cfg.lat_ext_ns = v;
    }
    if let Some(v) = cli.bw_ext.or(file_val(&file, "bw-ext")?) {
        cfg.bw_ext_bps = v * 1_000_000_000;
    }
    if let Some(v) = cli.measure.or(file_val(&file, "measure")?) {
        cfg.measure_ns = v;
    }
    if let Some(v) = cli.windows.or(file_val(&file, "windows")?) {
        cfg.windows = v;
    }

    let gammas = match cli.gamma.as_deref().or(file.get("gamma").map(|s| s.as_str())) {
        Some(s) => parse_gammas(s)?,
        None => torsim::harness::default_gammas(),
    };
    let seeds = match (&cli.seed, file.get("seed")) {
        (Some(s), _) => s.clone(),
        (None, Some(v)) => v
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("seed: {e}")))
            .collect::<Result<_, String>>()?,
        (None, None) => vec![1, 2, 3],
    };
    if seeds.is_empty() {
        return Err("at least one seed is required".into());
    }

    // warmup default: roughly 50 messages per node at the highest swept
    // load, capped so low-gamma sweeps stay affordable
    cfg.warmup_ns = match cli.warmup.or(file_val(&file, "warmup")?) {
        Some(v) => v,
        None => {
            cfg.gamma = *gammas.last().unwrap();
            let t = torsim::config::Timing::derive(&cfg).map_err(|e| e.to_string())?;
            (50u64.saturating_mul(t.message_interval_ns)).min(2_000_000)
        }
    };

    cfg.gamma = gammas[0];
    cfg.seed = seeds[0];
    cfg.validate().map_err(|e| e.to_string())?;

    if cli.emit_packets.is_some() && (gammas.len() != 1 || seeds.len() != 1) {
        return Err("--emit-packets needs exactly one gamma and one seed".into());
    }

    let mut spec = SweepSpec::new(cfg);
    spec.gammas = gammas;
    spec.seeds = seeds;
    spec.thresholds = SaturationThresholds {
        // half a message per node: above the amplitude of periodic burst
        // phases, far below a sustained deficit
        backlog_margin: spec.base.message_packets as u64 * spec.base.shape.nodes() / 2,
        ..SaturationThresholds::default()
    };
    Ok((spec, cli.out.clone(), cli.emit_packets.clone()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (spec, out, emit) = match build(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    if let Some(path) = emit {
        // single run with a per-packet dump
        let file = match File::create(&path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return ExitCode::from(2);
            }
        };
        let mut sink = PacketCsv { w: BufWriter::new(file) };
        writeln!(sink.w, "id,src,dst,idn_kind,hops,lifetime_ns").unwrap();
        let mut cfg = spec.base.clone();
        cfg.gamma = spec.gammas[0];
        cfg.seed = spec.seeds[0];
        if let Err(e) = run_with_sink(&cfg, &mut sink) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        if sink.w.flush().is_err() {
            return ExitCode::from(3);
        }
    }

    let outcome = match find_gamma_star(&spec) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let expected_max = spec.gammas.len() * spec.seeds.len();
    let incomplete = outcome.rows.is_empty() || outcome.rows.len() > expected_max;

    let result = match out {
        Some(path) => File::create(&path)
            .map_err(|e| format!("{}: {e}", path.display()))
            .and_then(|f| {
                let mut w = BufWriter::new(f);
                write_csv(&mut w, &spec.base, &outcome, &spec.thresholds)
                    .and_then(|_| w.flush())
                    .map_err(|e| e.to_string())
            }),
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            write_csv(&mut w, &spec.base, &outcome, &spec.thresholds).map_err(|e| e.to_string())
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        return ExitCode::from(3);
    }
    eprintln!(
        "{} {} gamma* = {:.2}{}{}",
        spec.base.policy,
        spec.base.pattern,
        outcome.gamma_star,
        if outcome.sweep_limited { " (sweep-limited)" } else { "" },
        if outcome.non_monotone { " (non-monotone verdicts)" } else { "" },
    );
    if incomplete {
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
