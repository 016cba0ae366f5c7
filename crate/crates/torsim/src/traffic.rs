//! Synthetic traffic patterns and their startup validation.

use crate::config::ConfigError;
use crate::topology::{Coord, TorusShape};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Copy, Clone, PartialEq, Eq, Debug, Hash)]
pub enum TrafficPattern {
    Uniform,
    /// Hamming-distance-one partner; the flipped bit advances each message.
    Butterfly,
    /// Matrix transposition of the linear index, (i,j) -> (j,i).
    Transpose,
    /// Coordinate rotation (x,y,z) -> (y,z,x).
    Transpose3D,
    /// Bit reversal of the linear index.
    BitReverse,
}

impl fmt::Display for TrafficPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrafficPattern::Uniform => "uniform",
            TrafficPattern::Butterfly => "butterfly",
            TrafficPattern::Transpose => "transpose",
            TrafficPattern::Transpose3D => "transpose3d",
            TrafficPattern::BitReverse => "bitrev",
        })
    }
}

impl FromStr for TrafficPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(TrafficPattern::Uniform),
            "butterfly" | "fft" => Ok(TrafficPattern::Butterfly),
            "transpose" | "transposition" => Ok(TrafficPattern::Transpose),
            "transpose3d" | "3dtranspose" => Ok(TrafficPattern::Transpose3D),
            "bitrev" | "bitreverse" | "bit-reverse" => Ok(TrafficPattern::BitReverse),
            other => Err(format!("unknown pattern: {other}")),
        }
    }
}

fn log2_exact(n: u64) -> Option<u32> {
    if n.is_power_of_two() {
        Some(n.trailing_zeros())
    } else {
        None
    }
}

fn isqrt_exact(n: u64) -> Option<u64> {
    let r = (n as f64).sqrt().round() as u64;
    if r * r == n {
        Some(r)
    } else {
        None
    }
}

fn reverse_bits(v: u64, bits: u32) -> u64 {
    let mut out = 0u64;
    for b in 0..bits {
        out |= ((v >> b) & 1) << (bits - 1 - b);
    }
    out
}

/// Destination of the `msg_index`-th message from `source` as a linear node
/// id. Uniform destinations exclude the source; the permutation patterns may
/// return the source itself (a fixed point), which the generator consumes
/// locally.
pub fn destination_id(
    source: u64,
    msg_index: u64,
    pattern: TrafficPattern,
    shape: &TorusShape,
    rng: &mut impl Rng,
) -> u64 {
    let nodes = shape.nodes();
    match pattern {
        TrafficPattern::Uniform => {
            let d = rng.gen_range(0..nodes - 1);
            if d >= source {
                d + 1
            } else {
                d
            }
        }
        TrafficPattern::Butterfly => {
            let bits = log2_exact(nodes).expect("validated at startup");
            source ^ (1 << (msg_index % bits as u64))
        }
        TrafficPattern::Transpose => {
            let side = isqrt_exact(nodes).expect("validated at startup");
            let (i, j) = (source / side, source % side);
            j * side + i
        }
        TrafficPattern::Transpose3D => {
            let c = shape.coord(source);
            let rot = Coord::new(&[c.get(1), c.get(2), c.get(0)]);
            shape.linear(&rot)
        }
        TrafficPattern::BitReverse => {
            let bits = log2_exact(nodes).expect("validated at startup");
            reverse_bits(source, bits)
        }
    }
}

/// Convenience wrapper over coordinates.
pub fn pattern_destination(
    source: &Coord,
    msg_index: u64,
    pattern: TrafficPattern,
    shape: &TorusShape,
    rng: &mut impl Rng,
) -> Coord {
    let id = destination_id(shape.linear(source), msg_index, pattern, shape, rng);
    shape.coord(id)
}

/// Check the pattern's shape preconditions and that each permutation pattern
/// is a bijection on the configured nodes.
pub fn validate_pattern(pattern: TrafficPattern, shape: &TorusShape) -> Result<(), ConfigError> {
    let nodes = shape.nodes();
    match pattern {
        TrafficPattern::Uniform => return Ok(()),
        TrafficPattern::Butterfly | TrafficPattern::BitReverse => {
            if log2_exact(nodes).is_none() {
                return Err(ConfigError::Pattern(format!(
                    "{pattern} needs a power-of-two node count, got {nodes}"
                )));
            }
        }
        TrafficPattern::Transpose => {
            if isqrt_exact(nodes).is_none() {
                return Err(ConfigError::Pattern(format!(
                    "transpose needs a square node count, got {nodes}"
                )));
            }
        }
        TrafficPattern::Transpose3D => {
            // coordinate rotation only stays in range when all sides match
            if shape.n() != 3 || shape.dims().iter().any(|&k| k != shape.dims()[0]) {
                return Err(ConfigError::Pattern(
                    "transpose3d needs a cubic three-dimensional torus".into(),
                ));
            }
        }
    }
    // bijection sweep (butterfly is checked per bit position)
    let rounds = if pattern == TrafficPattern::Butterfly {
        log2_exact(nodes).unwrap() as u64
    } else {
        1
    };
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    for round in 0..rounds {
        let mut seen = vec![false; nodes as usize];
        for src in 0..nodes {
            let d = destination_id(src, round, pattern, shape, &mut rng);
            if d >= nodes {
                return Err(ConfigError::Pattern(format!(
                    "{pattern} maps node {src} outside the torus"
                )));
            }
            if seen[d as usize] {
                return Err(ConfigError::Pattern(format!(
                    "{pattern} is not a bijection at destination {d}"
                )));
            }
            seen[d as usize] = true;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::mock::StepRng;

    fn sh(dims: &[u32]) -> TorusShape {
        TorusShape::new(dims).unwrap()
    }

    #[test]
    fn bit_reverse_example() {
        // 0100 -> 0010 with 16 nodes
        let shape = sh(&[4, 4]);
        let mut rng = StepRng::new(0, 1);
        assert_eq!(
            destination_id(0b0100, 0, TrafficPattern::BitReverse, &shape, &mut rng),
            0b0010
        );
    }

    #[test]
    fn transpose3d_rotates_coordinates() {
        let shape = sh(&[8, 8, 8]);
        let mut rng = StepRng::new(0, 1);
        let src = shape.linear(&Coord::new(&[1, 2, 3]));
        let dst = destination_id(src, 0, TrafficPattern::Transpose3D, &shape, &mut rng);
        assert_eq!(shape.coord(dst), Coord::new(&[2, 3, 1]));
    }

    #[test]
    fn butterfly_flips_low_bit_first() {
        let shape = sh(&[8]);
        let mut rng = StepRng::new(0, 1);
        assert_eq!(destination_id(5, 0, TrafficPattern::Butterfly, &shape, &mut rng), 4);
        assert_eq!(destination_id(5, 1, TrafficPattern::Butterfly, &shape, &mut rng), 7);
        assert_eq!(destination_id(5, 3, TrafficPattern::Butterfly, &shape, &mut rng), 4);
    }

    #[test]
    fn transpose_swaps_matrix_indices() {
        let shape = sh(&[4, 4]);
        let mut rng = StepRng::new(0, 1);
        // linear 6 = (1,2) in a 4x4 matrix -> (2,1) = 9
        assert_eq!(destination_id(6, 0, TrafficPattern::Transpose, &shape, &mut rng), 9);
    }

    #[test]
    fn uniform_never_hits_source() {
        let shape = sh(&[4, 4]);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0x9E3779B97F4A7C15);
        for _ in 0..200 {
            let d = destination_id(7, 0, TrafficPattern::Uniform, &shape, &mut rng);
            assert_ne!(d, 7);
            assert!(d < 16);
        }
    }

    #[test]
    fn validation_accepts_and_rejects() {
        assert!(validate_pattern(TrafficPattern::Butterfly, &sh(&[8, 8, 8])).is_ok());
        assert!(validate_pattern(TrafficPattern::Butterfly, &sh(&[5, 5, 5])).is_err());
        assert!(validate_pattern(TrafficPattern::Transpose, &sh(&[16, 8, 8])).is_ok());
        assert!(validate_pattern(TrafficPattern::Transpose, &sh(&[8, 8, 8])).is_err());
        assert!(validate_pattern(TrafficPattern::Transpose3D, &sh(&[8, 8, 8])).is_ok());
        assert!(validate_pattern(TrafficPattern::Transpose3D, &sh(&[16, 8, 8])).is_err());
        assert!(validate_pattern(TrafficPattern::Transpose3D, &sh(&[8, 8])).is_err());
        assert!(validate_pattern(TrafficPattern::BitReverse, &sh(&[4, 4])).is_ok());
    }
}
