//! Ground-truth scalar field over a square grid of regions, and noisy
//! sensing of it.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::Vector2;
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sub-seeds tried by [`SignalField::generate`] and
/// [`SignalField::generate_with_source`].
pub const SOURCE_ATTEMPTS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvironmentError {
    #[error("side length {d} is not a positive multiple of region width {r_d}")]
    NotDivisible { d: f64, r_d: f64 },
    #[error("invalid field parameter: {0}")]
    InvalidParameter(String),
    #[error("no region below {threshold} after {attempts} attempts")]
    NoSource { threshold: f64, attempts: u32 },
    #[error("every region had the same noise value in {attempts} attempts")]
    Flat { attempts: u32 },
    #[error("region {0} is outside the environment")]
    UnknownRegion(usize),
    #[error("malformed field grid: {0}")]
    Parse(String),
}

/// Fractal Perlin parameters. Frequency is in cycles per metre; `None`
/// means two cycles across the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldParams {
    pub octaves: usize,
    pub persistence: f64,
    pub lacunarity: f64,
    pub frequency: Option<f64>,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            octaves: 4,
            persistence: 0.5,
            lacunarity: 2.0,
            frequency: None,
        }
    }
}

/// A noisy reading of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub region: usize,
    pub psi: f64,
    pub position: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalField {
    side: f64,
    region_width: f64,
    per_side: usize,
    seed: u64,
    /// Extra sub-seeds consumed before a field with a source was found.
    retries: u32,
    truth: Vec<f64>,
    centers: Vec<Vector2<f64>>,
}

fn grid_size(side: f64, region_width: f64) -> Result<usize, EnvironmentError> {
    let err = EnvironmentError::NotDivisible { d: side, r_d: region_width };
    if !(side > 0.0 && region_width > 0.0 && side.is_finite() && region_width.is_finite()) {
        return Err(err);
    }
    let n = (side / region_width).round();
    if n < 1.0 || (n * region_width - side).abs() > 1e-9 * side {
        return Err(err);
    }
    Ok(n as usize)
}

fn centers(per_side: usize, region_width: f64) -> Vec<Vector2<f64>> {
    (0..per_side * per_side)
        .map(|m| {
            let (row, col) = (m / per_side, m % per_side);
            Vector2::new((col as f64 + 0.5) * region_width, (row as f64 + 0.5) * region_width)
        })
        .collect()
}

impl SignalField {
    /// Seeded fractal Perlin noise evaluated at region centres, rescaled
    /// so the grid minimum is 0 and the maximum is 1. A grid whose raw
    /// values are all equal cannot be rescaled, so the next sub-seed is
    /// tried. A single region is 0.
    pub fn generate(seed: u64, side: f64, region_width: f64, params: &FieldParams) -> Result<Self, EnvironmentError> {
        for attempt in 0..SOURCE_ATTEMPTS {
            if let Some(field) = Self::generate_attempt(seed, attempt, side, region_width, params)? {
                return Ok(field);
            }
        }
        Err(EnvironmentError::Flat {
            attempts: SOURCE_ATTEMPTS,
        })
    }

    /// Like [`generate`](Self::generate), but retries with successive
    /// sub-seeds until some region lies at or below `threshold`.
    pub fn generate_with_source(
        seed: u64,
        side: f64,
        region_width: f64,
        params: &FieldParams,
        threshold: f64,
    ) -> Result<Self, EnvironmentError> {
        for attempt in 0..SOURCE_ATTEMPTS {
            let field = Self::generate_attempt(seed, attempt, side, region_width, params)?;
            if let Some(field) = field.filter(|f| f.truth.iter().any(|v| *v <= threshold)) {
                return Ok(field);
            }
        }
        Err(EnvironmentError::NoSource {
            threshold,
            attempts: SOURCE_ATTEMPTS,
        })
    }

    fn generate_attempt(
        seed: u64,
        attempt: u32,
        side: f64,
        region_width: f64,
        params: &FieldParams,
    ) -> Result<Option<Self>, EnvironmentError> {
        let per_side = grid_size(side, region_width)?;
        if params.octaves == 0 || params.octaves > 32 {
            return Err(EnvironmentError::InvalidParameter(format!("octaves = {}", params.octaves)));
        }
        let frequency = params.frequency.unwrap_or(2.0 / side);
        for (name, v) in [
            ("persistence", params.persistence),
            ("lacunarity", params.lacunarity),
            ("frequency", frequency),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnvironmentError::InvalidParameter(format!("{name} = {v}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(attempt));
        let noise = Fbm::<Perlin>::new(rng.gen())
            .set_octaves(params.octaves)
            .set_persistence(params.persistence)
            .set_lacunarity(params.lacunarity)
            .set_frequency(frequency);
        let centers = centers(per_side, region_width);
        let raw: Vec<f64> = centers.iter().map(|c| noise.get([c.x, c.y])).collect();
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span <= 0.0 && raw.len() > 1 {
            return Ok(None);
        }
        let truth = raw
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Ok(Some(Self {
            side,
            region_width,
            per_side,
            seed,
            retries: attempt,
            truth,
            centers,
        }))
    }

    /// Field with explicit per-region values, row-major from the origin.
    pub fn from_values(side: f64, region_width: f64, seed: u64, truth: Vec<f64>) -> Result<Self, EnvironmentError> {
        let per_side = grid_size(side, region_width)?;
        if truth.len() != per_side * per_side {
            return Err(EnvironmentError::Parse(format!(
                "{} values for a {per_side}x{per_side} grid",
                truth.len()
            )));
        }
        if let Some(bad) = truth.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EnvironmentError::Parse(format!("value {bad} outside [0, 1]")));
        }
        Ok(Self {
            side,
            region_width,
            per_side,
            seed,
            retries: 0,
            truth,
            centers: centers(per_side, region_width),
        })
    }

    /// Constant field, handy for kinematic tests.
    pub fn uniform(side: f64, region_width: f64, value: f64) -> Result<Self, EnvironmentError> {
        let n = grid_size(side, region_width)?;
        Self::from_values(side, region_width, 0, vec![value; n * n])
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn region_width(&self) -> f64 {
        self.region_width
    }

    pub fn region_count(&self) -> usize {
        self.truth.len()
    }

    pub fn per_side(&self) -> usize {
        self.per_side
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn retries(&self) -> u32 {
        self.retries
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn centers(&self) -> &[Vector2<f64>] {
        &self.centers
    }

    pub fn center(&self, region: usize) -> Result<Vector2<f64>, EnvironmentError> {
        self.centers
            .get(region)
            .copied()
            .ok_or(EnvironmentError::UnknownRegion(region))
    }

    /// Regions whose centre lies within `radius` of `pos`, by index.
    pub fn regions_within(&self, pos: Vector2<f64>, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        self.centers
            .iter()
            .enumerate()
            .filter(|(_, c)| (*c - pos).norm_squared() <= r2)
            .map(|(m, _)| m)
            .collect()
    }

    /// One reading per region in range, with independent Gaussian noise on
    /// the signal. Readings are not clamped.
    pub fn sample<R: Rng>(&self, pos: Vector2<f64>, radius: f64, sigma_psi: f64, rng: &mut R) -> Vec<Sample> {
        let noise = Normal::new(0.0, sigma_psi.max(0.0)).expect("finite standard deviation");
        self.regions_within(pos, radius)
            .into_iter()
            .map(|m| Sample {
                region: m,
                psi: if sigma_psi > 0.0 {
                    self.truth[m] + noise.sample(rng)
                } else {
                    self.truth[m]
                },
                position: self.centers[m],
            })
            .collect()
    }

    /// Text grid: a `D=.. r_D=.. seed=..` header, then one line per row of
    /// regions (lowest y first) with six decimals.
    pub fn to_grid_text(&self) -> String {
        let mut out = format!("D={} r_D={} seed={}\n", self.side, self.region_width, self.seed);
        for row in self.truth.chunks(self.per_side) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }
}

impl FromStr for SignalField {
    type Err = EnvironmentError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| EnvironmentError::Parse("empty input".into()))?;
        let (mut side, mut width, mut seed) = (None, None, None);
        for token in header.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| EnvironmentError::Parse(format!("bad header token {token:?}")))?;
            let bad = |_| EnvironmentError::Parse(format!("bad value in {token:?}"));
            match key {
                "D" => side = Some(value.parse::<f64>().map_err(bad)?),
                "r_D" => width = Some(value.parse::<f64>().map_err(bad)?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| EnvironmentError::Parse(format!("bad value in {token:?}")))?),
                _ => return Err(EnvironmentError::Parse(format!("unknown header key {key:?}"))),
            }
        }
        let missing = |k: &str| EnvironmentError::Parse(format!("header lacks {k}"));
        let (side, width, seed) = (
            side.ok_or_else(|| missing("D"))?,
            width.ok_or_else(|| missing("r_D"))?,
            seed.ok_or_else(|| missing("seed"))?,
        );
        let per_side = grid_size(side, width)?;
        let mut values = Vec::with_capacity(per_side * per_side);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EnvironmentError::Parse(format!("row {i}: {e}")))?;
            if row.len() != per_side {
                return Err(EnvironmentError::Parse(format!("row {i} has {} values", row.len())));
            }
            values.extend(row);
        }
        Self::from_values(side, width, seed, values)
    }
}
