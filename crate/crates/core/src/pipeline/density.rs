//! Gaussian kernel density estimates of pixel intensities on `[0, 1]`.
//!
//! Intensities are bounded, so the kernel mass that would fall outside the
//! interval is reflected back at 0 and 1. Without it a flat density sags to
//! about half its height at the edges.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{csv_string, format_g9};
use super::PipelineError;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_GRID_POINTS: usize = 101;
const MIN_BANDWIDTH: f64 = 1e-3;
/// Above this many samples the estimate runs on a linearly binned histogram.
const EXACT_LIMIT: usize = 16_384;
const BINS: usize = 4096;

/// Where intensities are collected across the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    Pixel { c: usize, h: usize, w: usize },
    /// Every pixel of one channel, pooled.
    Pooled { c: usize },
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Pixel { c, h, w } => write!(f, "c{c}_h{h}_w{w}"),
            Location::Pooled { c } => write!(f, "c{c}_pooled"),
        }
    }
}

/// Quarter-point pixels of channel 0 plus the pooled channel-0 estimate.
pub fn default_locations(height: usize, width: usize) -> Vec<Location> {
    let (h1, h3) = (height / 4, 3 * height / 4);
    let (w1, w3) = (width / 4, 3 * width / 4);
    vec![
        Location::Pixel { c: 0, h: h1, w: w1 },
        Location::Pixel { c: 0, h: h1, w: w3 },
        Location::Pixel { c: 0, h: h3, w: w1 },
        Location::Pixel { c: 0, h: h3, w: w3 },
        Location::Pooled { c: 0 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    pub grid: Vec<f64>,
    pub locations: Vec<Location>,
    /// One density per location, each evaluated on `grid`.
    pub input: Vec<Vec<f64>>,
    pub recon: Vec<Vec<f64>>,
}

impl DensityTable {
    /// Columns `intensity, input_<loc>, recon_<loc>, …`.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["intensity".to_string()];
        for loc in &self.locations {
            header.push(format!("input_{loc}"));
            header.push(format!("recon_{loc}"));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = (0..self.grid.len())
            .map(|i| {
                let mut row = vec![format_g9(self.grid[i])];
                for (a, b) in self.input.iter().zip(&self.recon) {
                    row.push(format_g9(a[i]));
                    row.push(format_g9(b[i]));
                }
                row
            })
            .collect();
        csv_string(&header, &rows)
    }

    /// Trapezoidal mass of every column, inputs first.
    pub fn masses(&self) -> Vec<f64> {
        self.input
            .iter()
            .chain(&self.recon)
            .map(|d| trapezoid(&self.grid, d))
            .collect()
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(-1/5)`, at least 1e-3.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let sigma = var.sqrt();
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Density on `grid`, renormalized so its trapezoidal mass is exactly 1.
pub fn kde(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Density("no samples".into()));
    }
    if grid.len() < 2 {
        return Err(PipelineError::Density("grid needs at least two points".into()));
    }
    let h = silverman_bandwidth(samples);
    let points: Vec<(f64, f64)> = if samples.len() > EXACT_LIMIT {
        linear_bins(samples)
    } else {
        samples.iter().map(|&s| (s, 1.0)).collect()
    };
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let k = |u: f64| (-0.5 * u * u).exp();
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|&x| {
            points
                .iter()
                .map(|&(s, w)| w * (k((x - s) / h) + k((x + s) / h) + k((x - (2.0 - s)) / h)))
                .sum::<f64>()
                * norm
        })
        .collect();
    let mass = trapezoid(grid, &dens);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(PipelineError::Density(format!(
            "estimate has no mass on the grid (bandwidth {h})"
        )));
    }
    dens.iter_mut().for_each(|d| *d /= mass);
    Ok(dens)
}

/// Weighted bin centres over [0, 1]; each sample splits its unit weight
/// between the two nearest centres.
fn linear_bins(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut w = vec![0.0; BINS];
    let step = 1.0 / (BINS - 1) as f64;
    for &s in samples {
        let pos = s.clamp(0.0, 1.0) / step;
        let lo = (pos.floor() as usize).min(BINS - 2);
        let frac = pos - lo as f64;
        w[lo] += 1.0 - frac;
        w[lo + 1] += frac;
    }
    w.into_iter()
        .enumerate()
        .filter(|&(_, wt)| wt > 0.0)
        .map(|(i, wt)| (i as f64 * step, wt))
        .collect()
}

fn gather<T: Element>(images: &Tensor<T>, loc: Location) -> Vec<f64> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = images.data();
    match loc {
        Location::Pixel { c: ci, h: hi, w: wi } => (0..n).map(|i| d[((i * c + ci) * h + hi) * w + wi].as_f64()).collect(),
        Location::Pooled { c: ci } => (0..n)
            .flat_map(|i| {
                let start = (i * c + ci) * h * w;
                d[start..start + h * w].iter().map(|v| v.as_f64())
            })
            .collect(),
    }
}

pub fn pixel_density_estimate<T: Element>(
    inputs: &Tensor<T>,
    recons: &Tensor<T>,
    locations: &[Location],
    grid_points: usize,
) -> Result<DensityTable, PipelineError> {
    if inputs.shape() != recons.shape() {
        return Err(PipelineError::Density(format!(
            "inputs {:?} and reconstructions {:?} differ in shape",
            inputs.shape(),
            recons.shape()
        )));
    }
    if inputs.rank() != 4 {
        return Err(PipelineError::Density(format!("expected [N, C, H, W], got {:?}", inputs.shape())));
    }
    let s = inputs.shape();
    for &loc in locations {
        let ok = match loc {
            Location::Pixel { c, h, w } => c < s[1] && h < s[2] && w < s[3],
            Location::Pooled { c } => c < s[1],
        };
        if !ok {
            return Err(PipelineError::Density(format!("location {loc} outside image {:?}", &s[1..])));
        }
    }
    let grid = unit_grid(grid_points);
    let mut input = Vec::with_capacity(locations.len());
    let mut recon = Vec::with_capacity(locations.len());
    for &loc in locations {
        input.push(kde(&gather(inputs, loc), &grid)?);
        recon.push(kde(&gather(recons, loc), &grid)?);
    }
    Ok(DensityTable {
        grid,
        locations: locations.to_vec(),
        input,
        recon,
    })
}
