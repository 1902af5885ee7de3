//! Discrete distributions on a regular 2D grid: the reweighting oracle and
//! the total-variation score of a sample cloud against it.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub bins: [usize; 2],
    /// Quadrature points per axis inside each cell.
    pub quadrature: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo: [lo, lo],
            hi: [hi, hi],
            bins: [bins, bins],
            quadrature: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins.contains(&0) || self.quadrature == 0 {
            return Err(Error::invalid("grid needs >= 1 bin and quadrature point per axis"));
        }
        if !(self.lo[0] < self.hi[0] && self.lo[1] < self.hi[1]) {
            return Err(Error::invalid("grid lo must be < hi"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.bins[0] * self.bins[1]
    }

    fn width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.bins[axis] as f64
    }

    /// Cell index `ix * bins[1] + iy`, or `None` outside the grid.
    pub fn cell_of(&self, p: &[f64]) -> Option<usize> {
        let mut idx = [0usize; 2];
        for axis in 0..2 {
            let x = p[axis];
            if !(x >= self.lo[axis] && x <= self.hi[axis]) {
                return None;
            }
            let k = ((x - self.lo[axis]) / self.width(axis)) as usize;
            idx[axis] = k.min(self.bins[axis] - 1);
        }
        Some(idx[0] * self.bins[1] + idx[1])
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (ix, iy) = (cell / self.bins[1], cell % self.bins[1]);
        [
            self.lo[0] + (ix as f64 + 0.5) * self.width(0),
            self.lo[1] + (iy as f64 + 0.5) * self.width(1),
        ]
    }

    /// Midpoint-rule integral of `f` over one cell.
    fn integrate_cell(&self, cell: usize, f: &dyn Fn([f64; 2]) -> f64) -> f64 {
        let (ix, iy) = (cell / self.bins[1], cell % self.bins[1]);
        let q = self.quadrature;
        let (wx, wy) = (self.width(0), self.width(1));
        let mut acc = 0.0;
        for a in 0..q {
            for b in 0..q {
                let x = self.lo[0] + (ix as f64 + (a as f64 + 0.5) / q as f64) * wx;
                let y = self.lo[1] + (iy as f64 + (b as f64 + 0.5) / q as f64) * wy;
                acc += f([x, y]);
            }
        }
        acc * wx * wy / (q * q) as f64
    }
}

/// Probability masses over the cells of `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDistribution {
    pub grid: GridSpec,
    pub masses: Vec<f64>,
}

impl GridDistribution {
    /// Cells sorted by decreasing mass.
    pub fn ranked_cells(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.masses.len()).collect();
        idx.sort_by(|&a, &b| self.masses[b].total_cmp(&self.masses[a]));
        idx
    }

    /// Mass of the cells whose centres lie within `radius` of `center`.
    pub fn mass_near(&self, center: [f64; 2], radius: f64) -> f64 {
        (0..self.masses.len())
            .filter(|&c| {
                let p = self.grid.cell_center(c);
                (p[0] - center[0]).hypot(p[1] - center[1]) <= radius
            })
            .map(|c| self.masses[c])
            .sum()
    }
}

/// Cell masses proportional to `base_density * weight`, normalised by their
/// grid sum (the discrete normaliser).
pub fn reweight_oracle(
    base_density: &dyn Fn([f64; 2]) -> f64,
    weight: &dyn Fn([f64; 2]) -> f64,
    grid: &GridSpec,
) -> Result<GridDistribution> {
    grid.validate()?;
    let raw: Vec<f64> = (0..grid.cells())
        .map(|c| grid.integrate_cell(c, &|p| base_density(p) * weight(p)))
        .collect();
    if let Some(bad) = raw.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
        return Err(Error::invalid(format!("density times weight must be finite and >= 0, got {bad}")));
    }
    let z: f64 = raw.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Degenerate("reweighted mass is zero on the grid".into()));
    }
    Ok(GridDistribution {
        grid: *grid,
        masses: raw.into_iter().map(|m| m / z).collect(),
    })
}

/// Normalised histogram of `points` (one 2D point per row) and the fraction
/// of points that fell outside the grid.
pub fn histogram(points: ArrayView2<'_, f64>, grid: &GridSpec) -> Result<(Vec<f64>, f64)> {
    grid.validate()?;
    if points.ncols() != 2 {
        return Err(Error::invalid("histogram needs 2D points"));
    }
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("histogram of an empty set"));
    }
    let mut counts = vec![0usize; grid.cells()];
    let mut outside = 0usize;
    for row in points.rows() {
        match grid.cell_of(&[row[0], row[1]]) {
            Some(c) => counts[c] += 1,
            None => outside += 1,
        }
    }
    Ok((
        counts.into_iter().map(|k| k as f64 / n as f64).collect(),
        outside as f64 / n as f64,
    ))
}

/// Minimum sample count accepted by [`distribution_match_score`].
pub const MIN_SCORE_SAMPLES: usize = 1000;

/// Total-variation distance between the histogram of `points` and `oracle`.
/// Points outside the grid count as mass the oracle does not have.
pub fn distribution_match_score(points: ArrayView2<'_, f64>, oracle: &GridDistribution) -> Result<f64> {
    if points.nrows() < MIN_SCORE_SAMPLES {
        return Err(Error::Precondition(format!(
            "need at least {MIN_SCORE_SAMPLES} samples, got {}",
            points.nrows()
        )));
    }
    let (hist, outside) = histogram(points, &oracle.grid)?;
    Ok(0.5 * (hist.iter().zip(&oracle.masses).map(|(h, p)| (h - p).abs()).sum::<f64>() + outside))
}

/// Total variation between two distributions on the same grid.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("distributions have different supports"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
