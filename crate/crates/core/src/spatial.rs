//! Uniform hash-grid index for radius and nearest-neighbour queries.

use std::collections::HashMap;

use crate::{dist, Error, Result};

/// Static spatial index over a fixed point set.
#[derive(Debug, Clone)]
pub struct GridIndex {
    dim: usize,
    cell: f64,
    points: Vec<Vec<f64>>,
    cells: HashMap<Vec<i64>, Vec<usize>>,
}

const MAX_SHELLS: i64 = 6;

impl GridIndex {
    pub fn new(points: Vec<Vec<f64>>, cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid cell size must be > 0, got {cell}")));
        }
        let dim = points.first().map_or(0, Vec::len);
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            Error::check_dim(dim, p.len())?;
            cells.entry(key(p, cell)).or_default().push(i);
        }
        Ok(Self { dim, cell, points, cells })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    fn visit_shell(&self, center: &[i64], reach: i64, mut f: impl FnMut(usize)) {
        if self.dim == 0 {
            return;
        }
        let mut offset = vec![-reach; self.dim];
        loop {
            let cell: Vec<i64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            if let Some(ids) = self.cells.get(&cell) {
                ids.iter().copied().for_each(&mut f);
            }
            let mut k = 0;
            loop {
                if k == self.dim {
                    return;
                }
                offset[k] += 1;
                if offset[k] <= reach {
                    break;
                }
                offset[k] = -reach;
                k += 1;
            }
        }
    }

    /// Indices of points within distance `r` of `z` (`strict` selects `<`).
    pub fn within(&self, z: &[f64], r: f64, strict: bool) -> Vec<usize> {
        let mut out = Vec::new();
        if self.is_empty() || z.len() != self.dim {
            return out;
        }
        let reach = (r / self.cell).ceil() as i64;
        let hit = |d: f64| if strict { d < r } else { d <= r };
        if reach > MAX_SHELLS || (2 * reach + 1).pow(self.dim as u32) as usize > self.points.len() {
            out.extend((0..self.points.len()).filter(|&i| hit(dist(z, &self.points[i]))));
            return out;
        }
        self.visit_shell(&key(z, self.cell), reach, |i| {
            if hit(dist(z, &self.points[i])) {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }

    /// Whether any point lies within `r` of `z`.
    pub fn any_within(&self, z: &[f64], r: f64, strict: bool) -> bool {
        match self.nearest(z) {
            Some((_, d)) => {
                if strict {
                    d < r
                } else {
                    d <= r
                }
            }
            None => false,
        }
    }

    /// Nearest point index and its distance.
    pub fn nearest(&self, z: &[f64]) -> Option<(usize, f64)> {
        if self.is_empty() || z.len() != self.dim {
            return None;
        }
        let center = key(z, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for reach in 1..=MAX_SHELLS {
            if (2 * reach + 1).pow(self.dim as u32) as usize > self.points.len() {
                break;
            }
            self.visit_shell(&center, reach, |i| {
                let d = dist(z, &self.points[i]);
                if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                    best = Some((i, d));
                }
            });
            // Every point closer than `reach * cell` lies in the visited cells.
            if let Some((_, d)) = best {
                if d <= reach as f64 * self.cell {
                    return best;
                }
            }
        }
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist(z, p)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

fn key(z: &[f64], cell: f64) -> Vec<i64> {
    z.iter().map(|x| (x / cell).floor() as i64).collect()
}
