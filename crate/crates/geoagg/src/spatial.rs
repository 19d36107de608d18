//! Radius neighbor queries, radius estimation, lattice adjacency, and the
//! coordinate rescaling the model applies before computing distances.

use crate::table::GeoTable;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("query radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("need at least {need} points, have {have}")]
    TooFewPoints { need: usize, have: usize },
    #[error("lattice must be at least 2×2, got {rows}×{cols}")]
    LatticeTooSmall { rows: usize, cols: usize },
    #[error("weight matrix has a negative entry at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize },
}

// ── Neighborhoods ────────────────────────────────────────────────────

/// Context points within the query radius of one target, with distances.
/// Order is a seeded random permutation so downstream clipping keeps a
/// reproducible random subset.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    /// Indices into the queried point set.
    pub indices: Vec<usize>,
    /// Euclidean distances, same order as `indices`.
    pub distances: Vec<f64>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform-grid bucket index with cell size equal to the query radius, so a
/// radius query touches at most the 3×3 block around the target's cell.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    locations: Vec<[f64; 2]>,
}

impl GridIndex {
    /// Index every location of `table` with the given cell size.
    pub fn build(table: &GeoTable, cell: f64) -> Result<Self, SpatialError> {
        if cell <= 0.0 {
            return Err(SpatialError::NonPositiveRadius(cell));
        }
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        let mut locations = Vec::with_capacity(table.len());
        for r in 0..table.len() {
            let l = table.location(r);
            locations.push(l);
            let key = ((l[0] / cell).floor() as i64, (l[1] / cell).floor() as i64);
            buckets.entry(key).or_default().push(r);
        }
        Ok(GridIndex {
            cell,
            buckets,
            locations,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// All indexed points with distance ≤ r (closed ball; a boundary point
    /// is included). A point at distance exactly 0 — the target itself when
    /// it is part of the indexed set — is excluded. Result order is a
    /// random permutation drawn from `seed`.
    pub fn context_query(
        &self,
        target: [f64; 2],
        r: f64,
        seed: u64,
    ) -> Result<Neighborhood, SpatialError> {
        if r <= 0.0 {
            return Err(SpatialError::NonPositiveRadius(r));
        }
        let reach = (r / self.cell).ceil() as i64;
        let cx = (target[0] / self.cell).floor() as i64;
        let cy = (target[1] / self.cell).floor() as i64;
        let mut indices = Vec::new();
        for gx in cx - reach..=cx + reach {
            for gy in cy - reach..=cy + reach {
                if let Some(bucket) = self.buckets.get(&(gx, gy)) {
                    for &i in bucket {
                        let d = dist(self.locations[i], target);
                        if d <= r && d > 0.0 {
                            indices.push(i);
                        }
                    }
                }
            }
        }
        indices.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let distances = indices
            .iter()
            .map(|&i| dist(self.locations[i], target))
            .collect();
        Ok(Neighborhood { indices, distances })
    }
}

#[inline]
pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Smallest radius whose median neighborhood size, over a 256-point sample
/// of the training set, reaches `target_size`. Bisection to 1e-3 relative.
/// If even the bounding-box diagonal cannot reach `target_size`, returns the
/// diagonal and logs a warning.
pub fn estimate_radius(train: &GeoTable, target_size: usize) -> Result<f64, SpatialError> {
    if train.len() < target_size {
        return Err(SpatialError::TooFewPoints {
            need: target_size,
            have: train.len(),
        });
    }
    let (lo_box, hi_box) = train.bounding_box();
    let diagonal = dist(lo_box, hi_box);
    if diagonal == 0.0 {
        log::warn!("all points coincide; radius estimation falls back to 0 diagonal");
        return Ok(diagonal);
    }

    let mut sample: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7ad1);
    sample.shuffle(&mut rng);
    sample.truncate(256);
    let locs: Vec<[f64; 2]> = (0..train.len()).map(|r| train.location(r)).collect();

    let median_count = |r: f64| -> usize {
        let mut counts: Vec<usize> = sample
            .iter()
            .map(|&s| {
                locs.iter()
                    .filter(|&&l| {
                        let d = dist(l, locs[s]);
                        d <= r && d > 0.0
                    })
                    .count()
            })
            .collect();
        counts.sort_unstable();
        counts[counts.len() / 2]
    };

    if median_count(diagonal) < target_size {
        log::warn!(
            "median neighborhood cannot reach {target_size} even at the bounding-box diagonal \
             (duplicated points?); using the diagonal"
        );
        return Ok(diagonal);
    }
    let mut lo = 0.0f64;
    let mut hi = diagonal;
    while (hi - lo) / hi > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if median_count(mid) >= target_size {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

// ── Spatial weights ──────────────────────────────────────────────────

/// Sparse nonnegative N×N weights with a zero diagonal, stored per row.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    rows: Vec<Vec<(usize, f64)>>,
    row_normalized: bool,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// y = W·x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n());
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    /// Total weight Σᵢⱼ wᵢⱼ.
    pub fn total_weight(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, w)| w).sum::<f64>())
            .sum()
    }

    /// Divide each nonzero row by its sum; zero rows stay zero.
    pub fn row_normalize(&self) -> Result<WeightMatrix, SpatialError> {
        let mut rows = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                if w < 0.0 {
                    return Err(SpatialError::NegativeWeight { row: i, col: j });
                }
            }
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            if sum > 0.0 {
                rows.push(row.iter().map(|&(j, w)| (j, w / sum)).collect());
            } else {
                rows.push(row.clone());
            }
        }
        Ok(WeightMatrix {
            rows,
            row_normalized: true,
        })
    }

    /// Dense copy, for direct linear solves at desk scale.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j)] = w;
            }
        }
        m
    }
}

/// Binary contiguity on a rows×cols lattice: cells sharing an edge or a
/// corner are neighbors. Cell id is row-major: id = row·cols + col.
pub fn queen_adjacency(rows: usize, cols: usize) -> Result<WeightMatrix, SpatialError> {
    if rows < 2 || cols < 2 {
        return Err(SpatialError::LatticeTooSmall { rows, cols });
    }
    let mut out = vec![Vec::new(); rows * cols];
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let id = (r * cols as i64 + c) as usize;
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr >= 0 && nr < rows as i64 && nc >= 0 && nc < cols as i64 {
                        out[id].push(((nr * cols as i64 + nc) as usize, 1.0));
                    }
                }
            }
        }
    }
    Ok(WeightMatrix {
        rows: out,
        row_normalized: false,
    })
}

/// Moran's I of `values` under `weights`: the standard cross-product
/// statistic (N/ΣΣw)·Σwᵢⱼ(xᵢ−x̄)(xⱼ−x̄)/Σ(xᵢ−x̄)².
pub fn morans_i(values: &[f64], weights: &WeightMatrix) -> f64 {
    assert_eq!(values.len(), weights.n());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    let mut cross = 0.0;
    for (i, row) in (0..weights.n()).map(|i| (i, weights.row(i))) {
        for &(j, w) in row {
            cross += w * dev[i] * dev[j];
        }
    }
    (n / weights.total_weight()) * cross / ss
}

// ── Coordinate rescaling ─────────────────────────────────────────────

/// Affine map sending the training bounding box into [0,1]² with the
/// longest side exactly 1, so squared distances fed to the attention bias
/// are unit-free.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CoordScaler {
    pub min: [f64; 2],
    pub scale: f64,
}

impl CoordScaler {
    pub fn fit(table: &GeoTable) -> CoordScaler {
        let (lo, hi) = table.bounding_box();
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        CoordScaler {
            min: lo,
            scale: if side > 0.0 { 1.0 / side } else { 1.0 },
        }
    }

    pub fn apply(&self, l: [f64; 2]) -> [f64; 2] {
        [
            (l[0] - self.min[0]) * self.scale,
            (l[1] - self.min[1]) * self.scale,
        ]
    }

    /// Distances scale linearly under the affine map.
    pub fn scale_distance(&self, d: f64) -> f64 {
        d * self.scale
    }
}
