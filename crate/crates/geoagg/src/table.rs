//! Tabular point sets: ingestion, deterministic splitting, target statistics.
//!
//! A table is immutable after load; the row index is the stable identifier
//! every other module uses to refer to a point.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("row {row}, column '{col}': cannot parse '{value}' as a number")]
    BadNumber { row: usize, col: String, value: String },
    #[error("file has no data rows")]
    Empty,
    #[error("non-finite value at row {row}, column '{col}'")]
    NonFinite { row: usize, col: String },
    #[error("table has no target column")]
    NoTarget,
    #[error("target column is constant; standard deviation is zero")]
    ConstantTarget,
    #[error("need at least {need} rows, have {have}")]
    TooFewRows { need: usize, have: usize },
    #[error("split fractions {0:?} must be positive and sum to 1")]
    BadFractions([f64; 3]),
}

/// N×(m+3) point set: m covariates, a 2-D location, an optional target.
#[derive(Debug, Clone)]
pub struct GeoTable {
    n_points: usize,
    m: usize,
    covariates: Vec<f64>, // row-major N×m
    locations: Vec<f64>,  // row-major N×2
    target: Option<Vec<f64>>,
}

/// Which CSV columns play which role.
#[derive(Debug, Clone)]
pub struct TableSchema {
    pub x_cols: Vec<String>,
    pub loc_cols: [String; 2],
    pub y_col: Option<String>,
}

impl TableSchema {
    /// The layout `cli generate` writes: x1..xm, l1, l2, y.
    pub fn generated(m: usize) -> Self {
        TableSchema {
            x_cols: (1..=m).map(|i| format!("x{i}")).collect(),
            loc_cols: ["l1".into(), "l2".into()],
            y_col: Some("y".into()),
        }
    }
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self, TableError> {
        let f = [train, val, test];
        if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TableError::BadFractions(f));
        }
        Ok(SplitSpec { fractions: f, seed })
    }

    /// The default 7:1:2 split.
    pub fn default_ratio(seed: u64) -> Self {
        SplitSpec {
            fractions: [0.7, 0.1, 0.2],
            seed,
        }
    }
}

impl GeoTable {
    pub fn new(
        m: usize,
        covariates: Vec<f64>,
        locations: Vec<f64>,
        target: Option<Vec<f64>>,
    ) -> Self {
        let n = locations.len() / 2;
        assert_eq!(locations.len(), 2 * n);
        assert_eq!(covariates.len(), n * m, "covariates must be N×m");
        if let Some(y) = &target {
            assert_eq!(y.len(), n, "target must have length N");
        }
        GeoTable {
            n_points: n,
            m,
            covariates,
            locations,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn n_covariates(&self) -> usize {
        self.m
    }

    pub fn covariates(&self, row: usize) -> &[f64] {
        &self.covariates[row * self.m..(row + 1) * self.m]
    }

    pub fn location(&self, row: usize) -> [f64; 2] {
        [self.locations[row * 2], self.locations[row * 2 + 1]]
    }

    pub fn target(&self, row: usize) -> Option<f64> {
        self.target.as_ref().map(|y| y[row])
    }

    pub fn targets(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    /// New table holding the given rows, in the given order.
    pub fn gather(&self, rows: &[usize]) -> GeoTable {
        let mut covariates = Vec::with_capacity(rows.len() * self.m);
        let mut locations = Vec::with_capacity(rows.len() * 2);
        let mut target = self.target.as_ref().map(|_| Vec::with_capacity(rows.len()));
        for &r in rows {
            covariates.extend_from_slice(self.covariates(r));
            locations.extend_from_slice(&self.locations[r * 2..r * 2 + 2]);
            if let (Some(t), Some(y)) = (target.as_mut(), self.target.as_ref()) {
                t.push(y[r]);
            }
        }
        GeoTable::new(self.m, covariates, locations, target)
    }

    /// Axis-aligned bounding box of all locations: ([min1, min2], [max1, max2]).
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in 0..self.n_points {
            let l = self.location(r);
            for k in 0..2 {
                lo[k] = lo[k].min(l[k]);
                hi[k] = hi[k].max(l[k]);
            }
        }
        (lo, hi)
    }

    // ── CSV ──────────────────────────────────────────────────────────

    /// Load from a headered CSV, taking columns per `schema`. Rows keep
    /// file order.
    pub fn load_csv(path: &Path, schema: &TableSchema) -> Result<GeoTable, TableError> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col_index = |name: &str| -> Result<usize, TableError> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| TableError::MissingColumn(name.to_string()))
        };
        let x_idx: Vec<usize> = schema
            .x_cols
            .iter()
            .map(|c| col_index(c))
            .collect::<Result<_, _>>()?;
        let l_idx = [col_index(&schema.loc_cols[0])?, col_index(&schema.loc_cols[1])?];
        let y_idx = schema.y_col.as_deref().map(col_index).transpose()?;

        let m = x_idx.len();
        let mut covariates = Vec::new();
        let mut locations = Vec::new();
        let mut target = y_idx.map(|_| Vec::new());
        let parse = |row: usize, col: &str, raw: &str| -> Result<f64, TableError> {
            let v: f64 = raw.trim().parse().map_err(|_| TableError::BadNumber {
                row,
                col: col.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(TableError::NonFinite {
                    row,
                    col: col.to_string(),
                });
            }
            Ok(v)
        };
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            for (&i, name) in x_idx.iter().zip(&schema.x_cols) {
                covariates.push(parse(row, name, &record[i])?);
            }
            for k in 0..2 {
                locations.push(parse(row, &schema.loc_cols[k], &record[l_idx[k]])?);
            }
            if let (Some(t), Some(i)) = (target.as_mut(), y_idx) {
                t.push(parse(row, schema.y_col.as_deref().unwrap(), &record[i])?);
            }
        }
        if locations.is_empty() {
            return Err(TableError::Empty);
        }
        Ok(GeoTable::new(m, covariates, locations, target))
    }

    /// Write as CSV with columns x1..xm, l1, l2 and, when present, y.
    /// Float formatting round-trips exactly through `load_csv`.
    pub fn save_csv(&self, path: &Path) -> Result<(), TableError> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.m).map(|i| format!("x{i}")).collect();
        header.push("l1".into());
        header.push("l2".into());
        if self.target.is_some() {
            header.push("y".into());
        }
        writer.write_record(&header)?;
        for r in 0..self.n_points {
            let mut rec: Vec<String> = self.covariates(r).iter().map(|v| v.to_string()).collect();
            let l = self.location(r);
            rec.push(l[0].to_string());
            rec.push(l[1].to_string());
            if let Some(y) = self.target(r) {
                rec.push(y.to_string());
            }
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }

    // ── Splitting ────────────────────────────────────────────────────

    /// Disjoint row partition by seeded shuffle. With the default 7:1:2
    /// fractions the sizes are ⌊0.7N⌋ / ⌊0.1N⌋ / remainder.
    pub fn split(&self, spec: &SplitSpec) -> Result<(GeoTable, GeoTable, GeoTable), TableError> {
        let (itr, iva, ite) = self.split_indices(spec)?;
        Ok((self.gather(&itr), self.gather(&iva), self.gather(&ite)))
    }

    /// Index form of [`split`](Self::split); indices are sorted within each part.
    pub fn split_indices(
        &self,
        spec: &SplitSpec,
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TableError> {
        if self.n_points < 10 {
            return Err(TableError::TooFewRows {
                need: 10,
                have: self.n_points,
            });
        }
        let f = spec.fractions;
        if f.iter().any(|&x| x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TableError::BadFractions(f));
        }
        let mut order: Vec<usize> = (0..self.n_points).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        order.shuffle(&mut rng);
        let n_train = (f[0] * self.n_points as f64).floor() as usize;
        let n_val = (f[1] * self.n_points as f64).floor() as usize;
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
        let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok((train, val, test))
    }

    // ── Statistics ───────────────────────────────────────────────────

    /// Mean and unbiased standard deviation of the target column.
    pub fn target_stats(&self) -> Result<(f64, f64), TableError> {
        let y = self.targets().ok_or(TableError::NoTarget)?;
        if y.len() < 2 {
            return Err(TableError::TooFewRows {
                need: 2,
                have: y.len(),
            });
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let ss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let std = (ss / (n - 1.0)).sqrt();
        if std == 0.0 {
            return Err(TableError::ConstantTarget);
        }
        Ok((mean, std))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_three_rows_two_covariates() {
        let f = write_csv("x1,x2,l1,l2,y\n1,2,0,0,10\n3,4,1,0,20\n5,6,0,1,30\n");
        let t = GeoTable::load_csv(f.path(), &TableSchema::generated(2)).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.n_covariates(), 2);
        assert_eq!(t.covariates(1), &[3.0, 4.0]);
        assert_eq!(t.location(2), [0.0, 1.0]);
        assert_eq!(t.target(0), Some(10.0));
    }

    #[test]
    fn schema_without_target_loads_target_absent() {
        let f = write_csv("x1,x2,l1,l2\n1,2,0,0\n3,4,1,0\n");
        let schema = TableSchema {
            x_cols: vec!["x1".into(), "x2".into()],
            loc_cols: ["l1".into(), "l2".into()],
            y_col: None,
        };
        let t = GeoTable::load_csv(f.path(), &schema).unwrap();
        assert!(!t.has_target());
    }

    #[test]
    fn missing_column_and_bad_number_are_named() {
        let f = write_csv("x1,l1,l2\n1,0,0\n");
        let err = GeoTable::load_csv(f.path(), &TableSchema::generated(2)).unwrap_err();
        assert!(err.to_string().contains("x2"), "{err}");

        let f = write_csv("x1,x2,l1,l2,y\n1,abc,0,0,10\n");
        let err = GeoTable::load_csv(f.path(), &TableSchema::generated(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x2") && msg.contains("abc") && msg.contains("row 0"), "{msg}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_csv("x1,x2,l1,l2,y\n");
        assert!(matches!(
            GeoTable::load_csv(f.path(), &TableSchema::generated(2)),
            Err(TableError::Empty)
        ));
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let covariates: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let locations: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-90.0..90.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0) * 1e-7).collect();
        let t = GeoTable::new(2, covariates, locations, Some(target));
        let f = tempfile::NamedTempFile::new().unwrap();
        t.save_csv(f.path()).unwrap();
        let back = GeoTable::load_csv(f.path(), &TableSchema::generated(2)).unwrap();
        assert_eq!(back.len(), t.len());
        for r in 0..n {
            for (a, b) in back.covariates(r).iter().zip(t.covariates(r)) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert_eq!(back.location(r), t.location(r));
            assert_eq!(back.target(r), t.target(r));
        }
    }

    fn dummy_table(n: usize) -> GeoTable {
        let covariates: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
        let locations: Vec<f64> = (0..n * 2).map(|i| (i % 50) as f64).collect();
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        GeoTable::new(2, covariates, locations, Some(target))
    }

    #[test]
    fn split_sizes_follow_7_1_2() {
        let t = dummy_table(2500);
        let (tr, va, te) = t.split(&SplitSpec::default_ratio(1)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1750, 250, 500));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let t = dummy_table(103);
        let spec = SplitSpec::default_ratio(42);
        let (a1, b1, c1) = t.split_indices(&spec).unwrap();
        let (a2, b2, c2) = t.split_indices(&spec).unwrap();
        assert_eq!((&a1, &b1, &c1), (&a2, &b2, &c2));
        let mut all: Vec<usize> = a1.iter().chain(&b1).chain(&c1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        // different seed shuffles differently
        let (a3, _, _) = t
            .split_indices(&SplitSpec::default_ratio(43))
            .unwrap();
        assert_ne!(a1, a3);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        assert!(SplitSpec::new(0.5, 0.5, 0.0, 1).is_err());
        assert!(SplitSpec::new(0.5, 0.4, 0.2, 1).is_err());
    }

    #[test]
    fn target_stats_analytic_and_errors() {
        let t = GeoTable::new(0, vec![], vec![0.0; 6], Some(vec![1.0, 2.0, 3.0]));
        let (mean, std) = t.target_stats().unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(std, 1.0);

        let c = GeoTable::new(0, vec![], vec![0.0; 6], Some(vec![7.0; 3]));
        assert!(matches!(c.target_stats(), Err(TableError::ConstantTarget)));
    }

    #[test]
    fn target_stats_match_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let y: Vec<f64> = (0..200).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t = GeoTable::new(0, vec![], vec![0.0; 400], Some(y.clone()));
        let (mean, std) = t.target_stats().unwrap();
        // Oracle: explicit two-pass loops.
        let mut s = 0.0;
        for &v in &y {
            s += v;
        }
        let om = s / y.len() as f64;
        let mut ss = 0.0;
        for &v in &y {
            ss += (v - om) * (v - om);
        }
        let os = (ss / (y.len() - 1) as f64).sqrt();
        assert!((mean - om).abs() < 1e-12);
        assert!((std - os).abs() < 1e-12);
    }
}
