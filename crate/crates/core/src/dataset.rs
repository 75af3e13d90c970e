//! Sampling of blend weights and volumes, and the resulting
//! `(c_hat, v) -> C^H` tables.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blend::{blend_to_volume, BlendParams};
use crate::error::{Error, Result};
use crate::homogenize::{homogenize_binary, response_names, MaterialModel};
use crate::surrogate::{Table, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub c_hat: Vec<f64>,
    pub v: f64,
    /// Independent stiffness components, see [`response_names`].
    pub c: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub n_responses: usize,
    pub records: Vec<SampleRecord>,
}

/// Number of stiffness components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Responses {
    /// 4 when every sample is orthotropic, else 6.
    Auto,
    Four,
    Six,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub per_slice: usize,
    pub n_volumes: usize,
    pub v_max: f64,
    pub seed: u64,
    pub responses: Responses,
    /// Relative size of shear-normal coupling still treated as orthotropic.
    pub orthotropic_rtol: f64,
    pub split: [f64; 3],
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            per_slice: 20,
            n_volumes: 15,
            v_max: 0.95,
            seed: 0,
            responses: Responses::Auto,
            orthotropic_rtol: 1e-3,
            split: [0.70, 0.15, 0.15],
        }
    }
}

/// Generation summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub weight_vectors: usize,
    pub records: usize,
    pub skipped_empty: usize,
    /// Weight vectors whose smallest attainable volume already exceeds `v_max`.
    pub skipped_infeasible: usize,
    pub n_responses: usize,
    pub max_coupling: f64,
}

/// Latin hypercube samples within every nonempty subset ("slice") of the
/// `d` bases, normalized to sum to one. Slices are ordered by bitmask.
pub fn sample_weight_slices(d: usize, per_slice: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if d == 0 || d > 20 {
        return Err(Error::Invalid(format!("class count {d} outside 1..=20")));
    }
    if per_slice == 0 {
        return Err(Error::Invalid("per_slice must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(((1usize << d) - 1) * per_slice);
    for mask in 1usize..(1 << d) {
        let active: Vec<usize> = (0..d).filter(|k| mask >> k & 1 == 1).collect();
        let columns: Vec<Vec<f64>> = active
            .iter()
            .map(|_| {
                let mut strata: Vec<usize> = (0..per_slice).collect();
                strata.shuffle(&mut rng);
                strata
                    .into_iter()
                    .map(|s| (s as f64 + rng.gen_range(1e-9..1.0)) / per_slice as f64)
                    .collect()
            })
            .collect();
        for k in 0..per_slice {
            let mut w = vec![0.0; d];
            for (col, &a) in active.iter().enumerate() {
                w[a] = columns[col][k];
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            out.push(w);
        }
    }
    Ok(out)
}

/// Volume targets for one weight vector: `tau` in `[-1, 1]` equally spaced,
/// mapped linearly onto `[v_min, v_max]`.
pub fn volume_levels(v_min: f64, v_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (v_min + v_max)];
    }
    (0..n)
        .map(|k| {
            let tau = -1.0 + 2.0 * k as f64 / (n - 1) as f64;
            v_min + 0.5 * (tau + 1.0) * (v_max - v_min)
        })
        .collect()
}

/// Blends and homogenizes every (weights, volume) sample and assigns the
/// 70/15/15 split by a seeded shuffle.
pub fn generate_dataset(
    basis: &BasisSet,
    weights: &[Vec<f64>],
    params: &BlendParams,
    mat: &MaterialModel,
    opts: &DatasetOptions,
) -> Result<(Dataset, GenerationReport)> {
    let d = basis.len();
    if let Some(w) = weights.iter().find(|w| w.len() != d) {
        return Err(Error::Invalid(format!(
            "weight vector of length {} for {d} bases",
            w.len()
        )));
    }
    if opts.n_volumes == 0 || !(opts.v_max > 0.0 && opts.v_max <= 1.0) {
        return Err(Error::Invalid(
            "n_volumes must be positive and v_max in (0, 1]".into(),
        ));
    }
    let tol = 0.5 / basis.cells() as f64;

    struct Raw {
        c_hat: Vec<f64>,
        v: f64,
        c6: [f64; 6],
    }
    let per_weight: Vec<Result<(Vec<Raw>, usize, bool)>> = weights
        .par_iter()
        .map(|w| {
            let lowest = blend_to_volume(w, 0.0, basis, params, tol)?;
            if lowest.min_volume >= opts.v_max {
                return Ok((Vec::new(), 0, true));
            }
            let mut rows = Vec::with_capacity(opts.n_volumes);
            let mut empty = 0;
            for v in volume_levels(lowest.min_volume, opts.v_max, opts.n_volumes) {
                let b = blend_to_volume(w, v, basis, params, tol)?;
                let h = homogenize_binary(&b.phi, mat)?;
                if h.all_void || b.volume <= 0.0 {
                    empty += 1;
                    continue;
                }
                rows.push(Raw {
                    c_hat: w.clone(),
                    v: b.volume,
                    c6: h.stiffness.components6(),
                });
            }
            Ok((rows, empty, false))
        })
        .collect();

    let mut report = GenerationReport {
        weight_vectors: weights.len(),
        ..Default::default()
    };
    let mut raw = Vec::new();
    for r in per_weight {
        let (rows, empty, infeasible) = r?;
        report.skipped_empty += empty;
        report.skipped_infeasible += usize::from(infeasible);
        raw.extend(rows);
    }

    let coupling = |c: &[f64; 6]| {
        let m = c.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if m > 0.0 {
            c[2].abs().max(c[4].abs()) / m
        } else {
            0.0
        }
    };
    report.max_coupling = raw.iter().map(|r| coupling(&r.c6)).fold(0.0, f64::max);
    let n_resp = match opts.responses {
        Responses::Four => 4,
        Responses::Six => 6,
        Responses::Auto if report.max_coupling <= opts.orthotropic_rtol => 4,
        Responses::Auto => 6,
    };
    report.n_responses = n_resp;

    let splits = assign_splits(raw.len(), opts.split, opts.seed)?;
    let records = raw
        .into_iter()
        .zip(splits)
        .map(|(r, split)| {
            let c = if n_resp == 4 {
                vec![r.c6[0], r.c6[1], r.c6[3], r.c6[5]]
            } else {
                r.c6.to_vec()
            };
            SampleRecord {
                c_hat: r.c_hat,
                v: r.v,
                c,
                split,
            }
        })
        .collect::<Vec<_>>();
    report.records = records.len();
    Ok((
        Dataset {
            n_classes: d,
            n_responses: n_resp,
            records,
        },
        report,
    ))
}

/// Seeded shuffle, then the first `round(f0 n)` rows train and the next
/// `round(f1 n)` validate.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5171));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

impl Dataset {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (1..=self.n_classes).map(|k| format!("c{k}")).collect();
        h.push("v".into());
        h.extend(
            response_names(self.n_responses)
                .iter()
                .map(|s| s.to_string()),
        );
        h.push("split".into());
        h
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn table(&self, split: Split) -> Table {
        let mut t = Table::default();
        for r in self.records.iter().filter(|r| r.split == split) {
            let mut x = r.c_hat.clone();
            x.push(r.v);
            t.push(x, r.c.clone());
        }
        t
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            train: self.table(Split::Train),
            val: self.table(Split::Val),
            test: self.table(Split::Test),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(self.header())
            .map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let mut row: Vec<String> = r.c_hat.iter().map(|x| x.to_string()).collect();
            row.push(r.v.to_string());
            row.extend(r.c.iter().map(|x| x.to_string()));
            row.push(r.split.as_str().into());
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let n_classes = header.iter().take_while(|h| h.starts_with('c')).count();
        let n_responses = header.len().saturating_sub(n_classes + 2);
        let ds = Dataset {
            n_classes,
            n_responses,
            records: Vec::new(),
        };
        if n_classes == 0 || !(n_responses == 4 || n_responses == 6) || ds.header() != header {
            return Err(parse_err(1, format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for (k, row) in rd.records().enumerate() {
            let line = k + 2;
            let row = row.map_err(|e| parse_err(line, e.to_string()))?;
            if row.len() != header.len() {
                return Err(parse_err(
                    line,
                    format!("expected {} fields, found {}", header.len(), row.len()),
                ));
            }
            let num = |i: usize| -> Result<f64> {
                let v: f64 = row[i]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad number {:?}", &row[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("non-finite value {:?}", &row[i])))
                }
            };
            let c_hat = (0..n_classes).map(num).collect::<Result<Vec<_>>>()?;
            let v = num(n_classes)?;
            let c = (n_classes + 1..n_classes + 1 + n_responses)
                .map(num)
                .collect::<Result<Vec<_>>>()?;
            let split = Split::parse(row[header.len() - 1].trim()).ok_or_else(|| {
                parse_err(line, format!("unknown split {:?}", &row[header.len() - 1]))
            })?;
            records.push(SampleRecord { c_hat, v, c, split });
        }
        Ok(Dataset { records, ..ds })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}
