//! Registration quality metrics and the before/after report.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{ensure_dims, Error, Result};
use crate::field::{warp_bilinear, DisplacementField};
use crate::imagecore::GrayImage;
use crate::losses::{entropy_hard, hmi_hard};
use crate::pipeline::PairRecord;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Param(format!(
                "mask data has {} entries for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarize {
    Otsu,
    Fixed(f64),
}

pub const OTSU_CANDIDATES: usize = 256;

/// Otsu threshold over the candidates `(k + 0.5) / 256`. Ties between
/// candidates resolve to the middle of the tied span. `None` when no
/// candidate separates the pixels into two nonempty classes.
pub fn otsu_threshold(img: &GrayImage) -> Option<f64> {
    let mut sorted = img.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total = prefix[n];
    let mut best = 0.0;
    let mut tied: Vec<f64> = Vec::new();
    for k in 0..OTSU_CANDIDATES {
        let t = (k as f64 + 0.5) / OTSU_CANDIDATES as f64;
        let n0 = sorted.partition_point(|&v| v <= t);
        if n0 == 0 || n0 == n {
            continue;
        }
        let (w0, w1) = (n0 as f64, (n - n0) as f64);
        let mu0 = prefix[n0] / w0;
        let mu1 = (total - prefix[n0]) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best * (1.0 + 1e-12) {
            best = between;
            tied.clear();
            tied.push(t);
        } else if between >= best * (1.0 - 1e-12) && best > 0.0 {
            tied.push(t);
        }
    }
    if best <= 0.0 {
        return None;
    }
    Some(0.5 * (tied[0] + tied[tied.len() - 1]))
}

/// Foreground is the above-threshold class.
pub fn binarize(img: &GrayImage, method: Binarize) -> BinaryMask {
    let t = match method {
        Binarize::Fixed(t) => Some(t),
        Binarize::Otsu => otsu_threshold(img),
    };
    let data = match t {
        Some(t) => img.data().iter().map(|&v| v > t).collect(),
        None => vec![false; img.len()],
    };
    BinaryMask {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_dims("dice", a.dims(), b.dims())?;
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Hard-histogram MI and its normalised form `2·MI / (H(a) + H(b))`.
pub fn mi_metric(a: &GrayImage, b: &GrayImage, bins: usize) -> Result<(f64, f64)> {
    let raw = hmi_hard(a, b, bins)?;
    let (ha, hb) = (entropy_hard(a, bins), entropy_hard(b, bins));
    if ha <= 0.0 || hb <= 0.0 {
        return Ok((raw, 0.0));
    }
    Ok((raw, (2.0 * raw / (ha + hb)).clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MwMethod {
    /// Exact when `min(n, m) <= 8` and there are no ties, normal otherwise.
    #[default]
    Auto,
    Exact,
    Normal,
}

pub const EXACT_LIMIT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    mann_whitney_u_with(x, y, MwMethod::Auto)
}

pub fn mann_whitney_u_with(x: &[f64], y: &[f64], method: MwMethod) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Param("Mann-Whitney needs two nonempty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Param("Mann-Whitney samples must be finite".into()));
    }
    let (n, m) = (x.len(), y.len());
    let mut all: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // midranks, plus Σ(t³ - t) over tie groups
    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        rank_sum_x += midrank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let u = rank_sum_x - (n * (n + 1)) as f64 / 2.0;
    let has_ties = tie_term > 0.0;

    let exact = match method {
        MwMethod::Auto => n.min(m) <= EXACT_LIMIT && !has_ties,
        MwMethod::Exact => {
            if has_ties {
                return Err(Error::Param("exact Mann-Whitney p needs untied samples".into()));
            }
            true
        }
        MwMethod::Normal => false,
    };
    let p = if exact {
        exact_p(n, m, u.round() as usize)
    } else {
        normal_p(n, m, u, tie_term)
    };
    Ok(MannWhitney { u, p, exact })
}

/// Two-sided p from the null distribution of U, counted by
/// `c(n, m, u) = c(n-1, m, u-m) + c(n, m-1, u)`.
fn exact_p(n: usize, m: usize, u: usize) -> f64 {
    let umax = n * m;
    // counts[a][b] is the distribution for sizes (a, b), built row by row
    let mut prev: Vec<Vec<f64>> = (0..=m).map(|_| vec![1.0]).collect();
    for a in 1..=n {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        cur.push(vec![1.0]);
        for b in 1..=m {
            let len = a * b + 1;
            let mut d = vec![0.0; len];
            // the largest value belongs to x: it beats all b values of y
            for (k, c) in prev[b].iter().enumerate() {
                d[k + b] += c;
            }
            for (k, c) in cur[b - 1].iter().enumerate() {
                d[k] += c;
            }
            cur.push(d);
        }
        prev = cur;
    }
    let dist = &prev[m];
    let total: f64 = dist.iter().sum();
    let u = u.min(umax);
    let lower: f64 = dist[..=u].iter().sum::<f64>() / total;
    let upper: f64 = dist[u..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p(n: usize, m: usize, u: f64, tie_term: f64) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let big_n = nf + mf;
    let mean = nf * mf / 2.0;
    let var = nf * mf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bins: usize,
    pub binarize: Binarize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            binarize: Binarize::Otsu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub dice: f64,
    pub mi: f64,
    pub nmi: f64,
}

/// Metrics between a fixed image and a (possibly warped) moving image.
pub fn pair_metrics(fixed: &GrayImage, moving: &GrayImage, cfg: &EvalConfig) -> Result<PairMetrics> {
    let d = dice(&binarize(fixed, cfg.binarize), &binarize(moving, cfg.binarize))?;
    let (mi, nmi) = mi_metric(fixed, moving, cfg.bins)?;
    Ok(PairMetrics { dice: d, mi, nmi })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub dice_before: f64,
    pub dice_after: f64,
    pub mi_before: f64,
    pub mi_after: f64,
    pub nmi_before: f64,
    pub nmi_after: f64,
}

impl EvalRow {
    fn columns(&self) -> [f64; 6] {
        [
            self.dice_before,
            self.dice_after,
            self.mi_before,
            self.mi_after,
            self.nmi_before,
            self.nmi_after,
        ]
    }
}

pub const COLUMNS: [&str; 6] = [
    "dice_before",
    "dice_after",
    "mi_before",
    "mi_after",
    "nmi_before",
    "nmi_after",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub column: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: String,
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<ColumnSummary>,
    pub tests: Vec<MetricTest>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Param("report needs at least one pair".into()));
        }
        let cols: Vec<Vec<f64>> = (0..COLUMNS.len())
            .map(|c| rows.iter().map(|r| r.columns()[c]).collect())
            .collect();
        let summary = COLUMNS
            .iter()
            .zip(&cols)
            .map(|(name, v)| {
                let (q1, q3) = (quantile(v, 0.25), quantile(v, 0.75));
                ColumnSummary {
                    column: name.to_string(),
                    median: median(v),
                    q1,
                    q3,
                    iqr: q3 - q1,
                }
            })
            .collect();
        let mut tests = Vec::new();
        for (k, metric) in ["dice", "mi", "nmi"].iter().enumerate() {
            let mw = mann_whitney_u(&cols[2 * k], &cols[2 * k + 1])?;
            tests.push(MetricTest {
                metric: metric.to_string(),
                u: mw.u,
                p: mw.p,
                exact: mw.exact,
            });
        }
        Ok(Self {
            rows,
            summary,
            tests,
        })
    }

    pub fn summary_of(&self, column: &str) -> Option<&ColumnSummary> {
        self.summary.iter().find(|s| s.column == column)
    }

    pub fn test_of(&self, metric: &str) -> Option<&MetricTest> {
        self.tests.iter().find(|t| t.metric == metric)
    }

    /// One row per pair, then a footer of `#`-prefixed aggregate rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut header = vec!["id"];
        header.extend(COLUMNS);
        w.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone()];
            rec.extend(r.columns().iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        for stat in ["median", "q1", "q3", "iqr"] {
            let mut rec = vec![format!("#{stat}")];
            for s in &self.summary {
                let v = match stat {
                    "median" => s.median,
                    "q1" => s.q1,
                    "q3" => s.q3,
                    _ => s.iqr,
                };
                rec.push(v.to_string());
            }
            w.write_record(&rec).map_err(io)?;
        }
        for t in &self.tests {
            w.write_record([
                "#mann_whitney".to_string(),
                t.metric.clone(),
                t.u.to_string(),
                t.p.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Long-format `metric,stage,id,value` rows for violin plots.
    pub fn to_violin_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["metric", "stage", "id", "value"]).map_err(io)?;
        for (c, name) in COLUMNS.iter().enumerate() {
            let (metric, stage) = name.split_once('_').unwrap();
            for r in &self.rows {
                w.write_record([metric, stage, &r.id, &r.columns()[c].to_string()])
                    .map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `report.csv`, `report.json` and `violin.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()?),
            ("report.json", self.to_json()?),
            ("violin.csv", self.to_violin_csv()?),
        ] {
            let path = dir.join(name);
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Before = metrics(F, M), after = metrics(F, M∘φ) for each pair.
pub fn evaluate_pairs(
    pairs: &[PairRecord],
    fields: &[DisplacementField],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if pairs.len() != fields.len() {
        return Err(Error::Param(format!(
            "{} pairs but {} fields",
            pairs.len(),
            fields.len()
        )));
    }
    let rows = pairs
        .par_iter()
        .zip(fields.par_iter())
        .map(|(pair, phi)| {
            let before = pair_metrics(&pair.fixed, &pair.moving, cfg)?;
            let warped = warp_bilinear(&pair.moving, phi)?;
            let after = pair_metrics(&pair.fixed, &warped, cfg)?;
            Ok(EvalRow {
                id: pair.id.clone(),
                dice_before: before.dice,
                dice_after: after.dice,
                mi_before: before.mi,
                mi_after: after.mi,
                nmi_before: before.nmi,
                nmi_after: after.nmi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
