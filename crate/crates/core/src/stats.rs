//! Rank statistics over method-by-block tables: Friedman and Wilcoxon
//! signed-rank tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Metric names in Table 1 order.
pub const METRICS: [&str; 5] = ["DSC", "IoU", "RVE", "HD-95", "ASSD"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    /// DSC and IoU reward larger values; volume and distance errors smaller.
    pub fn for_metric(name: &str) -> Option<Self> {
        let n = name.trim().to_ascii_lowercase();
        if n.starts_with("dsc") || n.starts_with("dice") || n.starts_with("iou") {
            Some(Self::HigherBetter)
        } else if n.starts_with("rve") || n.starts_with("hd") || n.starts_with("assd") {
            Some(Self::LowerBetter)
        } else {
            None
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "higher" | "higher_better" | "max" => Some(Self::HigherBetter),
            "lower" | "lower_better" | "min" => Some(Self::LowerBetter),
            _ => None,
        }
    }
}

/// `n` blocks by `k` methods with one orientation per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub blocks: Vec<String>,
    pub methods: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub orientation: Vec<Orientation>,
}

/// One table entry in long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub block: String,
    pub method: String,
    pub value: f64,
    pub orientation: Orientation,
}

impl RankTable {
    pub fn new(blocks: Vec<String>, methods: Vec<String>, values: Vec<Vec<f64>>, orientation: Vec<Orientation>) -> Result<Self> {
        if blocks.is_empty() || methods.is_empty() {
            return Err(Error::InsufficientSamples("a rank table needs at least one block and one method".into()));
        }
        if values.len() != blocks.len() || orientation.len() != blocks.len() {
            return Err(Error::Shape(format!("{} blocks, {} value rows, {} orientations", blocks.len(), values.len(), orientation.len())));
        }
        for (b, row) in blocks.iter().zip(&values) {
            if row.len() != methods.len() {
                return Err(Error::Shape(format!("block {b} has {} values for {} methods", row.len(), methods.len())));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Gap(format!("block {b}, method {}", methods[j])));
            }
        }
        Ok(Self { blocks, methods, values, orientation })
    }

    /// Assembles a table from long-format cells, keeping first-seen order of
    /// blocks and methods. Every (block, method) pair must appear once.
    pub fn from_cells(cells: &[Cell]) -> Result<Self> {
        let mut blocks: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        let mut orient: BTreeMap<&str, Orientation> = BTreeMap::new();
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for c in cells {
            let b = blocks.iter().position(|x| *x == c.block).unwrap_or_else(|| {
                blocks.push(c.block.clone());
                blocks.len() - 1
            });
            let m = methods.iter().position(|x| *x == c.method).unwrap_or_else(|| {
                methods.push(c.method.clone());
                methods.len() - 1
            });
            if let Some(o) = orient.insert(&c.block, c.orientation) {
                if o != c.orientation {
                    return Err(Error::Format(format!("block {} has conflicting orientations", c.block)));
                }
            }
            if map.insert((b, m), c.value).is_some() {
                return Err(Error::Format(format!("duplicate cell ({}, {})", c.block, c.method)));
            }
        }
        let mut values = vec![vec![f64::NAN; methods.len()]; blocks.len()];
        for (b, row) in values.iter_mut().enumerate() {
            for (m, v) in row.iter_mut().enumerate() {
                *v = *map.get(&(b, m)).ok_or_else(|| Error::Gap(format!("block {}, method {}", blocks[b], methods[m])))?;
            }
        }
        let orientation = blocks.iter().map(|b| orient[b.as_str()]).collect();
        Self::new(blocks, methods, values, orientation)
    }

    /// Parses long-format CSV. Accepted headers are `block,method,value` with
    /// an optional `orientation` column, or `metric,cancer_type,method,value`
    /// where the block is `metric/cancer_type`. Without an orientation column
    /// it is inferred from the metric name.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Format(format!("csv header: {e}")))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (method, value) = match (col("method"), col("value")) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::Format("csv needs `method` and `value` columns".into())),
        };
        let block = col("block");
        let metric = col("metric");
        let tumour = col("cancer_type").or_else(|| col("tumour"));
        let orient = col("orientation");
        let mut cells = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("csv row {}: {e}", line + 2)))?;
            let get = |i: usize| rec.get(i).unwrap_or("").to_string();
            let (name, metric_name) = match (block, metric, tumour) {
                (Some(b), _, _) => (get(b), metric.map(get).unwrap_or_else(|| get(b))),
                (None, Some(m), Some(t)) => (format!("{}/{}", get(m), get(t)), get(m)),
                (None, Some(m), None) => (get(m), get(m)),
                _ => return Err(Error::Format("csv needs a `block` column or `metric` (+ `cancer_type`)".into())),
            };
            let orientation = match orient.map(get) {
                Some(o) if !o.is_empty() => Orientation::parse(&o).ok_or_else(|| Error::Format(format!("orientation {o:?}")))?,
                _ => Orientation::for_metric(&metric_name).unwrap_or(Orientation::HigherBetter),
            };
            let v = get(value);
            let value = v.parse::<f64>().map_err(|_| Error::Format(format!("csv row {}: value {v:?}", line + 2)))?;
            cells.push(Cell { block: name, method: get(method), value, orientation });
        }
        Self::from_cells(&cells)
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }

    /// Same table with methods reordered by `perm` (new column j = old perm[j]).
    pub fn permute_methods(&self, perm: &[usize]) -> Self {
        Self {
            blocks: self.blocks.clone(),
            methods: perm.iter().map(|&j| self.methods[j].clone()).collect(),
            values: self.values.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect(),
            orientation: self.orientation.clone(),
        }
    }
}

/// Average ranks of `values` (1 = smallest); ties share the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Within-block ranks, 1 = best.
pub fn rank_blocks(table: &RankTable) -> Vec<Vec<f64>> {
    table
        .values
        .iter()
        .zip(&table.orientation)
        .map(|(row, o)| match o {
            Orientation::LowerBetter => average_ranks(row),
            Orientation::HigherBetter => average_ranks(&row.iter().map(|v| -v).collect::<Vec<_>>()),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Natural log of the p-value, accurate where `p_value` underflows.
    pub ln_p: f64,
    /// `p_value` formatted, or "<1e-300" once below representable precision.
    pub p_display: String,
    pub average_ranks: Vec<f64>,
    pub n: usize,
    pub warning: Option<String>,
}

fn display_p(p: f64, ln_p: f64) -> String {
    if ln_p < (1e-300f64).ln() {
        "<1e-300".into()
    } else {
        format!("{p:.3e}")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FriedmanOptions {
    /// Divide by the tie-correction factor.
    pub tie_correction: bool,
}

pub fn friedman(table: &RankTable) -> Result<TestResult> {
    friedman_with(table, FriedmanOptions::default())
}

/// Friedman rank-sum test, chi-squared with `k - 1` degrees of freedom.
pub fn friedman_with(table: &RankTable, opts: FriedmanOptions) -> Result<TestResult> {
    let (n, k) = (table.n(), table.k());
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("Friedman needs at least 2 blocks, got {n}")));
    }
    let ranks = rank_blocks(table);
    let avg: Vec<f64> = (0..k).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centre = (k as f64 + 1.0) / 2.0;
    let degenerate = |avg: Vec<f64>, why: &str| TestResult {
        test: "friedman".into(),
        statistic: 0.0,
        p_value: 1.0,
        ln_p: 0.0,
        p_display: display_p(1.0, 0.0),
        average_ranks: avg,
        n,
        warning: Some(why.into()),
    };
    if k < 2 {
        return Ok(degenerate(avg, "degenerate statistic: fewer than two methods"));
    }
    let mut chi2 = 12.0 * n as f64 / (k as f64 * (k as f64 + 1.0)) * avg.iter().map(|r| (r - centre).powi(2)).sum::<f64>();
    if opts.tie_correction {
        let ties: f64 = table
            .values
            .iter()
            .map(|row| {
                let mut v = row.clone();
                v.sort_by(f64::total_cmp);
                v.chunk_by(|a, b| a == b).map(|g| (g.len().pow(3) - g.len()) as f64).sum::<f64>()
            })
            .sum();
        let c = 1.0 - ties / (n as f64 * ((k * k * k - k) as f64));
        if c <= 0.0 {
            return Ok(degenerate(avg, "degenerate statistic: every block is fully tied"));
        }
        chi2 /= c;
    }
    if chi2 == 0.0 && table.values.iter().all(|r| r.iter().all(|v| *v == r[0])) {
        return Ok(degenerate(avg, "degenerate statistic: constant table"));
    }
    let (p, ln_p) = chi2_sf(chi2, (k - 1) as f64);
    Ok(TestResult { test: "friedman".into(), statistic: chi2, p_value: p, ln_p, p_display: display_p(p, ln_p), average_ranks: avg, n, warning: None })
}

/// Upper tail of chi-squared and its logarithm.
fn chi2_sf(x: f64, df: f64) -> (f64, f64) {
    let p = ChiSquared::new(df).expect("positive degrees of freedom").sf(x);
    if p > 1e-280 {
        return (p, p.ln());
    }
    (p, ln_upper_gamma_q(df / 2.0, x / 2.0))
}

/// ln Q(a, z) by the Lentz continued fraction, valid for z > a + 1.
fn ln_upper_gamma_q(a: f64, z: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = z + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    -z + a * z.ln() - ln_gamma(a) + h.ln()
}

/// Largest reduced sample handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; the statistic is `min(W+, W-)`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("paired samples of lengths {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Gap("non-finite paired value".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(TestResult {
            test: "wilcoxon".into(),
            statistic: 0.0,
            p_value: 1.0,
            ln_p: 0.0,
            p_display: display_p(1.0, 0.0),
            average_ranks: vec![],
            n: 0,
            warning: Some("degenerate: all differences are zero".into()),
        });
    }
    if n < 5 {
        return Err(Error::InsufficientSamples(format!("{n} non-zero differences; at least 5 are needed")));
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let t = w_plus.min(total - w_plus);
    let (p, ln_p) = if n <= WILCOXON_EXACT_MAX {
        let p = (2.0 * exact_lower_tail(&ranks, t)).min(1.0);
        (p, p.ln())
    } else {
        normal_two_sided(&ranks, t)
    };
    Ok(TestResult { test: "wilcoxon".into(), statistic: t, p_value: p, ln_p, p_display: display_p(p, ln_p), average_ranks: vec![], n, warning: None })
}

/// P(W+ <= t) under the null, by dynamic programming over doubled ranks
/// (average ranks are multiples of one half).
pub fn exact_lower_tail(ranks: &[f64], t: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * t).round() as usize;
    let hits: f64 = counts[..=limit.min(max)].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

fn normal_two_sided(ranks: &[f64], t: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut v = ranks.to_vec();
    v.sort_by(f64::total_cmp);
    let ties: f64 = v.chunk_by(|a, b| a == b).map(|g| (g.len().pow(3) - g.len()) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let z = ((t - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let tail = Normal::standard().sf(z);
    let p = (2.0 * tail).min(1.0);
    let ln_p = if tail > 1e-280 {
        p.ln()
    } else {
        // Mills-ratio asymptotic for the far normal tail.
        std::f64::consts::LN_2 - 0.5 * z * z - z.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    (p, ln_p)
}

/// Wilcoxon tests on block values for every pair of methods.
pub fn pairwise_wilcoxon(table: &RankTable) -> Result<Vec<(String, String, TestResult)>> {
    let mut out = Vec::new();
    for a in 0..table.k() {
        for b in a + 1..table.k() {
            let x: Vec<f64> = table.values.iter().map(|r| r[a]).collect();
            let y: Vec<f64> = table.values.iter().map(|r| r[b]).collect();
            out.push((table.methods[a].clone(), table.methods[b].clone(), wilcoxon_signed_rank(&x, &y)?));
        }
    }
    Ok(out)
}

/// One evaluated case of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub tumour: String,
    pub method: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub table: RankTable,
    pub ranks: Vec<Vec<f64>>,
    pub average_ranks: Vec<f64>,
    /// Method indices from best to worst average rank.
    pub overall_order: Vec<usize>,
    pub friedman: TestResult,
}

impl Table1 {
    pub fn from_table(table: RankTable) -> Result<Self> {
        let ranks = rank_blocks(&table);
        let friedman = friedman(&table)?;
        let average_ranks = friedman.average_ranks.clone();
        let mut overall_order: Vec<usize> = (0..table.k()).collect();
        overall_order.sort_by(|&a, &b| average_ranks[a].total_cmp(&average_ranks[b]).then(a.cmp(&b)));
        Ok(Self { table, ranks, average_ranks, overall_order, friedman })
    }
}

/// Mean metrics per (tumour, method), laid out as metric-by-tumour blocks.
pub fn build_table1(records: &[CaseRecord], methods: &[String]) -> Result<Table1> {
    let mut tumours: Vec<String> = Vec::new();
    for r in records {
        if !tumours.contains(&r.tumour) {
            tumours.push(r.tumour.clone());
        }
    }
    let mut cells = Vec::new();
    for (mi, metric) in METRICS.iter().enumerate() {
        let orientation = Orientation::for_metric(metric).expect("known metric");
        for t in &tumours {
            for m in methods {
                let reports: Vec<MetricReport> =
                    records.iter().filter(|r| &r.tumour == t && &r.method == m).map(|r| r.report).collect();
                let mean = MetricReport::mean(&reports).ok_or_else(|| Error::Gap(format!("no cases for {m} on {t}")))?;
                let value = [mean.dsc, mean.iou, mean.rve, mean.hd95, mean.assd][mi];
                cells.push(Cell { block: format!("{metric}/{t}"), method: m.clone(), value, orientation });
            }
        }
    }
    Table1::from_table(RankTable::from_cells(&cells)?)
}
