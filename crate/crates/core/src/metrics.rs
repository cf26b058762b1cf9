//! Dice and Jaccard overlap, per-case evaluation and mean ± std reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{channel_of_code, LABEL_CODES};
use crate::volume_io::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dims differ: prediction {0:?}, ground truth {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid label code {0}")]
    InvalidLabelCode(f64),
    #[error("aggregate of zero cases")]
    EmptyInput,
}

/// Score assigned when both masks are empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmptyConvention {
    pub both_empty: f64,
}

impl Default for EmptyConvention {
    fn default() -> Self {
        EmptyConvention { both_empty: 1.0 }
    }
}

fn counts(a: &[u8], m: &[u8]) -> Result<(usize, usize, usize), MetricsError> {
    if a.len() != m.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} pixels", a.len(), m.len())));
    }
    let mut na = 0;
    let mut nm = 0;
    let mut both = 0;
    for (&x, &y) in a.iter().zip(m) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nm += y as usize;
        both += (x && y) as usize;
    }
    Ok((na, nm, both))
}

pub fn dice_with(a: &[u8], m: &[u8], conv: EmptyConvention) -> Result<f64, MetricsError> {
    let (na, nm, both) = counts(a, m)?;
    if na + nm == 0 {
        return Ok(conv.both_empty);
    }
    Ok(2.0 * both as f64 / (na + nm) as f64)
}

pub fn jaccard_with(a: &[u8], m: &[u8], conv: EmptyConvention) -> Result<f64, MetricsError> {
    let (na, nm, both) = counts(a, m)?;
    if na + nm == 0 {
        return Ok(conv.both_empty);
    }
    Ok(both as f64 / (na + nm - both) as f64)
}

/// `2|A∩M| / (|A| + |M|)`; two empty masks score 1.
pub fn dice(a: &[u8], m: &[u8]) -> Result<f64, MetricsError> {
    dice_with(a, m, EmptyConvention::default())
}

/// `|A∩M| / |A∪M|`; two empty masks score 1.
pub fn jaccard(a: &[u8], m: &[u8]) -> Result<f64, MetricsError> {
    jaccard_with(a, m, EmptyConvention::default())
}

/// Report columns: the five classes, the epicardium union, and the two
/// pathology composites.
pub const COLUMNS: [&str; 8] = ["LVBP", "RVBP", "LVNM", "LVME", "LVMS", "LVEpi", "MS", "ME+MS"];

fn column_codes(col: usize) -> &'static [u16] {
    const EPI: [u16; 4] = [500, 200, 1220, 2221];
    const MEMS: [u16; 2] = [1220, 2221];
    match col {
        0..=4 => std::slice::from_ref(&LABEL_CODES[col]),
        5 => &EPI,
        6 => std::slice::from_ref(&LABEL_CODES[4]),
        _ => &MEMS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
}

fn validated_codes(v: &Volume) -> Result<Vec<u16>, MetricsError> {
    v.voxels()
        .iter()
        .map(|&x| match channel_of_code(x) {
            Some(_) => Ok(x as u16),
            None => Err(MetricsError::InvalidLabelCode(x)),
        })
        .collect()
}

/// Scores a predicted label volume against ground truth over the whole
/// 3D volume.
pub fn evaluate_case(case_id: &str, pred: &Volume, gt: &Volume, conv: EmptyConvention) -> Result<CaseRow, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch(pred.dims(), gt.dims()));
    }
    let p = validated_codes(pred)?;
    let g = validated_codes(gt)?;
    let mut row = CaseRow { case_id: case_id.to_string(), dice: Vec::new(), jaccard: Vec::new() };
    for col in 0..COLUMNS.len() {
        let codes = column_codes(col);
        let a: Vec<u8> = p.iter().map(|c| u8::from(codes.contains(c))).collect();
        let m: Vec<u8> = g.iter().map(|c| u8::from(codes.contains(c))).collect();
        row.dice.push(dice_with(&a, &m, conv)?);
        row.jaccard.push(jaccard_with(&a, &m, conv)?);
    }
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population (N-divisor) statistics.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }

    /// `"46.8±26.8"`: percentages to one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub columns: Vec<String>,
    pub rows: Vec<CaseRow>,
    pub dice: Vec<MeanStd>,
    pub jaccard: Vec<MeanStd>,
}

impl MetricsReport {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn mean_dice(&self, name: &str) -> Option<f64> {
        self.column(name).map(|c| self.dice[c].mean)
    }

    /// One row per case (fractions, six decimals) and a final `mean±std`
    /// row in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case");
        for prefix in ["dice", "jaccard"] {
            for c in &self.columns {
                out.push_str(&format!(",{prefix}_{c}"));
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.case_id);
            for v in r.dice.iter().chain(&r.jaccard) {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out.push_str("mean±std(%)");
        for s in self.dice.iter().chain(&self.jaccard) {
            out.push(',');
            out.push_str(&s.percent());
        }
        out.push('\n');
        out
    }
}

pub fn aggregate(rows: Vec<CaseRow>) -> Result<MetricsReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let cols = rows[0].dice.len();
    let stat = |pick: &dyn Fn(&CaseRow) -> &Vec<f64>| -> Vec<MeanStd> {
        (0..cols).map(|c| MeanStd::of(&rows.iter().map(|r| pick(r)[c]).collect::<Vec<_>>())).collect()
    };
    let dice = stat(&|r| &r.dice);
    let jaccard = stat(&|r| &r.jaccard);
    Ok(MetricsReport { columns: COLUMNS.iter().map(|s| s.to_string()).collect(), rows, dice, jaccard })
}
