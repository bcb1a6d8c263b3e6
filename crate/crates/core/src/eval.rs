//! Entity-level scoring and the feature ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::embed::ProviderSpec;
use crate::error::{Error, Result};
use crate::text::EntitySpan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Micro-averaged totals.
    pub counts: Counts,
    pub per_label: BTreeMap<String, Counts>,
    /// Number of gold entities.
    pub support: usize,
    pub description: String,
}

impl EvalReport {
    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.description.is_empty() {
            writeln!(f, "{}", self.description)?;
        }
        writeln!(f, "precision\t{:.4}", self.precision)?;
        writeln!(f, "recall\t{:.4}", self.recall)?;
        writeln!(f, "f1\t{:.4}", self.f1)?;
        writeln!(f, "support\t{}", self.support)?;
        for (label, c) in &self.per_label {
            writeln!(
                f,
                "label {label}\ttp={} fp={} fn={}\tf1={:.4}",
                c.true_pos,
                c.false_pos,
                c.false_neg,
                c.f1()
            )?;
        }
        Ok(())
    }
}

/// Exact-match micro-averaged entity F1; duplicate spans within a record
/// count once.
pub fn entity_f1(predicted: &[Vec<EntitySpan>], gold: &[Vec<EntitySpan>]) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold records",
            predicted.len(),
            gold.len()
        )));
    }
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    for (p, g) in predicted.iter().zip(gold) {
        let p: BTreeSet<&EntitySpan> = p.iter().collect();
        let g: BTreeSet<&EntitySpan> = g.iter().collect();
        for s in &p {
            let c = per_label.entry(s.label.clone()).or_default();
            if g.contains(s) {
                c.true_pos += 1;
            } else {
                c.false_pos += 1;
            }
        }
        for s in g.difference(&p) {
            per_label.entry(s.label.clone()).or_default().false_neg += 1;
        }
    }
    let counts = per_label.values().fold(Counts::default(), |acc, c| Counts {
        true_pos: acc.true_pos + c.true_pos,
        false_pos: acc.false_pos + c.false_pos,
        false_neg: acc.false_neg + c.false_neg,
    });
    Ok(EvalReport {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
        per_label,
        support: counts.true_pos + counts.false_neg,
        description: String::new(),
    })
}

/// One combination of feature options.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationSetting {
    pub use_lexical: bool,
    pub provider: ProviderSpec,
}

impl AblationSetting {
    pub fn sparse_label(&self) -> &'static str {
        if self.use_lexical {
            "words + char n-grams + lexical"
        } else {
            "words + char n-grams"
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "sparse: {}; dense: {}",
            self.sparse_label(),
            self.provider.describe()
        )
    }
}

/// Parses `axis=v1,v2;axis=...` with axes `lexical` (`on`/`off`) and
/// `dense` (provider specs). The first declared axis varies slowest; a
/// missing axis keeps the base value.
pub fn parse_grid(spec: &str, base: &AblationSetting) -> Result<Vec<AblationSetting>> {
    let mut settings = vec![base.clone()];
    let mut seen = BTreeSet::new();
    for axis in spec.split(';').map(str::trim).filter(|a| !a.is_empty()) {
        let (name, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {axis:?} needs name=values")))?;
        let name = name.trim();
        if !seen.insert(name.to_owned()) {
            return Err(Error::Config(format!("grid axis {name} declared twice")));
        }
        let values: Vec<&str> = values.split(',').map(str::trim).collect();
        if values.iter().any(|v| v.is_empty()) {
            return Err(Error::Config(format!(
                "grid axis {name} has an empty value"
            )));
        }
        let mut next = Vec::with_capacity(settings.len() * values.len());
        for s in &settings {
            for v in &values {
                let mut s = s.clone();
                match name {
                    "lexical" => {
                        s.use_lexical = match *v {
                            "on" => true,
                            "off" => false,
                            other => {
                                return Err(Error::Config(format!(
                                    "lexical must be on or off, got {other:?}"
                                )))
                            }
                        }
                    }
                    "dense" => s.provider = v.parse()?,
                    other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
                }
                next.push(s);
            }
        }
        settings = next;
    }
    Ok(settings)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub train: EvalReport,
    pub test: EvalReport,
}

pub const TABLE_HEADERS: [&str; 4] = [
    "Sparse Features",
    "Dense Features",
    "Training F1",
    "Test F1",
];

/// Renders rows of four cells as a left-aligned pipe table.
pub fn render_table(rows: &[[String; 4]]) -> String {
    let mut widths = TABLE_HEADERS.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(TABLE_HEADERS);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in rows {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}

/// F1 as a percentage with two decimals.
pub fn percent(f1: f64) -> String {
    format!("{:.2}", 100.0 * f1)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.setting.sparse_label().to_owned(),
                r.setting.provider.describe(),
                percent(r.train.f1),
                percent(r.test.f1),
            ]
        })
        .collect();
    render_table(&cells)
}
