//! Degradation classes, per-class increment tables, early-exit policies and the
//! degradation classifier.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::level_channels;
use crate::blocks::{Conv2d, Downsample, LayerNorm2d, NafBlock};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::{Real, Tensor};

/// PSNR class edges in dB. Class `c` (1-based) is `1 + #(edges < psnr)`, so a PSNR
/// equal to an edge falls in the lower class.
#[derive(Clone, Debug, PartialEq)]
pub struct Bins {
    pub edges: Vec<f64>,
}

impl Bins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Invalid("bin edges must be finite and ascending".into()));
        }
        Ok(Self { edges })
    }

    /// Six classes with edges at 20, 25, 30, 35 and 40 dB.
    pub fn standard() -> Self {
        Self {
            edges: vec![20.0, 25.0, 30.0, 35.0, 40.0],
        }
    }

    /// `count - 1` edges spaced `step` dB apart starting at `first`.
    pub fn with_step(first: f64, step: f64, count: usize) -> Result<Self> {
        Self::new((0..count.saturating_sub(1)).map(|k| first + step * k as f64).collect())
    }

    pub fn classes(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn class_of(&self, psnr: f64) -> usize {
        1 + self.edges.iter().filter(|&&e| e < psnr).count()
    }
}

/// Class of a blur patch from its PSNR against the sharp patch.
pub fn psnr_class<T: Real>(blur: &Tensor<T>, sharp: &Tensor<T>, bins: &Bins) -> Result<usize> {
    Ok(bins.class_of(crate::metrics::psnr(blur, sharp)?))
}

/// Mean PSNR gain of each column over the previous one, per class.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementTable {
    /// `gains[c - 1][j - 1]`; `None` marks a class without samples.
    pub gains: Vec<Vec<Option<f64>>>,
    pub counts: Vec<usize>,
}

impl IncrementTable {
    /// `psnrs[p]` holds `[PSNR(B, S), PSNR(Ŝ^1, S), .., PSNR(Ŝ^J, S)]` for patch `p`,
    /// `classes[p]` its 1-based class.
    pub fn from_psnrs(classes: &[usize], psnrs: &[Vec<f64>], num_classes: usize) -> Result<Self> {
        if classes.len() != psnrs.len() {
            return Err(Error::Invalid("one class per patch required".into()));
        }
        let j = psnrs.first().map_or(0, |p| p.len().saturating_sub(1));
        let mut sums = vec![vec![0.0; j]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (&c, row) in classes.iter().zip(psnrs) {
            if c == 0 || c > num_classes {
                return Err(Error::Invalid(format!("class {c} out of range 1..={num_classes}")));
            }
            if row.len() != j + 1 {
                return Err(Error::Invalid("ragged PSNR rows".into()));
            }
            counts[c - 1] += 1;
            for k in 0..j {
                sums[c - 1][k] += row[k + 1] - row[k];
            }
        }
        let gains = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| {
                s.into_iter()
                    .map(|v| (n > 0).then(|| v / n as f64))
                    .collect()
            })
            .collect();
        Ok(Self { gains, counts })
    }

    /// Table from explicit rows; every listed class counts as observed once.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        Self {
            gains: rows
                .iter()
                .map(|r| r.iter().map(|&v| Some(v)).collect())
                .collect(),
            counts: vec![1; rows.len()],
        }
    }

    pub fn classes(&self) -> usize {
        self.gains.len()
    }

    pub fn columns(&self) -> usize {
        self.gains.first().map_or(0, Vec::len)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("class");
        for j in 1..=self.columns() {
            write!(s, "\tdec{j}").unwrap();
        }
        s.push_str("\tcount\n");
        for (c, (row, n)) in self.gains.iter().zip(&self.counts).enumerate() {
            write!(s, "{}", c + 1).unwrap();
            for v in row {
                match v {
                    Some(v) => write!(s, "\t{v}").unwrap(),
                    None => s.push_str("\tNA"),
                }
            }
            writeln!(s, "\t{n}").unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty table".into()))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 3 || cols[0] != "class" || cols[cols.len() - 1] != "count" {
            return Err(perr(1, "header must be class, dec1..decJ, count".into()));
        }
        for (k, name) in cols[1..cols.len() - 1].iter().enumerate() {
            if *name != format!("dec{}", k + 1) {
                return Err(perr(1, format!("unexpected column {name}")));
            }
        }
        let j = cols.len() - 2;
        let mut gains = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != j + 2 {
                return Err(perr(i + 1, format!("expected {} fields", j + 2)));
            }
            let c: usize = f[0].parse().map_err(|_| perr(i + 1, "bad class".into()))?;
            if c != gains.len() + 1 {
                return Err(perr(i + 1, format!("class {c} out of order")));
            }
            let row = f[1..=j]
                .iter()
                .map(|v| {
                    if *v == "NA" {
                        Ok(None)
                    } else {
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .map(Some)
                            .ok_or_else(|| perr(i + 1, format!("bad gain {v}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            gains.push(row);
            counts.push(f[j + 1].parse().map_err(|_| perr(i + 1, "bad count".into()))?);
        }
        Ok(Self { gains, counts })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-class exit column.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitPolicy {
    pub tau: f64,
    pub inclusive: bool,
    /// `exits[c - 1]` in `1..=J`.
    pub exits: Vec<usize>,
}

impl ExitPolicy {
    /// Policy that always runs all `j` columns.
    pub fn full(classes: usize, j: usize) -> Self {
        Self {
            tau: f64::NEG_INFINITY,
            inclusive: false,
            exits: vec![j; classes],
        }
    }

    pub fn exit_for(&self, class: usize) -> Result<usize> {
        self.exits
            .get(class.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no exit for class {class}")))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# tau={} inclusive={}\nclass\tE\n", self.tau, self.inclusive);
        for (c, e) in self.exits.iter().enumerate() {
            writeln!(s, "{}\t{e}", c + 1).unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            path: origin.into(),
            line,
            msg: msg.into(),
        };
        let mut tau = None;
        let mut inclusive = false;
        let mut exits = Vec::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("tau", v)) => tau = Some(v.parse().map_err(|_| perr(i + 1, "bad tau"))?),
                        Some(("inclusive", v)) => {
                            inclusive = v.parse().map_err(|_| perr(i + 1, "bad inclusive flag"))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != "class\tE" {
                    return Err(perr(i + 1, "header must be class, E"));
                }
                saw_header = true;
                continue;
            }
            let (c, e) = line.split_once('\t').ok_or_else(|| perr(i + 1, "expected class, E"))?;
            let c: usize = c.parse().map_err(|_| perr(i + 1, "bad class"))?;
            let e: usize = e.parse().map_err(|_| perr(i + 1, "bad exit"))?;
            if c != exits.len() + 1 || e == 0 {
                return Err(perr(i + 1, "classes must be consecutive and exits positive"));
            }
            exits.push(e);
        }
        Ok(Self {
            tau: tau.ok_or_else(|| perr(1, "missing '# tau=' line"))?,
            inclusive,
            exits,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// `E_c = (first j with O_c^j < τ) - 1`, floored at 1, or `J` when no gain falls below
/// τ. Classes without samples get `J`. With `inclusive` the test is `O_c^j <= τ`.
pub fn compute_exit_signal(table: &IncrementTable, tau: f64, inclusive: bool) -> ExitPolicy {
    let j = table.columns();
    let exits = table
        .gains
        .iter()
        .zip(&table.counts)
        .map(|(row, &n)| {
            if n == 0 {
                return j;
            }
            row.iter()
                .position(|o| match o {
                    Some(o) if inclusive => *o <= tau,
                    Some(o) => *o < tau,
                    None => false,
                })
                .map_or(j, |k| k.max(1))
        })
        .collect();
    ExitPolicy {
        tau,
        inclusive,
        exits,
    }
}

/// Fraction of column executions used: `Σ exits / (n · J)`.
pub fn d_rate(exits: &[usize], j: usize) -> f64 {
    if exits.is_empty() || j == 0 {
        return 0.0;
    }
    exits.iter().sum::<usize>() as f64 / (exits.len() * j) as f64
}

/// Degradation classifier on encoder level N-1: downsample → NAF block → layer norm →
/// global average pool → 1×1 → GELU → 1×1.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub classes: usize,
    pub down: Downsample,
    pub naf: NafBlock,
    pub norm: LayerNorm2d,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

/// Classifier outputs for one batch.
pub struct ClassifierOutput {
    pub logits: Var,
    /// Feature after the NAF block (degradation-degree representation).
    pub feature: Var,
}

impl Classifier {
    pub fn new<T: Real, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &ModelConfig) -> Self {
        let cin = level_channels(cfg.channels, cfg.levels - 1);
        let c = 2 * cin;
        pb.scope("cls", |pb| Classifier {
            classes: cfg.classes(),
            down: Downsample::new(pb, "down", cin),
            naf: NafBlock::new(pb, "naf", c),
            norm: LayerNorm2d::new(pb, "norm", c),
            fc1: Conv2d::pointwise(pb, "fc1", c, c, true),
            fc2: Conv2d::pointwise(pb, "fc2", c, cfg.classes(), true),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, e: Var) -> Result<ClassifierOutput> {
        let x = self.down.forward(tape, e)?;
        let feature = self.naf.forward(tape, x)?;
        let x = self.norm.forward(tape, feature)?;
        let x = tape.global_avg_pool(x)?;
        let x = self.fc1.forward(tape, x)?;
        let x = tape.gelu(x)?;
        let logits = self.fc2.forward(tape, x)?;
        Ok(ClassifierOutput { logits, feature })
    }
}

/// 1-based argmax per batch row; ties go to the lower class.
pub fn predict_classes<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let [b, c, _, _] = logits.shape();
    (0..b)
        .map(|bi| {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best + 1
        })
        .collect()
}
