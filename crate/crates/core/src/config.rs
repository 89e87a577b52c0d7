//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are rejected so
//! typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    origin: String,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: "expected key = value".into(),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    msg: format!("duplicate key {k}"),
                });
            }
        }
        Ok(Self {
            entries,
            origin: origin.into(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn take<V: FromStr>(&mut self, key: &str, target: &mut V) -> Result<()> {
        if let Some((line, v)) = self.entries.remove(key) {
            *target = v.parse().map_err(|_| Error::Parse {
                path: self.origin.clone(),
                line,
                msg: format!("bad value for {key}: {v}"),
            })?;
        }
        Ok(())
    }

    fn take_list<V: FromStr>(&mut self, key: &str, target: &mut Vec<V>) -> Result<()> {
        if let Some((line, v)) = self.entries.remove(key) {
            *target = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    path: self.origin.clone(),
                    line,
                    msg: format!("bad list for {key}: {v}"),
                })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, (line, _))) => Err(Error::Parse {
                path: self.origin,
                line,
                msg: format!("unknown key {k}"),
            }),
            None => Ok(()),
        }
    }
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Architecture hyperparameters, stored next to checkpoints as `model.cfg`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the first encoder level; level i has `channels * 2^(i-1)`.
    pub channels: usize,
    /// Encoder levels N; the decoder has N-1 levels per column.
    pub levels: usize,
    pub enc_blocks: Vec<usize>,
    /// Number of sub-decoder columns J.
    pub columns: usize,
    pub fourier: bool,
    /// Ascending PSNR class edges in dB; there are `edges + 1` classes.
    pub bin_edges: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            levels: 5,
            enc_blocks: vec![1; 5],
            columns: 4,
            fourier: true,
            bin_edges: vec![20.0, 25.0, 30.0, 35.0, 40.0],
        }
    }
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        self.bin_edges.len() + 1
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.channels < 2 || self.channels % 2 != 0 {
            return bad("channels must be even and at least 2");
        }
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if self.enc_blocks.len() != self.levels || self.enc_blocks.contains(&0) {
            return bad("enc_blocks needs one positive count per level");
        }
        if self.columns == 0 {
            return bad("columns must be at least 1");
        }
        if self.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bin_edges must be strictly ascending");
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("channels", &mut c.channels)?;
        kv.take("levels", &mut c.levels)?;
        kv.take_list("enc_blocks", &mut c.enc_blocks)?;
        kv.take("columns", &mut c.columns)?;
        kv.take("fourier", &mut c.fourier)?;
        kv.take_list("bin_edges", &mut c.bin_edges)?;
        kv.finish()?;
        if c.enc_blocks.len() != c.levels && c.enc_blocks == vec![1; 5] {
            c.enc_blocks = vec![1; c.levels];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "channels = {}", self.channels).unwrap();
        writeln!(s, "levels = {}", self.levels).unwrap();
        writeln!(s, "enc_blocks = {}", join(&self.enc_blocks)).unwrap();
        writeln!(s, "columns = {}", self.columns).unwrap();
        writeln!(s, "fourier = {}", self.fourier).unwrap();
        writeln!(s, "bin_edges = {}", join(&self.bin_edges)).unwrap();
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Optimization settings for both training phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub patch: usize,
    pub batch: usize,
    /// Decoder-phase iterations.
    pub iters: usize,
    /// Leading iterations during which the encoder trains too; it is frozen afterwards.
    pub pretrain_iters: usize,
    pub freq_weight: f64,
    pub reversible: bool,
    pub alpha_min: f64,
    pub flips: bool,
    pub eval_every: usize,
    pub classifier_iters: usize,
    pub classifier_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-7,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-3,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            patch: 64,
            batch: 4,
            iters: 2000,
            pretrain_iters: 500,
            freq_weight: 0.01,
            reversible: true,
            alpha_min: 1e-3,
            flips: true,
            eval_every: 250,
            classifier_iters: 1000,
            classifier_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(Error::Config("need lr_init > lr_final > 0".into()));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if self.alpha_min <= 0.0 {
            return Err(Error::Config("alpha_min must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take("lr_init", &mut c.lr_init)?;
        kv.take("lr_final", &mut c.lr_final)?;
        kv.take("beta1", &mut c.beta1)?;
        kv.take("beta2", &mut c.beta2)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("ema_decay", &mut c.ema_decay)?;
        kv.take("patch", &mut c.patch)?;
        kv.take("batch", &mut c.batch)?;
        kv.take("iters", &mut c.iters)?;
        kv.take("pretrain_iters", &mut c.pretrain_iters)?;
        kv.take("freq_weight", &mut c.freq_weight)?;
        kv.take("reversible", &mut c.reversible)?;
        kv.take("alpha_min", &mut c.alpha_min)?;
        kv.take("flips", &mut c.flips)?;
        kv.take("eval_every", &mut c.eval_every)?;
        kv.take("classifier_iters", &mut c.classifier_iters)?;
        kv.take("classifier_lr", &mut c.classifier_lr)?;
        kv.take("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::read(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr_init = {}\nlr_final = {}\nbeta1 = {}\nbeta2 = {}\nweight_decay = {}\n\
             adam_eps = {}\nema_decay = {}\npatch = {}\nbatch = {}\niters = {}\n\
             pretrain_iters = {}\nfreq_weight = {}\nreversible = {}\nalpha_min = {}\n\
             flips = {}\neval_every = {}\nclassifier_iters = {}\nclassifier_lr = {}\nseed = {}\n",
            self.lr_init,
            self.lr_final,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.adam_eps,
            self.ema_decay,
            self.patch,
            self.batch,
            self.iters,
            self.pretrain_iters,
            self.freq_weight,
            self.reversible,
            self.alpha_min,
            self.flips,
            self.eval_every,
            self.classifier_iters,
            self.classifier_lr,
            self.seed
        )
    }
}
