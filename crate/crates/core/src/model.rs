//! The assembled network: backbone, reversible decoder stack and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::autodiff::{Tape, TapeMode, Var};
use crate::backbone::Backbone;
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::decoder::DecoderStack;
use crate::error::{Error, Result};
use crate::exit::{predict_classes, Classifier, ExitPolicy};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub decoder: DecoderStack,
    pub classifier: Classifier,
}

/// Nodes recorded by [`Network::forward`].
pub struct ForwardVars {
    pub blur: Var,
    pub enc: Vec<Var>,
    /// Column states; index 0 holds the encoder features e_1..e_{N-1}.
    pub states: Vec<Vec<Var>>,
    /// Ŝ^1..Ŝ^J.
    pub preds: Vec<Var>,
}

/// How many columns a patch runs.
#[derive(Clone, Debug)]
pub enum ExitMode<'p> {
    Fixed(usize),
    Adaptive(&'p ExitPolicy),
}

impl Network {
    /// Build the network and a freshly initialized parameter store.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut pb, cfg);
        let decoder = DecoderStack::new(&mut pb, cfg);
        let classifier = Classifier::new(&mut pb, cfg);
        Ok((
            Network {
                cfg: cfg.clone(),
                backbone,
                decoder,
                classifier,
            },
            store,
        ))
    }

    pub fn columns(&self) -> usize {
        self.decoder.len()
    }

    /// Record head, encoder, columns 1..=`upto` and each column's tail on `tape`.
    pub fn forward<'n, T: Real>(
        &'n self,
        tape: &mut Tape<'n, T>,
        blur: Tensor<T>,
        upto: usize,
        alpha_min: f64,
    ) -> Result<ForwardVars> {
        let blur = tape.input(blur);
        let h = self.backbone.head(tape, blur)?;
        let enc = self.backbone.encode(tape, h)?;
        let mut preds = Vec::with_capacity(upto);
        let backbone = &self.backbone;
        let states = self.decoder.forward(tape, &enc, upto, alpha_min, |tape, j, state| {
            preds.push(backbone.tail(tape, j, state[0], blur)?);
            Ok(())
        })?;
        Ok(ForwardVars {
            blur,
            enc,
            states,
            preds,
        })
    }

    /// Ŝ^1..Ŝ^`upto` without recording gradients. Spatial dims must be multiples of 2^(N-1).
    pub fn predict_all<T: Real>(&self, store: &ParamStore<T>, blur: &Tensor<T>, upto: usize) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::no_grad(store);
        let fv = self.forward(&mut tape, blur.clone(), upto, 0.0)?;
        fv.preds.iter().map(|&p| tape.take_value(p)).collect()
    }

    /// Classifier logits and 1-based predicted classes.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, blur: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut tape = Tape::no_grad(store);
        let b = tape.input(blur.clone());
        let h = self.backbone.head(&mut tape, b)?;
        let enc = self.backbone.encode(&mut tape, h)?;
        let out = self.classifier.forward(&mut tape, enc[enc.len() - 2])?;
        let logits = tape.take_value(out.logits)?;
        let classes = predict_classes(&logits);
        Ok((logits, classes))
    }

    /// Restore one batch-of-one patch, running only as many columns as `mode` asks for.
    /// Returns Ŝ and the exit column.
    pub fn restore<T: Real>(&self, store: &ParamStore<T>, blur: &Tensor<T>, mode: &ExitMode<'_>) -> Result<(Tensor<T>, usize)> {
        if blur.batch() != 1 {
            return Err(Error::Invalid("restore takes one patch at a time".into()));
        }
        let mut tape = Tape::no_grad(store);
        let b = tape.input(blur.clone());
        let h = self.backbone.head(&mut tape, b)?;
        let enc = self.backbone.encode(&mut tape, h)?;
        let exit = match mode {
            ExitMode::Fixed(j) => *j,
            ExitMode::Adaptive(policy) => {
                let out = self.classifier.forward(&mut tape, enc[enc.len() - 2])?;
                let class = predict_classes(tape.value(out.logits)?)[0];
                policy.exit_for(class)?.min(self.columns())
            }
        };
        if exit == 0 || exit > self.columns() {
            return Err(Error::Invalid(format!("exit column {exit} outside 1..={}", self.columns())));
        }
        let states = self.decoder.forward(&mut tape, &enc, exit, 0.0, |_, _, _| Ok(()))?;
        let s = self.backbone.tail(&mut tape, exit, states[exit][0], b)?;
        Ok((tape.take_value(s)?, exit))
    }

    /// Write `model.cfg` and `model.ckpt` into `dir`.
    pub fn save_dir<T: Real>(&self, store: &ParamStore<T>, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.cfg.write(&dir.join(MODEL_CONFIG_FILE))?;
        checkpoint::save(store, &dir.join(CHECKPOINT_FILE))
    }

    /// Rebuild a network saved with [`Network::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<(Self, ParamStore<f32>)> {
        let cfg = ModelConfig::read(&dir.join(MODEL_CONFIG_FILE))?;
        let (net, mut store) = Self::new::<f32>(&cfg, 0)?;
        checkpoint::load(&mut store, &dir.join(CHECKPOINT_FILE))?;
        Ok((net, store))
    }

    /// A tape in the requested storage mode.
    pub fn tape<'n, T: Real>(store: &'n ParamStore<T>, reversible: bool) -> Tape<'n, T> {
        Tape::new(
            store,
            if reversible {
                TapeMode::reversible()
            } else {
                TapeMode::full_storage()
            },
        )
    }

    /// Freeze or unfreeze the head and encoder.
    pub fn set_encoder_frozen<T: Real>(store: &mut ParamStore<T>, frozen: bool) {
        store.set_frozen_prefix("head.", frozen);
        store.set_frozen_prefix("enc.", frozen);
    }

    /// Freeze everything except the classifier (or undo it).
    pub fn set_classifier_only<T: Real>(store: &mut ParamStore<T>, only: bool) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            p.frozen = only && !p.name.starts_with("cls.");
        }
    }
}
