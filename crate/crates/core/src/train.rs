//! Losses, optimizer, schedule, EMA and the two training phases.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::Network;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// `(1/K) Σ_j [ |Ŝ^j - S|_1 + w · |FFT(Ŝ^j) - FFT(S)|_1 ]`, both norms as means.
pub fn decoder_loss<T: Real>(tape: &mut Tape<'_, T>, preds: &[Var], sharp: Var, freq_weight: f64) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::Invalid("loss needs at least one prediction".into()));
    }
    let mut total: Option<Var> = None;
    for &p in preds {
        let l1 = tape.l1_loss(p, sharp)?;
        let fr = tape.fft_l1_loss(p, sharp)?;
        let fr = tape.scale(fr, freq_weight)?;
        let term = tape.add(l1, fr)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    tape.scale(total.unwrap(), 1.0 / preds.len() as f64)
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = (step.min(total)) as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn from_config(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let decay = T::c(1.0 - lr * self.weight_decay);
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * m[i] / denom;
            }
        }
    }
}

/// Exponential moving average of parameters, used for evaluation.
#[derive(Clone, Debug)]
pub struct Ema<T: Real> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::c(self.decay);
        let one_d = T::c(1.0 - self.decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let src = store.value(id).data();
            for (s, &p) in self.shadow.value_mut(id).data_mut().iter_mut().zip(src) {
                *s = d * *s + one_d * p;
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Vec<f64>,
}

pub fn log_header(columns: usize) -> String {
    let mut s = String::from("iter\tlr\tloss");
    for j in 1..=columns {
        write!(s, "\tpsnr_dec{j}").unwrap();
    }
    s
}

impl LogRow {
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{:e}\t{}", self.iter, self.lr, self.loss);
        for p in &self.psnr {
            write!(s, "\t{p}").unwrap();
        }
        s
    }
}

pub fn log_text(rows: &[LogRow], columns: usize) -> String {
    let mut s = log_header(columns);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Mean per-column PSNR of `net` over every patch in `set`.
pub fn evaluate_columns(net: &Network, store: &ParamStore<f32>, set: &PatchSet, batch: usize) -> Result<Vec<f64>> {
    let per_patch = column_psnrs(net, store, set, batch)?;
    let j = net.columns();
    let mut mean = vec![0.0; j];
    for row in &per_patch {
        for k in 0..j {
            mean[k] += row[k + 1];
        }
    }
    let n = per_patch.len().max(1) as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Per patch: `[PSNR(B, S), PSNR(Ŝ^1, S), .., PSNR(Ŝ^J, S)]`.
pub fn column_psnrs(net: &Network, store: &ParamStore<f32>, set: &PatchSet, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (blur, sharp) = set.batch(chunk, None)?;
        let preds = net.predict_all(store, &blur, net.columns())?;
        for (k, _) in chunk.iter().enumerate() {
            let b = blur.batch_slice(k, 1);
            let s = sharp.batch_slice(k, 1);
            let mut row = vec![psnr(&b, &s)?];
            for p in &preds {
                row.push(psnr(&p.batch_slice(k, 1), &s)?);
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// Crop a batch pair to `size × size` at one random offset; smaller inputs are an error.
pub fn random_crop(blur: Tensor<f32>, sharp: Tensor<f32>, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [_, _, h, w] = blur.shape();
    if h < size || w < size {
        return Err(Error::Invalid(format!("patches are {h}x{w}, training needs {size}x{size}")));
    }
    if (h, w) == (size, size) {
        return Ok((blur, sharp));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok((blur.crop(y, x, size, size)?, sharp.crop(y, x, size, size)?))
}

pub struct DecoderTraining {
    pub ema: Ema<f32>,
    pub log: Vec<LogRow>,
}

/// Decoder phase. The encoder (and head) train for the first `pretrain_iters`
/// iterations and stay frozen afterwards; the classifier is frozen throughout.
/// On a non-finite loss `store` keeps the last good parameters and
/// [`Error::Diverged`] is returned.
pub fn train_decoder(
    net: &Network,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    train: &PatchSet,
    val: &PatchSet,
    mut on_log: impl FnMut(&LogRow),
) -> Result<DecoderTraining> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    store.set_frozen_prefix("cls.", true);
    Network::set_encoder_frozen(store, cfg.pretrain_iters == 0);
    let mut opt = AdamW::from_config(store, cfg);
    let mut ema = Ema::new(store, cfg.ema_decay);
    let mut log = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let j = net.columns();
    for it in 0..cfg.iters {
        if it == cfg.pretrain_iters {
            Network::set_encoder_frozen(store, true);
        }
        let lr = cosine_lr(it, cfg.iters, cfg.lr_init, cfg.lr_final);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect();
        let (blur, sharp) = train.batch(&idx, cfg.flips.then_some(&mut rng))?;
        let (blur, sharp) = random_crop(blur, sharp, cfg.patch, &mut rng)?;
        let (loss, grads) = {
            let mut tape = Network::tape(store, cfg.reversible);
            let step = (|| {
                let fv = net.forward(&mut tape, blur, j, cfg.alpha_min)?;
                let s = tape.input(sharp);
                let loss = decoder_loss(&mut tape, &fv.preds, s, cfg.freq_weight)?;
                let value = tape.value(loss)?.data()[0] as f64;
                Ok::<_, Error>((loss, value))
            })();
            let (loss_var, value) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { iter: it }),
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(Error::Diverged { iter: it });
            }
            (value, tape.backward_scalar(loss_var)?)
        };
        store.zero_grad();
        grads.accumulate_into(store)?;
        opt.step(store, lr);
        net.decoder.clamp_alphas(store, cfg.alpha_min);
        ema.update(store);
        loss_acc += loss;
        loss_n += 1;
        let last = it + 1 == cfg.iters;
        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last {
            let psnr = if val.is_empty() {
                vec![]
            } else {
                evaluate_columns(net, &ema.shadow, val, cfg.batch)?
            };
            let row = LogRow {
                iter: it + 1,
                lr,
                loss: loss_acc / loss_n as f64,
                psnr,
            };
            on_log(&row);
            log.push(row);
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    store.set_frozen_prefix("cls.", false);
    Network::set_encoder_frozen(store, false);
    Ok(DecoderTraining { ema, log })
}

/// Classifier log line: iteration, learning rate, mean loss, training accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierLogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Fraction of patches whose predicted class equals the stored class.
pub fn classifier_accuracy(net: &Network, store: &ParamStore<f32>, set: &PatchSet, batch: usize) -> Result<f64> {
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (blur, _) = set.batch(chunk, None)?;
        let (_, pred) = net.classify(store, &blur)?;
        hits += chunk.iter().zip(pred).filter(|(&i, p)| set.classes[i] == *p).count();
    }
    Ok(hits as f64 / set.len().max(1) as f64)
}

/// Classifier phase: only `cls.*` parameters change.
pub fn train_classifier(
    net: &Network,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    train: &PatchSet,
    mut on_log: impl FnMut(&ClassifierLogRow),
) -> Result<Vec<ClassifierLogRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let classes = net.cfg.classes();
    if let Some(&c) = train.classes.iter().find(|&&c| c == 0 || c > classes) {
        return Err(Error::Invalid(format!("class {c} outside 1..={classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    Network::set_classifier_only(store, true);
    let mut opt = AdamW::from_config(store, cfg);
    let mut log = Vec::new();
    let (mut acc_loss, mut acc_n) = (0.0, 0usize);
    let iters = cfg.classifier_iters;
    for it in 0..iters {
        let lr = cosine_lr(it, iters, cfg.classifier_lr, cfg.lr_final);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.classes[i] - 1).collect();
        let (blur, _) = train.batch(&idx, cfg.flips.then_some(&mut rng))?;
        let (loss, grads) = {
            let mut tape = Tape::new(store, crate::autodiff::TapeMode::full_storage());
            let b = tape.input(blur);
            let h = net.backbone.head(&mut tape, b)?;
            let enc = net.backbone.encode(&mut tape, h)?;
            let out = net.classifier.forward(&mut tape, enc[enc.len() - 2])?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss)?.data()[0] as f64;
            (value, tape.backward_scalar(loss)?)
        };
        store.zero_grad();
        grads.accumulate_into(store)?;
        opt.step(store, lr);
        acc_loss += loss;
        acc_n += 1;
        let last = it + 1 == iters;
        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last {
            let row = ClassifierLogRow {
                iter: it + 1,
                lr,
                loss: acc_loss / acc_n as f64,
                accuracy: classifier_accuracy(net, store, train, cfg.batch)?,
            };
            on_log(&row);
            log.push(row);
            acc_loss = 0.0;
            acc_n = 0;
        }
    }
    Network::set_classifier_only(store, false);
    Ok(log)
}
