//! Loss, Adam, cosine schedule and the training / evaluation loops.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::haze::Pair;
use crate::metrics::MetricReport;
use crate::network::{forward, KsformerModel, NetworkConfig, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate at step 0.
    pub lr: f32,
    pub lr_min: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub iterations: usize,
    /// Weight of the spectral L1 term.
    pub spectral_weight: f32,
    /// Weight of the `1 - SSIM` term.
    pub ssim_weight: f32,
    /// Training patch side; must equal the network input side.
    pub crop: usize,
    pub seed: u64,
    /// Validation PSNR is logged every this many steps (0 disables).
    pub eval_every: usize,
    /// A checkpoint is written every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.5e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            iterations: 2000,
            spectral_weight: 0.2,
            ssim_weight: 0.25,
            crop: 64,
            seed: 0,
            eval_every: 100,
            checkpoint_every: 500,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.spectral_weight < 0.0 || self.ssim_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Both config tables, as read from a TOML file with optional `[network]`
/// and `[train]` sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Cosine annealing from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f32, lr_min: f32) -> Result<f32> {
    if step > total {
        return Err(Error::Param(format!("step {step} is past the schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    let (hi, lo) = (lr as f64, lr_min as f64);
    Ok((lo + 0.5 * (hi - lo) * (1.0 + phase.cos())) as f32)
}

/// `L1 + w_f·spectral_L1(pred - target) + w_s·(1 - SSIM)`, as a scalar var.
/// Zero weights drop their terms from the tape entirely.
pub fn dehaze_loss(tape: &mut Tape, pred: Var, target: &Tensor, spectral_weight: f32, ssim_weight: f32) -> Result<Var> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let ad = tape.abs(diff);
    let mut loss = tape.mean(ad);
    if spectral_weight > 0.0 {
        let f = tape.spectral_l1(diff)?;
        let f = tape.scale(f, spectral_weight);
        loss = tape.add(loss, f)?;
    }
    if ssim_weight > 0.0 {
        let s = tape.ssim(pred, target)?;
        let s = tape.scale(s, -ssim_weight);
        let one = tape.constant(Tensor::scalar(ssim_weight));
        let term = tape.add(one, s)?;
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Adam with bias correction. Moment buffers are allocated on first use of
/// each slot.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam { beta1, beta2, eps, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Starts a new step; call before the per-slot [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f32) -> Result<()> {
        param.expect_same_shape(grad, "adam")?;
        if self.steps == 0 {
            return Err(Error::Training("Adam::update before begin_step".into()));
        }
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        let n = param.numel();
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        if m.len() != n {
            *m = vec![0.0; n];
            *v = vec![0.0; n];
        }
        let t = self.steps as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m as f64 / c1;
            let vhat = *v as f64 / c2;
            *p -= (lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
        }
        Ok(())
    }

    /// One full step over a flat list of parameters.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Training(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        self.begin_step();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g, lr)?;
        }
        Ok(())
    }
}

/// Mean loss over `batch` and the gradient of every model parameter, in
/// visit order.
pub fn loss_and_grads(model: &KsformerModel, batch: &[Pair], cfg: &TrainConfig) -> Result<(f32, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut total = None;
    for pair in batch {
        let x = tape.constant(pair.hazy.clone());
        let y = forward(&mut tape, x, &bound)?;
        let l = dehaze_loss(&mut tape, y, &pair.clean, cfg.spectral_weight, cfg.ssim_weight)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    let mut grads = tape.backward(total)?;
    let mut out = Vec::new();
    bound.visit(&mut |_, &v| {
        out.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))));
    });
    if let Some(bad) = out.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient for parameter {bad}")));
    }
    Ok((loss, out))
}

/// One optimizer step; returns the batch loss before the update.
pub fn train_step(model: &mut KsformerModel, batch: &[Pair], opt: &mut Adam, cfg: &TrainConfig, lr: f32) -> Result<f32> {
    let (loss, grads) = loss_and_grads(model, batch, cfg)?;
    opt.begin_step();
    let mut slot = 0;
    let mut err = Ok(());
    model.visit_mut(&mut |_, p| {
        if err.is_ok() {
            err = opt.update(slot, p, &grads[slot], lr);
        }
        slot += 1;
    });
    err.map(|_| loss)
}

/// Random `crop × crop` patch of a pair, optionally mirrored left-right.
pub fn sample_patch(pair: &Pair, crop: usize, flip: bool, rng: &mut impl Rng) -> Result<Pair> {
    let (h, w, c) = pair.clean.hwc()?;
    if pair.hazy.shape() != pair.clean.shape() {
        return Err(Error::Dimension {
            op: "sample_patch",
            lhs: pair.hazy.shape().to_vec(),
            rhs: pair.clean.shape().to_vec(),
        });
    }
    if crop > h || crop > w {
        return Err(Error::Config(format!("crop {crop} exceeds image size {h}x{w}")));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let mirror = flip && rng.gen_bool(0.5);
    let cut = |t: &Tensor| {
        Tensor::from_fn([crop, crop, c], |i| {
            let (y, x, ch) = (i / (crop * c), (i / c) % crop, i % c);
            let x = if mirror { crop - 1 - x } else { x };
            t.data()[((y0 + y) * w + x0 + x) * c + ch]
        })
    };
    Ok(Pair { clean: cut(&pair.clean), hazy: cut(&pair.hazy) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Batch loss at every step.
    pub losses: Vec<f32>,
    /// `(step, mean validation PSNR)` at each evaluation point.
    pub val_psnr: Vec<(usize, f64)>,
    /// Validation metrics after the last step, when a validation set exists.
    pub final_val: Option<MetricReport>,
}

/// Trains `model` in place. Writes a `step,lr,loss,psnr_val` CSV row per
/// step to `log`, and checkpoints to `checkpoint_dir` if given.
pub fn train(
    model: &mut KsformerModel,
    train_set: &[Pair],
    val_set: &[Pair],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    if cfg.crop != model.config.side {
        return Err(Error::Config(format!(
            "crop {} must equal the network input side {}",
            cfg.crop, model.config.side
        )));
    }
    let io_err = |e| Error::io("training log", e);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::from_config(cfg);
    let mut report = TrainReport::default();
    writeln!(log, "step,lr,loss,psnr_val").map_err(io_err)?;
    for step in 0..cfg.iterations {
        let lr = cosine_lr(step, cfg.iterations, cfg.lr, cfg.lr_min)?;
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..train_set.len());
                sample_patch(&train_set[i], cfg.crop, cfg.flip, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(model, &batch, &mut opt, cfg, lr)?;
        report.losses.push(loss);
        let done = step + 1;
        let eval_now = !val_set.is_empty() && cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.iterations);
        let psnr_val = if eval_now {
            let p = evaluate(model, val_set)?.psnr_db;
            report.val_psnr.push((done, p));
            p.to_string()
        } else {
            String::new()
        };
        writeln!(log, "{done},{lr},{loss},{psnr_val}").map_err(io_err)?;
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                model.save(dir.join(format!("step_{done:06}.ksf")))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(dir.join("model.ksf"))?;
    }
    if !val_set.is_empty() {
        report.final_val = Some(evaluate(model, val_set)?);
    }
    Ok(report)
}

/// Splits off the last tenth of `pairs` (at least one pair when there are
/// two or more) as a held-out set: `(train, held_out)`.
pub fn split_holdout(pairs: &[Pair]) -> (&[Pair], &[Pair]) {
    let held = if pairs.len() < 2 { 0 } else { (pairs.len() / 10).max(1) };
    pairs.split_at(pairs.len() - held)
}

/// Mean PSNR / SSIM of `predict(pair)` against each clean image.
pub fn evaluate_with(pairs: &[Pair], mut predict: impl FnMut(&Pair) -> Result<Tensor>) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Param("evaluation set is empty".into()));
    }
    let mut sum = MetricReport::default();
    for p in pairs {
        let pred = predict(p)?;
        let r = MetricReport::between(&pred, &p.clean)?;
        sum.psnr_db += r.psnr_db;
        sum.ssim += r.ssim;
    }
    let n = pairs.len() as f64;
    Ok(MetricReport { psnr_db: sum.psnr_db / n, ssim: sum.ssim / n })
}

pub fn evaluate(model: &KsformerModel, pairs: &[Pair]) -> Result<MetricReport> {
    evaluate_with(pairs, |p| model.infer(&p.hazy))
}

/// Metrics of the untouched hazy inputs.
pub fn evaluate_identity(pairs: &[Pair]) -> Result<MetricReport> {
    evaluate_with(pairs, |p| Ok(p.hazy.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Trains each variant from the same seed and data and evaluates it.
pub fn ablate(
    network: &NetworkConfig,
    train_cfg: &TrainConfig,
    init_seed: u64,
    train_set: &[Pair],
    val_set: &[Pair],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let cfg = NetworkConfig { variant, ..network.clone() };
        let mut model = KsformerModel::new(cfg, init_seed)?;
        train(&mut model, train_set, &[], train_cfg, &mut std::io::sink(), None)?;
        let m = evaluate(&model, val_set)?;
        let row = AblationRow { variant, params: model.param_count(), psnr_db: m.psnr_db, ssim: m.ssim };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
