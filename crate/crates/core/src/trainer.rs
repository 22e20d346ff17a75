//! Two-stage optimization loop with cosine learning-rate decay.
//!
//! Stage 1 optimizes the alignment objective; stage 2 adds masked
//! reconstruction (or, behind a flag, optimizes reconstruction alone).
//! Batch order is reshuffled per epoch from a stream keyed by
//! `(seed, stage, epoch)`, the last incomplete batch is dropped, and the
//! per-step k-means seed and mask draws are keyed by the global step, so a
//! run is a pure function of `(seed, corpus, config)` and can resume from a
//! checkpoint bit-identically.

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::corpus::{CorpusConfig, PairedSample};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{
    first_non_finite, forward_features, forward_losses, make_batch, ModelConfig, ModelParams,
    Objective, ParamVars,
};
use crate::rng::{mix3, purpose, KeyedRng};
use crate::autodiff::Tape;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Objective {
    Full,
    ReconOnly,
}

impl Default for Stage2Objective {
    fn default() -> Self {
        Stage2Objective::Full
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Steps between interim checkpoints handed to the sink; 0 disables.
    pub checkpoint_interval: u64,
    pub stage2_objective: Stage2Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_init: 1e-3,
            stage1_epochs: 10,
            stage2_epochs: 20,
            optimizer: OptimizerKind::default(),
            seed: 42,
            checkpoint_interval: 0,
            stage2_objective: Stage2Objective::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size ({}) must be >= 2",
                self.batch_size
            )));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::Config(format!("lr_init ({}) must be > 0", self.lr_init)));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config("adam hyperparameters out of range".into()));
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine_lr: total_steps must be positive".into()));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_init * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Optimizer over the canonical parameter order. Parameters that received no
/// gradient this step are left untouched, moments included.
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .named()
            .iter()
            .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
            .collect();
        Self { kind, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn state(&self) -> OptimizerState {
        match self.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { .. } => {
                OptimizerState::Adam { t: self.t, m: self.m.clone(), v: self.v.clone() }
            }
        }
    }

    pub fn restore(kind: OptimizerKind, params: &ModelParams, state: &OptimizerState) -> Result<Self> {
        let mut opt = Self::new(kind, params);
        match (&opt.kind, state) {
            (OptimizerKind::Sgd, OptimizerState::Sgd) => {}
            (OptimizerKind::Adam { .. }, OptimizerState::Adam { t, m, v }) => {
                opt.t = *t;
                opt.m = m.clone();
                opt.v = v.clone();
            }
            _ => {
                return Err(Error::Config(
                    "checkpoint optimizer state does not match configured optimizer".into(),
                ))
            }
        }
        Ok(opt)
    }

    /// Apply one update. `grads` is aligned with the canonical order; `None`
    /// entries are skipped.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<ArrayD<f64>>], lr: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, slot), g) in params.named_mut().into_iter().zip(grads.iter()) {
                    if let Some(g) = g {
                        slot.zip_mut_with(g, |p, &gr| *p -= lr * gr);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, ((_, slot), g)) in
                    params.named_mut().into_iter().zip(grads.iter()).enumerate()
                {
                    let Some(g) = g else { continue };
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    m.zip_mut_with(g, |mm, &gr| *mm = beta1 * *mm + (1.0 - beta1) * gr);
                    v.zip_mut_with(g, |vv, &gr| *vv = beta2 * *vv + (1.0 - beta2) * gr * gr);
                    ndarray::Zip::from(slot)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &mm, &vv| {
                            let mhat = mm / bc1;
                            let vhat = vv / bc2;
                            *p -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Mutable training state between steps and across stages.
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub stage: u8,
    pub global_step: u64,
    pub stage_step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, tcfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(tcfg.optimizer.clone(), &params);
        Self { params, optimizer, stage: 1, global_step: 0, stage_step: 0, seed: tcfg.seed }
    }

    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            stage: self.stage,
            global_step: self.global_step,
            stage_step: self.stage_step,
            config_hash,
            params: self.params.clone(),
            optimizer: self.optimizer.state(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, tcfg: &TrainConfig) -> Result<Self> {
        let optimizer =
            Optimizer::restore(tcfg.optimizer.clone(), &ckpt.params, &ckpt.optimizer)?;
        Ok(Self {
            params: ckpt.params,
            optimizer,
            stage: ckpt.stage,
            global_step: ckpt.global_step,
            stage_step: ckpt.stage_step,
            seed: ckpt.seed,
        })
    }
}

pub const METRICS_HEADER: &str =
    "step,stage,lr,l_g_i2r,l_g_r2i,l_local_report,l_bml,l_local_img,l_re,total";

pub fn metrics_row(step: u64, stage: u8, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{step},{stage},{lr},{},{},{},{},{},{},{}",
        b.l_global_i2r,
        b.l_global_r2i,
        b.l_local_report,
        b.l_bml,
        b.l_local_image,
        b.l_re,
        b.total
    )
}

/// Interim checkpoint sink invoked every `checkpoint_interval` steps.
pub type CheckpointSink<'a> = &'a mut dyn FnMut(&TrainState) -> Result<()>;

fn run_stage(
    state: &mut TrainState,
    stage: u8,
    epochs: usize,
    objective: Objective,
    corpus: &[PairedSample],
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    rows: &mut Vec<String>,
    mut sink: Option<CheckpointSink<'_>>,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptySplit("training corpus".into()));
    }
    let bs = tcfg.batch_size;
    let steps_per_epoch = corpus.len() / bs;
    if epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch_size ({bs}) exceeds the training corpus ({})",
            corpus.len()
        )));
    }
    let total_steps = (epochs * steps_per_epoch) as u64;
    if total_steps == 0 {
        return Ok(());
    }

    let start_epoch = (state.stage_step / steps_per_epoch as u64) as usize;
    for epoch in start_epoch..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = KeyedRng::new(tcfg.seed, mix3(purpose::SHUFFLE, stage as u64, epoch as u64));
        rng.shuffle(&mut order);

        let start_batch = if epoch == start_epoch {
            (state.stage_step % steps_per_epoch as u64) as usize
        } else {
            0
        };
        for bi in start_batch..steps_per_epoch {
            let lr = cosine_lr(state.stage_step, total_steps, tcfg.lr_init)?;
            let refs: Vec<&PairedSample> =
                order[bi * bs..(bi + 1) * bs].iter().map(|&i| &corpus[i]).collect();
            let batch = make_batch(&refs, ccfg)?;

            let t = Tape::new();
            let pv = ParamVars::create(&t, &state.params);
            let feats = forward_features(&t, &pv, &batch, mcfg, ccfg)?;
            let out = forward_losses(
                &t,
                &pv,
                &feats,
                &batch,
                mcfg,
                ccfg,
                tcfg.seed,
                state.global_step,
                objective,
                None,
            )?;
            if let Some(name) = first_non_finite(&out.breakdown) {
                return Err(Error::NonFinite(format!(
                    "{name} at step {} (stage {stage})",
                    state.global_step
                )));
            }
            let grads = t.backward(out.vars.total);
            let grad_vec: Vec<Option<ArrayD<f64>>> = pv
                .named()
                .into_iter()
                .map(|(_, var)| grads.get(var).cloned())
                .collect();
            state.optimizer.step(&mut state.params, &grad_vec, lr);

            rows.push(metrics_row(state.global_step, stage, lr, &out.breakdown));
            state.global_step += 1;
            state.stage_step += 1;

            if tcfg.checkpoint_interval > 0
                && state.global_step % tcfg.checkpoint_interval == 0
            {
                if let Some(sink) = sink.as_mut() {
                    sink(state)?;
                }
            }
        }
    }
    Ok(())
}

/// Stage 1: alignment objective over `stage1_epochs`.
pub fn train_stage1(
    corpus: &[PairedSample],
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<(TrainState, Vec<String>)> {
    tcfg.validate()?;
    mcfg.validate()?;
    let params = ModelParams::init(mcfg, ccfg, tcfg.seed)?;
    let mut state = TrainState::new(params, tcfg);
    let mut rows = Vec::new();
    run_stage(
        &mut state,
        1,
        tcfg.stage1_epochs,
        Objective::Alignment,
        corpus,
        ccfg,
        mcfg,
        tcfg,
        &mut rows,
        sink,
    )?;
    Ok((state, rows))
}

/// Stage 2 continues from a stage-1 (or mid-stage-2) state with the
/// configured stage-2 objective.
pub fn train_stage2(
    mut state: TrainState,
    corpus: &[PairedSample],
    ccfg: &CorpusConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<(TrainState, Vec<String>)> {
    tcfg.validate()?;
    if state.stage == 1 {
        state.stage = 2;
        state.stage_step = 0;
    } else if state.stage != 2 {
        return Err(Error::Config(format!("cannot continue from stage {}", state.stage)));
    }
    let objective = match tcfg.stage2_objective {
        Stage2Objective::Full => Objective::Full,
        Stage2Objective::ReconOnly => Objective::ReconOnly,
    };
    let mut rows = Vec::new();
    run_stage(
        &mut state,
        2,
        tcfg.stage2_epochs,
        objective,
        corpus,
        ccfg,
        mcfg,
        tcfg,
        &mut rows,
        sink,
    )?;
    Ok((state, rows))
}
