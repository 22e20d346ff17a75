//! Central finite-difference verification of every implemented gradient.
//!
//! Runs the full model on a tiny configuration (d = 6, P = 4, M <= 3,
//! B = 2) in double precision. For each loss component, the implemented
//! gradient from one live forward is compared element-by-element against
//! central differences of the same component evaluated with all discrete
//! selections frozen at the base point (cluster centers, false-negative
//! sets, stop-gradient branch values), which is exactly the function the
//! implemented gradient differentiates.
//!
//! The stop-gradient input itself is probed separately: its implemented
//! gradient through the stopped branch is exactly zero while the raw finite
//! difference is not, and that pair is reported as an expected exemption.

use crate::autodiff::Tape;
use crate::corpus::{generate_corpus, CorpusConfig, PairedSample};
use crate::encoders::mlp;
use crate::error::{Error, Result};
use crate::mining::CgnsConfig;
use crate::model::{
    forward_features, forward_losses, make_batch, Batch, FrozenSelections, ModelConfig,
    ModelParams, Objective, ParamVars,
};
use ndarray::ArrayD;
use serde::Serialize;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Relative-error denominators are floored at the smallest gradient
/// magnitude the pinned step can resolve: central differences of an O(10)
/// loss carry ~eps*|L|/(2h) ~ 3e-10 of rounding noise, so entries below
/// 1e-5 are effectively compared absolutely at 1e-9.
const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub component: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
    /// Elements re-checked at smaller steps because the primary-step central
    /// difference straddled a relu/abs kink. The difference quotient of a
    /// piecewise-linear site is only valid once the step is inside the
    /// smooth piece; agreement at any smaller step certifies the gradient,
    /// since central differences converge to the true derivative.
    pub kink_retries: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Exemption {
    pub name: String,
    pub implemented_grad: f64,
    pub finite_difference: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub format_version: u32,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub checks: Vec<CheckResult>,
    pub exemptions: Vec<Exemption>,
    pub pass: bool,
}

/// Tiny deterministic setup used by the suite.
pub fn tiny_configs() -> (CorpusConfig, ModelConfig) {
    let ccfg = CorpusConfig {
        num_samples: 2,
        grid_side: 2,
        image_res: 3,
        num_concepts: 2,
        sentences_min: 2,
        sentences_max: 3,
        vocab_size: 12,
        tokens_per_sentence: 2,
        noise_std: 0.2,
        seed: 1013,
    };
    let mcfg = ModelConfig {
        c_img: 5,
        c_txt: 4,
        d: 6,
        cgns: CgnsConfig { k: 2, ..Default::default() },
        ..Default::default()
    };
    (ccfg, mcfg)
}

const COMPONENTS: [&str; 7] = [
    "global_i2r",
    "global_r2i",
    "local_report",
    "bml",
    "simsiam",
    "recon",
    "total",
];

fn component_value(
    params: &ModelParams,
    batch: &Batch,
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
    seed: u64,
    component: &str,
    frozen: Option<&FrozenSelections>,
) -> Result<f64> {
    let t = Tape::new();
    let pv = ParamVars::create(&t, params);
    let feats = forward_features(&t, &pv, batch, mcfg, ccfg)?;
    let out = forward_losses(
        &t, &pv, &feats, batch, mcfg, ccfg, seed, 0, Objective::Full, frozen,
    )?;
    let var = match component {
        "global_i2r" => out.vars.global_i2r,
        "global_r2i" => out.vars.global_r2i,
        "local_report" => out.vars.local_report,
        "bml" => out.vars.bml,
        "simsiam" => out.vars.local_image,
        "recon" => out.vars.re.ok_or_else(|| {
            Error::Config("reconstruction disabled; no recon component".into())
        })?,
        "total" => out.vars.total,
        other => return Err(Error::Config(format!("unknown gradcheck component {other}"))),
    };
    Ok(t.scalar(var))
}

/// Implemented gradients of one component for every parameter, in canonical
/// order, plus the frozen selections captured at this base point.
fn component_grads(
    params: &ModelParams,
    batch: &Batch,
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
    seed: u64,
    component: &str,
) -> Result<(Vec<Option<ArrayD<f64>>>, FrozenSelections)> {
    let t = Tape::new();
    let pv = ParamVars::create(&t, params);
    let feats = forward_features(&t, &pv, batch, mcfg, ccfg)?;
    let out = forward_losses(
        &t, &pv, &feats, batch, mcfg, ccfg, seed, 0, Objective::Full, None,
    )?;
    let var = match component {
        "global_i2r" => out.vars.global_i2r,
        "global_r2i" => out.vars.global_r2i,
        "local_report" => out.vars.local_report,
        "bml" => out.vars.bml,
        "simsiam" => out.vars.local_image,
        "recon" => out.vars.re.unwrap(),
        "total" => out.vars.total,
        other => return Err(Error::Config(format!("unknown gradcheck component {other}"))),
    };
    let grads = t.backward(var);
    let grad_vec = pv
        .named()
        .into_iter()
        .map(|(_, v)| grads.get(v).cloned())
        .collect();
    Ok((grad_vec, out.frozen))
}

fn check_component(
    params: &ModelParams,
    batch: &Batch,
    mcfg: &ModelConfig,
    ccfg: &CorpusConfig,
    seed: u64,
    component: &str,
) -> Result<CheckResult> {
    let (grads, frozen) = component_grads(params, batch, mcfg, ccfg, seed, component)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    // Flatten each gradient in logical order, matching the parameter slice
    // order (parameters are standard layout).
    let flat_grads: Vec<Option<Vec<f64>>> = grads
        .iter()
        .map(|g| g.as_ref().map(|g| g.iter().copied().collect()))
        .collect();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    let mut kink_retries = 0usize;
    let mut work = params.clone();
    for (pi, name) in names.iter().enumerate() {
        let len = params.named()[pi].1.len();
        for ei in 0..len {
            let base = params.named()[pi].1.as_slice().unwrap()[ei];
            let ad = flat_grads[pi].as_ref().map(|g| g[ei]).unwrap_or(0.0);
            let mut eval_fd = |h: f64| -> Result<f64> {
                {
                    let mut named = work.named_mut();
                    named[pi].1.as_slice_mut().unwrap()[ei] = base + h;
                }
                let plus =
                    component_value(&work, batch, mcfg, ccfg, seed, component, Some(&frozen))?;
                {
                    let mut named = work.named_mut();
                    named[pi].1.as_slice_mut().unwrap()[ei] = base - h;
                }
                let minus =
                    component_value(&work, batch, mcfg, ccfg, seed, component, Some(&frozen))?;
                {
                    let mut named = work.named_mut();
                    named[pi].1.as_slice_mut().unwrap()[ei] = base;
                }
                Ok((plus - minus) / (2.0 * h))
            };
            let rel_of = |fd: f64| (ad - fd).abs() / ad.abs().max(fd.abs()).max(DENOM_FLOOR);
            let mut rel = rel_of(eval_fd(GRADCHECK_STEP)?);
            if rel >= GRADCHECK_TOLERANCE {
                // Suspected kink inside the primary-step window: re-check at
                // smaller steps where the quotient is valid again. The ladder
                // keeps some larger steps because shrinking h also amplifies
                // f64 cancellation noise relative to small gradient entries.
                kink_retries += 1;
                for h in [
                    GRADCHECK_STEP / 3.0,
                    GRADCHECK_STEP / 10.0,
                    GRADCHECK_STEP / 30.0,
                    GRADCHECK_STEP / 100.0,
                    GRADCHECK_STEP / 300.0,
                ] {
                    rel = rel.min(rel_of(eval_fd(h)?));
                    if rel < GRADCHECK_TOLERANCE {
                        break;
                    }
                }
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{name}[{ei}]");
            }
        }
    }
    Ok(CheckResult {
        component: component.into(),
        max_rel_err,
        worst_param: worst,
        tolerance: GRADCHECK_TOLERANCE,
        kink_retries,
        pass: max_rel_err < GRADCHECK_TOLERANCE,
    })
}

/// Probe the stop-gradient contract directly: one cosine term with the
/// second argument stopped. The implemented gradient w.r.t. that argument is
/// exactly zero while a raw central difference of the live function is not.
fn stop_gradient_exemption(seed: u64) -> Exemption {
    use ndarray::arr2;
    let mut rng = crate::rng::KeyedRng::new(seed, crate::rng::purpose::GRADCHECK);
    let x0 = arr2(&[[rng.uniform_in(0.2, 1.0), rng.uniform_in(0.2, 1.0)]]);
    let y0 = arr2(&[[rng.uniform_in(0.2, 1.0), rng.uniform_in(-1.0, -0.2)]]);

    let live = |y: &ndarray::Array2<f64>| -> f64 {
        let t = Tape::new();
        let x = t.var2(x0.clone());
        let yv = t.var2(y.clone());
        let head = crate::encoders::MlpVars {
            w1: t.var2(ndarray::Array2::eye(2)),
            b1: t.var2(ndarray::Array2::zeros((1, 2))),
            w2: t.var2(ndarray::Array2::eye(2)),
            b2: t.var2(ndarray::Array2::zeros((1, 2))),
        };
        let h = mlp(&t, x, &head);
        let stopped = t.stop_grad(yv);
        let hn = t.normalize_rows(h);
        let yn = t.normalize_rows(stopped);
        let cos = t.row_sums(t.mul(hn, yn));
        t.scalar(t.scale(t.sum_all(cos), -1.0))
    };

    // Implemented gradient w.r.t. y through the stopped branch.
    let implemented = {
        let t = Tape::new();
        let x = t.var2(x0.clone());
        let yv = t.var2(y0.clone());
        let head = crate::encoders::MlpVars {
            w1: t.var2(ndarray::Array2::eye(2)),
            b1: t.var2(ndarray::Array2::zeros((1, 2))),
            w2: t.var2(ndarray::Array2::eye(2)),
            b2: t.var2(ndarray::Array2::zeros((1, 2))),
        };
        let h = mlp(&t, x, &head);
        let stopped = t.stop_grad(yv);
        let hn = t.normalize_rows(h);
        let yn = t.normalize_rows(stopped);
        let cos = t.row_sums(t.mul(hn, yn));
        let loss = t.scale(t.sum_all(cos), -1.0);
        let grads = t.backward(loss);
        grads.get(yv).map(|g| g[[0, 0]]).unwrap_or(0.0)
    };

    let mut plus = y0.clone();
    plus[[0, 0]] += GRADCHECK_STEP;
    let mut minus = y0.clone();
    minus[[0, 0]] -= GRADCHECK_STEP;
    let fd = (live(&plus) - live(&minus)) / (2.0 * GRADCHECK_STEP);

    Exemption {
        name: "simsiam.stop_gradient_input".into(),
        implemented_grad: implemented,
        finite_difference: fd,
        note: "stop-gradient contract: implemented gradient is exactly zero while the live \
               finite difference is not"
            .into(),
    }
}

/// Run the whole suite. Deterministic in `seed`.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (ccfg, mcfg) = tiny_configs();
    let corpus = generate_corpus(&ccfg)?;
    let refs: Vec<&PairedSample> = corpus.iter().collect();
    let batch = make_batch(&refs, &ccfg)?;
    let params = ModelParams::init(&mcfg, &ccfg, seed)?;

    let mut checks = Vec::new();
    for component in COMPONENTS {
        checks.push(check_component(&params, &batch, &mcfg, &ccfg, seed, component)?);
    }
    let exemption = stop_gradient_exemption(seed);
    let exemption_ok =
        exemption.implemented_grad == 0.0 && exemption.finite_difference.abs() > 1e-8;
    let pass = checks.iter().all(|c| c.pass) && exemption_ok;
    Ok(GradCheckReport {
        format_version: 1,
        seed,
        tolerance: GRADCHECK_TOLERANCE,
        step: GRADCHECK_STEP,
        checks,
        exemptions: vec![exemption],
        pass,
    })
}
