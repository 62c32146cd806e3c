//! Latent search by back-propagation through a frozen generator, and its
//! quantization-constrained variant solved with scaled-form ADMM.
//!
//! The search is written against [`Objective`], which maps a latent `z` to
//! the scalar `F(x, G(z))` on a tape. [`SignalObjective`] is the real one;
//! tests plug in identity or affine generators.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{feature_loss_with_targets, feature_targets, image_loss, LossSpec};
use crate::nn::{ModelBundle, SignalKind};
use crate::quant::{quantize_project, Codebook};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            o => Err(Error::InvalidArgument(format!("unknown optimizer {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Encoder,
    Zeros,
    Given(Vec<f64>),
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Init::Encoder),
            "zeros" => Ok(Init::Zeros),
            o => Err(Error::InvalidArgument(format!("unknown init {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmConfig {
    pub mu: f64,
    pub admm_iters: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub init: Init,
    /// ADMM stops once `max|z - u|` is at most this; refinement stops once a
    /// pass improves the loss by less than this.
    pub stop_tol: f64,
    /// Factor applied to `mu` when the residual stalls.
    pub mu_growth: f64,
    /// Iterations between stall checks.
    pub mu_window: usize,
    /// The residual has stalled if its peak over a window is above this
    /// fraction of the previous window's peak.
    pub stall_ratio: f64,
    /// Step halvings tried before an inner step is abandoned.
    pub max_backoff: u32,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            mu: 0.1,
            admm_iters: 30,
            inner_steps: 10,
            step_size: 0.01,
            optimizer: Optimizer::Adam,
            init: Init::Encoder,
            stop_tol: 1e-6,
            mu_growth: 1.5,
            mu_window: 5,
            stall_ratio: 0.5,
            max_backoff: 5,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("mu must be positive");
        }
        if self.admm_iters == 0 || self.inner_steps == 0 {
            return bad("admm_iters and inner_steps must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.stop_tol >= 0.0) {
            return bad("stop_tol must be non-negative");
        }
        if !(self.mu_growth >= 1.0) || self.mu_window == 0 {
            return bad("mu_growth must be >= 1 and mu_window >= 1");
        }
        Ok(())
    }
}

/// `F(x, G(z))` as a function of the latent.
pub trait Objective {
    fn dim(&self) -> usize;

    fn loss<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>>;

    /// Feed-forward latent estimate, if the objective has an encoder.
    fn encoder_init(&self) -> Option<Result<Vec<f64>>> {
        None
    }

    fn value(&self, z: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let zv = tape.constant(Tensor::from_vec(z.to_vec()));
        Ok(self.loss(&tape, zv)?.item())
    }
}

/// The reconstruction objective of a target signal under a model bundle.
pub struct SignalObjective<'a> {
    bundle: &'a ModelBundle,
    x: Tensor,
    spec: &'a LossSpec,
    targets: Vec<Tensor>,
}

impl<'a> SignalObjective<'a> {
    pub fn new(bundle: &'a ModelBundle, x: &Tensor, spec: &'a LossSpec) -> Result<Self> {
        if x.shape() != bundle.signal_shape() {
            return Err(Error::shape(
                "objective",
                format!(
                    "signal {:?}, model expects {:?}",
                    x.shape(),
                    bundle.signal_shape()
                ),
            ));
        }
        if spec.kind != bundle.signal() {
            return Err(Error::InvalidArgument(
                "loss kind does not match the model".into(),
            ));
        }
        spec.validate(bundle)?;
        let targets = match spec.kind {
            SignalKind::Image => Vec::new(),
            SignalKind::Speech => {
                let disc = bundle.discriminator().ok_or(Error::MissingDiscriminator)?;
                feature_targets(disc, x, &spec.feature_layers)?
            }
        };
        Ok(SignalObjective {
            bundle,
            x: x.clone(),
            spec,
            targets,
        })
    }
}

impl Objective for SignalObjective<'_> {
    fn dim(&self) -> usize {
        self.bundle.latent_dim()
    }

    fn loss<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let gen = self.bundle.generator();
        let g = gen.forward(&gen.bind(tape, false), z)?;
        let x = tape.constant(self.x.clone());
        match self.spec.kind {
            SignalKind::Image => image_loss(x, g, self.spec.alpha, self.spec.ms_ssim_scales),
            SignalKind::Speech => {
                let disc = self
                    .bundle
                    .discriminator()
                    .ok_or(Error::MissingDiscriminator)?;
                let dp = disc.bind(tape, false);
                feature_loss_with_targets(
                    x,
                    g,
                    disc,
                    &dp,
                    &self.spec.feature_layers,
                    &self.targets,
                    self.spec.alpha,
                )
            }
        }
    }

    fn encoder_init(&self) -> Option<Result<Vec<f64>>> {
        Some(self.bundle.encoder_forward(&self.x))
    }
}

/// Optimizer moments for one descent run.
#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Moments {
    fn direction(&mut self, opt: Optimizer, grad: &[f64]) -> Vec<f64> {
        match opt {
            Optimizer::Sgd => grad.to_vec(),
            Optimizer::Adam => {
                if self.m.len() != grad.len() {
                    *self = Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        t: 0,
                    };
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                grad.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                        self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                        (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub z: Vec<f64>,
    /// Always elementwise a codebook center.
    pub u: Vec<f64>,
    /// Scaled dual variable.
    pub eta: Vec<f64>,
    pub k: usize,
    /// `F(x, G(z))` after each z-update.
    pub loss_trace: Vec<f64>,
    /// Current penalty; starts at `config.mu`.
    pub mu: f64,
}

impl AdmmState {
    /// `u = Q(z)`, `eta = 0`.
    pub fn new(z: Vec<f64>, codebook: &Codebook, mu: f64) -> Self {
        let (u, _) = quantize_project(&z, codebook);
        let eta = vec![0.0; z.len()];
        AdmmState {
            z,
            u,
            eta,
            k: 0,
            loss_trace: Vec::new(),
            mu,
        }
    }

    pub fn residual(&self) -> f64 {
        max_abs_diff(&self.z, &self.u)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// One evaluation of `F + (mu/2)|z - c|^2`.
struct Eval {
    f: f64,
    total: f64,
    grad: Vec<f64>,
}

fn evaluate<O: Objective + ?Sized>(
    obj: &O,
    z: &[f64],
    prox: Option<(&[f64], f64)>,
) -> Result<Eval> {
    let tape = Tape::new();
    let zv = tape.var(Tensor::from_vec(z.to_vec()));
    let loss = obj.loss(&tape, zv)?;
    let f = loss.item();
    let mut grad = tape.backward(loss)?.wrt(zv).into_data();
    let mut total = f;
    if let Some((c, mu)) = prox {
        let mut sq = 0.0;
        for ((g, &zi), &ci) in grad.iter_mut().zip(z).zip(c) {
            let d = zi - ci;
            sq += d * d;
            *g += mu * d;
        }
        total += 0.5 * mu * sq;
    }
    Ok(Eval { f, total, grad })
}

fn divergence(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { iteration },
        e => e,
    }
}

/// Runs `steps` descent steps from `z` on `F (+ prox)`, halving the step on
/// any increase. Returns the final point, its evaluation, and the number of
/// gradient evaluations spent.
fn descend<O: Objective + ?Sized>(
    obj: &O,
    z: Vec<f64>,
    prox: Option<(&[f64], f64)>,
    steps: usize,
    config: &AdmmConfig,
    moments: &mut Moments,
    iteration: usize,
    on_step: impl FnMut(f64),
) -> Result<(Vec<f64>, Eval, usize)> {
    let cur = evaluate(obj, &z, prox).map_err(|e| divergence(e, iteration))?;
    let (z, cur, evals) = descend_from(
        obj, z, cur, prox, steps, config, moments, iteration, on_step,
    )?;
    Ok((z, cur, evals + 1))
}

/// `descend` from a point whose evaluation is already known.
fn descend_from<O: Objective + ?Sized>(
    obj: &O,
    mut z: Vec<f64>,
    mut cur: Eval,
    prox: Option<(&[f64], f64)>,
    steps: usize,
    config: &AdmmConfig,
    moments: &mut Moments,
    iteration: usize,
    mut on_step: impl FnMut(f64),
) -> Result<(Vec<f64>, Eval, usize)> {
    let mut evals = 0;
    for _ in 0..steps {
        let dir = moments.direction(config.optimizer, &cur.grad);
        let mut accepted = false;
        let mut last_err = None;
        for j in 0..=config.max_backoff {
            let step = config.step_size * 0.5f64.powi(j as i32);
            let trial: Vec<f64> = z.iter().zip(&dir).map(|(zi, d)| zi - step * d).collect();
            evals += 1;
            match evaluate(obj, &trial, prox) {
                Ok(e) if e.total <= cur.total => {
                    z = trial;
                    cur = e;
                    accepted = true;
                    break;
                }
                Ok(_) => last_err = None,
                Err(e @ Error::NonFinite(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            if let Some(e) = last_err {
                return Err(divergence(e, iteration));
            }
        }
        on_step(cur.f);
    }
    Ok((z, cur, evals))
}

fn initial_latent<O: Objective + ?Sized>(obj: &O, init: &Init) -> Result<Vec<f64>> {
    let z = match init {
        Init::Zeros => vec![0.0; obj.dim()],
        Init::Given(z) => z.clone(),
        Init::Encoder => obj
            .encoder_init()
            .ok_or_else(|| Error::InvalidArgument("objective has no encoder".into()))??,
    };
    if z.len() != obj.dim() {
        return Err(Error::shape(
            "latent",
            format!(
                "initial latent has {} elements, expected {}",
                z.len(),
                obj.dim()
            ),
        ));
    }
    Ok(z)
}

/// Unconstrained search of `admm_iters * inner_steps` steps. The trace holds
/// the initial loss followed by the loss after every step.
pub fn latent_search_with<O: Objective + ?Sized>(
    obj: &O,
    config: &AdmmConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let z0 = initial_latent(obj, &config.init)?;
    let mut trace = Vec::new();
    let mut moments = Moments::default();
    let steps = config.admm_iters * config.inner_steps;
    let first = evaluate(obj, &z0, None).map_err(|e| divergence(e, 0))?;
    trace.push(first.f);
    let (z, _, _) = descend(obj, z0, None, steps, config, &mut moments, 0, |f| {
        trace.push(f)
    })?;
    Ok((z, trace))
}

pub fn latent_search(
    bundle: &ModelBundle,
    x: &Tensor,
    spec: &LossSpec,
    config: &AdmmConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    latent_search_with(&SignalObjective::new(bundle, x, spec)?, config)
}

/// `inner_steps` steps on `F(z) + (mu/2)|z - u + eta|^2` from the current
/// `z`, with fresh optimizer moments since the subproblem changes every call.
pub fn z_update<O: Objective + ?Sized>(
    state: &mut AdmmState,
    obj: &O,
    config: &AdmmConfig,
) -> Result<Vec<f64>> {
    Ok(z_update_counted(state, obj, config)?.0)
}

fn z_update_counted<O: Objective + ?Sized>(
    state: &mut AdmmState,
    obj: &O,
    config: &AdmmConfig,
) -> Result<(Vec<f64>, f64, usize)> {
    let center: Vec<f64> = state.u.iter().zip(&state.eta).map(|(u, e)| u - e).collect();
    let prox = Some((center.as_slice(), state.mu));
    let at = |z: &[f64]| evaluate(obj, z, prox).map_err(|e| divergence(e, state.k));
    // Start from the proximal center when it already beats the current z:
    // once mu dominates, a few small steps cannot follow u - eta.
    let here = at(&state.z)?;
    let there = at(&center)?;
    let (start, eval) = if there.total < here.total {
        (center.clone(), there)
    } else {
        (state.z.clone(), here)
    };
    let (z, eval, evals) = descend_from(
        obj,
        start,
        eval,
        prox,
        config.inner_steps,
        config,
        &mut Moments::default(),
        state.k,
        |_| {},
    )?;
    Ok((z, eval.f, evals + 2))
}

/// `u = Q(z + eta)`.
pub fn u_update(state: &AdmmState, codebook: &Codebook) -> Vec<f64> {
    let shifted: Vec<f64> = state.z.iter().zip(&state.eta).map(|(z, e)| z + e).collect();
    quantize_project(&shifted, codebook).0
}

/// `eta + z - u`.
pub fn eta_update(state: &AdmmState) -> Vec<f64> {
    state
        .eta
        .iter()
        .zip(&state.z)
        .zip(&state.u)
        .map(|((e, z), u)| e + (z - u))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmReport {
    /// `F(x, G(z))` after each ADMM iteration.
    pub loss_trace: Vec<f64>,
    /// `max|z - u|` after each ADMM iteration.
    pub residual_trace: Vec<f64>,
    pub mu_trace: Vec<f64>,
    pub admm_iterations: usize,
    pub refine_passes: usize,
    /// Forward/backward evaluations, including rejected backoff trials.
    pub gradient_steps: usize,
    /// Loss of `Q(encoder init)`, when the objective has an encoder.
    pub one_shot_loss: Option<f64>,
    /// Loss of the returned quantized latent.
    pub final_loss: f64,
}

impl AdmmReport {
    /// Line-oriented log: one `iter` line per ADMM iteration, then a summary.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for (i, (l, r)) in self.loss_trace.iter().zip(&self.residual_trace).enumerate() {
            let _ = writeln!(
                s,
                "iter {} loss {:.6e} residual {:.6e} mu {:.4e}",
                i + 1,
                l,
                r,
                self.mu_trace[i]
            );
        }
        if let Some(b) = self.one_shot_loss {
            let _ = writeln!(s, "one_shot_loss {b:.6e}");
        }
        let _ = writeln!(
            s,
            "final_loss {:.6e} admm_iterations {} refine_passes {} gradient_steps {}",
            self.final_loss, self.admm_iterations, self.refine_passes, self.gradient_steps
        );
        s
    }
}

/// Quantization-constrained search. The returned latent is always on the
/// codebook and never worse than `Q(encoder init)` when an encoder exists.
pub fn admm_quantized_search_with<O: Objective + ?Sized>(
    obj: &O,
    codebook: &Codebook,
    config: &AdmmConfig,
) -> Result<(Vec<usize>, Vec<f64>, AdmmReport)> {
    config.validate()?;
    let z0 = initial_latent(obj, &config.init)?;
    let mut state = AdmmState::new(z0, codebook, config.mu);
    let mut report = AdmmReport {
        loss_trace: Vec::new(),
        residual_trace: Vec::new(),
        mu_trace: Vec::new(),
        admm_iterations: 0,
        refine_passes: 0,
        gradient_steps: 0,
        one_shot_loss: None,
        final_loss: f64::INFINITY,
    };

    let mut last_check = f64::INFINITY;
    let mut window_peak = 0.0f64;
    while state.k < config.admm_iters {
        state.k += 1;
        let (z, f, evals) = z_update_counted(&mut state, obj, config)?;
        report.gradient_steps += evals;
        state.z = z;
        state.u = u_update(&state, codebook);
        state.eta = eta_update(&state);
        state.loss_trace.push(f);
        let residual = state.residual();
        report.residual_trace.push(residual);
        report.mu_trace.push(state.mu);
        if residual <= config.stop_tol {
            break;
        }
        window_peak = window_peak.max(residual);
        if state.k % config.mu_window == 0 {
            // compare window peaks: the residual often alternates between
            // neighbouring centers, and single samples then miss a stall
            let residual = std::mem::replace(&mut window_peak, 0.0);
            if residual > config.stall_ratio * last_check {
                let grown = state.mu * config.mu_growth;
                // keep the unscaled dual mu * eta fixed
                state.eta.iter_mut().for_each(|e| *e *= state.mu / grown);
                state.mu = grown;
            }
            last_check = residual;
        }
    }
    report.admm_iterations = state.k;
    report.loss_trace = state.loss_trace.clone();

    let quantized_value = |u: &[f64]| obj.value(u).map_err(|e| divergence(e, state.k));
    let mut best = state.u.clone();
    let mut best_f = quantized_value(&best)?;
    if let Some(init) = obj.encoder_init() {
        let (q, _) = quantize_project(&init?, codebook);
        let f = quantized_value(&q)?;
        report.one_shot_loss = Some(f);
        if f < best_f {
            best = q;
            best_f = f;
        }
    }

    for _ in 0..config.admm_iters {
        let mut moments = Moments::default();
        let (z, _, evals) = descend(
            obj,
            best.clone(),
            None,
            config.inner_steps,
            config,
            &mut moments,
            state.k,
            |_| {},
        )?;
        report.gradient_steps += evals;
        report.refine_passes += 1;
        let (q, _) = quantize_project(&z, codebook);
        let f = quantized_value(&q)?;
        let improvement = best_f - f;
        if improvement > 0.0 {
            best = q;
            best_f = f;
        }
        if improvement < config.stop_tol {
            break;
        }
    }

    report.final_loss = best_f;
    let (u, indices) = quantize_project(&best, codebook);
    Ok((indices, u, report))
}

pub fn admm_quantized_search(
    bundle: &ModelBundle,
    x: &Tensor,
    spec: &LossSpec,
    codebook: &Codebook,
    config: &AdmmConfig,
) -> Result<(Vec<usize>, Vec<f64>, AdmmReport)> {
    admm_quantized_search_with(&SignalObjective::new(bundle, x, spec)?, codebook, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `F(z) = |z - t|^2` through the identity generator.
    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn loss<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
            z.sub(tape.constant(Tensor::from_vec(self.0.clone())))?
                .square()?
                .sum()
        }
    }

    fn cb(c: &[f64]) -> Codebook {
        Codebook::from_centers(c.to_vec()).unwrap()
    }

    #[test]
    fn u_update_nearest_center() {
        let mut s = AdmmState::new(vec![0.6], &cb(&[-1.0, 1.0]), 1.0);
        s.eta = vec![0.6];
        assert_eq!(u_update(&s, &cb(&[-1.0, 1.0])), vec![1.0]);
    }

    #[test]
    fn eta_update_hand_arithmetic() {
        let mut s = AdmmState::new(vec![1.5], &cb(&[0.0, 1.0]), 1.0);
        s.u = vec![1.0];
        assert_eq!(eta_update(&s), vec![0.5]);
        s.z = vec![1.0];
        s.eta = vec![0.25];
        assert_eq!(eta_update(&s), vec![0.25]);
    }

    #[test]
    fn fixed_point_stops_after_one_iteration() {
        let config = AdmmConfig {
            init: Init::Given(vec![1.0]),
            ..AdmmConfig::default()
        };
        let (idx, u, report) =
            admm_quantized_search_with(&Quadratic(vec![1.0]), &cb(&[-1.0, 1.0]), &config).unwrap();
        assert_eq!(report.admm_iterations, 1);
        assert_eq!(report.residual_trace, vec![0.0]);
        assert_eq!((idx, u), (vec![1], vec![1.0]));
    }

    #[test]
    fn config_validation() {
        let bad = AdmmConfig {
            mu: 0.0,
            ..AdmmConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AdmmConfig {
            inner_steps: 0,
            ..AdmmConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn given_init_length_checked() {
        let config = AdmmConfig {
            init: Init::Given(vec![0.0; 3]),
            ..AdmmConfig::default()
        };
        assert!(latent_search_with(&Quadratic(vec![0.0; 2]), &config).is_err());
    }
}
