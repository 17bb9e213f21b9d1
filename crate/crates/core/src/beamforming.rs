//! Beam-pattern optimization: proximal operators for the digital power and
//! analog box constraints, plus the alternating variance-reduced proximal
//! stochastic descent loop that minimizes the mean positioning bound over
//! sampled ROI positions.

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::channel::{BandPlan, BeamformingConfig, ChannelModel, PositionResponse, RoiBox};
use crate::crlb::{gradients_for_response, GradientPair};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::rng::named_stream;
use crate::scalar::{standard_complex_normal, Real, C};

/// Rescale every row of a digital symbol matrix to the power budget:
/// `|row|_2^2 = P_max`. A zero row has no well-defined projection and is
/// replaced by a deterministic uniform-phase row at full power.
pub fn prox_digital<T: Real>(s: &mut Array2<C<T>>, max_power: T) {
    let target = max_power.sqrt();
    let k = s.ncols();
    for mut row in s.rows_mut() {
        let norm = row.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        if norm > T::zero() {
            let factor = Complex::new(target / norm, T::zero());
            row.mapv_inplace(|z| z * factor);
        } else {
            let fill = Complex::new(target / T::of(k as f64).sqrt(), T::zero());
            row.fill(fill);
        }
    }
}

/// Clamp every analog radiation coefficient into `[0, 1]`.
pub fn prox_analog<T: Real>(c: &mut Array2<T>) {
    c.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
}

/// Apply both proximal operators to a full configuration.
pub fn project_config<T: Real>(bf: &mut BeamformingConfig<T>, max_power: T) {
    for per_band in &mut bf.digital {
        for s in per_band {
            prox_digital(s, max_power);
        }
    }
    for c in &mut bf.analog {
        prox_analog(c);
    }
}

/// Seeded random initialization: digital rows i.i.d. complex Gaussian then
/// projected onto the power constraint, analog coefficients i.i.d. uniform.
pub fn random_config<T: Real, R: Rng + ?Sized>(
    plan: &BandPlan<T>,
    num_feeds: usize,
    num_elements: usize,
    rng: &mut R,
) -> BeamformingConfig<T> {
    let (b, j, nf) = (plan.num_bands(), plan.num_subbands(), plan.num_frames());
    let digital = (0..b)
        .map(|_| {
            (0..j)
                .map(|_| {
                    let mut s =
                        Array2::from_shape_fn((nf, num_feeds), |_| standard_complex_normal(rng));
                    prox_digital(&mut s, plan.max_power());
                    s
                })
                .collect()
        })
        .collect();
    let analog = (0..b)
        .map(|_| Array2::from_shape_fn((nf, num_elements), |_| T::uniform_01(rng)))
        .collect();
    BeamformingConfig { digital, analog }
}

/// Positions sampled from the ROI over which the mean bound is minimized.
#[derive(Debug, Clone)]
pub struct SampleSet<T: Real> {
    pub positions: Vec<Vec3<T>>,
}

/// Draw `count` i.i.d. uniform positions from the ROI box.
pub fn sample_positions<T: Real, R: Rng + ?Sized>(
    roi: &RoiBox<T>,
    count: usize,
    rng: &mut R,
) -> SampleSet<T> {
    SampleSet {
        positions: (0..count).map(|_| roi.sample(rng)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Variance-reduced proximal stochastic descent
// ---------------------------------------------------------------------------

/// Which variable blocks an outer iteration updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    /// Inner loop for the digital block, then an identical inner loop for the
    /// analog block (the default).
    Alternating,
    /// One inner loop updating both blocks together (baseline).
    Joint,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig<T: Real> {
    /// Averaging coefficient of the inner update, in (0, 1].
    pub gamma: T,
    /// Step size; `None` selects it by a 3-point grid {1e-3, 1e-2, 1e-1}
    /// evaluated on the first outer iteration.
    pub beta: Option<T>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Batch size of the fresh gradient estimate opening each outer iteration.
    pub outer_batch: usize,
    /// Batch size of the per-inner-step gradient refinement.
    pub inner_batch: usize,
    /// Number of ROI positions the mean bound is estimated over.
    pub num_samples: usize,
    pub seed: u64,
    pub mode: OptimizerMode,
}

impl<T: Real> OptimizerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let invalid = |details: String| Error::InvalidInput {
            what: "optimizer config",
            details,
        };
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(invalid(format!("gamma {} must be in (0, 1]", self.gamma)));
        }
        if let Some(beta) = self.beta {
            if !(beta > T::zero()) {
                return Err(invalid("beta must be positive".into()));
            }
        }
        if self.outer_iters == 0 || self.inner_iters == 0 || self.num_samples == 0 {
            return Err(invalid("iteration and sample counts must be at least 1".into()));
        }
        if self.outer_batch == 0 || self.outer_batch > self.num_samples {
            return Err(invalid(format!(
                "outer batch {} must be in 1..={}",
                self.outer_batch, self.num_samples
            )));
        }
        if self.inner_batch == 0 || self.inner_batch > self.num_samples {
            return Err(invalid(format!(
                "inner batch {} must be in 1..={}",
                self.inner_batch, self.num_samples
            )));
        }
        Ok(())
    }
}

/// One row of the optimization trace. `wall_ms` measures real time and is
/// excluded from reproducibility comparisons.
#[derive(Debug, Clone)]
pub struct TracePoint<T: Real> {
    pub outer_iter: usize,
    pub mean_crlb: T,
    pub wall_ms: f64,
}

/// Result of an optimization run.
#[derive(Debug)]
pub struct OptimizeOutcome<T: Real> {
    pub config: BeamformingConfig<T>,
    pub trace: Vec<TracePoint<T>>,
    /// Step size actually used (selected or configured).
    pub beta: T,
    /// Positions dropped from batch means because their information matrix
    /// was singular.
    pub skipped_singular: usize,
}

fn zero_gradient<T: Real>(bf: &BeamformingConfig<T>) -> GradientPair<T> {
    (
        bf.digital
            .iter()
            .map(|per_band| per_band.iter().map(|s| Array2::zeros(s.dim())).collect())
            .collect(),
        bf.analog.iter().map(|c| Array2::zeros(c.dim())).collect(),
    )
}

fn add_scaled<T: Real>(acc: &mut GradientPair<T>, g: &GradientPair<T>, factor: T) {
    let cf = Complex::new(factor, T::zero());
    for (ab, gb) in acc.0.iter_mut().zip(g.0.iter()) {
        for (a, s) in ab.iter_mut().zip(gb.iter()) {
            a.zip_mut_with(s, |x, y| *x += *y * cf);
        }
    }
    for (a, c) in acc.1.iter_mut().zip(g.1.iter()) {
        a.zip_mut_with(c, |x, y| *x += *y * factor);
    }
}

/// Batch-mean CRLB gradient at `bf` over `batch` (indices into `responses`).
/// Singular positions are dropped and the mean renormalized over survivors;
/// returns the number dropped. Fails only if every position is singular.
pub fn estimate_gradient_batch<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    responses: &[PositionResponse<T>],
    batch: &[usize],
) -> Result<(GradientPair<T>, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput {
            what: "gradient batch",
            details: "empty batch".into(),
        });
    }
    let mut acc = zero_gradient(bf);
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for &idx in batch {
        match gradients_for_response(model, bf, &responses[idx]) {
            Ok(report) => {
                let pair = report.into_gradient_pair();
                add_scaled(&mut acc, &pair, T::one());
                kept += 1;
            }
            Err(Error::SingularInformation { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if kept == 0 {
        return Err(Error::EmptyBatch);
    }
    let scale = T::of(kept as f64).recip();
    let zero = zero_gradient(bf);
    let mut mean = zero;
    add_scaled(&mut mean, &acc, scale);
    Ok((mean, skipped))
}

/// Variance-reduced update of a gradient estimate:
/// `V_new = V_prev + mean_batch(grad(p; bf_new) - grad(p; bf_prev))`.
/// Positions singular at either configuration are dropped from the mean.
pub fn refine_estimate<T: Real>(
    model: &ChannelModel<T>,
    v_prev: &GradientPair<T>,
    responses: &[PositionResponse<T>],
    batch: &[usize],
    bf_new: &BeamformingConfig<T>,
    bf_prev: &BeamformingConfig<T>,
) -> Result<(GradientPair<T>, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput {
            what: "gradient batch",
            details: "empty batch".into(),
        });
    }
    let mut diff = zero_gradient(bf_new);
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for &idx in batch {
        let new = gradients_for_response(model, bf_new, &responses[idx]);
        let old = gradients_for_response(model, bf_prev, &responses[idx]);
        match (new, old) {
            (Ok(gn), Ok(go)) => {
                add_scaled(&mut diff, &gn.into_gradient_pair(), T::one());
                add_scaled(&mut diff, &go.into_gradient_pair(), -T::one());
                kept += 1;
            }
            (Err(Error::SingularInformation { .. }), _)
            | (_, Err(Error::SingularInformation { .. })) => skipped += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let mut v_new = v_prev.clone();
    if kept > 0 {
        add_scaled(&mut v_new, &diff, T::of(kept as f64).recip());
    }
    Ok((v_new, skipped))
}

/// One damped proximal step on the digital block:
/// `S <- (1 - gamma) S + gamma prox(S - beta V)`.
pub fn inner_step_digital<T: Real>(
    digital: &mut [Vec<Array2<C<T>>>],
    v: &[Vec<Array2<C<T>>>],
    gamma: T,
    beta: T,
    max_power: T,
) {
    let beta_c = Complex::new(beta, T::zero());
    let blend = Complex::new(T::one() - gamma, T::zero());
    let gamma_c = Complex::new(gamma, T::zero());
    for (per_band, v_band) in digital.iter_mut().zip(v.iter()) {
        for (s, vs) in per_band.iter_mut().zip(v_band.iter()) {
            let mut candidate = s.clone();
            candidate.zip_mut_with(vs, |x, g| *x -= *g * beta_c);
            prox_digital(&mut candidate, max_power);
            s.zip_mut_with(&candidate, |x, y| *x = *x * blend + *y * gamma_c);
        }
    }
}

/// One damped proximal step on the analog block:
/// `C <- (1 - gamma) C + gamma clamp(C - beta V)`.
pub fn inner_step_analog<T: Real>(
    analog: &mut [Array2<T>],
    v: &[Array2<T>],
    gamma: T,
    beta: T,
) {
    for (c, vc) in analog.iter_mut().zip(v.iter()) {
        let mut candidate = c.clone();
        candidate.zip_mut_with(vc, |x, g| *x -= *g * beta);
        prox_analog(&mut candidate);
        c.zip_mut_with(&candidate, |x, y| *x = (T::one() - gamma) * *x + gamma * *y);
    }
}

/// Mean bound over all cached responses, dropping singular positions.
fn mean_crlb_over_responses<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    responses: &[PositionResponse<T>],
) -> Result<(T, usize)> {
    let mut acc = T::zero();
    let mut kept = 0usize;
    let mut skipped = 0usize;
    for response in responses {
        match crate::crlb::crlb_for_response(model, bf, response) {
            Ok(v) => {
                acc += v;
                kept += 1;
            }
            Err(Error::SingularInformation { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if kept == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((acc / T::of(kept as f64), skipped))
}

fn draw_batch(rng: &mut ChaCha12Rng, population: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, population, amount).into_vec()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Digital,
    Analog,
    Both,
}

struct LoopState<T: Real> {
    bf: BeamformingConfig<T>,
    rng: ChaCha12Rng,
    skipped: usize,
}

/// One outer iteration: fresh batch estimate, then `inner_iters` damped
/// proximal steps with variance-reduced refinements, for one variable block.
fn run_block<T: Real>(
    model: &ChannelModel<T>,
    cfg: &OptimizerConfig<T>,
    responses: &[PositionResponse<T>],
    state: &mut LoopState<T>,
    beta: T,
    block: Block,
) -> Result<()> {
    let n = responses.len();
    // A full batch is the whole set in canonical order; this keeps the
    // summation order fixed so full-batch runs coincide bitwise with
    // deterministic proximal gradient descent.
    let batch: Vec<usize> = if cfg.outer_batch == n {
        (0..n).collect()
    } else {
        draw_batch(&mut state.rng, n, cfg.outer_batch)
    };
    let (mut v, skipped) = estimate_gradient_batch(model, &state.bf, responses, &batch)?;
    state.skipped += skipped;
    for inner in 1..=cfg.inner_iters {
        let prev = state.bf.clone();
        match block {
            Block::Digital => inner_step_digital(
                &mut state.bf.digital,
                &v.0,
                cfg.gamma,
                beta,
                model.plan().max_power(),
            ),
            Block::Analog => inner_step_analog(&mut state.bf.analog, &v.1, cfg.gamma, beta),
            Block::Both => {
                inner_step_digital(
                    &mut state.bf.digital,
                    &v.0,
                    cfg.gamma,
                    beta,
                    model.plan().max_power(),
                );
                inner_step_analog(&mut state.bf.analog, &v.1, cfg.gamma, beta);
            }
        }
        if inner < cfg.inner_iters {
            if cfg.inner_batch == n {
                // Full-batch refinement telescopes to the exact gradient at
                // the new point; computing it directly is the same value in
                // exact arithmetic and keeps the iterates bitwise identical
                // to deterministic proximal gradient descent.
                let all: Vec<usize> = (0..n).collect();
                let (fresh, skipped) =
                    estimate_gradient_batch(model, &state.bf, responses, &all)?;
                state.skipped += skipped;
                v = fresh;
            } else {
                let batch = draw_batch(&mut state.rng, n, cfg.inner_batch);
                let (refined, skipped) =
                    refine_estimate(model, &v, responses, &batch, &state.bf, &prev)?;
                state.skipped += skipped;
                v = refined;
            }
        }
    }
    Ok(())
}

fn run_outer_iteration<T: Real>(
    model: &ChannelModel<T>,
    cfg: &OptimizerConfig<T>,
    responses: &[PositionResponse<T>],
    state: &mut LoopState<T>,
    beta: T,
) -> Result<()> {
    match cfg.mode {
        OptimizerMode::Alternating => {
            run_block(model, cfg, responses, state, beta, Block::Digital)?;
            run_block(model, cfg, responses, state, beta, Block::Analog)?;
        }
        OptimizerMode::Joint => {
            run_block(model, cfg, responses, state, beta, Block::Both)?;
        }
    }
    Ok(())
}

const BETA_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Minimize the mean positioning bound over ROI samples by alternating
/// variance-reduced proximal stochastic descent on the digital and analog
/// blocks. Returns the feasible final configuration, the per-outer-iteration
/// mean-bound trace (entry 0 is the projected initial point), the step size
/// used, and the number of singular positions dropped from batch means.
pub fn optimize_da_beamforming<T: Real>(
    model: &ChannelModel<T>,
    cfg: &OptimizerConfig<T>,
    init: &BeamformingConfig<T>,
) -> Result<OptimizeOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut sample_rng = named_stream(cfg.seed, "optimizer/samples");
    let set = sample_positions(model.roi(), cfg.num_samples, &mut sample_rng);
    let mut responses = Vec::with_capacity(set.positions.len());
    for &p in &set.positions {
        responses.push(model.position_response(p)?);
    }

    let mut state = LoopState {
        bf: init.clone(),
        rng: named_stream(cfg.seed, "optimizer/batches"),
        skipped: 0,
    };
    project_config(&mut state.bf, model.plan().max_power());

    let mut trace = Vec::with_capacity(cfg.outer_iters + 1);
    let (initial, skipped) = mean_crlb_over_responses(model, &state.bf, &responses)?;
    state.skipped += skipped;
    trace.push(TracePoint {
        outer_iter: 0,
        mean_crlb: initial,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    });

    let beta = match cfg.beta {
        Some(beta) => beta,
        None => {
            // Grid-select the step on the first outer iteration: each
            // candidate starts from the same state and RNG, the best end
            // state is adopted.
            let mut best: Option<(T, T, LoopState<T>)> = None;
            for &candidate in &BETA_GRID {
                let beta_c = T::of(candidate);
                let mut trial = LoopState {
                    bf: state.bf.clone(),
                    rng: state.rng.clone(),
                    skipped: state.skipped,
                };
                run_outer_iteration(model, cfg, &responses, &mut trial, beta_c)
                    .map_err(|e| e.with_context(format!("beta grid candidate {candidate}")))?;
                let (value, skipped) = mean_crlb_over_responses(model, &trial.bf, &responses)?;
                trial.skipped += skipped;
                let better = match &best {
                    None => true,
                    Some((best_value, _, _)) => value < *best_value,
                };
                if better {
                    best = Some((value, beta_c, trial));
                }
            }
            let (value, beta, chosen) = best.expect("beta grid is nonempty");
            state = chosen;
            trace.push(TracePoint {
                outer_iter: 1,
                mean_crlb: value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            beta
        }
    };

    let first_outer = trace.len(); // 1 if beta was configured, 2 after grid selection
    for outer in first_outer..=cfg.outer_iters {
        run_outer_iteration(model, cfg, &responses, &mut state, beta)
            .map_err(|e| e.with_context(format!("outer iteration {outer}")))?;
        let (value, skipped) = mean_crlb_over_responses(model, &state.bf, &responses)?;
        state.skipped += skipped;
        trace.push(TracePoint {
            outer_iter: outer,
            mean_crlb: value,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    project_config(&mut state.bf, model.plan().max_power());
    Ok(OptimizeOutcome {
        config: state.bf,
        trace,
        beta,
        skipped_singular: state.skipped,
    })
}
