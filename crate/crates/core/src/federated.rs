//! Federated adaptation of the position estimator.
//!
//! Each round, every user computes its clipped, Gaussian-noised local update
//! and two scalars: the update's influence on convergence and on uploading
//! efficiency. The coordinator turns the scalars into a scheduling
//! probability vector by solving a convex simplex program in closed KKT form,
//! samples a single uploading user from it, and applies the importance-
//! weighted update with separate adaptation rates for the feature-extractor
//! and regressor parameter blocks.
//!
//! The importance weight `Q_x / (Q xi_x)` makes the aggregated step an
//! unbiased estimate of the data-size-weighted mean gradient
//! `(1/Q) sum_n Q_n g_n` for any strictly positive schedule, which is the
//! identity the diagnostics and tests pin down.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::channel::{BeamformingConfig, ChannelModel};
use crate::error::{Error, Result};
use crate::estimator::{
    loss_and_gradient, mse, raw_features, Featurizer, LabeledDataset, MlpArchitecture, MlpParams,
};
use crate::linalg::Vec3;
use crate::rng::named_stream;
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// Differential privacy
// ---------------------------------------------------------------------------

/// How local gradients are brought to the sensitivity norm `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Rescale to exactly `|g| = L` (the default; the DP variance analysis
    /// assumes a fixed norm).
    Rescale,
    /// Conventional clipping `g * min(1, L/|g|)`.
    Cap,
}

#[derive(Debug, Clone, Copy)]
pub struct DpConfig<T: Real> {
    /// Sensitivity norm `L` the local gradient is rescaled to.
    pub clip_norm: T,
    /// Privacy violation probability `delta`.
    pub delta: T,
    pub mode: ClipMode,
}

impl<T: Real> DpConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > T::zero()) {
            return Err(Error::InvalidInput {
                what: "dp config",
                details: "clip norm must be positive".into(),
            });
        }
        if !(self.delta > T::zero() && self.delta < T::of(1.25)) {
            return Err(Error::InvalidInput {
                what: "dp config",
                details: format!("delta {} must lie in (0, 1.25)", self.delta),
            });
        }
        Ok(())
    }
}

/// Gaussian-mechanism noise variance `(L^2 / eps^2) * 2 ln(1.25/delta)` for
/// one clipped upload under privacy budget `eps`.
pub fn dp_noise_variance<T: Real>(clip_norm: T, epsilon: T, delta: T) -> Result<T> {
    if !(epsilon > T::zero()) {
        return Err(Error::InvalidInput {
            what: "dp noise variance",
            details: format!("epsilon {epsilon} must be positive"),
        });
    }
    if !(delta > T::zero() && delta < T::of(1.25)) {
        return Err(Error::InvalidInput {
            what: "dp noise variance",
            details: format!("delta {delta} must lie in (0, 1.25)"),
        });
    }
    if !(clip_norm > T::zero()) {
        return Err(Error::InvalidInput {
            what: "dp noise variance",
            details: format!("clip norm {clip_norm} must be positive"),
        });
    }
    let ratio = clip_norm / epsilon;
    Ok(ratio * ratio * T::of(2.0) * (T::of(1.25) / delta).ln())
}

// ---------------------------------------------------------------------------
// Users and local updates
// ---------------------------------------------------------------------------

/// One simulated user: its anchored local dataset and privacy budget.
#[derive(Debug, Clone)]
pub struct UserState<T: Real> {
    pub id: usize,
    pub dataset: LabeledDataset<T>,
    pub epsilon: T,
}

impl<T: Real> UserState<T> {
    pub fn data_size(&self) -> usize {
        self.dataset.len()
    }
}

/// What a user would upload, plus diagnostics that never leave the simulated
/// user (the pre-noise clipped gradient and the zero-gradient flag).
#[derive(Debug, Clone)]
pub struct LocalUpdate<T: Real> {
    pub delta_w: Vec<T>,
    pub clipped_gradient: Vec<T>,
    pub zero_gradient: bool,
}

/// Clip the user's local loss gradient to the sensitivity norm and add
/// Gaussian DP noise: `delta_w = -clip(g) + noise`.
pub fn local_update<T: Real, R: Rng + ?Sized>(
    user: &UserState<T>,
    params: &MlpParams<T>,
    dp: &DpConfig<T>,
    rng: &mut R,
) -> Result<LocalUpdate<T>> {
    dp.validate()?;
    let (_, gradient) = loss_and_gradient(&user.dataset, params)?;
    let norm = gradient.iter().map(|&g| g * g).sum::<T>().sqrt();
    let (clipped, zero_gradient) = if norm > T::zero() {
        let factor = match dp.mode {
            ClipMode::Rescale => dp.clip_norm / norm,
            ClipMode::Cap => (dp.clip_norm / norm).min(T::one()),
        };
        (gradient.iter().map(|&g| g * factor).collect::<Vec<_>>(), false)
    } else {
        (gradient, true)
    };
    let sigma2 = dp_noise_variance(dp.clip_norm, user.epsilon, dp.delta)?;
    let sigma = sigma2.sqrt();
    let mut delta_w: Vec<T> = clipped.iter().map(|&g| -g).collect();
    if sigma > T::zero() {
        for d in &mut delta_w {
            *d += T::standard_normal(rng) * sigma;
        }
    }
    Ok(LocalUpdate {
        delta_w,
        clipped_gradient: clipped,
        zero_gradient,
    })
}

/// Per-parameter adaptation rates: `eta_feat` over the feature extractor,
/// `eta_reg` over the regressor block.
pub fn adaptation_rate_vector<T: Real>(
    arch: &MlpArchitecture,
    eta_feat: T,
    eta_reg: T,
) -> Vec<T> {
    let mut eta = vec![eta_feat; arch.feature_param_count()];
    eta.extend(std::iter::repeat(eta_reg).take(arch.regressor_param_count()));
    eta
}

/// Importance-weighted parameter update
/// `w' = w + eta . (Q_x / (Q xi_x)) delta_w_x`.
pub fn apply_adaptation<T: Real>(
    w: &[T],
    delta_w: &[T],
    xi_x: T,
    data_size_x: usize,
    total_data: usize,
    eta: &[T],
) -> Result<Vec<T>> {
    if !(xi_x > T::zero()) {
        return Err(Error::InvalidInput {
            what: "adaptation",
            details: "selected user's scheduling probability must be positive".into(),
        });
    }
    if w.len() != delta_w.len() || w.len() != eta.len() {
        return Err(Error::DimensionMismatch {
            what: "apply_adaptation",
            expected: w.len(),
            got: delta_w.len().min(eta.len()),
        });
    }
    let weight = T::of(data_size_x as f64) / (T::of(total_data as f64) * xi_x);
    Ok(w
        .iter()
        .zip(delta_w.iter().zip(eta.iter()))
        .map(|(&wi, (&di, &ei))| wi + ei * weight * di)
        .collect())
}

// ---------------------------------------------------------------------------
// Scheduling scalars
// ---------------------------------------------------------------------------

/// Influence of scheduling user `n` on convergence:
/// `(Q_n/Q)^2 (eta^2 . g_n^2 + sigma_n^2 |eta|^2)`.
pub fn influence_on_convergence<T: Real>(
    clipped_gradient: &[T],
    eta: &[T],
    noise_variance: T,
    data_size: usize,
    total_data: usize,
) -> T {
    let ratio = T::of(data_size as f64) / T::of(total_data as f64);
    let signal = eta
        .iter()
        .zip(clipped_gradient.iter())
        .map(|(&e, &g)| e * e * g * g)
        .sum::<T>();
    let eta_sq = eta.iter().map(|&e| e * e).sum::<T>();
    ratio * ratio * (signal + noise_variance * eta_sq)
}

/// Weighted uploading capacity `Xi_n` (floored at `capacity_floor`) and the
/// influence on uploading efficiency `Z_IE = payload_bits / (rate * Xi_n)`.
/// Natural logarithm; `rate` in bit/s.
pub fn uploading_efficiency<T: Real>(
    clipped_gradient: &[T],
    eta: &[T],
    noise_variance: T,
    rate_bits_per_s: T,
    payload_bits: T,
    data_size: usize,
    total_data: usize,
    capacity_floor: T,
) -> Result<(T, T)> {
    if !(noise_variance > T::zero()) {
        return Err(Error::InvalidInput {
            what: "uploading efficiency",
            details: "DP noise variance must be positive (the capacity divides by it)".into(),
        });
    }
    if !(rate_bits_per_s > T::zero()) {
        return Err(Error::InvalidInput {
            what: "uploading efficiency",
            details: "uplink rate must be positive".into(),
        });
    }
    let ratio = T::of(data_size as f64) / T::of(total_data as f64);
    let signal = eta
        .iter()
        .zip(clipped_gradient.iter())
        .map(|(&e, &g)| e * e * g * g)
        .sum::<T>();
    let eta_sq = eta.iter().map(|&e| e * e).sum::<T>();
    let capacity = (ratio * (T::one() + signal / (noise_variance * eta_sq)).ln())
        .max(capacity_floor);
    let z_ie = payload_bits / (rate_bits_per_s * capacity);
    Ok((capacity, z_ie))
}

// ---------------------------------------------------------------------------
// Schedule optimization
// ---------------------------------------------------------------------------

/// Strictly positive probability vector over users.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleVector<T: Real>(Vec<T>);

impl<T: Real> ScheduleVector<T> {
    pub fn uniform(num_users: usize) -> Self {
        Self(vec![T::of(1.0 / num_users as f64); num_users])
    }

    pub fn new(xi: Vec<T>) -> Result<Self> {
        if xi.is_empty() || xi.iter().any(|&x| !(x > T::zero())) {
            return Err(Error::InvalidInput {
                what: "schedule",
                details: "entries must be strictly positive".into(),
            });
        }
        let sum = xi.iter().copied().sum::<T>();
        if (sum - T::one()).abs() > T::of(1e-12) {
            return Err(Error::InvalidInput {
                what: "schedule",
                details: format!("entries sum to {sum}, not 1"),
            });
        }
        Ok(Self(xi))
    }

    pub fn entries(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One multinomial draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = T::uniform_01(rng);
        let mut acc = T::zero();
        for (n, &x) in self.0.iter().enumerate() {
            acc += x;
            if u < acc {
                return n;
            }
        }
        self.0.len() - 1
    }
}

/// Solved schedule with the KKT residual of the simplex program.
#[derive(Debug, Clone)]
pub struct ScheduleSolution<T: Real> {
    pub schedule: ScheduleVector<T>,
    pub multiplier: T,
    pub kkt_residual: T,
}

/// Minimize `sum_n (a_n / xi_n + b_n xi_n)` over the probability simplex
/// with `a_n = Z_IC,n / sum_m Z_IC,m / xi_prev_m^2` and
/// `b_n = Z_IE,n / sum_m Z_IE,m`. The stationarity condition gives
/// `xi_n = sqrt(a_n / (b_n + lambda))`; the multiplier is found by monotone
/// bisection on the simplex constraint. Users with zero `a_n` receive the
/// floor probability before renormalization.
pub fn optimize_schedule<T: Real>(
    z_ic: &[T],
    z_ie: &[T],
    xi_prev: &ScheduleVector<T>,
    floor: T,
) -> Result<ScheduleSolution<T>> {
    let num_users = z_ic.len();
    if num_users == 0 || z_ie.len() != num_users || xi_prev.len() != num_users {
        return Err(Error::DimensionMismatch {
            what: "optimize_schedule",
            expected: num_users,
            got: z_ie.len().min(xi_prev.len()),
        });
    }
    if z_ic.iter().chain(z_ie.iter()).any(|v| *v < T::zero() || !v.is_finite()) {
        return Err(Error::InvalidInput {
            what: "optimize_schedule",
            details: "influence scalars must be finite and nonnegative".into(),
        });
    }
    if num_users == 1 {
        return Ok(ScheduleSolution {
            schedule: ScheduleVector(vec![T::one()]),
            multiplier: T::zero(),
            kkt_residual: T::zero(),
        });
    }

    let ic_weight = z_ic
        .iter()
        .zip(xi_prev.entries())
        .map(|(&z, &x)| z / (x * x))
        .sum::<T>();
    let ie_weight = z_ie.iter().copied().sum::<T>();
    let a: Vec<T> = z_ic
        .iter()
        .map(|&z| if ic_weight > T::zero() { z / ic_weight } else { T::zero() })
        .collect();
    let b: Vec<T> = z_ie
        .iter()
        .map(|&z| if ie_weight > T::zero() { z / ie_weight } else { T::zero() })
        .collect();

    let mut xi;
    let mut multiplier = T::zero();
    let mut residual = T::zero();
    if a.iter().all(|&ai| ai == T::zero()) {
        // Objective degenerates to a linear function; fall back to uniform,
        // which the floor/renormalization below leaves untouched.
        xi = vec![T::of(1.0 / num_users as f64); num_users];
    } else {
        let sum_at = |lambda: T| -> T {
            a.iter()
                .zip(b.iter())
                .map(|(&ai, &bi)| {
                    if ai > T::zero() {
                        (ai / (bi + lambda)).sqrt()
                    } else {
                        T::zero()
                    }
                })
                .sum()
        };
        // Bracket: just above -min b over active users the sum diverges,
        // and it decreases monotonically to zero.
        let min_b = a
            .iter()
            .zip(b.iter())
            .filter(|(ai, _)| **ai > T::zero())
            .map(|(_, &bi)| bi)
            .fold(T::infinity(), |m, v| m.min(v));
        let tiny = T::of(1e-300);
        let mut lo = -min_b + tiny;
        if !(sum_at(lo) > T::one()) {
            // Push lo closer to the pole until the sum exceeds 1.
            let mut gap = T::of(1e-30);
            let mut ok = false;
            for _ in 0..200 {
                lo = -min_b + gap;
                if sum_at(lo) > T::one() {
                    ok = true;
                    break;
                }
                gap = gap * T::of(0.5);
            }
            if !ok {
                return Err(Error::BracketFailure {
                    lo: lo.to_f64(),
                    hi: lo.to_f64(),
                });
            }
        }
        let mut hi = lo.abs().max(T::one());
        let mut bracketed = false;
        for _ in 0..400 {
            if sum_at(hi) < T::one() {
                bracketed = true;
                break;
            }
            hi = hi * T::of(2.0);
        }
        if !bracketed {
            return Err(Error::BracketFailure {
                lo: lo.to_f64(),
                hi: hi.to_f64(),
            });
        }
        for _ in 0..200 {
            let mid = (lo + hi) * T::of(0.5);
            if sum_at(mid) > T::one() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        multiplier = (lo + hi) * T::of(0.5);
        residual = (sum_at(multiplier) - T::one()).abs();
        xi = a
            .iter()
            .zip(b.iter())
            .map(|(&ai, &bi)| {
                if ai > T::zero() {
                    (ai / (bi + multiplier)).sqrt()
                } else {
                    T::zero()
                }
            })
            .collect();
    }

    // Floor zero entries so 1/xi terms stay finite, then renormalize.
    for x in &mut xi {
        if *x < floor {
            *x = floor;
        }
    }
    let total = xi.iter().copied().sum::<T>();
    for x in &mut xi {
        *x /= total;
    }
    Ok(ScheduleSolution {
        schedule: ScheduleVector(xi),
        multiplier,
        kkt_residual: residual,
    })
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

/// The schedule-relevant terms of the per-round convergence bound and the
/// analytic diagonal covariance of the aggregated gradient estimate.
#[derive(Debug, Clone)]
pub struct BoundTerms<T: Real> {
    /// `eta^T (1 - (L/2) eta) . g_bar^2`.
    pub descent: T,
    /// `(L/2) sum_n (1/xi_n) (Q_n/Q)^2 (eta^2 . g_n^2 + sigma_n^2 |eta|^2)`.
    pub sched_variance: T,
    /// `diag V(g_hat) = sum_n (1/xi_n)(Q_n/Q)^2 (g_n^2 + sigma_n^2) - g_bar^2`.
    pub vhat_diag: Vec<T>,
}

/// Evaluate the bound terms from per-user clipped gradients. `g_bar` is the
/// data-size-weighted mean gradient the aggregation is unbiased for.
pub fn convergence_diagnostics<T: Real>(
    user_gradients: &[Vec<T>],
    data_sizes: &[usize],
    schedule: &ScheduleVector<T>,
    eta: &[T],
    l_smooth: T,
    noise_variances: &[T],
) -> Result<BoundTerms<T>> {
    let num_users = user_gradients.len();
    if num_users == 0
        || data_sizes.len() != num_users
        || schedule.len() != num_users
        || noise_variances.len() != num_users
    {
        return Err(Error::DimensionMismatch {
            what: "convergence_diagnostics",
            expected: num_users,
            got: data_sizes.len().min(schedule.len()).min(noise_variances.len()),
        });
    }
    let dim = eta.len();
    let total: usize = data_sizes.iter().sum();
    let total_t = T::of(total as f64);

    let mut g_bar = vec![T::zero(); dim];
    for (g, &q) in user_gradients.iter().zip(data_sizes.iter()) {
        let w = T::of(q as f64) / total_t;
        for (acc, &gi) in g_bar.iter_mut().zip(g.iter()) {
            *acc += w * gi;
        }
    }

    let half_l = l_smooth * T::of(0.5);
    let descent = eta
        .iter()
        .zip(g_bar.iter())
        .map(|(&e, &g)| e * (T::one() - half_l * e) * g * g)
        .sum::<T>();

    let eta_sq_total = eta.iter().map(|&e| e * e).sum::<T>();
    let mut sched_variance = T::zero();
    let mut vhat = vec![T::zero(); dim];
    for n in 0..num_users {
        let xi = schedule.entries()[n];
        let ratio = T::of(data_sizes[n] as f64) / total_t;
        let w = ratio * ratio / xi;
        let signal = eta
            .iter()
            .zip(user_gradients[n].iter())
            .map(|(&e, &g)| e * e * g * g)
            .sum::<T>();
        sched_variance += half_l * w * (signal + noise_variances[n] * eta_sq_total);
        for (v, &g) in vhat.iter_mut().zip(user_gradients[n].iter()) {
            *v += w * (g * g + noise_variances[n]);
        }
    }
    for (v, &g) in vhat.iter_mut().zip(g_bar.iter()) {
        *v -= g * g;
    }

    Ok(BoundTerms {
        descent,
        sched_variance,
        vhat_diag: vhat,
    })
}

// ---------------------------------------------------------------------------
// Anchored target datasets
// ---------------------------------------------------------------------------

/// Draw anchor locations uniformly in the ROI.
pub fn sample_anchors<T: Real, R: Rng + ?Sized>(
    model: &ChannelModel<T>,
    count: usize,
    rng: &mut R,
) -> Vec<Vec3<T>> {
    (0..count).map(|_| model.roi().sample(rng)).collect()
}

/// Build a user's labeled dataset: positions are drawn uniformly in the ROI
/// and kept only when within `radius` of an anchor (where a ground-truth
/// label is available); the received signals use the model's environment and
/// the shared frozen featurizer.
pub fn generate_anchored_dataset<T: Real, R: Rng + ?Sized>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    featurizer: &Featurizer<T>,
    anchors: &[Vec3<T>],
    radius: T,
    count: usize,
    rng: &mut R,
) -> Result<LabeledDataset<T>> {
    if anchors.is_empty() || count == 0 {
        return Err(Error::InvalidInput {
            what: "anchored dataset",
            details: "need at least one anchor and one sample".into(),
        });
    }
    let sampler = model.received_sampler(bf)?;
    let dim = featurizer.dim();
    let mut features = Array2::<T>::zeros((count, dim));
    let mut labels = Array2::<T>::zeros((count, 3));
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let max_attempts = count.saturating_mul(1_000_000);
    while accepted < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidInput {
                what: "anchored dataset",
                details: format!(
                    "acceptance too low: {accepted}/{count} after {attempts} draws"
                ),
            });
        }
        let p = model.roi().sample(rng);
        let near_anchor = anchors.iter().any(|&a| {
            let d = crate::linalg::v3_norm(crate::linalg::v3_sub(p, a));
            d <= radius
        });
        if !near_anchor {
            continue;
        }
        let y = sampler.sample(p, rng)?;
        let row = featurizer.apply(&raw_features(&y))?;
        for (c, v) in row.into_iter().enumerate() {
            features[[accepted, c]] = v;
        }
        for u in 0..3 {
            labels[[accepted, u]] = p[u];
        }
        accepted += 1;
    }
    Ok(LabeledDataset { features, labels })
}

// ---------------------------------------------------------------------------
// The adaptation loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FlRunConfig<T: Real> {
    pub rounds: usize,
    pub eta_feat: T,
    pub eta_reg: T,
    /// Upload payload size in bits (cancels out of the schedule after
    /// normalization but is reported in the efficiency scalars).
    pub payload_bits: T,
    /// Per-round uplink rates are drawn log-uniformly from this range, Mbit/s.
    pub rate_range_mbit: (f64, f64),
    /// Schedule floor keeping `1/xi` terms finite.
    pub xi_floor: T,
    /// Floor on the weighted uploading capacity.
    pub capacity_floor: T,
    pub seed: u64,
}

impl<T: Real> Default for FlRunConfig<T> {
    fn default() -> Self {
        Self {
            rounds: 200,
            eta_feat: T::of(1e-6),
            eta_reg: T::of(1e-3),
            payload_bits: T::of(32.0 * 10_000.0),
            rate_range_mbit: (1.0, 100.0),
            xi_floor: T::of(1e-6),
            capacity_floor: T::of(1e-9),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundLog<T: Real> {
    pub round: usize,
    pub chosen_user: usize,
    pub schedule: Vec<T>,
    pub uplink_rates_mbit: Vec<T>,
    /// Target-domain evaluation MSE of the post-update parameters, m^2.
    pub eval_mse: T,
    pub descent_term: T,
    pub variance_term: T,
    pub vhat_trace: T,
}

#[derive(Debug)]
pub struct FlRunLog<T: Real> {
    pub rounds: Vec<RoundLog<T>>,
    /// Empirical smoothness constant used in the bound terms.
    pub l_smooth: T,
}

/// Empirical Lipschitz constant of the total-loss gradient: the max ratio
/// `|g(w1) - g(w2)| / |w1 - w2|` over a few sampled parameter pairs.
pub fn estimate_smoothness<T: Real>(
    users: &[UserState<T>],
    params: &MlpParams<T>,
    pairs: usize,
    rng: &mut ChaCha12Rng,
) -> Result<T> {
    let total_gradient = |p: &MlpParams<T>| -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); p.len()];
        for user in users {
            let (_, g) = loss_and_gradient(&user.dataset, p)?;
            for (a, gi) in acc.iter_mut().zip(g.iter()) {
                *a += *gi;
            }
        }
        Ok(acc)
    };
    let mut l_max = T::zero();
    for _ in 0..pairs {
        let mut wa = params.clone();
        let mut wb = params.clone();
        for w in wa.as_mut_slice() {
            *w += T::standard_normal(rng) * T::of(1e-3);
        }
        for w in wb.as_mut_slice() {
            *w += T::standard_normal(rng) * T::of(1e-3);
        }
        let ga = total_gradient(&wa)?;
        let gb = total_gradient(&wb)?;
        let dg = ga
            .iter()
            .zip(gb.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt();
        let dw = wa
            .as_slice()
            .iter()
            .zip(wb.as_slice().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt();
        if dw > T::zero() {
            l_max = l_max.max(dg / dw);
        }
    }
    Ok(l_max)
}

/// Run `cfg.rounds` federated positioning processes from `initial`,
/// evaluating on `eval_set` after every round. Per-user, per-round RNG
/// streams are derived from the run seed, so the trajectory is reproducible
/// regardless of evaluation order.
pub fn run_federated_adaptation<T: Real>(
    initial: &MlpParams<T>,
    users: &[UserState<T>],
    cfg: &FlRunConfig<T>,
    dp: &DpConfig<T>,
    eval_set: &LabeledDataset<T>,
) -> Result<(MlpParams<T>, FlRunLog<T>)> {
    if users.is_empty() {
        return Err(Error::InvalidInput {
            what: "federated run",
            details: "at least one user".into(),
        });
    }
    dp.validate()?;
    let num_users = users.len();
    let total_data: usize = users.iter().map(|u| u.data_size()).sum();
    let eta = adaptation_rate_vector(initial.arch(), cfg.eta_feat, cfg.eta_reg);
    let noise_variances: Vec<T> = users
        .iter()
        .map(|u| dp_noise_variance(dp.clip_norm, u.epsilon, dp.delta))
        .collect::<Result<_>>()?;

    let mut smooth_rng = named_stream(cfg.seed, "fl/lsmooth");
    let l_smooth = estimate_smoothness(users, initial, 8, &mut smooth_rng)?;

    let mut params = initial.clone();
    let mut xi_prev = ScheduleVector::uniform(num_users);
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let context = |e: Error| e.with_context(format!("federated round {t}"));

        // Every user computes its local update and scheduling scalars.
        let mut updates = Vec::with_capacity(num_users);
        let mut z_ic = Vec::with_capacity(num_users);
        let mut z_ie = Vec::with_capacity(num_users);
        let mut rates = Vec::with_capacity(num_users);
        for (n, user) in users.iter().enumerate() {
            let mut user_rng = named_stream(cfg.seed, &format!("fl/round{t}/user{n}"));
            let update = local_update(user, &params, dp, &mut user_rng).map_err(context)?;
            let mut rate_rng = named_stream(cfg.seed, &format!("rates/round{t}/user{n}"));
            let (lo, hi) = cfg.rate_range_mbit;
            let log_rate = f64::uniform_01(&mut rate_rng) * (hi.ln() - lo.ln()) + lo.ln();
            let rate_mbit = T::of(log_rate.exp());
            let rate_bits = rate_mbit * T::of(1e6);
            z_ic.push(influence_on_convergence(
                &update.clipped_gradient,
                &eta,
                noise_variances[n],
                user.data_size(),
                total_data,
            ));
            // Noise-free users only arise in oracle setups where the DP
            // variance underflows; the capacity formula divides by it, so
            // fall back to the floored-capacity sentinel there.
            let ie = if noise_variances[n] > T::zero() {
                uploading_efficiency(
                    &update.clipped_gradient,
                    &eta,
                    noise_variances[n],
                    rate_bits,
                    cfg.payload_bits,
                    user.data_size(),
                    total_data,
                    cfg.capacity_floor,
                )
                .map_err(context)?
                .1
            } else {
                cfg.payload_bits / (rate_bits * cfg.capacity_floor)
            };
            z_ie.push(ie);
            rates.push(rate_mbit);
            updates.push(update);
        }

        // Coordinator: schedule, select one uploader, adapt.
        let solution =
            optimize_schedule(&z_ic, &z_ie, &xi_prev, cfg.xi_floor).map_err(context)?;
        let schedule = solution.schedule.clone();
        let mut select_rng = named_stream(cfg.seed, &format!("fl/round{t}/select"));
        let chosen = schedule.sample(&mut select_rng);
        let new_w = apply_adaptation(
            params.as_slice(),
            &updates[chosen].delta_w,
            schedule.entries()[chosen],
            users[chosen].data_size(),
            total_data,
            &eta,
        )
        .map_err(context)?;
        params = MlpParams::from_vec(initial.arch().clone(), new_w)?;

        let eval_mse = mse(eval_set, &params).map_err(context)?;
        let grads: Vec<Vec<T>> = updates.iter().map(|u| u.clipped_gradient.clone()).collect();
        let sizes: Vec<usize> = users.iter().map(|u| u.data_size()).collect();
        let terms = convergence_diagnostics(
            &grads,
            &sizes,
            &schedule,
            &eta,
            l_smooth,
            &noise_variances,
        )
        .map_err(context)?;
        rounds.push(RoundLog {
            round: t,
            chosen_user: chosen,
            schedule: schedule.entries().to_vec(),
            uplink_rates_mbit: rates,
            eval_mse,
            descent_term: terms.descent,
            variance_term: terms.sched_variance,
            vhat_trace: terms.vhat_diag.iter().copied().sum(),
        });
        xi_prev = schedule;
    }

    Ok((params, FlRunLog { rounds, l_smooth }))
}
