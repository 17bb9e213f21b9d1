//! Positioning error bound: received-signal covariance, Fisher information,
//! the bound itself, and its closed-form gradients w.r.t. the beamforming
//! variables.
//!
//! Per band, the received vector is complex Gaussian with mean
//! `mu_i(p) = (H_i . T_i) 1_M` (frame-expanded LoS times effective weights)
//! and position-independent covariance
//! `Lambda_i = K_i . (T_i V_i T_i^H) + sigma^2 I`, where `.` is the
//! elementwise product. The position Fisher matrix is therefore the
//! mean-derivative (Slepian-Bangs) term only,
//!
//! ```text
//! J[u,v] = sum_i 2 Re( d_{i,u}^H Lambda_i^{-1} d_{i,v} ),
//! d_{i,u} = (dH_{i,u} . T_i) 1_M,
//! ```
//!
//! and the bound is `tr(J^{-1})`.
//!
//! Gradients: with `W = J^{-2}`, `zeta_u = Lambda^{-1} d_u`, and
//! `d tr(J^{-1}) = -sum_{uv} W[u,v] dJ[u,v]`, expanding `dJ` through both the
//! mean (`T` in `d_u`) and the covariance (`T` in `Lambda`) gives, per band,
//! the cotangent w.r.t. `conj(T)`
//!
//! ```text
//! G_T = -2 sum_u rowscale(zeta_u, conj(sum_v W[u,v] dH_v))
//!       + 2 ((sum_{uv} W[u,v] zeta_u zeta_v^H) . conj(K)) (T V),
//! ```
//!
//! which the chain rule pushes through `T = C . (S B)` to
//! `grad_S[j] = (G_T[j] . C) B_j^H` and
//! `grad_C = 2 Re( sum_j conj(G_T[j]) . (S_j B_j) )`.
//!
//! Complex gradients follow the Wirtinger convention `d/d conj(S)`: the
//! steepest-descent step is `S - beta * grad_S` (the factor 2 relating
//! `d/d conj(S)` to the real-pair gradient is absorbed by the step size).
//! The finite-difference routine returns the same convention, and the two
//! are cross-validated in the test suites.

use ndarray::{Array1, Array2};
use num_complex::Complex;

use crate::channel::{BeamformingConfig, ChannelModel, PositionResponse};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, cholesky_solve, Vec3};
use crate::scalar::{Real, C};

/// Real symmetric 3x3 position information matrix, 1/m^2.
#[derive(Debug, Clone, Copy)]
pub struct FisherMatrix<T: Real> {
    pub matrix: [[T; 3]; 3],
}

impl<T: Real> FisherMatrix<T> {
    pub fn zero() -> Self {
        Self {
            matrix: [[T::zero(); 3]; 3],
        }
    }

    pub fn trace(&self) -> T {
        self.matrix[0][0] + self.matrix[1][1] + self.matrix[2][2]
    }

    pub fn min_eigenvalue(&self) -> T {
        linalg::sym3_min_eigenvalue(&self.matrix)
    }

    /// `tr(J^{-1})`, or `None` when the information is singular.
    pub fn trace_inverse(&self) -> Option<T> {
        linalg::sym3_trace_inverse(&self.matrix)
    }
}

/// Gradients w.r.t. the digital (`B x J` of `N_F x K`, complex, `d/d conj S`)
/// and analog (`B` of `N_F x M`, real) beamforming variables.
pub type GradientPair<T> = (Vec<Vec<Array2<C<T>>>>, Vec<Array2<T>>);

/// Bound value, information matrix, and beamforming gradients at one position.
#[derive(Debug, Clone)]
pub struct CrlbReport<T: Real> {
    pub crlb: T,
    pub fisher: FisherMatrix<T>,
    pub grad_digital: Vec<Vec<Array2<C<T>>>>,
    pub grad_analog: Vec<Array2<T>>,
}

/// Received covariance `Lambda = K . (T V T^H) + sigma^2 I` for one band.
pub fn received_covariance<T: Real>(
    coherence: &Array2<C<T>>,
    weights: &Array2<C<T>>,
    multipath_cov: &Array2<C<T>>,
    noise_variance: T,
) -> Array2<C<T>> {
    let tv = weights.dot(multipath_cov);
    let tvt = tv.dot(&linalg::adjoint(weights));
    let rows = weights.nrows();
    let mut lambda = Array2::<C<T>>::zeros((rows, rows));
    for r in 0..rows {
        for s in 0..rows {
            lambda[[r, s]] = coherence[[r, s]] * tvt[[r, s]];
        }
        lambda[[r, r]] += Complex::new(noise_variance, T::zero());
    }
    lambda
}

/// Per-band quantities shared by the Fisher, bound, and gradient paths.
struct BandWorkspace<T: Real> {
    weights: Array2<C<T>>,
    weights_v: Array2<C<T>>,
    mean_derivs: [Array1<C<T>>; 3],
    whitened: [Array1<C<T>>; 3],
}

fn band_workspace<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    response: &PositionResponse<T>,
    band: usize,
) -> Result<BandWorkspace<T>> {
    let weights = model.effective_weight_matrix(band, bf);
    let v = model.multipath_covariance(band);
    let k = model.coherence_matrix(band);
    let weights_v = weights.dot(v);
    let tvt = weights_v.dot(&linalg::adjoint(&weights));
    let rows = weights.nrows();
    let sigma2 = model.noise_variance();
    let mut lambda = Array2::<C<T>>::zeros((rows, rows));
    for r in 0..rows {
        for s in 0..rows {
            lambda[[r, s]] = k[[r, s]] * tvt[[r, s]];
        }
        lambda[[r, r]] += Complex::new(sigma2, T::zero());
    }
    let chol = cholesky(&lambda, "received covariance")?;

    let dlos = &response.dlos[band];
    let m = weights.ncols();
    let mut mean_derivs: [Array1<C<T>>; 3] = [
        Array1::zeros(rows),
        Array1::zeros(rows),
        Array1::zeros(rows),
    ];
    for u in 0..3 {
        for r in 0..rows {
            let mut acc = Complex::new(T::zero(), T::zero());
            for mm in 0..m {
                acc += dlos[u][[r, mm]] * weights[[r, mm]];
            }
            mean_derivs[u][r] = acc;
        }
    }
    let whitened = [
        cholesky_solve(&chol, &mean_derivs[0]),
        cholesky_solve(&chol, &mean_derivs[1]),
        cholesky_solve(&chol, &mean_derivs[2]),
    ];
    Ok(BandWorkspace {
        weights,
        weights_v,
        mean_derivs,
        whitened,
    })
}

fn accumulate_fisher<T: Real>(fisher: &mut FisherMatrix<T>, ws: &BandWorkspace<T>) {
    for u in 0..3 {
        for v in u..3 {
            let mut acc = Complex::new(T::zero(), T::zero());
            for r in 0..ws.mean_derivs[u].len() {
                acc += ws.mean_derivs[u][r].conj() * ws.whitened[v][r];
            }
            let term = T::of(2.0) * acc.re;
            fisher.matrix[u][v] += term;
            if v != u {
                fisher.matrix[v][u] += term;
            }
        }
    }
}

/// Fisher information at a precomputed position response.
pub fn fisher_for_response<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    response: &PositionResponse<T>,
) -> Result<FisherMatrix<T>> {
    let mut fisher = FisherMatrix::zero();
    for band in 0..model.num_bands() {
        let ws = band_workspace(model, bf, response, band)?;
        accumulate_fisher(&mut fisher, &ws);
    }
    Ok(fisher)
}

/// Fisher information matrix of the user position.
pub fn fisher_matrix<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    p: Vec3<T>,
) -> Result<FisherMatrix<T>> {
    fisher_for_response(model, bf, &model.position_response(p)?)
}

/// Positioning bound `tr(J^{-1})` at a precomputed response.
pub fn crlb_for_response<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    response: &PositionResponse<T>,
) -> Result<T> {
    fisher_for_response(model, bf, response)?
        .trace_inverse()
        .ok_or(Error::SingularInformation {
            position: linalg::v3_to_f64(response.position),
        })
}

/// Positioning bound at `p` in m^2.
pub fn crlb_point<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    p: Vec3<T>,
) -> Result<T> {
    crlb_for_response(model, bf, &model.position_response(p)?)
}

/// Arithmetic mean of the bound over a sample of positions. A singular
/// position fails the whole mean, with the position attached.
pub fn mean_crlb<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    samples: &[Vec3<T>],
) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::InvalidInput {
            what: "mean_crlb",
            details: "empty sample set".into(),
        });
    }
    let mut acc = T::zero();
    for &p in samples {
        acc += crlb_point(model, bf, p)?;
    }
    Ok(acc / T::of(samples.len() as f64))
}

/// Bound, Fisher matrix, and analytic gradients w.r.t. every digital and
/// analog beamforming variable at one precomputed response.
pub fn gradients_for_response<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    response: &PositionResponse<T>,
) -> Result<CrlbReport<T>> {
    let num_bands = model.num_bands();
    let mut fisher = FisherMatrix::zero();
    let mut workspaces = Vec::with_capacity(num_bands);
    for band in 0..num_bands {
        let ws = band_workspace(model, bf, response, band)?;
        accumulate_fisher(&mut fisher, &ws);
        workspaces.push(ws);
    }
    let j_inv = linalg::sym3_inverse(&fisher.matrix).ok_or(Error::SingularInformation {
        position: linalg::v3_to_f64(response.position),
    })?;
    let crlb = j_inv[0][0] + j_inv[1][1] + j_inv[2][2];
    // W = J^{-2}; d tr(J^{-1}) = -sum_{uv} W[u,v] dJ[u,v].
    let mut w = [[T::zero(); 3]; 3];
    for u in 0..3 {
        for v in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += j_inv[u][k] * j_inv[k][v];
            }
            w[u][v] = acc;
        }
    }

    let plan = model.plan();
    let (nf, nj) = (plan.num_frames(), plan.num_subbands());
    let mut grad_digital = Vec::with_capacity(num_bands);
    let mut grad_analog = Vec::with_capacity(num_bands);
    for (band, ws) in workspaces.iter().enumerate() {
        let rows = ws.weights.nrows();
        let m = ws.weights.ncols();
        let coh = model.coherence_matrix(band);
        let dlos = &response.dlos[band];

        // G_T = -2 sum_u zeta_u o conj(sum_v W[u,v] dH_v)
        //       + 2 ((sum_uv W[u,v] zeta_u zeta_v^H) . conj(K)) (T V).
        let mut g_t = Array2::<C<T>>::zeros((rows, m));
        for u in 0..3 {
            for r in 0..rows {
                let zr = ws.whitened[u][r];
                for mm in 0..m {
                    let mut dh_w = Complex::new(T::zero(), T::zero());
                    for v in 0..3 {
                        dh_w += dlos[v][[r, mm]] * w[u][v];
                    }
                    g_t[[r, mm]] -= (zr * dh_w.conj()).scale(T::of(2.0));
                }
            }
        }
        let mut zmat = Array2::<C<T>>::zeros((rows, rows));
        for r in 0..rows {
            for s in 0..rows {
                let mut acc = Complex::new(T::zero(), T::zero());
                for u in 0..3 {
                    for v in 0..3 {
                        acc += (ws.whitened[u][r] * ws.whitened[v][s].conj()).scale(w[u][v]);
                    }
                }
                zmat[[r, s]] = acc * coh[[r, s]].conj();
            }
        }
        let correction = zmat.dot(&ws.weights_v);
        for r in 0..rows {
            for mm in 0..m {
                g_t[[r, mm]] += correction[[r, mm]].scale(T::of(2.0));
            }
        }

        // Chain through T = C . (S B) into the digital and analog blocks.
        let c = &bf.analog[band];
        let mut per_band_digital = Vec::with_capacity(nj);
        let mut per_band_analog = Array2::<T>::zeros((nf, m));
        for jj in 0..nj {
            let b_mat = model.feed_to_me(band, jj);
            let sb = bf.digital[band][jj].dot(b_mat);
            let mut block = Array2::<C<T>>::zeros((nf, m));
            for q in 0..nf {
                let r = plan.row_index(jj, q);
                for mm in 0..m {
                    block[[q, mm]] = g_t[[r, mm]].scale(c[[q, mm]]);
                    per_band_analog[[q, mm]] +=
                        T::of(2.0) * (g_t[[r, mm]].conj() * sb[[q, mm]]).re;
                }
            }
            per_band_digital.push(block.dot(&linalg::adjoint(b_mat)));
        }
        grad_digital.push(per_band_digital);
        grad_analog.push(per_band_analog);
    }

    Ok(CrlbReport {
        crlb,
        fisher,
        grad_digital,
        grad_analog,
    })
}

/// Bound and analytic gradients at `p`.
pub fn crlb_gradients<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    p: Vec3<T>,
) -> Result<CrlbReport<T>> {
    gradients_for_response(model, bf, &model.position_response(p)?)
}

/// Central finite differences of an arbitrary scalar objective over every
/// real/imaginary digital component and every analog entry. Complex entries
/// are packed back into the `d/d conj(S)` convention, i.e.
/// `(df/dRe + i df/dIm) / 2`, to match [`crlb_gradients`].
pub fn finite_difference_of<T: Real>(
    bf: &BeamformingConfig<T>,
    step: T,
    mut objective: impl FnMut(&BeamformingConfig<T>) -> Result<T>,
) -> Result<GradientPair<T>> {
    if !(step > T::zero()) {
        return Err(Error::InvalidInput {
            what: "finite differences",
            details: "step must be positive".into(),
        });
    }
    let mut probe = bf.clone();
    let two_step = T::of(2.0) * step;
    let mut grad_digital = Vec::with_capacity(bf.digital.len());
    for (i, per_band) in bf.digital.iter().enumerate() {
        let mut out_band = Vec::with_capacity(per_band.len());
        for (j, s) in per_band.iter().enumerate() {
            let (nf, k) = s.dim();
            let mut g = Array2::<C<T>>::zeros((nf, k));
            for q in 0..nf {
                for kk in 0..k {
                    let base = s[[q, kk]];
                    probe.digital[i][j][[q, kk]] = base + Complex::new(step, T::zero());
                    let f_re_hi = objective(&probe)?;
                    probe.digital[i][j][[q, kk]] = base - Complex::new(step, T::zero());
                    let f_re_lo = objective(&probe)?;
                    probe.digital[i][j][[q, kk]] = base + Complex::new(T::zero(), step);
                    let f_im_hi = objective(&probe)?;
                    probe.digital[i][j][[q, kk]] = base - Complex::new(T::zero(), step);
                    let f_im_lo = objective(&probe)?;
                    probe.digital[i][j][[q, kk]] = base;
                    let d_re = (f_re_hi - f_re_lo) / two_step;
                    let d_im = (f_im_hi - f_im_lo) / two_step;
                    g[[q, kk]] = Complex::new(d_re, d_im).scale(T::of(0.5));
                }
            }
            out_band.push(g);
        }
        grad_digital.push(out_band);
    }
    let mut grad_analog = Vec::with_capacity(bf.analog.len());
    for (i, c) in bf.analog.iter().enumerate() {
        let (nf, m) = c.dim();
        let mut g = Array2::<T>::zeros((nf, m));
        for q in 0..nf {
            for mm in 0..m {
                let base = c[[q, mm]];
                probe.analog[i][[q, mm]] = base + step;
                let f_hi = objective(&probe)?;
                probe.analog[i][[q, mm]] = base - step;
                let f_lo = objective(&probe)?;
                probe.analog[i][[q, mm]] = base;
                g[[q, mm]] = (f_hi - f_lo) / two_step;
            }
        }
        grad_analog.push(g);
    }
    Ok((grad_digital, grad_analog))
}

/// Central finite differences of the positioning bound itself.
pub fn finite_difference_gradient<T: Real>(
    model: &ChannelModel<T>,
    bf: &BeamformingConfig<T>,
    p: Vec3<T>,
    step: T,
) -> Result<GradientPair<T>> {
    let response = model.position_response(p)?;
    finite_difference_of(bf, step, |probe| crlb_for_response(model, probe, &response))
}

/// Max elementwise relative difference between two gradient sets, over every
/// real/imaginary component: `max_l |a_l - b_l| / max(|b_l|, 1)`.
pub fn max_relative_difference<T: Real>(a: &GradientPair<T>, b: &GradientPair<T>) -> T {
    let mut worst = T::zero();
    let mut push = |x: T, y: T| {
        let denom = y.abs().max(T::one());
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    };
    for (ba, bb) in a.0.iter().zip(b.0.iter()) {
        for (sa, sb) in ba.iter().zip(bb.iter()) {
            for (za, zb) in sa.iter().zip(sb.iter()) {
                push(za.re, zb.re);
                push(za.im, zb.im);
            }
        }
    }
    for (ca, cb) in a.1.iter().zip(b.1.iter()) {
        for (&xa, &xb) in ca.iter().zip(cb.iter()) {
            push(xa, xb);
        }
    }
    worst
}

/// Gradients of a [`CrlbReport`] as a [`GradientPair`] view.
impl<T: Real> CrlbReport<T> {
    pub fn into_gradient_pair(self) -> GradientPair<T> {
        (self.grad_digital, self.grad_analog)
    }
}
