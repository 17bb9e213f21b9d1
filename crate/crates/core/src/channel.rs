//! Multi-band holographic-surface channel model.
//!
//! Signals travel in three stages: on-board propagation from the feeds to the
//! metamaterial elements, reconfigurable radiation at each element, and
//! propagation from the elements to the user. The element-to-user stage has a
//! deterministic spherical-wave line-of-sight component plus wide-sense
//! stationary multipath whose spatial covariance comes from a power-angle
//! profile and whose frequency/time coherence follows an exponential delay
//! profile and Jakes Doppler model. Bands are mutually independent.
//!
//! Matrix convention used throughout: per band, the `N_F * J` rows of stacked
//! frame/sub-band quantities are ordered sub-band-major, i.e. flat row
//! `j * N_F + q` holds sub-band `j`, frame `q` (0-based).

use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::Rng;

use crate::bessel::bessel_j0;
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_with_jitter, Vec3};
use crate::rng::named_stream;
use crate::scalar::{standard_complex_normal, Real, C};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Guard distance below which the user position is considered degenerate
/// with an element position.
pub const MIN_USER_DISTANCE: f64 = 1e-3;

/// Relative diagonal jitter used when factoring sampling covariances.
const SAMPLING_JITTER: f64 = 1e-12;

/// Number of Monte-Carlo positions used to estimate the mean LoS power that
/// normalizes the multipath covariance.
const PAP_SCALE_SAMPLES: usize = 100;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Feed and element placement of the surface, plus its board refractive index.
#[derive(Debug, Clone)]
pub struct SystemGeometry<T: Real> {
    feed_positions: Vec<Vec3<T>>,
    element_positions: Vec<Vec3<T>>,
    refractive_index: T,
}

impl<T: Real> SystemGeometry<T> {
    pub fn new(
        feed_positions: Vec<Vec3<T>>,
        element_positions: Vec<Vec3<T>>,
        refractive_index: T,
    ) -> Result<Self> {
        if feed_positions.is_empty() {
            return Err(Error::InvalidInput {
                what: "geometry",
                details: "at least one feed is required".into(),
            });
        }
        if element_positions.is_empty() {
            return Err(Error::InvalidInput {
                what: "geometry",
                details: "at least one element is required".into(),
            });
        }
        let finite = |ps: &[Vec3<T>]| ps.iter().flatten().all(|v| v.is_finite());
        if !finite(&feed_positions) || !finite(&element_positions) {
            return Err(Error::NonFinite("geometry positions"));
        }
        if !(refractive_index >= T::one()) {
            return Err(Error::InvalidInput {
                what: "geometry",
                details: format!("refractive index {refractive_index} must be >= 1"),
            });
        }
        Ok(Self {
            feed_positions,
            element_positions,
            refractive_index,
        })
    }

    pub fn num_feeds(&self) -> usize {
        self.feed_positions.len()
    }

    pub fn num_elements(&self) -> usize {
        self.element_positions.len()
    }

    pub fn feed_positions(&self) -> &[Vec3<T>] {
        &self.feed_positions
    }

    pub fn element_positions(&self) -> &[Vec3<T>] {
        &self.element_positions
    }

    pub fn refractive_index(&self) -> T {
        self.refractive_index
    }

    /// Planar grid of elements in the y-z plane centered at the origin, with
    /// the board broadside along +x.
    pub fn element_grid(rows: usize, cols: usize, spacing: T) -> Vec<Vec3<T>> {
        let mut out = Vec::with_capacity(rows * cols);
        let y0 = T::of((cols as f64 - 1.0) / 2.0);
        let z0 = T::of((rows as f64 - 1.0) / 2.0);
        for r in 0..rows {
            for c in 0..cols {
                let y = (T::of(c as f64) - y0) * spacing;
                let z = (T::of(r as f64) - z0) * spacing;
                out.push([T::zero(), y, z]);
            }
        }
        out
    }
}

/// Frequency plan shared by all bands: sub-band grid, frames, noise and
/// power budget.
#[derive(Debug, Clone)]
pub struct BandPlan<T: Real> {
    band_centers: Vec<T>,
    subband_centers: Vec<Vec<T>>,
    subband_bandwidth: T,
    noise_psd: T,
    num_frames: usize,
    frame_duration: T,
    max_power: T,
}

impl<T: Real> BandPlan<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        band_centers: Vec<T>,
        subband_centers: Vec<Vec<T>>,
        subband_bandwidth: T,
        noise_psd: T,
        num_frames: usize,
        frame_duration: T,
        max_power: T,
    ) -> Result<Self> {
        let invalid = |details: String| Error::InvalidInput {
            what: "band plan",
            details,
        };
        if band_centers.is_empty() || band_centers.len() != subband_centers.len() {
            return Err(invalid("band centers and sub-band lists must match and be nonempty".into()));
        }
        let j = subband_centers[0].len();
        if j == 0 {
            return Err(invalid("at least one sub-band per band".into()));
        }
        for (i, subs) in subband_centers.iter().enumerate() {
            if subs.len() != j {
                return Err(invalid(format!(
                    "band {i} has {} sub-bands, expected {j}",
                    subs.len()
                )));
            }
            for w in subs.windows(2) {
                if !(w[1] > w[0]) {
                    return Err(invalid(format!(
                        "sub-band centers of band {i} must be strictly increasing"
                    )));
                }
            }
            if !(subs[0] > T::zero()) {
                return Err(invalid(format!("sub-band centers of band {i} must be positive")));
            }
        }
        if !(subband_bandwidth > T::zero()) {
            return Err(invalid("sub-band bandwidth must be positive".into()));
        }
        // sigma^2 = N0 W may be zero for noise-free oracle setups, never negative.
        if noise_psd < T::zero() || !noise_psd.is_finite() {
            return Err(invalid("noise PSD must be finite and nonnegative".into()));
        }
        if num_frames == 0 {
            return Err(invalid("at least one frame".into()));
        }
        if !(frame_duration > T::zero()) {
            return Err(invalid("frame duration must be positive".into()));
        }
        if !(max_power > T::zero()) {
            return Err(invalid("max transmit power must be positive".into()));
        }
        Ok(Self {
            band_centers,
            subband_centers,
            subband_bandwidth,
            noise_psd,
            num_frames,
            frame_duration,
            max_power,
        })
    }

    pub fn num_bands(&self) -> usize {
        self.band_centers.len()
    }

    pub fn num_subbands(&self) -> usize {
        self.subband_centers[0].len()
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    /// Rows of the per-band stacked signal vector: `N_F * J`.
    pub fn rows(&self) -> usize {
        self.num_frames * self.num_subbands()
    }

    pub fn band_center(&self, band: usize) -> T {
        self.band_centers[band]
    }

    pub fn subband_center(&self, band: usize, subband: usize) -> T {
        self.subband_centers[band][subband]
    }

    pub fn frame_duration(&self) -> T {
        self.frame_duration
    }

    pub fn max_power(&self) -> T {
        self.max_power
    }

    pub fn noise_psd(&self) -> T {
        self.noise_psd
    }

    /// Per-entry noise variance `sigma^2 = N0 W`.
    pub fn noise_variance(&self) -> T {
        self.noise_psd * self.subband_bandwidth
    }

    /// Flat row index for (sub-band, frame), sub-band-major.
    pub fn row_index(&self, subband: usize, frame: usize) -> usize {
        subband * self.num_frames + frame
    }

    /// Same plan with a different noise PSD.
    pub fn with_noise_psd(&self, noise_psd: T) -> Result<Self> {
        Self::new(
            self.band_centers.clone(),
            self.subband_centers.clone(),
            self.subband_bandwidth,
            noise_psd,
            self.num_frames,
            self.frame_duration,
            self.max_power,
        )
    }
}

/// Directional gain pattern about the board broadside (+x).
///
/// `CosPow { rho }` is `max(0, cos theta)^rho` with `theta` the angle from
/// broadside; `rho = 0` reduces to a unit pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainPattern<T: Real> {
    Unit,
    CosPow { exponent: T },
}

impl<T: Real> GainPattern<T> {
    /// Gain for a unit propagation direction.
    pub fn value(&self, dir: Vec3<T>) -> T {
        match *self {
            GainPattern::Unit => T::one(),
            GainPattern::CosPow { exponent } => {
                if exponent == T::zero() {
                    return T::one();
                }
                let c = dir[0];
                if c > T::zero() {
                    c.powf(exponent)
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Gain and its gradient w.r.t. the *endpoint* `p` of the offset
    /// `v = p - anchor` with `d = |v|`. Needed for the analytic LoS
    /// derivatives.
    pub fn value_and_point_grad(&self, v: Vec3<T>, d: T) -> (T, Vec3<T>) {
        match *self {
            GainPattern::Unit => (T::one(), [T::zero(); 3]),
            GainPattern::CosPow { exponent } => {
                if exponent == T::zero() {
                    return (T::one(), [T::zero(); 3]);
                }
                let c = v[0] / d;
                if !(c > T::zero()) {
                    return (T::zero(), [T::zero(); 3]);
                }
                let g = c.powf(exponent);
                let common = exponent * c.powf(exponent - T::one()) / d;
                let mut grad = [T::zero(); 3];
                for (u, slot) in grad.iter_mut().enumerate() {
                    let delta = if u == 0 { T::one() } else { T::zero() };
                    *slot = common * (delta - c * v[u] / d);
                }
                (g, grad)
            }
        }
    }
}

/// Truncated Laplacian power-angle profile over azimuth and elevation,
/// with its total-power scale relative to the mean LoS power in the ROI.
#[derive(Debug, Clone, Copy)]
pub struct PowerAngleProfile<T: Real> {
    pub mean_azimuth: T,
    pub mean_elevation: T,
    pub spread_azimuth: T,
    pub spread_elevation: T,
    /// Ratio of total multipath power to mean LoS power; 0 disables multipath.
    pub scale: T,
}

impl<T: Real> PowerAngleProfile<T> {
    fn density(&self, azimuth: T, elevation: T) -> T {
        let sqrt2 = T::of(2.0).sqrt();
        let t = -sqrt2 * (azimuth - self.mean_azimuth).abs() / self.spread_azimuth
            - sqrt2 * (elevation - self.mean_elevation).abs() / self.spread_elevation;
        t.exp()
    }
}

/// Environment-dependent characteristics of one domain (gain patterns,
/// multipath statistics, mobility).
#[derive(Debug, Clone)]
pub struct EnvironmentProfile<T: Real> {
    pub feed_gain: GainPattern<T>,
    pub element_gain: GainPattern<T>,
    pub user_gain: T,
    pub pap: PowerAngleProfile<T>,
    /// RMS delay spread per band, seconds.
    pub rms_delay_spread: Vec<T>,
    /// Maximum user speed, m/s.
    pub max_speed: T,
    /// Angular quadrature resolution (azimuth, elevation) for the multipath
    /// covariance integral.
    pub quadrature: (usize, usize),
}

impl<T: Real> EnvironmentProfile<T> {
    pub fn validate(&self, num_bands: usize) -> Result<()> {
        let invalid = |details: String| Error::InvalidInput {
            what: "environment profile",
            details,
        };
        if self.user_gain < T::zero() {
            return Err(invalid("user gain must be nonnegative".into()));
        }
        if !(self.pap.spread_azimuth > T::zero()) || !(self.pap.spread_elevation > T::zero()) {
            return Err(invalid("angular spreads must be positive".into()));
        }
        if self.pap.scale < T::zero() {
            return Err(invalid("power-angle scale must be nonnegative".into()));
        }
        if self.rms_delay_spread.len() != num_bands {
            return Err(invalid(format!(
                "need one RMS delay spread per band ({num_bands}), got {}",
                self.rms_delay_spread.len()
            )));
        }
        if self.rms_delay_spread.iter().any(|t| *t < T::zero()) {
            return Err(invalid("RMS delay spread must be nonnegative".into()));
        }
        if self.max_speed < T::zero() {
            return Err(invalid("max speed must be nonnegative".into()));
        }
        if self.quadrature.0 == 0 || self.quadrature.1 == 0 {
            return Err(invalid("quadrature resolution must be at least 1x1".into()));
        }
        Ok(())
    }
}

/// Uniform box region of interest.
#[derive(Debug, Clone, Copy)]
pub struct RoiBox<T: Real> {
    center: Vec3<T>,
    extents: Vec3<T>,
}

impl<T: Real> RoiBox<T> {
    pub fn new(center: Vec3<T>, extents: Vec3<T>) -> Result<Self> {
        if extents.iter().any(|e| !(*e > T::zero())) {
            return Err(Error::InvalidInput {
                what: "roi",
                details: "extents must be positive".into(),
            });
        }
        Ok(Self { center, extents })
    }

    pub fn center(&self) -> Vec3<T> {
        self.center
    }

    pub fn extents(&self) -> Vec3<T> {
        self.extents
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        (0..3).all(|u| {
            let half = self.extents[u] * T::of(0.5);
            p[u] >= self.center[u] - half && p[u] <= self.center[u] + half
        })
    }

    /// One uniform draw from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3<T> {
        let mut p = [T::zero(); 3];
        for u in 0..3 {
            let offset = (T::uniform_01(rng) - T::of(0.5)) * self.extents[u];
            p[u] = self.center[u] + offset;
        }
        p
    }
}

/// Digital symbol matrices `S[i][j]` (`N_F x K`, complex) and analog
/// radiation-coefficient matrices `C[i]` (`N_F x M`, real in [0, 1]).
#[derive(Debug, Clone)]
pub struct BeamformingConfig<T: Real> {
    pub digital: Vec<Vec<Array2<C<T>>>>,
    pub analog: Vec<Array2<T>>,
}

impl<T: Real> BeamformingConfig<T> {
    /// Check shapes and both constraint families (row power exactly `P_max`,
    /// analog entries in the unit box) to relative tolerance `tol`.
    pub fn validate(
        &self,
        plan: &BandPlan<T>,
        num_feeds: usize,
        num_elements: usize,
        tol: T,
    ) -> Result<()> {
        let invalid = |details: String| Error::InvalidInput {
            what: "beamforming config",
            details,
        };
        let (b, j, nf) = (plan.num_bands(), plan.num_subbands(), plan.num_frames());
        if self.digital.len() != b || self.analog.len() != b {
            return Err(invalid(format!(
                "expected {b} bands, got {} digital / {} analog",
                self.digital.len(),
                self.analog.len()
            )));
        }
        for (i, per_band) in self.digital.iter().enumerate() {
            if per_band.len() != j {
                return Err(invalid(format!("band {i}: expected {j} sub-band matrices")));
            }
            for (jj, s) in per_band.iter().enumerate() {
                if s.dim() != (nf, num_feeds) {
                    return Err(invalid(format!(
                        "S[{i}][{jj}] has shape {:?}, expected ({nf}, {num_feeds})",
                        s.dim()
                    )));
                }
                for (q, row) in s.rows().into_iter().enumerate() {
                    let power = row.iter().map(|z| z.norm_sqr()).sum::<T>();
                    if (power - plan.max_power()).abs() > tol * plan.max_power() {
                        return Err(invalid(format!(
                            "S[{i}][{jj}] row {q} power {power} != P_max {}",
                            plan.max_power()
                        )));
                    }
                }
            }
        }
        for (i, c) in self.analog.iter().enumerate() {
            if c.dim() != (nf, num_elements) {
                return Err(invalid(format!(
                    "C[{i}] has shape {:?}, expected ({nf}, {num_elements})",
                    c.dim()
                )));
            }
            if c.iter().any(|v| *v < -tol || *v > T::one() + tol) {
                return Err(invalid(format!("C[{i}] has entries outside [0, 1]")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scalar propagation terms
// ---------------------------------------------------------------------------

/// On-board propagation gain `exp(-i 2 pi n_r f / v0 * |p_e - p_f|)`.
/// A pure phase factor: the board is modelled as lossless.
pub fn onboard_gain<T: Real>(
    frequency: T,
    feed: Vec3<T>,
    element: Vec3<T>,
    geometry: &SystemGeometry<T>,
) -> C<T> {
    let dist = linalg::v3_norm(linalg::v3_sub(element, feed));
    let phase = -T::of(2.0) * T::PI() * geometry.refractive_index() * frequency
        / T::of(SPEED_OF_LIGHT)
        * dist;
    Complex::from_polar(T::one(), phase)
}

/// Feed-to-element coupling matrix `B_{i,j}` (`K x M`):
/// feed gain x element gain x on-board phase.
pub fn feed_to_me_matrix<T: Real>(
    band: usize,
    subband: usize,
    geometry: &SystemGeometry<T>,
    env: &EnvironmentProfile<T>,
    plan: &BandPlan<T>,
) -> Array2<C<T>> {
    let f = plan.subband_center(band, subband);
    let (k, m) = (geometry.num_feeds(), geometry.num_elements());
    Array2::from_shape_fn((k, m), |(kk, mm)| {
        let feed = geometry.feed_positions()[kk];
        let element = geometry.element_positions()[mm];
        let v = linalg::v3_sub(element, feed);
        let d = linalg::v3_norm(v);
        let dir = if d > T::zero() {
            [v[0] / d, v[1] / d, v[2] / d]
        } else {
            [T::one(), T::zero(), T::zero()]
        };
        // Propagation direction feed -> element evaluates both patterns.
        let gain = env.feed_gain.value(dir) * env.element_gain.value(dir);
        onboard_gain(f, feed, element, geometry) * gain
    })
}

/// Line-of-sight gains `H_i` (`J x M`) at user position `p`:
/// `v0 g^E g^U / (4 pi f d) * exp(-i 2 pi f d / v0)`.
pub fn los_gain_matrix<T: Real>(
    p: Vec3<T>,
    band: usize,
    geometry: &SystemGeometry<T>,
    env: &EnvironmentProfile<T>,
    plan: &BandPlan<T>,
) -> Result<Array2<C<T>>> {
    let (j, m) = (plan.num_subbands(), geometry.num_elements());
    let v0 = T::of(SPEED_OF_LIGHT);
    let four_pi = T::of(4.0) * T::PI();
    let mut h = Array2::<C<T>>::zeros((j, m));
    for (mm, &element) in geometry.element_positions().iter().enumerate() {
        let v = linalg::v3_sub(p, element);
        let d = linalg::v3_norm(v);
        if d < T::of(MIN_USER_DISTANCE) {
            return Err(Error::DegenerateDistance {
                element: mm,
                distance: d.to_f64(),
                limit: MIN_USER_DISTANCE,
            });
        }
        let dir = [v[0] / d, v[1] / d, v[2] / d];
        let g = env.element_gain.value(dir) * env.user_gain;
        for jj in 0..j {
            let f = plan.subband_center(band, jj);
            let amp = v0 * g / (four_pi * f * d);
            let phase = -T::of(2.0) * T::PI() * f * d / v0;
            h[[jj, mm]] = Complex::from_polar(amp, phase);
        }
    }
    Ok(h)
}

/// Entrywise partial derivatives of [`los_gain_matrix`] w.r.t. the three
/// coordinates of `p`, by the chain rule through distance and gain pattern.
pub fn los_gain_derivatives<T: Real>(
    p: Vec3<T>,
    band: usize,
    geometry: &SystemGeometry<T>,
    env: &EnvironmentProfile<T>,
    plan: &BandPlan<T>,
) -> Result<[Array2<C<T>>; 3]> {
    let (j, m) = (plan.num_subbands(), geometry.num_elements());
    let v0 = T::of(SPEED_OF_LIGHT);
    let four_pi = T::of(4.0) * T::PI();
    let two_pi = T::of(2.0) * T::PI();
    let mut out = [
        Array2::<C<T>>::zeros((j, m)),
        Array2::<C<T>>::zeros((j, m)),
        Array2::<C<T>>::zeros((j, m)),
    ];
    for (mm, &element) in geometry.element_positions().iter().enumerate() {
        let v = linalg::v3_sub(p, element);
        let d = linalg::v3_norm(v);
        if d < T::of(MIN_USER_DISTANCE) {
            return Err(Error::DegenerateDistance {
                element: mm,
                distance: d.to_f64(),
                limit: MIN_USER_DISTANCE,
            });
        }
        let (g, g_grad) = env.element_gain.value_and_point_grad(v, d);
        for jj in 0..j {
            let f = plan.subband_center(band, jj);
            let wavenumber = two_pi * f / v0;
            let base = v0 * env.user_gain / (four_pi * f * d);
            let carrier = Complex::from_polar(T::one(), -wavenumber * d);
            for u in 0..3 {
                let dd_du = v[u] / d;
                // d/dp_u [ base(d) g(p) e^{-i k d} ]
                //  = e^{-i k d} base [ g'_u - g dd/d - i k g dd ].
                let real_part = g_grad[u] - g * dd_du / d;
                let imag_part = -wavenumber * g * dd_du;
                out[u][[jj, mm]] = carrier * Complex::new(base * real_part, base * imag_part);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multipath statistics
// ---------------------------------------------------------------------------

/// Unit direction for (azimuth, elevation) in the board frame: azimuth in the
/// x-y plane from +x, elevation from the x-y plane towards +z.
fn unit_direction<T: Real>(azimuth: T, elevation: T) -> Vec3<T> {
    [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ]
}

/// Spatial multipath covariance before total-power scaling: a uniform
/// tensor-grid quadrature of `a(theta) a(theta)^H P_pap(theta)` over the
/// sphere with solid-angle weights.
pub fn multipath_covariance_raw<T: Real>(
    band: usize,
    geometry: &SystemGeometry<T>,
    env: &EnvironmentProfile<T>,
    plan: &BandPlan<T>,
    quadrature: (usize, usize),
) -> Array2<C<T>> {
    let m = geometry.num_elements();
    let f_c = plan.band_center(band);
    let two_pi = T::of(2.0) * T::PI();
    let wavenumber = two_pi * f_c / T::of(SPEED_OF_LIGHT);
    let (n_az, n_el) = quadrature;
    let d_az = two_pi / T::of(n_az as f64);
    let d_el = T::PI() / T::of(n_el as f64);
    let reference = geometry.element_positions()[0];

    let mut cov = Array2::<C<T>>::zeros((m, m));
    let mut steering = Array1::<C<T>>::zeros(m);
    for s in 0..n_az {
        let az = -T::PI() + (T::of(s as f64) + T::of(0.5)) * d_az;
        for t in 0..n_el {
            let el = -T::FRAC_PI_2() + (T::of(t as f64) + T::of(0.5)) * d_el;
            let dir = unit_direction(az, el);
            let g = env.element_gain.value(dir);
            if g == T::zero() {
                continue;
            }
            let weight = env.pap.density(az, el) * el.cos() * d_az * d_el;
            if weight == T::zero() {
                continue;
            }
            for (mm, &pos) in geometry.element_positions().iter().enumerate() {
                let offset = linalg::v3_sub(pos, reference);
                let phase = wavenumber * linalg::v3_dot(offset, dir);
                steering[mm] = Complex::from_polar(g, phase);
            }
            for r in 0..m {
                let wr = steering[r] * weight;
                for c in 0..m {
                    cov[[r, c]] += wr * steering[c].conj();
                }
            }
        }
    }
    // Symmetrize away quadrature round-off.
    let adj = linalg::adjoint(&cov);
    (&cov + &adj).mapv(|z| z * Complex::new(T::of(0.5), T::zero()))
}

// ---------------------------------------------------------------------------
// Assembled model
// ---------------------------------------------------------------------------

/// A scenario: geometry, band plan, one environment, and the ROI, with the
/// expensive position-independent matrices precomputed.
#[derive(Debug, Clone)]
pub struct ChannelModel<T: Real> {
    geometry: SystemGeometry<T>,
    plan: BandPlan<T>,
    env: EnvironmentProfile<T>,
    roi: RoiBox<T>,
    feed_to_me: Vec<Vec<Array2<C<T>>>>,
    multipath_cov: Vec<Array2<C<T>>>,
    coherence: Vec<Array2<C<T>>>,
}

impl<T: Real> ChannelModel<T> {
    pub fn new(
        geometry: SystemGeometry<T>,
        plan: BandPlan<T>,
        env: EnvironmentProfile<T>,
        roi: RoiBox<T>,
    ) -> Result<Self> {
        env.validate(plan.num_bands())?;
        let b = plan.num_bands();
        let feed_to_me: Vec<Vec<_>> = (0..b)
            .map(|i| {
                (0..plan.num_subbands())
                    .map(|j| feed_to_me_matrix(i, j, &geometry, &env, &plan))
                    .collect()
            })
            .collect();
        let mut model = Self {
            geometry,
            plan,
            env,
            roi,
            feed_to_me,
            multipath_cov: Vec::new(),
            coherence: Vec::new(),
        };
        for i in 0..b {
            let cov = model.multipath_covariance_at_resolution(i, model.env.quadrature)?;
            model.multipath_cov.push(cov);
            model.coherence.push(model.compute_coherence(i));
        }
        Ok(model)
    }

    pub fn geometry(&self) -> &SystemGeometry<T> {
        &self.geometry
    }

    pub fn plan(&self) -> &BandPlan<T> {
        &self.plan
    }

    pub fn env(&self) -> &EnvironmentProfile<T> {
        &self.env
    }

    pub fn roi(&self) -> &RoiBox<T> {
        &self.roi
    }

    pub fn num_bands(&self) -> usize {
        self.plan.num_bands()
    }

    pub fn noise_variance(&self) -> T {
        self.plan.noise_variance()
    }

    /// Cached feed-to-element coupling `B_{i,j}`.
    pub fn feed_to_me(&self, band: usize, subband: usize) -> &Array2<C<T>> {
        &self.feed_to_me[band][subband]
    }

    /// Cached scaled multipath covariance `V_i`.
    pub fn multipath_covariance(&self, band: usize) -> &Array2<C<T>> {
        &self.multipath_cov[band]
    }

    /// Cached frequency/time coherence matrix `K_{ft,i}` (`R x R`).
    pub fn coherence_matrix(&self, band: usize) -> &Array2<C<T>> {
        &self.coherence[band]
    }

    /// Multipath covariance at an explicit quadrature resolution, scaled so
    /// its trace equals `pap.scale` times the mean LoS power over the ROI
    /// (itself a fixed-seed 100-sample Monte-Carlo estimate).
    pub fn multipath_covariance_at_resolution(
        &self,
        band: usize,
        quadrature: (usize, usize),
    ) -> Result<Array2<C<T>>> {
        let m = self.geometry.num_elements();
        if self.env.pap.scale == T::zero() {
            return Ok(Array2::zeros((m, m)));
        }
        let raw = multipath_covariance_raw(band, &self.geometry, &self.env, &self.plan, quadrature);
        let trace = (0..m).map(|d| raw[[d, d]].re).sum::<T>();
        if !(trace > T::zero()) {
            return Ok(Array2::zeros((m, m)));
        }
        let target = self.env.pap.scale * self.mean_los_power(band)?;
        let factor = Complex::new(target / trace, T::zero());
        Ok(raw.mapv(|z| z * factor))
    }

    /// Mean total LoS power over the ROI for one band, averaged over
    /// sub-bands and a fixed-seed set of positions.
    fn mean_los_power(&self, band: usize) -> Result<T> {
        let mut rng = named_stream(0, "channel/pap-scale");
        let mut acc = T::zero();
        for _ in 0..PAP_SCALE_SAMPLES {
            let p = self.roi.sample(&mut rng);
            let h = los_gain_matrix(p, band, &self.geometry, &self.env, &self.plan)?;
            acc += h.iter().map(|z| z.norm_sqr()).sum::<T>();
        }
        let j = T::of(self.plan.num_subbands() as f64);
        Ok(acc / (T::of(PAP_SCALE_SAMPLES as f64) * j))
    }

    fn compute_coherence(&self, band: usize) -> Array2<C<T>> {
        let (j, nf) = (self.plan.num_subbands(), self.plan.num_frames());
        let rows = self.plan.rows();
        let tau = self.env.rms_delay_spread[band];
        let doppler =
            self.env.max_speed * self.plan.band_center(band) / T::of(SPEED_OF_LIGHT);
        let two_pi = T::of(2.0) * T::PI();
        let t_f = self.plan.frame_duration();

        let mut k = Array2::<C<T>>::zeros((rows, rows));
        for j1 in 0..j {
            for j2 in 0..j {
                let df = self.plan.subband_center(band, j1) - self.plan.subband_center(band, j2);
                let rho_f = Complex::new(T::one(), T::zero())
                    / Complex::new(T::one(), two_pi * tau * df);
                for q1 in 0..nf {
                    for q2 in 0..nf {
                        let dq = T::of(q1 as f64) - T::of(q2 as f64);
                        let rho_t = bessel_j0(two_pi * doppler * t_f * dq);
                        k[[self.plan.row_index(j1, q1), self.plan.row_index(j2, q2)]] =
                            rho_f * rho_t;
                    }
                }
            }
        }
        k
    }

    /// Expand a per-sub-band `J x M` matrix to the stacked `R x M` layout by
    /// repeating each sub-band row across the `N_F` frames.
    pub fn expand_over_frames(&self, per_subband: &Array2<C<T>>) -> Array2<C<T>> {
        let (j, m) = per_subband.dim();
        let nf = self.plan.num_frames();
        let mut out = Array2::<C<T>>::zeros((j * nf, m));
        for jj in 0..j {
            for q in 0..nf {
                out.row_mut(jj * nf + q).assign(&per_subband.row(jj));
            }
        }
        out
    }

    /// Effective transmit weight `T_i` (`R x M`): per sub-band block
    /// `C_i . (S_{i,j} B_{i,j})` (elementwise product).
    pub fn effective_weight_matrix(
        &self,
        band: usize,
        bf: &BeamformingConfig<T>,
    ) -> Array2<C<T>> {
        let (j, nf, m) = (
            self.plan.num_subbands(),
            self.plan.num_frames(),
            self.geometry.num_elements(),
        );
        let mut t = Array2::<C<T>>::zeros((self.plan.rows(), m));
        let c = &bf.analog[band];
        for jj in 0..j {
            let sb = bf.digital[band][jj].dot(&self.feed_to_me[band][jj]);
            for q in 0..nf {
                let row = jj * nf + q;
                for mm in 0..m {
                    t[[row, mm]] = sb[[q, mm]] * c[[q, mm]];
                }
            }
        }
        t
    }

    /// LoS response and its position derivatives at `p`, pre-expanded to the
    /// stacked `R x M` layout for every band.
    pub fn position_response(&self, p: Vec3<T>) -> Result<PositionResponse<T>> {
        let mut los = Vec::with_capacity(self.num_bands());
        let mut dlos = Vec::with_capacity(self.num_bands());
        for i in 0..self.num_bands() {
            let h = los_gain_matrix(p, i, &self.geometry, &self.env, &self.plan)?;
            let dh = los_gain_derivatives(p, i, &self.geometry, &self.env, &self.plan)?;
            los.push(self.expand_over_frames(&h));
            dlos.push(dh.map(|d| self.expand_over_frames(&d)));
        }
        Ok(PositionResponse { position: p, los, dlos })
    }

    /// Deterministic received mean `mu_i(p)` for one band, given the
    /// effective weight matrix of that band.
    pub fn received_mean(&self, los_expanded: &Array2<C<T>>, t: &Array2<C<T>>) -> Array1<C<T>> {
        let (rows, m) = t.dim();
        Array1::from_shape_fn(rows, |r| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for mm in 0..m {
                acc += los_expanded[[r, mm]] * t[[r, mm]];
            }
            acc
        })
    }

    /// Prepare a sampler for repeated received-signal draws under one
    /// beamforming configuration (factors the sampling covariances once).
    pub fn received_sampler<'m>(
        &'m self,
        bf: &BeamformingConfig<T>,
    ) -> Result<ReceivedSampler<'m, T>> {
        let b = self.num_bands();
        let mut weights = Vec::with_capacity(b);
        let mut l_coherence = Vec::with_capacity(b);
        let mut l_covariance = Vec::with_capacity(b);
        for i in 0..b {
            weights.push(self.effective_weight_matrix(i, bf));
            let cov = &self.multipath_cov[i];
            let trace = (0..cov.nrows()).map(|d| cov[[d, d]].re).sum::<T>();
            if trace > T::zero() {
                l_coherence.push(Some(cholesky_with_jitter(
                    &self.coherence[i],
                    T::of(SAMPLING_JITTER),
                    "frequency/time coherence",
                )?));
                l_covariance.push(Some(cholesky_with_jitter(
                    cov,
                    T::of(SAMPLING_JITTER),
                    "multipath covariance",
                )?));
            } else {
                l_coherence.push(None);
                l_covariance.push(None);
            }
        }
        Ok(ReceivedSampler {
            model: self,
            weights,
            l_coherence,
            l_covariance,
        })
    }

    /// One-shot received-signal synthesis; see [`ReceivedSampler::sample`].
    pub fn synthesize_received<R: Rng + ?Sized>(
        &self,
        p: Vec3<T>,
        bf: &BeamformingConfig<T>,
        rng: &mut R,
    ) -> Result<Array2<C<T>>> {
        self.received_sampler(bf)?.sample(p, rng)
    }
}

/// LoS response and derivatives at one position, stacked per band.
#[derive(Debug, Clone)]
pub struct PositionResponse<T: Real> {
    pub position: Vec3<T>,
    /// Per band: `R x M` frame-expanded LoS matrix.
    pub los: Vec<Array2<C<T>>>,
    /// Per band: the three `R x M` coordinate derivatives.
    pub dlos: Vec<[Array2<C<T>>; 3]>,
}

/// Received-signal sampler with cached Cholesky factors.
pub struct ReceivedSampler<'m, T: Real> {
    model: &'m ChannelModel<T>,
    weights: Vec<Array2<C<T>>>,
    l_coherence: Vec<Option<Array2<C<T>>>>,
    l_covariance: Vec<Option<Array2<C<T>>>>,
}

impl<'m, T: Real> ReceivedSampler<'m, T> {
    pub fn weights(&self) -> &[Array2<C<T>>] {
        &self.weights
    }

    /// Draw one `B x R` received-signal matrix at position `p`.
    ///
    /// Per band, in fixed order: the matrix-normal multipath draw
    /// `L_K Z L_V^H` (row-major standard complex Gaussian `Z`), then the
    /// thermal noise vector. Bands are independent. With zero noise and no
    /// multipath this is a pure function of `(p, bf)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        p: Vec3<T>,
        rng: &mut R,
    ) -> Result<Array2<C<T>>> {
        let model = self.model;
        let rows = model.plan.rows();
        let m = model.geometry.num_elements();
        let sigma = model.noise_variance().sqrt();
        let mut y = Array2::<C<T>>::zeros((model.num_bands(), rows));
        for i in 0..model.num_bands() {
            let t = &self.weights[i];
            let h = los_gain_matrix(p, i, &model.geometry, &model.env, &model.plan)?;
            let h_exp = model.expand_over_frames(&h);
            let mut row = model.received_mean(&h_exp, t);

            if let (Some(l_k), Some(l_v)) = (&self.l_coherence[i], &self.l_covariance[i]) {
                let z = Array2::from_shape_fn((rows, m), |_| standard_complex_normal(rng));
                let h_mp = l_k.dot(&z).dot(&linalg::adjoint(l_v));
                for r in 0..rows {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for mm in 0..m {
                        acc += h_mp[[r, mm]] * t[[r, mm]];
                    }
                    row[r] += acc;
                }
            }
            if sigma > T::zero() {
                for r in 0..rows {
                    row[r] += standard_complex_normal::<T, _>(rng) * sigma;
                }
            }
            y.row_mut(i).assign(&row);
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{desk_model, small_model, unit_env};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn onboard_gain_is_unit_modulus() {
        let geom = SystemGeometry::new(
            vec![[0.0, 0.0, 0.0]],
            vec![[0.0, 0.3, 0.1], [0.0, -0.2, 0.4]],
            2.1,
        )
        .unwrap();
        let g = onboard_gain(2.5e9, geom.feed_positions()[0], geom.element_positions()[1], &geom);
        let dev: f64 = g.norm() - 1.0;
        assert!(dev.abs() < 1e-14);
    }

    #[test]
    fn onboard_gain_zero_path_is_one() {
        let p = [0.1, 0.2, 0.3];
        let geom = SystemGeometry::new(vec![p], vec![p], 2.1).unwrap();
        let g = onboard_gain(2.5e9, p, p, &geom);
        assert_eq!(g, Complex::new(1.0, 0.0));
    }

    #[test]
    fn onboard_gain_full_turn_phase() {
        // Path length of exactly one on-board wavelength: phase -2 pi.
        let n_r = 2.1;
        let f = 2.5e9;
        let d = SPEED_OF_LIGHT / (n_r * f);
        let geom = SystemGeometry::new(vec![[0.0, 0.0, 0.0]], vec![[0.0, d, 0.0]], n_r).unwrap();
        let g = onboard_gain(f, [0.0, 0.0, 0.0], [0.0, d, 0.0], &geom);
        assert!((g - Complex::new(1.0, 0.0)).norm() < 1e-9, "got {g}");
    }

    #[test]
    fn feed_to_me_shape_and_unit_gain_reduction() {
        let (model, _) = small_model();
        let b = feed_to_me_matrix(0, 1, model.geometry(), model.env(), model.plan());
        assert_eq!(b.dim(), (model.geometry().num_feeds(), model.geometry().num_elements()));
        // Unit gain patterns: entries equal the bare on-board phase factors.
        for (kk, &feed) in model.geometry().feed_positions().iter().enumerate() {
            for (mm, &el) in model.geometry().element_positions().iter().enumerate() {
                let want =
                    onboard_gain(model.plan().subband_center(0, 1), feed, el, model.geometry());
                assert!((b[[kk, mm]] - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn feed_to_me_entry_cross_check() {
        // One entry against the scalar composition with a shaped pattern.
        let (model, _) = small_model();
        let mut env = model.env().clone();
        env.element_gain = GainPattern::CosPow { exponent: 0.7 };
        env.feed_gain = GainPattern::CosPow { exponent: 0.3 };
        let b = feed_to_me_matrix(0, 0, model.geometry(), &env, model.plan());
        let (kk, mm) = (1, 2);
        let feed = model.geometry().feed_positions()[kk];
        let el = model.geometry().element_positions()[mm];
        let v = linalg::v3_sub(el, feed);
        let d = linalg::v3_norm(v);
        let dir = [v[0] / d, v[1] / d, v[2] / d];
        let want = onboard_gain(model.plan().subband_center(0, 0), feed, el, model.geometry())
            * (dir[0].powf(0.3) * dir[0].powf(0.7));
        assert!((b[[kk, mm]] - want).norm() < 1e-13);
    }

    #[test]
    fn los_modulus_and_inverse_distance_law() {
        let (model, _) = small_model();
        let p1 = [4.0, 0.0, 0.0];
        let h1 = los_gain_matrix(p1, 0, model.geometry(), model.env(), model.plan()).unwrap();
        for jj in 0..model.plan().num_subbands() {
            for (mm, &el) in model.geometry().element_positions().iter().enumerate() {
                let d = linalg::v3_norm(linalg::v3_sub(p1, el));
                let want = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI
                    * model.plan().subband_center(0, jj)
                    * d);
                assert!((h1[[jj, mm]].norm() - want).abs() < 1e-12 * want);
            }
        }
        // Doubling the distance from a single element halves the modulus.
        let geom_one = SystemGeometry::new(
            vec![[-0.02, 0.0, 0.0]],
            vec![[0.0, 0.0, 0.0]],
            2.1,
        )
        .unwrap();
        let ha = los_gain_matrix([3.0, 0.0, 0.0], 0, &geom_one, model.env(), model.plan()).unwrap();
        let hb = los_gain_matrix([6.0, 0.0, 0.0], 0, &geom_one, model.env(), model.plan()).unwrap();
        assert!((ha[[0, 0]].norm() / hb[[0, 0]].norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn los_phase_periodic_in_wavelength() {
        let (model, _) = small_model();
        let geom_one =
            SystemGeometry::new(vec![[-0.02, 0.0, 0.0]], vec![[0.0, 0.0, 0.0]], 2.1).unwrap();
        let f = model.plan().subband_center(0, 0);
        let lambda = SPEED_OF_LIGHT / f;
        let d = 5.0;
        let ha = los_gain_matrix([d, 0.0, 0.0], 0, &geom_one, model.env(), model.plan()).unwrap();
        let hb =
            los_gain_matrix([d + lambda, 0.0, 0.0], 0, &geom_one, model.env(), model.plan())
                .unwrap();
        let phase_diff = (ha[[0, 0]].arg() - hb[[0, 0]].arg()).abs();
        assert!(phase_diff < 1e-6, "phase difference {phase_diff}");
    }

    #[test]
    fn los_rejects_degenerate_distance() {
        let (model, _) = small_model();
        let el = model.geometry().element_positions()[0];
        let p = [el[0] + 1e-5, el[1], el[2]];
        match los_gain_matrix(p, 0, model.geometry(), model.env(), model.plan()) {
            Err(Error::DegenerateDistance { .. }) => {}
            other => panic!("expected DegenerateDistance, got {other:?}"),
        }
    }

    fn fd_los_derivative(
        model: &ChannelModel<f64>,
        p: Vec3<f64>,
        u: usize,
        h: f64,
    ) -> Array2<C<f64>> {
        let mut hi = p;
        hi[u] += h;
        let mut lo = p;
        lo[u] -= h;
        let a = los_gain_matrix(hi, 0, model.geometry(), model.env(), model.plan()).unwrap();
        let b = los_gain_matrix(lo, 0, model.geometry(), model.env(), model.plan()).unwrap();
        (&a - &b).mapv(|z| z / Complex::new(2.0 * h, 0.0))
    }

    #[test]
    fn los_derivatives_match_finite_differences() {
        // Shaped pattern so the gain-gradient path is exercised too.
        let (model, _) = small_model();
        let mut env = model.env().clone();
        env.element_gain = GainPattern::CosPow { exponent: 0.1 };
        let model = ChannelModel::new(
            model.geometry().clone(),
            model.plan().clone(),
            env,
            *model.roi(),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..5 {
            let p = model.roi().sample(&mut rng);
            let dh = los_gain_derivatives(p, 0, model.geometry(), model.env(), model.plan())
                .unwrap();
            for u in 0..3 {
                // h = 1e-5 m keeps O(h^2 k^2) truncation well under the
                // 1e-6 relative tolerance at GHz wavenumbers.
                let fd = fd_los_derivative(&model, p, u, 1e-5);
                let scale = fd.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
                let err = (&dh[u] - &fd).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
                assert!(err <= 1e-6 * scale, "coord {u}: err {err}, scale {scale}");
            }
        }
    }

    #[test]
    fn los_derivatives_linear_in_user_gain() {
        let (model, _) = small_model();
        let mut env2 = model.env().clone();
        env2.user_gain = 3.0;
        let p = [9.0, 1.0, 0.5];
        let d1 = los_gain_derivatives(p, 0, model.geometry(), model.env(), model.plan()).unwrap();
        let d2 = los_gain_derivatives(p, 0, model.geometry(), &env2, model.plan()).unwrap();
        for u in 0..3 {
            let err = (&d2[u] - &d1[u].mapv(|z| z * Complex::new(3.0, 0.0)))
                .iter()
                .map(|z| z.norm())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-16_f64.max(1e-12 * d2[u].iter().map(|z| z.norm()).fold(0.0, f64::max)));
        }
    }

    #[test]
    fn los_derivative_perpendicular_offset_has_no_amplitude_term() {
        // p at the same z as the (single) element and a unit pattern: the
        // z-partial of distance vanishes, so the whole z-derivative vanishes.
        let geom =
            SystemGeometry::new(vec![[-0.02, 0.0, 0.0]], vec![[0.0, 0.0, 0.25]], 2.1).unwrap();
        let (model, _) = small_model();
        let d = los_gain_derivatives([7.0, 2.0, 0.25], 0, &geom, model.env(), model.plan())
            .unwrap();
        let worst = d[2].iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(worst < 1e-20, "z-derivative should vanish, got {worst}");
    }

    #[test]
    fn multipath_covariance_hermitian_psd() {
        let (model, _) = small_model();
        let v = model.multipath_covariance(0);
        assert!(linalg::hermitian_deviation(v) < 1e-12);
        let m = v.nrows();
        let trace: f64 = (0..m).map(|d| v[[d, d]].re).sum();
        assert!(trace > 0.0);
        // lambda_min >= -1e-10 trace: shifting by 1e-10 trace + tiny must be PD.
        let mut shifted = v.clone();
        for d in 0..m {
            shifted[[d, d]] += Complex::new(1e-10 * trace + 1e-300, 0.0);
        }
        assert!(linalg::cholesky(&shifted, "shifted V").is_ok());
    }

    #[test]
    fn multipath_single_node_is_rank_one() {
        let (model, _) = small_model();
        let raw =
            multipath_covariance_raw(0, model.geometry(), model.env(), model.plan(), (1, 1));
        // Recompute the lone steering vector: azimuth -pi + pi = 0? A 1x1 grid
        // has its node at azimuth 0, elevation 0.
        let dir = [1.0, 0.0, 0.0];
        let f_c = model.plan().band_center(0);
        let k = 2.0 * std::f64::consts::PI * f_c / SPEED_OF_LIGHT;
        let reference = model.geometry().element_positions()[0];
        let m = model.geometry().num_elements();
        let weight = model.env().pap.density(0.0, 0.0)
            * (2.0 * std::f64::consts::PI)
            * std::f64::consts::PI;
        for r in 0..m {
            for c in 0..m {
                let pr = linalg::v3_sub(model.geometry().element_positions()[r], reference);
                let pc = linalg::v3_sub(model.geometry().element_positions()[c], reference);
                let ar = Complex::from_polar(1.0, k * linalg::v3_dot(pr, dir));
                let ac = Complex::from_polar(1.0, k * linalg::v3_dot(pc, dir));
                let want = ar * ac.conj() * weight;
                assert!((raw[[r, c]] - want).norm() < 1e-10 * weight);
            }
        }
    }

    #[test]
    fn multipath_quadrature_refinement_is_converged() {
        let (model, _) = small_model();
        let coarse = model.multipath_covariance_at_resolution(0, (64, 32)).unwrap();
        let fine = model.multipath_covariance_at_resolution(0, (128, 64)).unwrap();
        let scale = fine.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        let err = (&coarse - &fine).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(err < 0.01 * scale, "refinement moved entries by {}", err / scale);
    }

    #[test]
    fn coherence_unit_diagonal_and_hermitian() {
        let (model, _) = small_model();
        let k = model.coherence_matrix(0);
        for d in 0..k.nrows() {
            assert!((k[[d, d]] - Complex::new(1.0, 0.0)).norm() < 1e-14);
        }
        assert!(linalg::hermitian_deviation(k) < 1e-14);
    }

    #[test]
    fn coherence_static_users_have_unit_time_correlation() {
        let (model, _) = small_model();
        let mut env = model.env().clone();
        env.max_speed = 0.0;
        let still = ChannelModel::new(
            model.geometry().clone(),
            model.plan().clone(),
            env,
            *model.roi(),
        )
        .unwrap();
        let k = still.coherence_matrix(0);
        let plan = still.plan();
        for j1 in 0..plan.num_subbands() {
            for j2 in 0..plan.num_subbands() {
                let want = k[[plan.row_index(j1, 0), plan.row_index(j2, 0)]];
                for q1 in 0..plan.num_frames() {
                    for q2 in 0..plan.num_frames() {
                        let got = k[[plan.row_index(j1, q1), plan.row_index(j2, q2)]];
                        assert!((got - want).norm() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn effective_weight_hadamard_identities() {
        let (model, bf) = small_model();
        let mut all_ones = bf.clone();
        for c in &mut all_ones.analog {
            c.fill(1.0);
        }
        let t = model.effective_weight_matrix(0, &all_ones);
        assert_eq!(t.dim(), (model.plan().rows(), model.geometry().num_elements()));
        for jj in 0..model.plan().num_subbands() {
            let sb = all_ones.digital[0][jj].dot(model.feed_to_me(0, jj));
            for q in 0..model.plan().num_frames() {
                for mm in 0..model.geometry().num_elements() {
                    let r = model.plan().row_index(jj, q);
                    assert!((t[[r, mm]] - sb[[q, mm]]).norm() < 1e-14);
                }
            }
        }
        let mut zeroed = bf.clone();
        for c in &mut zeroed.analog {
            c.fill(0.0);
        }
        let t0 = model.effective_weight_matrix(0, &zeroed);
        assert!(t0.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn synthesize_noise_free_equals_mean() {
        let (model, bf) = small_model();
        let mut env = model.env().clone();
        env.pap.scale = 0.0;
        let plan = model.plan().with_noise_psd(0.0).unwrap();
        let clean = ChannelModel::new(model.geometry().clone(), plan, env, *model.roi()).unwrap();
        let p = [9.0, -1.0, 0.3];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let y = clean.synthesize_received(p, &bf, &mut rng).unwrap();
        for i in 0..clean.num_bands() {
            let h = los_gain_matrix(p, i, clean.geometry(), clean.env(), clean.plan()).unwrap();
            let h_exp = clean.expand_over_frames(&h);
            let t = clean.effective_weight_matrix(i, &bf);
            let mu = clean.received_mean(&h_exp, &t);
            for r in 0..clean.plan().rows() {
                assert_eq!(y[[i, r]], mu[r]);
            }
        }
    }

    #[test]
    fn synthesize_is_seed_deterministic() {
        let (model, bf) = small_model();
        let p = [10.0, 2.0, -0.5];
        let mut r1 = ChaCha12Rng::seed_from_u64(123);
        let mut r2 = ChaCha12Rng::seed_from_u64(123);
        let y1 = model.synthesize_received(p, &bf, &mut r1).unwrap();
        let y2 = model.synthesize_received(p, &bf, &mut r2).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn roi_sampling_stays_inside() {
        let roi = RoiBox::new([10.0, 0.0, 0.0], [10.0, 10.0, 2.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            assert!(roi.contains(roi.sample(&mut rng)));
        }
    }

    #[test]
    fn beamforming_validation_catches_power_violation() {
        let (model, mut bf) = small_model();
        bf.digital[0][0][[0, 0]] *= Complex::new(1.5, 0.0);
        assert!(bf
            .validate(
                model.plan(),
                model.geometry().num_feeds(),
                model.geometry().num_elements(),
                1e-9
            )
            .is_err());
    }

    #[test]
    fn desk_model_builds() {
        let (model, bf) = desk_model();
        bf.validate(
            model.plan(),
            model.geometry().num_feeds(),
            model.geometry().num_elements(),
            1e-9,
        )
        .unwrap();
        assert_eq!(model.num_bands(), 2);
        assert_eq!(model.plan().rows(), 32);
    }

    #[test]
    fn unit_env_is_all_unit_gains() {
        let env = unit_env(2);
        assert_eq!(env.element_gain, GainPattern::Unit);
        assert_eq!(env.user_gain, 1.0);
    }

    #[test]
    fn expand_over_frames_layout() {
        let (model, _) = small_model();
        let j = model.plan().num_subbands();
        let h = Array2::from_shape_fn((j, 1), |(jj, _)| Complex::new(jj as f64, 0.0));
        let e = model.expand_over_frames(&h);
        for jj in 0..j {
            for q in 0..model.plan().num_frames() {
                assert_eq!(e[[model.plan().row_index(jj, q), 0]].re, jj as f64);
            }
        }
    }

    #[test]
    fn band_plan_rejects_unsorted_subbands() {
        let r = BandPlan::new(
            vec![2.5e9],
            vec![vec![2.51e9, 2.50e9]],
            1e7,
            1e-13,
            2,
            1e-3,
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn gain_pattern_clamps_back_hemisphere() {
        let g = GainPattern::CosPow { exponent: 0.5f64 };
        assert_eq!(g.value([-0.5, 0.8, 0.0]), 0.0);
        let front: f64 = g.value([1.0, 0.0, 0.0]);
        assert!((front - 1.0).abs() < 1e-15);
    }
}
