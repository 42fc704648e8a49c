//! Gaussian-process covariate simulation and the three benchmark
//! regression scenarios.
//!
//! Each simulated observation has four functional channels drawn from
//! distinct processes (exponential variogram, Brownian motion, fractional
//! Brownian motion, Matern 3/2), and a scalar response built from
//! quadrature index scores of the benchmark coefficient functions, plus
//! Gaussian noise of variance 0.04 drawn from its own stream so the
//! noiseless response stays recoverable.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::fda::{beta_curve, Curve, FdaError, Grid, MultiCurve, PointwiseKind};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid process parameters: {0}")]
    InvalidSpec(String),
    #[error("covariance matrix is not positive semidefinite (jitter escalation exhausted after {attempts} attempts, last jitter {last_jitter:e})")]
    NumericalFailure { attempts: usize, last_jitter: f64 },
    #[error("scenario response needs 4 channels, got {0}")]
    ChannelCount(usize),
    #[error(transparent)]
    Fda(#[from] FdaError),
}

/// One Gaussian-process covariance family with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GpSpec {
    /// cov(s,t) = min(s,t)
    Brownian,
    /// cov(s,t) = (s^{2H} + t^{2H} - |s-t|^{2H}) / 2
    Fbm { hurst: f64 },
    /// cov(s,t) = sill * exp(-|s-t| / range)
    ExpVariogram { range: f64, sill: f64 },
    /// cov(s,t) = variance * (1 + sqrt(3) d / lengthscale) * exp(-sqrt(3) d / lengthscale)
    Matern32 { lengthscale: f64, variance: f64 },
}

impl GpSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        match *self {
            GpSpec::Brownian => Ok(()),
            GpSpec::Fbm { hurst } => {
                if hurst > 0.0 && hurst < 1.0 {
                    Ok(())
                } else {
                    bad(alloc::format!("fbm hurst must be in (0,1), got {hurst}"))
                }
            }
            GpSpec::ExpVariogram { range, sill } => {
                if range > 0.0 && sill > 0.0 {
                    Ok(())
                } else {
                    bad(alloc::format!(
                        "exp_variogram needs range > 0 and sill > 0, got range {range}, sill {sill}"
                    ))
                }
            }
            GpSpec::Matern32 {
                lengthscale,
                variance,
            } => {
                if lengthscale > 0.0 && variance > 0.0 {
                    Ok(())
                } else {
                    bad(alloc::format!(
                        "matern needs lengthscale > 0 and variance > 0, got lengthscale {lengthscale}, variance {variance}"
                    ))
                }
            }
        }
    }

    fn cov(&self, s: f64, t: f64) -> f64 {
        let d = libm::fabs(s - t);
        match *self {
            GpSpec::Brownian => libm::fmin(s, t),
            GpSpec::Fbm { hurst } => {
                let h2 = 2.0 * hurst;
                0.5 * (libm::pow(s, h2) + libm::pow(t, h2) - libm::pow(d, h2))
            }
            GpSpec::ExpVariogram { range, sill } => sill * libm::exp(-d / range),
            GpSpec::Matern32 {
                lengthscale,
                variance,
            } => {
                let a = libm::sqrt(3.0) * d / lengthscale;
                variance * (1.0 + a) * libm::exp(-a)
            }
        }
    }
}

/// Covariance matrix of `spec` on the grid points.
pub fn covariance_matrix(spec: &GpSpec, grid: &Grid) -> Result<Tensor, SimError> {
    spec.validate()?;
    let pts = grid.points();
    let n = pts.len();
    // Fill the upper triangle and mirror it so the matrix is symmetric
    // to the last bit.
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in i..n {
            let v = spec.cov(pts[i], pts[j]);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(m)
}

/// Lower Cholesky factor tolerant of positive semidefinite input.
///
/// A zero pivot is accepted when the column below it is also (numerically)
/// zero, which is the exact PSD factorization; a negative pivot or a
/// nonzero column over a zero pivot reports failure so the caller can add
/// jitter.
fn cholesky_psd(a: &Tensor, jitter: f64) -> Option<Tensor> {
    let n = a.rows();
    let scale = {
        let mut s: f64 = 0.0;
        for i in 0..n {
            s = libm::fmax(s, libm::fabs(a.at(i, i)));
        }
        libm::fmax(s, 1.0)
    };
    let zero_tol = 1e-12 * scale;
    let mut l = Tensor::zeros(vec![n, n]);
    for j in 0..n {
        let mut d = a.at(j, j) + jitter;
        for k in 0..j {
            d -= l.at(j, k) * l.at(j, k);
        }
        if d < -zero_tol {
            return None;
        }
        let dj = if d > zero_tol { libm::sqrt(d) } else { 0.0 };
        l.set(j, j, dj);
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if dj > 0.0 {
                l.set(i, j, s / dj);
            } else if libm::fabs(s) <= zero_tol {
                l.set(i, j, 0.0);
            } else {
                return None;
            }
        }
    }
    Some(l)
}

/// Cholesky with bounded jitter escalation: the plain factorization is
/// tried first, then diagonal jitter starting at 1e-12 of the mean
/// diagonal, growing tenfold, at most 5 escalations.
pub fn cholesky_jittered(a: &Tensor) -> Result<Tensor, SimError> {
    let n = a.rows();
    let mean_diag = {
        let mut t = 0.0;
        for i in 0..n {
            t += a.at(i, i);
        }
        libm::fmax(t / n as f64, 1e-30)
    };
    if let Some(l) = cholesky_psd(a, 0.0) {
        return Ok(l);
    }
    let mut jitter = 1e-12 * mean_diag;
    for attempt in 1..=5usize {
        if let Some(l) = cholesky_psd(a, jitter) {
            return Ok(l);
        }
        if attempt == 5 {
            return Err(SimError::NumericalFailure {
                attempts: 6,
                last_jitter: jitter,
            });
        }
        jitter *= 10.0;
    }
    unreachable!("loop returns on the fifth attempt")
}

/// Path sampler for one process on one grid; the Cholesky factor is
/// computed once and reused for every draw.
#[derive(Debug, Clone)]
pub struct GpSampler {
    grid: Grid,
    chol: Tensor,
}

impl GpSampler {
    pub fn new(spec: &GpSpec, grid: &Grid) -> Result<Self, SimError> {
        let cov = covariance_matrix(spec, grid)?;
        let chol = cholesky_jittered(&cov)?;
        Ok(Self {
            grid: grid.clone(),
            chol,
        })
    }

    /// One path L*z with z standard normal from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Curve {
        let n = self.grid.n();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let mut vals = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            // L is lower triangular: columns past i are zero.
            for j in 0..=i {
                acc += self.chol.at(i, j) * z[j];
            }
            vals[i] = acc;
        }
        Curve::new(self.grid.clone(), vals).expect("GP path values are finite")
    }
}

/// Convenience one-shot draw: builds the sampler and samples once.
pub fn sample_gp(spec: &GpSpec, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<Curve, SimError> {
    Ok(GpSampler::new(spec, grid)?.sample(rng))
}

/// The three benchmark regression scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
            Scenario::S3 => "S3",
        }
    }
}

impl core::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "S1" | "s1" => Ok(Scenario::S1),
            "S2" | "s2" => Ok(Scenario::S2),
            "S3" | "s3" => Ok(Scenario::S3),
            other => Err(alloc::format!("unknown scenario {other:?} (expected S1, S2 or S3)")),
        }
    }
}

/// Sum over channels of the quadrature score against one coefficient
/// function: sum_c <beta_j, X^(c)>.
fn index_sum(j: usize, x: &MultiCurve) -> Result<f64, SimError> {
    let beta = beta_curve(j, x.grid())?;
    let mut acc = 0.0;
    for c in x.channels() {
        acc += beta.inner_product(c)?;
    }
    Ok(acc)
}

/// Noiseless response of a scenario on one 4-channel observation.
///
/// S1: a^2 + b^2 with a, b the channel sums of beta_1, beta_2 scores.
/// S2: the same sum of squares extended to all four coefficients.
/// S3: (A + B + C*D)^2 + (A*B + C + D)^2 where A scores beta_1 against
/// the squared first channel, B scores beta_2 against the absolute
/// second channel, and C, D score beta_3, beta_4 against channels 3, 4.
pub fn scenario_response(scenario: Scenario, x: &MultiCurve) -> Result<f64, SimError> {
    if x.p() != 4 {
        return Err(SimError::ChannelCount(x.p()));
    }
    match scenario {
        Scenario::S1 => {
            let a = index_sum(1, x)?;
            let b = index_sum(2, x)?;
            Ok(a * a + b * b)
        }
        Scenario::S2 => {
            let mut acc = 0.0;
            for j in 1..=4 {
                let v = index_sum(j, x)?;
                acc += v * v;
            }
            Ok(acc)
        }
        Scenario::S3 => {
            let grid = x.grid();
            let a = beta_curve(1, grid)?
                .inner_product(&x.channel(0).pointwise(PointwiseKind::Square))?;
            let b = beta_curve(2, grid)?
                .inner_product(&x.channel(1).pointwise(PointwiseKind::Abs))?;
            let c = beta_curve(3, grid)?.inner_product(x.channel(2))?;
            let d = beta_curve(4, grid)?.inner_product(x.channel(3))?;
            let t1 = a + b + c * d;
            let t2 = a * b + c + d;
            Ok(t1 * t1 + t2 * t2)
        }
    }
}

/// The four covariate processes in channel order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpSuite {
    pub specs: [GpSpec; 4],
}

impl Default for GpSuite {
    fn default() -> Self {
        Self {
            specs: [
                GpSpec::ExpVariogram {
                    range: 0.3,
                    sill: 1.0,
                },
                GpSpec::Brownian,
                GpSpec::Fbm { hurst: 0.7 },
                GpSpec::Matern32 {
                    lengthscale: 0.2,
                    variance: 1.0,
                },
            ],
        }
    }
}

/// Standard deviation of the response noise (variance 0.04).
pub const NOISE_STD: f64 = 0.2;

/// One simulated regression set: covariates, noisy responses, and the
/// noiseless responses they were built from.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub scenario: Scenario,
    pub x: Vec<MultiCurve>,
    pub y: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub seed: u64,
}

impl SimDataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `make_scenario_dataset` with the default grid (30 points) and process
/// suite.
pub fn make_scenario_dataset(
    scenario: Scenario,
    n: usize,
    seed: u64,
) -> Result<SimDataset, SimError> {
    let grid = Grid::new(30)?;
    make_scenario_dataset_with(scenario, n, seed, &GpSuite::default(), &grid)
}

/// Builds `n` i.i.d. samples. Sample `i` draws its four channels, in
/// suite order, from the covariate stream indexed by `i`, and its noise
/// from the noise stream indexed by `i`; the layout is index-based so
/// samples are independent of generation order.
pub fn make_scenario_dataset_with(
    scenario: Scenario,
    n: usize,
    seed: u64,
    suite: &GpSuite,
    grid: &Grid,
) -> Result<SimDataset, SimError> {
    let samplers: Vec<GpSampler> = suite
        .specs
        .iter()
        .map(|s| GpSampler::new(s, grid))
        .collect::<Result<_, _>>()?;
    let noise = Normal::new(0.0, NOISE_STD).expect("fixed std is valid");

    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y_clean = Vec::with_capacity(n);
    for i in 0..n {
        let mut path_rng = stream(seed, Domain::GpPath, i as u64);
        let channels: Vec<Curve> = samplers.iter().map(|s| s.sample(&mut path_rng)).collect();
        let mc = MultiCurve::new(channels)?;
        let g = scenario_response(scenario, &mc)?;
        let mut noise_rng = stream(seed, Domain::Noise, i as u64);
        let eps: f64 = noise.sample(&mut noise_rng);
        x.push(mc);
        y_clean.push(g);
        y.push(g + eps);
    }
    Ok(SimDataset {
        scenario,
        x,
        y,
        y_clean,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn g5() -> Grid {
        Grid::from_points(vec![0.0, 0.25, 0.5, 0.75, 1.0]).unwrap()
    }

    fn g30() -> Grid {
        Grid::new(30).unwrap()
    }

    #[test]
    fn brownian_cov_is_min() {
        let c = covariance_matrix(&GpSpec::Brownian, &g5()).unwrap();
        // points[1]=0.25, points[2]=0.5
        assert_eq!(c.at(2, 1), 0.25);
        assert_eq!(c.at(1, 2), 0.25);
        assert_eq!(c.at(0, 3), 0.0);
    }

    #[test]
    fn matern_diagonal_is_variance() {
        let spec = GpSpec::Matern32 {
            lengthscale: 0.2,
            variance: 1.7,
        };
        let c = covariance_matrix(&spec, &g5()).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(c.at(i, i), 1.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn fbm_half_equals_brownian() {
        let g = g30();
        let fbm = covariance_matrix(&GpSpec::Fbm { hurst: 0.5 }, &g).unwrap();
        let bm = covariance_matrix(&GpSpec::Brownian, &g).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert!(libm::fabs(fbm.at(i, j) - bm.at(i, j)) < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GpSpec::Fbm { hurst: 0.0 }.validate().is_err());
        assert!(GpSpec::Fbm { hurst: 1.0 }.validate().is_err());
        assert!(GpSpec::ExpVariogram { range: 0.0, sill: 1.0 }.validate().is_err());
        assert!(GpSpec::ExpVariogram { range: 0.3, sill: -1.0 }.validate().is_err());
        assert!(GpSpec::Matern32 { lengthscale: -0.1, variance: 1.0 }
            .validate()
            .is_err());
        assert!(covariance_matrix(&GpSpec::Fbm { hurst: 2.0 }, &g5()).is_err());
    }

    #[test]
    fn default_suite_covariances_symmetric_and_factorable() {
        let g = g30();
        for spec in GpSuite::default().specs.iter() {
            let c = covariance_matrix(spec, &g).unwrap();
            for i in 0..30 {
                for j in 0..30 {
                    assert!(libm::fabs(c.at(i, j) - c.at(j, i)) < 1e-12);
                }
            }
            cholesky_jittered(&c).unwrap();
        }
    }

    #[test]
    fn cholesky_factor_reconstructs_spd_matrix() {
        // A = [[4,2],[2,3]] has exact factor [[2,0],[1,sqrt(2)]].
        let a = Tensor::new(vec![2, 2], vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky_jittered(&a).unwrap();
        assert_abs_diff_eq!(l.at(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.at(1, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.at(1, 1), libm::sqrt(2.0), epsilon = 1e-12);
        assert_eq!(l.at(0, 1), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // [[1, 2],[2, 1]] has eigenvalues 3 and -1: no jitter in the
        // escalation range can rescue it.
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            cholesky_jittered(&a),
            Err(SimError::NumericalFailure { .. })
        ));
    }

    #[test]
    fn brownian_path_starts_at_zero() {
        let g = g30();
        let sampler = GpSampler::new(&GpSpec::Brownian, &g).unwrap();
        for i in 0..200u64 {
            let mut rng = stream(9, Domain::GpPath, i);
            let path = sampler.sample(&mut rng);
            assert!(libm::fabs(path.values()[0]) < 1e-6);
        }
    }

    #[test]
    fn sample_gp_is_deterministic() {
        let g = g30();
        let spec = GpSpec::Fbm { hurst: 0.7 };
        let mut r1 = stream(11, Domain::GpPath, 3);
        let mut r2 = stream(11, Domain::GpPath, 3);
        let p1 = sample_gp(&spec, &g, &mut r1).unwrap();
        let p2 = sample_gp(&spec, &g, &mut r2).unwrap();
        let bits1: Vec<u64> = p1.values().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = p2.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    fn const_multicurve(vals: [f64; 4], grid: &Grid) -> MultiCurve {
        let channels = vals
            .iter()
            .map(|&v| Curve::from_fn(grid.clone(), |_| v).unwrap())
            .collect();
        MultiCurve::new(channels).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_response() {
        let g = g30();
        let x = const_multicurve([0.0; 4], &g);
        for s in [Scenario::S1, Scenario::S2, Scenario::S3] {
            assert_eq!(scenario_response(s, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn s1_on_unit_channels_matches_closed_form() {
        // <beta_1, 1> = 5 * integral of sin(2*pi*t) = 0, and the
        // trapezoid value is exactly 0 too (full-period sampling).
        // <beta_2, 1> = 5 * integral of sin(3*pi*t) = 10/(3*pi), which
        // does NOT vanish (one and a half periods), so the response is
        // (4 * 10/(3*pi))^2 ~ 18.01 up to quadrature error.
        let g = g30();
        let one = Curve::from_fn(g.clone(), |_| 1.0).unwrap();
        let a = beta_curve(1, &g).unwrap().inner_product(&one).unwrap();
        assert!(libm::fabs(a) < 1e-12, "beta_1 against 1 gave {a}");

        let x = const_multicurve([1.0; 4], &g);
        let response = scenario_response(Scenario::S1, &x).unwrap();
        let analytic = {
            let b = 4.0 * 10.0 / (3.0 * core::f64::consts::PI);
            b * b
        };
        assert!(
            libm::fabs(response - analytic) < 0.5,
            "response {response} vs analytic {analytic}"
        );
    }

    #[test]
    fn response_rejects_wrong_channel_count() {
        let g = g30();
        let c = Curve::from_fn(g, |t| t).unwrap();
        let x = MultiCurve::new(vec![c.clone(), c]).unwrap();
        assert!(matches!(
            scenario_response(Scenario::S1, &x),
            Err(SimError::ChannelCount(2))
        ));
    }

    /// Straight-line oracle for S3: raw trapezoid sums over value slices,
    /// no Curve or beta_curve machinery.
    fn s3_oracle(x: &MultiCurve) -> f64 {
        let pts = x.grid().points();
        let n = pts.len();
        let h = 1.0 / (n - 1) as f64;
        let pi = core::f64::consts::PI;
        let trap = |f: &dyn Fn(usize) -> f64| -> f64 {
            let mut acc = 0.5 * (f(0) + f(n - 1));
            for i in 1..n - 1 {
                acc += f(i);
            }
            acc * h
        };
        let x1 = x.channel(0).values();
        let x2 = x.channel(1).values();
        let x3 = x.channel(2).values();
        let x4 = x.channel(3).values();
        let a = trap(&|i| 5.0 * libm::sin(2.0 * pi * pts[i]) * x1[i] * x1[i]);
        let b = trap(&|i| 5.0 * libm::sin(3.0 * pi * pts[i]) * libm::fabs(x2[i]));
        let c = trap(&|i| 3.0 * libm::cos(2.0 * pi * pts[i]) * x3[i]);
        let d = trap(&|i| 3.0 * libm::cos(3.0 * pi * pts[i]) * x4[i]);
        (a + b + c * d) * (a + b + c * d) + (a * b + c + d) * (a * b + c + d)
    }

    #[test]
    fn s3_matches_straight_line_oracle() {
        let ds = make_scenario_dataset(Scenario::S3, 8, 123).unwrap();
        for (x, &yc) in ds.x.iter().zip(&ds.y_clean) {
            let oracle = s3_oracle(x);
            assert!(
                libm::fabs(oracle - yc) < 1e-10,
                "oracle {oracle} vs response {yc}"
            );
        }
    }

    #[test]
    fn dataset_smallest_and_invariants() {
        let ds = make_scenario_dataset(Scenario::S1, 1, 5).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.y.len(), 1);
        assert_eq!(ds.y_clean.len(), 1);
        assert_eq!(ds.x[0].p(), 4);
        assert_eq!(ds.x[0].grid().n(), 30);
    }

    #[test]
    fn noise_moments_on_reference_draw() {
        let ds = make_scenario_dataset(Scenario::S1, 2000, 7).unwrap();
        let eps: Vec<f64> = ds.y.iter().zip(&ds.y_clean).map(|(a, b)| a - b).collect();
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (eps.len() - 1) as f64;
        assert!(libm::fabs(mean) < 0.02, "noise mean {mean}");
        assert!((0.03..=0.05).contains(&var), "noise variance {var}");
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = make_scenario_dataset(Scenario::S2, 20, 99).unwrap();
        let b = make_scenario_dataset(Scenario::S2, 20, 99).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.y), bits(&b.y));
        assert_eq!(bits(&a.y_clean), bits(&b.y_clean));
        for (xa, xb) in a.x.iter().zip(&b.x) {
            for (ca, cb) in xa.channels().iter().zip(xb.channels()) {
                assert_eq!(bits(ca.values()), bits(cb.values()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// S2 adds two more squares on top of S1's two.
        #[test]
        fn s2_dominates_s1(seed in 0u64..1000) {
            let ds1 = make_scenario_dataset(Scenario::S1, 1, seed).unwrap();
            let s1 = ds1.y_clean[0];
            let s2 = scenario_response(Scenario::S2, &ds1.x[0]).unwrap();
            prop_assert!(s2 >= s1);
            prop_assert!(s1 >= 0.0);
        }
    }
}
