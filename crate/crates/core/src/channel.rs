//! Channel generation: small-scale Gauss-Markov fading, network geometry,
//! large-scale path gains and power-unit conversions.
//!
//! Small-scale coefficients follow a first-order complex Gauss-Markov
//! recursion `h' = rho*h + sqrt(1-rho^2)*e` with unit-variance complex
//! Gaussian innovations, so the per-link power |h|^2 is stationary with
//! mean one. The correlation `rho = J0(2*pi*f_d*T)` ties the recursion to
//! the Doppler frequency and slot length.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Switch point between the ascending power series and the Hankel
/// asymptotic expansion. Below 12 the series loses at most ~3e-11 to
/// cancellation in f64; above it the asymptotic tail is below 1e-10.
const J0_SERIES_CUTOFF: f64 = 12.0;

/// Zeroth-order Bessel function of the first kind.
///
/// Accurate to |err| <= 1e-9 on [0, 20].
pub fn bessel_j0(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidArgument(format!("bessel_j0: x = {x}")));
    }
    if x < 0.0 {
        return Err(Error::InvalidArgument(format!("bessel_j0: x = {x} < 0")));
    }
    if x < J0_SERIES_CUTOFF {
        Ok(j0_series(x))
    } else {
        Ok(j0_asymptotic(x))
    }
}

// Ascending series sum_m ((-x^2/4)^m / (m!)^2, summed to convergence.
fn j0_series(x: f64) -> f64 {
    let q = -x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..200 {
        term *= q / ((m * m) as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-3) {
            break;
        }
    }
    sum
}

// Hankel expansion J0(x) ~ sqrt(2/(pi x)) (cos w P(x) - sin w Q(x)),
// w = x - pi/4, with coefficients a_k = a_{k-1} * -(2k-1)^2 / (8k).
// Terms through a_13 keep the truncation below 1e-10 for x >= 12.
fn j0_asymptotic(x: f64) -> f64 {
    let mut a = [0.0f64; 14];
    a[0] = 1.0;
    for k in 1..14 {
        let odd = (2 * k - 1) as f64;
        a[k] = a[k - 1] * (-(odd * odd)) / (8.0 * k as f64);
    }
    let x2 = x * x;
    let mut p = 0.0;
    let mut q = 0.0;
    let mut xp_even = 1.0;
    let mut xp_odd = x;
    let mut sign = 1.0;
    for m in 0..7 {
        p += sign * a[2 * m] / xp_even;
        q += sign * a[2 * m + 1] / xp_odd;
        xp_even *= x2;
        xp_odd *= x2;
        sign = -sign;
    }
    let w = x - FRAC_PI_4;
    (2.0 / (PI * x)).sqrt() * (w.cos() * p - w.sin() * q)
}

/// Slot-to-slot channel correlation `J0(2*pi*f_d*T)`.
///
/// `f_d` is the maximum Doppler frequency in hertz, `T` the slot length in
/// seconds. Returns exactly 1 for a static channel (`f_d = 0`).
pub fn time_correlation(f_d: f64, slot_len: f64) -> Result<f64> {
    if !(f_d.is_finite() && f_d >= 0.0) {
        return Err(Error::InvalidArgument(format!("doppler f_d = {f_d}")));
    }
    if !(slot_len.is_finite() && slot_len > 0.0) {
        return Err(Error::InvalidArgument(format!("slot length T = {slot_len}")));
    }
    if f_d == 0.0 {
        return Ok(1.0);
    }
    bessel_j0(2.0 * PI * f_d * slot_len)
}

/// dBm to watts.
pub fn dbm_to_watts(x: f64) -> f64 {
    10f64.powf((x - 30.0) / 10.0)
}

/// dB to a linear power factor.
pub fn db_to_factor(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}

/// Small-scale fading state for every link of an N-cell network.
///
/// `user_hap[i][j]` is the coefficient of the user i -> H-AP j link and
/// `hap_hap[i][j]` of the H-AP i -> H-AP j link.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingProcess {
    pub user_hap: Vec<Vec<Complex64>>,
    pub hap_hap: Vec<Vec<Complex64>>,
    pub rho: f64,
}

impl FadingProcess {
    /// Draws the initial coefficients from the stationary CN(0,1) law.
    pub fn new<R: Rng>(n: usize, rho: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("rho = {rho} outside [0, 1]")));
        }
        let mut process = FadingProcess {
            user_hap: vec![vec![Complex64::new(0.0, 0.0); n]; n],
            hap_hap: vec![vec![Complex64::new(0.0, 0.0); n]; n],
            rho,
        };
        for row in process.user_hap.iter_mut().chain(process.hap_hap.iter_mut()) {
            for c in row.iter_mut() {
                *c = complex_gaussian(rng);
            }
        }
        Ok(process)
    }

    /// One Gauss-Markov step: `h' = rho*h + sqrt(1-rho^2)*e`, fresh
    /// unit-variance innovation per coefficient. With `rho = 1` the state
    /// is reproduced exactly; innovations are still drawn so the rng
    /// stream advances identically for every `rho`.
    pub fn evolve<R: Rng>(&mut self, rng: &mut R) {
        let rho = self.rho;
        let innov_scale = (1.0 - rho * rho).max(0.0).sqrt();
        for row in self.user_hap.iter_mut().chain(self.hap_hap.iter_mut()) {
            for c in row.iter_mut() {
                let e = complex_gaussian(rng);
                *c = rho * *c + innov_scale * e;
            }
        }
    }

    pub fn n_cells(&self) -> usize {
        self.user_hap.len()
    }
}

// CN(0,1): real and imaginary parts each N(0, 1/2).
fn complex_gaussian<R: Rng>(rng: &mut R) -> Complex64 {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
    Complex64::new(normal.sample(rng), normal.sample(rng))
}

/// Node placement of the N-cell network, in meters.
///
/// H-APs sit on a circle with adjacent spacing 15 m and user i sits 10 m
/// radially outward from H-AP i, which pins every cross-link distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub hap_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    pub pathloss_exponent: f64,
}

/// H-AP / user distances of the circular layout.
pub const HAP_USER_DISTANCE: f64 = 10.0;
pub const HAP_SPACING: f64 = 15.0;

impl Geometry {
    /// Regular-polygon layout: N H-APs on a circle with adjacent spacing
    /// exactly 15 m, each user 10 m radially outward from its H-AP.
    pub fn circular(n: usize, pathloss_exponent: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("geometry with zero cells".into()));
        }
        let radius = if n == 1 {
            0.0
        } else {
            HAP_SPACING / (2.0 * (PI / n as f64).sin())
        };
        let mut hap_positions = Vec::with_capacity(n);
        let mut user_positions = Vec::with_capacity(n);
        for k in 0..n {
            let angle = 2.0 * PI * k as f64 / n as f64;
            let (s, c) = angle.sin_cos();
            hap_positions.push([radius * c, radius * s]);
            user_positions.push([(radius + HAP_USER_DISTANCE) * c, (radius + HAP_USER_DISTANCE) * s]);
        }
        Ok(Geometry {
            hap_positions,
            user_positions,
            pathloss_exponent,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.hap_positions.len()
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance-power law `d^-gamma` with reference gain 1 at 1 m.
pub fn path_gain(d: f64, exponent: f64) -> Result<f64> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidArgument(format!("link distance d = {d}")));
    }
    Ok(d.powf(-exponent))
}

/// Nonnegative power gains of every link.
///
/// `user_hap[i][j]` is the user i -> H-AP j gain h_ij, `hap_hap[i][j]`
/// the H-AP i -> H-AP j gain g_ij. Self links `hap_hap[i][i]` carry no
/// interference and are fixed to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkGains {
    pub user_hap: Vec<Vec<f64>>,
    pub hap_hap: Vec<Vec<f64>>,
}

impl LinkGains {
    pub fn n_cells(&self) -> usize {
        self.user_hap.len()
    }
}

/// Large-scale gain matrices of the geometry (unit reference gain at 1 m).
pub fn large_scale_gains(geom: &Geometry) -> Result<LinkGains> {
    let n = geom.n_cells();
    let mut user_hap = vec![vec![0.0; n]; n];
    let mut hap_hap = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            user_hap[i][j] = path_gain(
                distance(geom.user_positions[i], geom.hap_positions[j]),
                geom.pathloss_exponent,
            )?;
            if i != j {
                hap_hap[i][j] = path_gain(
                    distance(geom.hap_positions[i], geom.hap_positions[j]),
                    geom.pathloss_exponent,
                )?;
            }
        }
    }
    Ok(LinkGains { user_hap, hap_hap })
}

/// Composite per-slot gains: large-scale scale times |small-scale|^2.
pub fn compose_gains(scale: &LinkGains, fading: &FadingProcess) -> LinkGains {
    let n = scale.n_cells();
    let mut user_hap = vec![vec![0.0; n]; n];
    let mut hap_hap = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            user_hap[i][j] = scale.user_hap[i][j] * fading.user_hap[i][j].norm_sqr();
            hap_hap[i][j] = scale.hap_hap[i][j] * fading.hap_hap[i][j].norm_sqr();
        }
    }
    LinkGains { user_hap, hap_hap }
}
