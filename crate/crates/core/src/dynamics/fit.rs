//! Curve fits for trajectory observables.

use std::f64::consts::PI;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DMatrix, DVector, Dyn, Vector5, U5};
use serde::{Deserialize, Serialize};

use super::DynamicsError;

/// Result of fitting `A·exp(−t/τ)·cos(ωt + φ) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationFit {
    /// rad/s
    pub angular_frequency: f64,
    /// s; infinite when the fit finds no decay.
    pub damping_time: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub offset: f64,
    /// Root-mean-square residual.
    pub rms_residual: f64,
}

impl OscillationFit {
    pub fn frequency_hz(&self) -> f64 {
        self.angular_frequency / (2.0 * PI)
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.angular_frequency
    }
}

struct DampedCosine<'a> {
    t: &'a [f64],
    y: &'a [f64],
    // [A, γ, ω, φ, c]
    p: Vector5<f64>,
}

impl LeastSquaresProblem<f64, Dyn, U5> for DampedCosine<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U5>;
    type ParameterStorage = Owned<f64, U5>;

    fn set_params(&mut self, x: &Vector5<f64>) {
        self.p = *x;
    }

    fn params(&self) -> Vector5<f64> {
        self.p
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let [a, g, w, ph, c] = [self.p[0], self.p[1], self.p[2], self.p[3], self.p[4]];
        Some(DVector::from_iterator(
            self.t.len(),
            self.t
                .iter()
                .zip(self.y)
                .map(|(&t, &y)| a * (-g * t).exp() * (w * t + ph).cos() + c - y),
        ))
    }

    fn jacobian(&self) -> Option<nalgebra::OMatrix<f64, Dyn, U5>> {
        let [a, g, w, ph, _] = [self.p[0], self.p[1], self.p[2], self.p[3], self.p[4]];
        let mut j = nalgebra::OMatrix::<f64, Dyn, U5>::zeros(self.t.len());
        for (i, &t) in self.t.iter().enumerate() {
            let e = (-g * t).exp();
            let (s, co) = (w * t + ph).sin_cos();
            j[(i, 0)] = e * co;
            j[(i, 1)] = -a * t * e * co;
            j[(i, 2)] = -a * t * e * s;
            j[(i, 3)] = -a * e * s;
            j[(i, 4)] = 1.0;
        }
        Some(j)
    }
}

/// Least-squares damped-cosine fit to a uniformly or non-uniformly sampled
/// trace. Needs at least two oscillation periods inside the trace.
pub fn fit_damped_cosine(t: &[f64], y: &[f64]) -> Result<OscillationFit, DynamicsError> {
    let fail = |m: &str| Err(DynamicsError::FitFailure(m.to_string()));
    let n = t.len();
    if n != y.len() || n < 8 {
        return fail("need at least eight samples");
    }
    if y.iter().any(|v| !v.is_finite()) {
        return fail("trace contains non-finite values");
    }
    let t0 = t[0];
    let ts: Vec<f64> = t.iter().map(|v| v - t0).collect();
    let span = ts[n - 1];
    let mean = y.iter().sum::<f64>() / n as f64;
    let scale = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if !(span > 0.0) || scale <= 1e-12 * mean.abs().max(f64::MIN_POSITIVE) || scale == 0.0 {
        return fail("trace does not oscillate");
    }

    // Periodogram over frequencies with at least two periods in the trace.
    let dt_min = ts.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (w_lo, w_hi) = (4.0 * PI / span, PI / dt_min);
    if !(w_hi > w_lo) {
        return fail("trace is too short or too coarse");
    }
    let dw = PI / (8.0 * span);
    let power = |w: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (&ti, &yi) in ts.iter().zip(y) {
            let (s, c) = (w * ti).sin_cos();
            re += (yi - mean) * c;
            im += (yi - mean) * s;
        }
        (re * re + im * im, re, im)
    };
    let (mut best_w, mut best) = (w_lo, (0.0, 0.0, 0.0));
    let mut w = w_lo;
    while w <= w_hi {
        let p = power(w);
        if p.0 > best.0 {
            best = p;
            best_w = w;
        }
        w += dw;
    }
    // A trend with no oscillation peaks at the low edge of the scan.
    if best_w - w_lo < dw * 0.5 {
        let edge = power(w_lo).0;
        let inner = power(w_lo + 2.0 * dw).0;
        if inner < edge {
            return fail("no oscillation with two periods inside the trace");
        }
    }
    let amp0 = 2.0 * best.0.sqrt() / n as f64;
    let phase0 = (-best.2).atan2(best.1);

    let problem = DampedCosine {
        t: &ts,
        y,
        p: Vector5::new(amp0.max(scale * 0.5), 0.0, best_w, phase0, mean),
    };
    let (fitted, report) = LevenbergMarquardt::new().with_patience(400).minimize(problem);
    if !report.termination.was_successful() {
        return fail("least-squares solver did not converge");
    }
    let mut p = fitted.p;
    let res = fitted.residuals().ok_or(DynamicsError::FitFailure("residuals".into()))?;
    let rms = (res.norm_squared() / n as f64).sqrt();
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += PI;
    }
    let w = p[2].abs();
    if p[2] < 0.0 {
        p[3] = -p[3];
    }
    if w * span < 4.0 * PI {
        return fail("fitted period exceeds half the trace");
    }
    // Shift the phase back to the original time origin.
    let phase = (p[3] - w * t0).rem_euclid(2.0 * PI);
    let g = p[1];
    Ok(OscillationFit {
        angular_frequency: w,
        damping_time: if g > 0.0 { 1.0 / g } else { f64::INFINITY },
        amplitude: p[0] * (g * t0).exp(),
        phase,
        offset: p[4],
        rms_residual: rms,
    })
}

/// Ordinary least squares `y = a + b·x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64), DynamicsError> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(DynamicsError::DegenerateFit("need two or more points".into()));
    }
    let a = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] });
    let b = DVector::from_column_slice(y);
    let ata = a.transpose() * &a;
    let det = ata.determinant();
    if det.abs() <= 1e-12 * ata[(1, 1)].abs().max(1e-300) * n as f64 {
        return Err(DynamicsError::DegenerateFit("abscissae are all equal".into()));
    }
    let sol = ata
        .try_inverse()
        .ok_or_else(|| DynamicsError::DegenerateFit("singular normal equations".into()))?
        * (a.transpose() * b);
    Ok((sol[0], sol[1]))
}
