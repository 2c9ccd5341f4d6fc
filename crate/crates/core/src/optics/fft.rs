use std::sync::Arc;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Smallest integer `>= n` whose prime factors are 2, 3 and 5 only.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

/// Planned 2D transform for a fixed `(rows, cols)` shape. Plans are shared,
/// so one instance can serve several threads.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform, normalized so `inverse(forward(x)) == x`.
    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.run(data, &self.row_inv, &self.col_inv);
        let norm = 1.0 / (self.rows * self.cols) as f64;
        data.mapv_inplace(|v| v * norm);
    }

    fn run(&self, data: &mut Array2<Complex64>, rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.dim(), (self.rows, self.cols));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.rows.max(self.cols)];
        for mut row in data.axis_iter_mut(Axis(0)) {
            let b = &mut buf[..self.cols];
            b.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
            rows.process(b);
            row.iter_mut().zip(b.iter()).for_each(|(d, s)| *d = *s);
        }
        for mut col in data.axis_iter_mut(Axis(1)) {
            let b = &mut buf[..self.rows];
            b.iter_mut().zip(col.iter()).for_each(|(d, s)| *d = *s);
            cols.process(b);
            col.iter_mut().zip(b.iter()).for_each(|(d, s)| *d = *s);
        }
    }
}

/// Spatial frequencies (cycles per unit length) of an `n`-point transform.
pub fn frequencies(n: usize, spacing: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let k = if i <= (n - 1) / 2 { i as i64 } else { i as i64 - n as i64 };
            k as f64 / (n as f64 * spacing)
        })
        .collect()
}

/// Linear convolution of `input` with a real kernel centred at
/// `(kernel.rows/2, kernel.cols/2)`. The output has the input's shape.
pub fn convolve_same(input: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = input.dim();
    let (ky, kx) = kernel.dim();
    let (cy, cx) = (ky / 2, kx / 2);
    let py = next_fast_len(ny + ky);
    let px = next_fast_len(nx + kx);
    let fft = Fft2::new(py, px);

    let mut a = Array2::from_elem((py, px), Complex64::new(0.0, 0.0));
    for ((r, c), &v) in input.indexed_iter() {
        a[[r, c]] = Complex64::new(v, 0.0);
    }
    let mut k = Array2::from_elem((py, px), Complex64::new(0.0, 0.0));
    for ((r, c), &v) in kernel.indexed_iter() {
        let rr = (r as isize - cy as isize).rem_euclid(py as isize) as usize;
        let cc = (c as isize - cx as isize).rem_euclid(px as isize) as usize;
        k[[rr, cc]] = Complex64::new(v, 0.0);
    }
    fft.forward(&mut a);
    fft.forward(&mut k);
    a.zip_mut_with(&k, |x, y| *x *= *y);
    fft.inverse(&mut a);
    Array2::from_shape_fn((ny, nx), |(r, c)| a[[r, c]].re)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_lengths() {
        assert_eq!(next_fast_len(1), 1);
        assert_eq!(next_fast_len(7), 8);
        assert_eq!(next_fast_len(1025), 1080);
        assert_eq!(next_fast_len(243), 243);
    }

    #[test]
    fn roundtrip() {
        let fft = Fft2::new(6, 10);
        let orig = Array2::from_shape_fn((6, 10), |(r, c)| Complex64::new(r as f64 - c as f64 * 0.5, (r * c) as f64));
        let mut d = orig.clone();
        fft.forward(&mut d);
        fft.inverse(&mut d);
        for (a, b) in d.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let input = Array2::from_shape_fn((9, 7), |(r, c)| ((r * 7 + c) % 5) as f64 - 1.5);
        let kernel = Array2::from_shape_fn((3, 5), |(r, c)| 1.0 + r as f64 * 0.3 - c as f64 * 0.2);
        let out = convolve_same(&input, &kernel);
        for r in 0..9isize {
            for c in 0..7isize {
                let mut s = 0.0;
                for kr in 0..3isize {
                    for kc in 0..5isize {
                        let (ir, ic) = (r - (kr - 1), c - (kc - 2));
                        if (0..9).contains(&ir) && (0..7).contains(&ic) {
                            s += input[[ir as usize, ic as usize]] * kernel[[kr as usize, kc as usize]];
                        }
                    }
                }
                assert!((out[[r as usize, c as usize]] - s).abs() < 1e-10);
            }
        }
    }
}
