//! 3D discrete Fourier transforms on mesh grids.
//!
//! The fast path runs `rustfft` along each axis (mixed radix, Bluestein for
//! awkward sizes). The dense path multiplies by explicit DFT matrices and is
//! kept as an independent reference.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Complex values on a 3D grid, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralGrid {
    pub counts: [usize; 3],
    pub values: Vec<Complex64>,
}

impl SpectralGrid {
    pub fn new(counts: [usize; 3], values: Vec<Complex64>) -> Self {
        assert_eq!(values.len(), counts.iter().product::<usize>(), "grid length mismatch");
        SpectralGrid { counts, values }
    }

    pub fn from_real(counts: [usize; 3], values: &[f64]) -> Self {
        Self::new(counts, values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which implementation evaluates a 3D transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectralBackend {
    #[default]
    Fast,
    Dense,
}

type PlanKey = (usize, bool);

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = plans.lock().expect("fft plan cache poisoned");
    guard
        .entry((n, forward))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if forward {
                planner.plan_fft_forward(n)
            } else {
                planner.plan_fft_inverse(n)
            }
        })
        .clone()
}

/// Entry (j, k) = exp(-2πi jk / n), row-major.
pub fn dense_dft_matrix(n: usize) -> Vec<Complex64> {
    assert!(n >= 1);
    let mut m = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            // reduce jk mod n first so large products keep full phase accuracy
            let jk = (j * k) % n;
            let theta = -2.0 * std::f64::consts::PI * jk as f64 / n as f64;
            m.push(Complex64::new(theta.cos(), theta.sin()));
        }
    }
    m
}

/// Unnormalized transform of `data` (laid out per `counts`) in place.
/// `forward` selects the sign of the exponent; no 1/M scaling is applied.
pub fn transform_in_place(data: &mut [Complex64], counts: [usize; 3], forward: bool, backend: SpectralBackend) {
    assert_eq!(data.len(), counts.iter().product::<usize>());
    match backend {
        SpectralBackend::Fast => fast_in_place(data, counts, forward),
        SpectralBackend::Dense => dense_in_place(data, counts, forward),
    }
}

fn fast_in_place(data: &mut [Complex64], counts: [usize; 3], forward: bool) {
    let [nx, ny, nz] = counts;
    // last axis is contiguous
    if nz > 1 {
        plan(nz, forward).process(data);
    }
    let mut line = Vec::new();
    if ny > 1 {
        let p = plan(ny, forward);
        line.resize(ny, Complex64::default());
        for i in 0..nx {
            for k in 0..nz {
                for j in 0..ny {
                    line[j] = data[(i * ny + j) * nz + k];
                }
                p.process(&mut line);
                for j in 0..ny {
                    data[(i * ny + j) * nz + k] = line[j];
                }
            }
        }
    }
    if nx > 1 {
        let p = plan(nx, forward);
        line.resize(nx, Complex64::default());
        for j in 0..ny {
            for k in 0..nz {
                for i in 0..nx {
                    line[i] = data[(i * ny + j) * nz + k];
                }
                p.process(&mut line);
                for i in 0..nx {
                    data[(i * ny + j) * nz + k] = line[i];
                }
            }
        }
    }
}

fn dense_in_place(data: &mut [Complex64], counts: [usize; 3], forward: bool) {
    let [nx, ny, nz] = counts;
    let stride = [ny * nz, nz, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = counts[axis];
        if n == 1 {
            continue;
        }
        let mut mat = dense_dft_matrix(n);
        if !forward {
            mat.iter_mut().for_each(|z| *z = z.conj());
        }
        line.resize(n, Complex64::default());
        out.resize(n, Complex64::default());
        let (a, b) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for u in 0..a {
            for v in 0..b {
                let base = match axis {
                    0 => u * stride[1] + v,
                    1 => u * stride[0] + v,
                    _ => u * stride[0] + v * stride[1],
                };
                for t in 0..n {
                    line[t] = data[base + t * stride[axis]];
                }
                for (r, o) in out.iter_mut().enumerate() {
                    *o = mat[r * n..(r + 1) * n]
                        .iter()
                        .zip(&line)
                        .map(|(m, x)| m * x)
                        .sum();
                }
                for t in 0..n {
                    data[base + t * stride[axis]] = out[t];
                }
            }
        }
    }
}

/// Unnormalized forward DFT.
pub fn fft3(grid: &SpectralGrid) -> SpectralGrid {
    let mut out = grid.clone();
    transform_in_place(&mut out.values, grid.counts, true, SpectralBackend::Fast);
    out
}

/// Inverse DFT including the 1/M factor, so `ifft3(fft3(x)) == x`.
pub fn ifft3(grid: &SpectralGrid) -> SpectralGrid {
    let mut out = grid.clone();
    transform_in_place(&mut out.values, grid.counts, false, SpectralBackend::Fast);
    let inv = 1.0 / grid.len() as f64;
    out.values.iter_mut().for_each(|z| *z *= inv);
    out
}

/// Separable dense-matrix forward DFT; same convention as [`fft3`].
pub fn dense_fft3(grid: &SpectralGrid) -> SpectralGrid {
    let mut out = grid.clone();
    transform_in_place(&mut out.values, grid.counts, true, SpectralBackend::Dense);
    out
}

/// Separable dense-matrix inverse DFT; same convention as [`ifft3`].
pub fn dense_ifft3(grid: &SpectralGrid) -> SpectralGrid {
    let mut out = grid.clone();
    transform_in_place(&mut out.values, grid.counts, false, SpectralBackend::Dense);
    let inv = 1.0 / grid.len() as f64;
    out.values.iter_mut().for_each(|z| *z *= inv);
    out
}

/// Signed frequency index for position `k` along an axis of length `n`
/// (Nyquist is reported as positive).
#[inline]
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if 2 * k <= n {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Transform every channel of a real `[M, C]` row-major array, returning the
/// complex spectrum with the same layout.
pub fn forward_channels(x: &[f64], counts: [usize; 3], channels: usize, backend: SpectralBackend) -> Vec<Complex64> {
    let m: usize = counts.iter().product();
    assert_eq!(x.len(), m * channels);
    let mut out = vec![Complex64::default(); m * channels];
    let mut buf = vec![Complex64::default(); m];
    for c in 0..channels {
        for p in 0..m {
            buf[p] = Complex64::new(x[p * channels + c], 0.0);
        }
        transform_in_place(&mut buf, counts, true, backend);
        for p in 0..m {
            out[p * channels + c] = buf[p];
        }
    }
    out
}

/// Unnormalized transform of every channel of a complex `[M, C]` array.
pub fn transform_channels(
    x: &[Complex64],
    counts: [usize; 3],
    channels: usize,
    forward: bool,
    backend: SpectralBackend,
) -> Vec<Complex64> {
    let m: usize = counts.iter().product();
    assert_eq!(x.len(), m * channels);
    let mut out = vec![Complex64::default(); m * channels];
    let mut buf = vec![Complex64::default(); m];
    for c in 0..channels {
        for p in 0..m {
            buf[p] = x[p * channels + c];
        }
        transform_in_place(&mut buf, counts, forward, backend);
        for p in 0..m {
            out[p * channels + c] = buf[p];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(counts: [usize; 3], seed: u64) -> SpectralGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = counts.iter().product();
        SpectralGrid::new(
            counts,
            (0..m)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
    }

    fn max_diff(a: &SpectralGrid, b: &SpectralGrid) -> f64 {
        a.values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn small_dft_matrices() {
        assert_eq!(dense_dft_matrix(1), vec![Complex64::new(1.0, 0.0)]);
        let m = dense_dft_matrix(2);
        let expected = [1.0, 1.0, 1.0, -1.0];
        for (z, e) in m.iter().zip(expected) {
            assert!((z.re - e).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut g = SpectralGrid::from_real([3, 4, 5], &vec![0.0; 60]);
        g.values[0] = Complex64::new(1.0, 0.0);
        let f = fft3(&g);
        for z in &f.values {
            assert!((z.re - 1.0).abs() < 1e-14 && z.im.abs() < 1e-14);
        }
    }

    #[test]
    fn constant_grid_has_only_zero_mode() {
        let g = SpectralGrid::from_real([2, 3, 4], &vec![2.5; 24]);
        let f = fft3(&g);
        assert!((f.values[0].re - 60.0).abs() < 1e-12);
        for z in &f.values[1..] {
            assert!(z.norm() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_is_identity() {
        for counts in [[4, 4, 4], [3, 5, 7], [1, 6, 2], [8, 8, 8]] {
            let g = random_grid(counts, 3);
            assert!(max_diff(&ifft3(&fft3(&g)), &g) < 1e-12);
        }
    }

    #[test]
    fn dense_and_fast_paths_agree() {
        for counts in [[4, 3, 2], [5, 5, 5], [7, 3, 3], [1, 1, 4]] {
            let g = random_grid(counts, 11);
            assert!(max_diff(&fft3(&g), &dense_fft3(&g)) < 1e-10);
            assert!(max_diff(&ifft3(&g), &dense_ifft3(&g)) < 1e-10);
        }
    }

    #[test]
    fn signed_frequencies() {
        let f: Vec<i64> = (0..5).map(|k| signed_frequency(k, 5)).collect();
        assert_eq!(f, vec![0, 1, 2, -2, -1]);
        let f: Vec<i64> = (0..4).map(|k| signed_frequency(k, 4)).collect();
        assert_eq!(f, vec![0, 1, 2, -1]);
    }
}
