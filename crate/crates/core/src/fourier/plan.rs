//! Complex FFT plans: mixed-radix Cooley-Tukey for 5-smooth lengths, Bluestein
//! chirp-z for everything else, and a process-wide plan cache.

use num_complex::Complex64;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    MixedRadix,
    Bluestein,
}

/// Largest prime handled by the mixed-radix butterflies.
const MAX_RADIX: usize = 5;

#[derive(Debug)]
enum Kernel {
    Radix {
        factors: Vec<usize>,
        twiddles: Vec<Complex64>,
    },
    Bluestein {
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
        forward: Arc<FftPlan>,
        inverse: Arc<FftPlan>,
    },
}

/// Precomputed unnormalized DFT of a fixed length and direction.
/// Immutable after construction; one plan may serve many threads.
#[derive(Debug)]
pub struct FftPlan {
    len: usize,
    direction: Direction,
    kernel: Kernel,
}

fn factorize(mut n: usize) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    for p in [2, 3, 5] {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
    }
    (n == 1).then_some(out)
}

impl FftPlan {
    pub fn new(len: usize, direction: Direction) -> Self {
        assert!(len > 0, "FFT length must be positive");
        let kernel = match factorize(len) {
            Some(factors) => {
                let sign = direction.sign();
                let twiddles = (0..len)
                    .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / len as f64))
                    .collect();
                Kernel::Radix { factors, twiddles }
            }
            None => Self::bluestein(len, direction),
        };
        FftPlan {
            len,
            direction,
            kernel,
        }
    }

    fn bluestein(len: usize, direction: Direction) -> Kernel {
        let m = (2 * len - 1).next_power_of_two();
        let sign = direction.sign();
        let two_n = 2 * len as u128;
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                // k^2 mod 2n keeps the phase argument small
                let q = (k as u128 * k as u128) % two_n;
                Complex64::from_polar(1.0, sign * PI * q as f64 / len as f64)
            })
            .collect();
        let mut b = vec![Complex64::new(0.0, 0.0); m];
        b[0] = chirp[0].conj();
        for k in 1..len {
            b[k] = chirp[k].conj();
            b[m - k] = chirp[k].conj();
        }
        let forward = plan(m, Direction::Forward);
        let inverse = plan(m, Direction::Inverse);
        forward.process(&mut b);
        Kernel::Bluestein {
            chirp,
            kernel_spectrum: b,
            forward,
            inverse,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.kernel {
            Kernel::Radix { .. } => Algorithm::MixedRadix,
            Kernel::Bluestein { .. } => Algorithm::Bluestein,
        }
    }

    /// Transforms `buf` in place without normalization.
    pub fn process(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        match &self.kernel {
            Kernel::Radix { factors, twiddles } => {
                if self.len == 1 {
                    return;
                }
                let input = buf.to_vec();
                let mut scratch = vec![Complex64::new(0.0, 0.0); MAX_RADIX];
                radix_pass(&input, 1, buf, factors, twiddles, self.len, &mut scratch);
            }
            Kernel::Bluestein {
                chirp,
                kernel_spectrum,
                forward,
                inverse,
            } => {
                let m = kernel_spectrum.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for ((dst, &x), &c) in a.iter_mut().zip(buf.iter()).zip(chirp) {
                    *dst = x * c;
                }
                forward.process(&mut a);
                for (v, &k) in a.iter_mut().zip(kernel_spectrum) {
                    *v *= k;
                }
                inverse.process(&mut a);
                let scale = 1.0 / m as f64;
                for ((dst, &v), &c) in buf.iter_mut().zip(&a).zip(chirp) {
                    *dst = v * c * scale;
                }
            }
        }
    }
}

/// Decimation-in-time step: transforms the `out.len()` samples of `input`
/// spaced by `stride` into `out`.
fn radix_pass(
    input: &[Complex64],
    stride: usize,
    out: &mut [Complex64],
    factors: &[usize],
    twiddles: &[Complex64],
    total: usize,
    scratch: &mut [Complex64],
) {
    let n = out.len();
    if n == 1 {
        out[0] = input[0];
        return;
    }
    let p = factors[0];
    let m = n / p;
    for r in 0..p {
        radix_pass(
            &input[r * stride..],
            stride * p,
            &mut out[r * m..(r + 1) * m],
            &factors[1..],
            twiddles,
            total,
            scratch,
        );
    }
    let tw_step = total / n;
    if p == 2 {
        let (lo, hi) = out.split_at_mut(m);
        for k in 0..m {
            let t = hi[k] * twiddles[k * tw_step];
            let a = lo[k];
            lo[k] = a + t;
            hi[k] = a - t;
        }
        return;
    }
    let root_step = total / p;
    for k in 0..m {
        for r in 0..p {
            scratch[r] = out[r * m + k] * twiddles[r * k * tw_step];
        }
        for q in 0..p {
            let mut acc = scratch[0];
            for r in 1..p {
                acc += scratch[r] * twiddles[((r * q) % p) * root_step];
            }
            out[q * m + k] = acc;
        }
    }
}

type PlanCache = RwLock<HashMap<(usize, Direction), Arc<FftPlan>>>;

fn cache() -> &'static PlanCache {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Returns the shared plan for `(len, direction)`, building it on first use.
pub fn plan(len: usize, direction: Direction) -> Arc<FftPlan> {
    if let Some(p) = cache()
        .read()
        .expect("fft plan cache poisoned")
        .get(&(len, direction))
    {
        return Arc::clone(p);
    }
    // Built outside the lock: Bluestein plans recursively request their
    // power-of-two inner plans.
    let built = Arc::new(FftPlan::new(len, direction));
    let mut w = cache().write().expect("fft plan cache poisoned");
    Arc::clone(w.entry((len, direction)).or_insert(built))
}

/// Source of complex transforms for the real-input layer. The built-in
/// provider uses [`plan`]; an external FFT library can be adapted here.
pub trait FftProvider: Send + Sync {
    /// Unnormalized in-place transform of `buf`.
    fn transform(&self, buf: &mut [Complex64], direction: Direction);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct BuiltinFft;

impl FftProvider for BuiltinFft {
    fn transform(&self, buf: &mut [Complex64], direction: Direction) {
        plan(buf.len(), direction).process(buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64], sign: f64) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let q = (j * k) % n;
                        v * Complex64::from_polar(1.0, sign * 2.0 * PI * q as f64 / n as f64)
                    })
                    .sum()
            })
            .collect()
    }

    fn signal(n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|j| Complex64::new((j as f64 * 0.7).sin() + 0.1 * j as f64, (j as f64 * 1.3).cos()))
            .collect()
    }

    #[test]
    fn matches_naive_dft_across_algorithms() {
        for n in [1, 2, 3, 4, 5, 6, 7, 8, 12, 13, 14, 30, 49, 64, 97, 100, 196, 243, 250] {
            let x = signal(n);
            for dir in [Direction::Forward, Direction::Inverse] {
                let mut y = x.clone();
                FftPlan::new(n, dir).process(&mut y);
                let want = naive_dft(&x, dir.sign());
                let scale = want.iter().fold(1.0f64, |m, v| m.max(v.norm()));
                for (a, b) in y.iter().zip(&want) {
                    assert!((a - b).norm() / scale < 1e-12, "n={n} {dir:?}");
                }
            }
        }
    }

    #[test]
    fn algorithm_selection() {
        assert_eq!(FftPlan::new(240, Direction::Forward).algorithm(), Algorithm::MixedRadix);
        assert_eq!(FftPlan::new(7, Direction::Forward).algorithm(), Algorithm::Bluestein);
        assert_eq!(FftPlan::new(196, Direction::Forward).algorithm(), Algorithm::Bluestein);
    }

    #[test]
    fn plan_reuse_is_bit_identical() {
        let p = plan(98, Direction::Forward);
        let x = signal(98);
        let mut a = x.clone();
        let mut b = x;
        p.process(&mut a);
        p.process(&mut b);
        assert_eq!(a, b);
        assert!(Arc::ptr_eq(&p, &plan(98, Direction::Forward)));
    }
}
