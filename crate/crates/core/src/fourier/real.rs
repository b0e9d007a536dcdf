//! Real-input transforms built on the complex plans. Even lengths pack two
//! real samples per complex slot and run a half-length FFT; odd lengths go
//! through a full-length complex transform.

use super::plan::{plan, Direction, FftPlan};
use num_complex::Complex64;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug)]
pub struct RealFft {
    len: usize,
    forward: Arc<FftPlan>,
    inverse: Arc<FftPlan>,
    /// `exp(-2 pi i k / len)` for `k <= len / 2`, used to untangle packed halves.
    twiddles: Vec<Complex64>,
}

impl RealFft {
    fn new(len: usize) -> Self {
        let inner = if len % 2 == 0 { len / 2 } else { len };
        let twiddles = if len % 2 == 0 {
            (0..=len / 2)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
                .collect()
        } else {
            Vec::new()
        };
        RealFft {
            len,
            forward: plan(inner, Direction::Forward),
            inverse: plan(inner, Direction::Inverse),
            twiddles,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// Unnormalized half-spectrum of `x` into `out` (`bins()` entries).
    pub fn forward(&self, x: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(x.len(), self.len);
        debug_assert_eq!(out.len(), self.bins());
        let n = self.len;
        if n % 2 == 1 {
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            self.forward.process(&mut buf);
            out.copy_from_slice(&buf[..self.bins()]);
            return;
        }
        let h = n / 2;
        let mut z: Vec<Complex64> = (0..h).map(|j| Complex64::new(x[2 * j], x[2 * j + 1])).collect();
        self.forward.process(&mut z);
        for k in 0..=h {
            let zk = z[k % h];
            let zr = z[(h - k) % h].conj();
            let even = (zk + zr) * 0.5;
            let odd = (zk - zr) * Complex64::new(0.0, -0.5);
            out[k] = even + self.twiddles[k] * odd;
        }
        out[0].im = 0.0;
        out[h].im = 0.0;
    }

    /// Inverse of [`forward`](Self::forward), scaled by `1/len`. Imaginary
    /// parts of the DC and (even-length) Nyquist bins are ignored.
    pub fn inverse(&self, spec: &[Complex64], out: &mut [f64]) {
        debug_assert_eq!(spec.len(), self.bins());
        debug_assert_eq!(out.len(), self.len);
        let n = self.len;
        if n % 2 == 1 {
            let mut buf = vec![ZERO; n];
            buf[0] = Complex64::new(spec[0].re, 0.0);
            for k in 1..self.bins() {
                buf[k] = spec[k];
                buf[n - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let s = 1.0 / n as f64;
            for (o, v) in out.iter_mut().zip(&buf) {
                *o = v.re * s;
            }
            return;
        }
        let h = n / 2;
        let mut z = vec![ZERO; h];
        for (k, zk) in z.iter_mut().enumerate() {
            let mut a = spec[k];
            let mut b = spec[h - k].conj();
            if k == 0 {
                a.im = 0.0;
                b.im = 0.0;
            }
            let even = (a + b) * 0.5;
            let odd = (a - b) * 0.5 * self.twiddles[k].conj();
            *zk = even + Complex64::new(0.0, 1.0) * odd;
        }
        self.inverse.process(&mut z);
        let s = 1.0 / h as f64;
        for (j, v) in z.iter().enumerate() {
            out[2 * j] = v.re * s;
            out[2 * j + 1] = v.im * s;
        }
    }
}

type RealCache = RwLock<HashMap<usize, Arc<RealFft>>>;

pub fn real_plan(len: usize) -> Arc<RealFft> {
    static CACHE: OnceLock<RealCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(p) = cache.read().expect("real fft cache poisoned").get(&len) {
        return Arc::clone(p);
    }
    let built = Arc::new(RealFft::new(len));
    let mut w = cache.write().expect("real fft cache poisoned");
    Arc::clone(w.entry(len).or_insert(built))
}
