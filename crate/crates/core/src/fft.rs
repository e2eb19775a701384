//! Fast Fourier transforms for real fields on the torus, a naive-DFT
//! reference used only in tests, and spectral Sobolev norms.
//!
//! Conventions: the forward transform carries the 1/N factor so that
//! coefficients approximate Fourier coefficients of the underlying
//! function; the inverse carries no scale. Power-of-two axis lengths are
//! handled natively; other lengths are rejected.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{fftfreq, Domain, FrequencyGrid, GridFunction};
use crate::tensor::{numel, CTensor, Tensor};

/// Complex Fourier coefficients of a real field, half-spectrum last axis.
#[derive(Clone, Debug)]
pub struct SpectralField {
    /// Shape `[channels, n1, ..., floor(nd/2)+1]`.
    pub coeffs: CTensor,
    /// Full source resolution `[n1, ..., nd]`.
    pub resolution: Vec<usize>,
    /// Normalization applied on the forward transform (1/N).
    pub norm_factor: f64,
}

impl SpectralField {
    pub fn channels(&self) -> usize {
        self.coeffs.shape[0]
    }

    pub fn spectrum_len(&self) -> usize {
        numel(&self.coeffs.shape[1..])
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let m = self.spectrum_len();
        &self.coeffs.data[c * m..(c + 1) * m]
    }

    pub fn frequency_grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::half(&self.resolution)
    }

    /// Largest imaginary part on modes forced real by Hermitian symmetry.
    pub fn hermitian_defect(&self) -> f64 {
        let fg = match self.frequency_grid() {
            Ok(fg) => fg,
            Err(_) => return f64::INFINITY,
        };
        let m = self.spectrum_len();
        let mut worst = 0.0f64;
        for flat in 0..m {
            let t = fg.tuple(flat);
            let self_conj = t.iter().enumerate().all(|(a, &k)| {
                let n = self.resolution[a] as i64;
                k == 0 || (n % 2 == 0 && (k == n / 2 || k == -n / 2))
            });
            if self_conj {
                for c in 0..self.channels() {
                    worst = worst.max(self.channel(c)[flat].im.abs());
                }
            }
        }
        worst
    }
}

/// Radix-2 complex FFT plan with precomputed twiddles. Immutable after
/// construction and shareable across threads.
pub struct Fft {
    n: usize,
    /// twiddle[k] = exp(-2 pi i k / n), k < n/2
    twiddle: Vec<Complex64>,
    rev: Vec<u32>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "FFT length must be a power of two, got {n}"
            )));
        }
        let mut twiddle = Vec::with_capacity(n / 2);
        for k in 0..n / 2 {
            let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            twiddle.push(Complex64::new(ang.cos(), ang.sin()));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        Ok(Fft { n, twiddle, rev })
    }

    fn permute(&self, buf: &mut [Complex64]) {
        for i in 0..self.n {
            let j = self.rev[i] as usize;
            if j > i {
                buf.swap(i, j);
            }
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        debug_assert_eq!(buf.len(), self.n);
        if self.n == 1 {
            return;
        }
        self.permute(buf);
        // Stage of length 2: twiddle is 1.
        for pair in buf.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a + b;
            pair[1] = a - b;
        }
        // Stage of length 4: twiddles 1 and -i (+i when inverting).
        if self.n >= 4 {
            let s = if inverse { -1.0 } else { 1.0 };
            for quad in buf.chunks_exact_mut(4) {
                let (a, b, c, d) = (quad[0], quad[1], quad[2], quad[3]);
                let t1 = Complex64::new(d.im * s, -d.re * s);
                quad[0] = a + c;
                quad[2] = a - c;
                quad[1] = b + t1;
                quad[3] = b - t1;
            }
        }
        let mut len = 8;
        while len <= self.n {
            let half = len / 2;
            let step = self.n / len;
            for start in (0..self.n).step_by(len) {
                let (lo, hi) = buf[start..start + len].split_at_mut(half);
                let mut ti = 0usize;
                for (av, bv) in lo.iter_mut().zip(hi.iter_mut()) {
                    let mut w = self.twiddle[ti];
                    if inverse {
                        w = w.conj();
                    }
                    ti += step;
                    let a = *av;
                    let t = w * *bv;
                    *av = a + t;
                    *bv = a - t;
                }
            }
            len *= 2;
        }
    }

    /// Unnormalized forward transform, exp(-2 pi i kn/N) kernel.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// Unnormalized inverse transform, exp(+2 pi i kn/N) kernel.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }
}

fn plan(n: usize) -> Result<Arc<Fft>> {
    static PLANS: OnceLock<Mutex<HashMap<usize, Arc<Fft>>>> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    if let Some(p) = map.get(&n) {
        return Ok(p.clone());
    }
    let p = Arc::new(Fft::new(n)?);
    map.insert(n, p.clone());
    Ok(p)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let d = shape.len();
    let mut s = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// In-place complex FFT of every line along `axis` of a row-major cube.
fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, inverse: bool) -> Result<()> {
    let n = shape[axis];
    let p = plan(n)?;
    let strides = strides_of(shape);
    let stride = strides[axis];
    if stride == 1 {
        for line in data.chunks_exact_mut(n) {
            if inverse {
                p.inverse(line);
            } else {
                p.forward(line);
            }
        }
        return Ok(());
    }
    let total = numel(shape);
    let mut scratch = vec![Complex64::new(0.0, 0.0); n];
    let lines = total / n;
    for l in 0..lines {
        // Base index of line l: distribute l over all axes except `axis`.
        let mut rem = l;
        let mut base = 0usize;
        for a in (0..shape.len()).rev() {
            if a == axis {
                continue;
            }
            let extent = shape[a];
            base += (rem % extent) * strides[a];
            rem /= extent;
        }
        for k in 0..n {
            scratch[k] = data[base + k * stride];
        }
        if inverse {
            p.inverse(&mut scratch);
        } else {
            p.forward(&mut scratch);
        }
        for k in 0..n {
            data[base + k * stride] = scratch[k];
        }
    }
    Ok(())
}

/// Blocked transpose of an `[rows, cols]` complex matrix into `out`.
fn transpose_into(src: &[Complex64], rows: usize, cols: usize, out: &mut [Complex64]) {
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                let row = &src[i * cols..(i + 1) * cols];
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = row[j];
                }
            }
        }
    }
}

/// Full multi-axis complex FFT (unnormalized) of a `[n1,..,nd]` cube.
/// The two-dimensional case runs row transforms and blocked transposes
/// instead of strided line gathers.
pub(crate) fn fft_full(data: &mut [Complex64], shape: &[usize], inverse: bool) -> Result<()> {
    if shape.len() == 2 {
        let (n1, n2) = (shape[0], shape[1]);
        let p2 = plan(n2)?;
        for line in data.chunks_exact_mut(n2) {
            if inverse {
                p2.inverse(line);
            } else {
                p2.forward(line);
            }
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); n1 * n2];
        transpose_into(data, n1, n2, &mut scratch);
        let p1 = plan(n1)?;
        for line in scratch.chunks_exact_mut(n1) {
            if inverse {
                p1.inverse(line);
            } else {
                p1.forward(line);
            }
        }
        transpose_into(&scratch, n2, n1, data);
        return Ok(());
    }
    for axis in 0..shape.len() {
        fft_axis(data, shape, axis, inverse)?;
    }
    Ok(())
}

fn check_torus_pow2(gf: &GridFunction) -> Result<()> {
    if gf.domain != Domain::Torus {
        return Err(Error::InvalidDomain);
    }
    for &n in gf.resolution() {
        if !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "FFT requires power-of-two axis lengths, got {n}"
            )));
        }
    }
    Ok(())
}

/// Forward real-to-complex transform with 1/N normalization; the last
/// axis is stored half-spectrum.
pub fn rfft_nd(gf: &GridFunction) -> Result<SpectralField> {
    check_torus_pow2(gf)?;
    let res = gf.resolution().to_vec();
    let d = res.len();
    let c = gf.channels();
    let grid = numel(&res);
    let half = res[d - 1] / 2 + 1;
    let mut out_shape = vec![c];
    out_shape.extend_from_slice(&res[..d - 1]);
    out_shape.push(half);
    let mut out = CTensor::zeros(&out_shape);
    let scale = 1.0 / grid as f64;
    let rows = grid / res[d - 1];
    let spec_len = rows * half;
    let mut cube = vec![Complex64::new(0.0, 0.0); grid];
    for ch in 0..c {
        let src = gf.channel(ch);
        for (dst, v) in cube.iter_mut().zip(src) {
            *dst = Complex64::new(*v, 0.0);
        }
        fft_full(&mut cube, &res, false)?;
        let dst = &mut out.data[ch * spec_len..(ch + 1) * spec_len];
        for r in 0..rows {
            let src_row = &cube[r * res[d - 1]..r * res[d - 1] + half];
            let dst_row = &mut dst[r * half..(r + 1) * half];
            for (o, v) in dst_row.iter_mut().zip(src_row) {
                *o = v * scale;
            }
        }
    }
    Ok(SpectralField { coeffs: out, resolution: res, norm_factor: scale })
}

/// Expand a half-spectrum channel to the full cube using Hermitian
/// symmetry: full[m] = conj(stored[(-m) mod n]) for mirrored modes.
pub(crate) fn hermitian_expand(
    stored: &[Complex64],
    resolution: &[usize],
    cube: &mut [Complex64],
) {
    let d = resolution.len();
    if d == 1 {
        let n = resolution[0];
        let half = n / 2 + 1;
        cube[..half].copy_from_slice(&stored[..half]);
        for m in half..n {
            cube[m] = stored[n - m].conj();
        }
        return;
    }
    if d == 2 {
        let (n1, n2) = (resolution[0], resolution[1]);
        let half = n2 / 2 + 1;
        for i in 0..n1 {
            let mi = (n1 - i) % n1;
            let dst = &mut cube[i * n2..(i + 1) * n2];
            dst[..half].copy_from_slice(&stored[i * half..i * half + half]);
            let mirror = &stored[mi * half..mi * half + half];
            for j in half..n2 {
                dst[j] = mirror[n2 - j].conj();
            }
        }
        return;
    }
    let half = resolution[d - 1] / 2 + 1;
    let full_strides = strides_of(resolution);
    let mut half_shape = resolution.to_vec();
    half_shape[d - 1] = half;
    let half_strides = strides_of(&half_shape);
    let total = numel(resolution);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0usize; d];
        for a in (0..d).rev() {
            idx[a] = rem % resolution[a];
            rem /= resolution[a];
        }
        if idx[d - 1] < half {
            let mut hflat = 0;
            for a in 0..d {
                hflat += idx[a] * half_strides[a];
            }
            cube[flat] = stored[hflat];
        } else {
            let mut hflat = 0;
            for a in 0..d {
                let mirrored = (resolution[a] - idx[a]) % resolution[a];
                hflat += mirrored * half_strides[a];
            }
            cube[flat] = stored[hflat].conj();
        }
    }
    let _ = full_strides;
}

/// Inverse transform pairing `rfft_nd` (no extra scale); output real.
pub fn irfft_nd(sf: &SpectralField, resolution: &[usize]) -> Result<GridFunction> {
    let d = resolution.len();
    if d == 0 {
        return Err(Error::invalid("empty resolution"));
    }
    let half = resolution[d - 1] / 2 + 1;
    let mut want = vec![sf.channels()];
    want.extend_from_slice(&resolution[..d - 1]);
    want.push(half);
    if sf.coeffs.shape != want {
        return Err(Error::shape(format!(
            "spectrum shape {:?} inconsistent with resolution {:?}",
            sf.coeffs.shape, resolution
        )));
    }
    for &n in resolution {
        if !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "FFT requires power-of-two axis lengths, got {n}"
            )));
        }
    }
    let c = sf.channels();
    let grid = numel(resolution);
    let mut shape = vec![c];
    shape.extend_from_slice(resolution);
    let mut out = Tensor::zeros(&shape);
    let mut cube = vec![Complex64::new(0.0, 0.0); grid];
    for ch in 0..c {
        hermitian_expand(sf.channel(ch), resolution, &mut cube);
        fft_full(&mut cube, resolution, true)?;
        let dst = &mut out.data[ch * grid..(ch + 1) * grid];
        for (o, v) in dst.iter_mut().zip(&cube) {
            *o = v.re;
        }
    }
    GridFunction::new(Domain::Torus, out)
}

/// Direct O(N^2) DFT over the full spectrum, same 1/N convention.
/// Reference implementation for tests; never used in training paths.
pub fn dft_oracle(gf: &GridFunction) -> Result<CTensor> {
    if gf.domain != Domain::Torus {
        return Err(Error::InvalidDomain);
    }
    let res = gf.resolution().to_vec();
    let d = res.len();
    let c = gf.channels();
    let grid = numel(&res);
    let mut shape = vec![c];
    shape.extend_from_slice(&res);
    let mut out = CTensor::zeros(&shape);
    let freqs: Vec<Vec<i64>> = res.iter().map(|&n| fftfreq(n).unwrap()).collect();
    let scale = 1.0 / grid as f64;
    for ch in 0..c {
        let src = gf.channel(ch);
        for kflat in 0..grid {
            let mut rem = kflat;
            let mut k = vec![0i64; d];
            for a in (0..d).rev() {
                k[a] = freqs[a][rem % res[a]];
                rem /= res[a];
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (jflat, &v) in src.iter().enumerate() {
                let mut rem = jflat;
                let mut phase = 0.0f64;
                for a in (0..d).rev() {
                    let j = rem % res[a];
                    rem /= res[a];
                    phase -= 2.0 * std::f64::consts::PI * (k[a] * j as i64) as f64 / res[a] as f64;
                }
                acc += Complex64::from_polar(v, phase);
            }
            out.data[ch * grid + kflat] = acc * scale;
        }
    }
    Ok(out)
}

/// Spectral Sobolev norm ( sum <xi>^{2s} |f(xi)|^2 )^{1/2}, with Hermitian
/// mirror modes counted once each by doubling interior half-spectrum
/// entries; channels are summed.
pub fn sobolev_norm(sf: &SpectralField, s: f64) -> Result<f64> {
    let fg = sf.frequency_grid()?;
    let m = sf.spectrum_len();
    let mut acc = 0.0;
    for flat in 0..m {
        let t = fg.tuple(flat);
        let xi2: f64 = t.iter().map(|&k| (k * k) as f64).sum();
        let weight = fg.mode_weight(flat) * (1.0 + xi2).powf(s);
        for c in 0..sf.channels() {
            acc += weight * sf.channel(c)[flat].norm_sqr();
        }
    }
    Ok(acc.sqrt())
}

/// Apply a closed-form Fourier multiplier: rfft, multiply each stored
/// mode by `symbol(frequency tuple)`, irfft.
pub fn apply_xi_multiplier<F>(gf: &GridFunction, symbol: F) -> Result<GridFunction>
where
    F: Fn(&[i64]) -> Complex64,
{
    let mut sf = rfft_nd(gf)?;
    let fg = sf.frequency_grid()?;
    let m = sf.spectrum_len();
    let c = sf.channels();
    for flat in 0..m {
        let w = symbol(&fg.tuple(flat));
        for ch in 0..c {
            sf.coeffs.data[ch * m + flat] *= w;
        }
    }
    irfft_nd(&sf, &gf.resolution().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn gf1(data: Vec<f64>) -> GridFunction {
        let n = data.len();
        GridFunction::new(Domain::Torus, Tensor::from_vec(&[1, n], data).unwrap()).unwrap()
    }

    fn random_gf(shape: &[usize], seed: u64) -> GridFunction {
        let mut rng = Rng::new(seed);
        let mut full = vec![1usize];
        full.extend_from_slice(shape);
        let data = (0..numel(&full)).map(|_| rng.gaussian()).collect();
        GridFunction::new(Domain::Torus, Tensor::from_vec(&full, data).unwrap()).unwrap()
    }

    #[test]
    fn constant_field_spectrum() {
        let sf = rfft_nd(&gf1(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!((sf.coeffs.data[0].re - 1.0).abs() < 1e-14);
        for k in 1..3 {
            assert!(sf.coeffs.data[k].norm() < 1e-14);
        }
    }

    #[test]
    fn cosine_mode_coefficient() {
        // cos(2 pi x) at 4 points: [1, 0, -1, 0]; coefficient at k=1 is 0.5.
        let sf = rfft_nd(&gf1(vec![1.0, 0.0, -1.0, 0.0])).unwrap();
        assert!((sf.coeffs.data[1].re - 0.5).abs() < 1e-14);
        assert!(sf.coeffs.data[1].im.abs() < 1e-14);
    }

    #[test]
    fn impulse_spreads_uniformly() {
        let spec = dft_oracle(&gf1(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        for k in 0..4 {
            assert!((spec.data[k].re - 0.25).abs() < 1e-15);
            assert!(spec.data[k].im.abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_constant() {
        let spec = dft_oracle(&gf1(vec![3.0; 8])).unwrap();
        assert!((spec.data[0].re - 3.0).abs() < 1e-13);
        for k in 1..8 {
            assert!(spec.data[k].norm() < 1e-13);
        }
    }

    #[test]
    fn rfft_matches_oracle_1d() {
        for &n in &[2usize, 4, 8, 64, 512] {
            let gf = random_gf(&[n], n as u64);
            let sf = rfft_nd(&gf).unwrap();
            let oracle = dft_oracle(&gf).unwrap();
            let half = n / 2 + 1;
            let mut worst = 0.0f64;
            for k in 0..half {
                worst = worst.max((sf.coeffs.data[k] - oracle.data[k]).norm());
            }
            assert!(worst < 1e-12, "n={n} worst={worst:.3e}");
        }
    }

    #[test]
    fn rfft_matches_oracle_2d() {
        let gf = random_gf(&[8, 16], 5);
        let sf = rfft_nd(&gf).unwrap();
        let oracle = dft_oracle(&gf).unwrap();
        let half = 16 / 2 + 1;
        for r in 0..8 {
            for k in 0..half {
                let a = sf.coeffs.data[r * half + k];
                let b = oracle.data[r * 16 + k];
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rfft_agreement_many_random() {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let gf = random_gf(&[64], 100 + seed);
            let sf = rfft_nd(&gf).unwrap();
            let oracle = dft_oracle(&gf).unwrap();
            for k in 0..33 {
                worst = worst.max((sf.coeffs.data[k] - oracle.data[k]).norm());
            }
        }
        assert!(worst < 1e-12, "worst={worst:.3e}");
    }

    #[test]
    fn round_trip_identity() {
        for shape in [vec![16usize], vec![8, 8], vec![4, 4, 8]] {
            let gf = random_gf(&shape, 7);
            let sf = rfft_nd(&gf).unwrap();
            assert!(sf.hermitian_defect() < 1e-12);
            let back = irfft_nd(&sf, &shape).unwrap();
            let worst = gf
                .values
                .data
                .iter()
                .zip(&back.values.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-12, "shape {shape:?} worst {worst:.3e}");
        }
    }

    #[test]
    fn single_mode_reconstruction() {
        // Unit coefficient at k=1 (n=8) inverse-transforms to
        // 2 cos(2 pi j / 8) via Hermitian completion of the mirror mode.
        let mut coeffs = CTensor::zeros(&[1, 5]);
        coeffs.data[1] = Complex64::new(1.0, 0.0);
        let sf = SpectralField { coeffs, resolution: vec![8], norm_factor: 1.0 / 8.0 };
        let gf = irfft_nd(&sf, &[8]).unwrap();
        for j in 0..8 {
            let want = 2.0 * (2.0 * std::f64::consts::PI * j as f64 / 8.0).cos();
            assert!((gf.values.data[j] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_coefficient_reconstruction() {
        let mut coeffs = CTensor::zeros(&[1, 5]);
        coeffs.data[0] = Complex64::new(2.5, 0.0);
        let sf = SpectralField { coeffs, resolution: vec![8], norm_factor: 1.0 / 8.0 };
        let gf = irfft_nd(&sf, &[8]).unwrap();
        for v in &gf.values.data {
            assert!((v - 2.5).abs() < 1e-13);
        }
    }

    #[test]
    fn linearity() {
        let f = random_gf(&[64], 21);
        let g = random_gf(&[64], 22);
        let (alpha, beta) = (1.7, -0.3);
        let combo_data: Vec<f64> = f
            .values
            .data
            .iter()
            .zip(&g.values.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let combo = gf1(combo_data);
        let sf = rfft_nd(&combo).unwrap();
        let sf_f = rfft_nd(&f).unwrap();
        let sf_g = rfft_nd(&g).unwrap();
        for k in 0..33 {
            let want = sf_f.coeffs.data[k] * alpha + sf_g.coeffs.data[k] * beta;
            assert!((sf.coeffs.data[k] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_l2() {
        let gf = random_gf(&[8, 32], 31);
        let sf = rfft_nd(&gf).unwrap();
        let spectral = sobolev_norm(&sf, 0.0).unwrap();
        let n = gf.grid_len() as f64;
        let physical = (gf.values.data.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((spectral - physical).abs() < 1e-10);
    }

    #[test]
    fn sobolev_constant_field() {
        let gf = gf1(vec![-1.5; 16]);
        let sf = rfft_nd(&gf).unwrap();
        for s in [-1.0, 0.0, 2.0] {
            assert!((sobolev_norm(&sf, s).unwrap() - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sobolev_sine_closed_form() {
        // sin(2 pi x): modes +-1 with amplitude 1/2 each, so
        // ||f||_{H^s}^2 = 2 * (1/4) * (1+1)^s = 2^s / 2.
        let n = 64;
        let data: Vec<f64> = (0..n)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / n as f64).sin())
            .collect();
        let sf = rfft_nd(&gf1(data)).unwrap();
        let h1 = sobolev_norm(&sf, 1.0).unwrap();
        assert!((h1 - 1.0).abs() < 1e-12, "h1={h1}");
        let h0 = sobolev_norm(&sf, 0.0).unwrap();
        assert!((h0 - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn box_domain_rejected() {
        let gf = GridFunction::new(
            Domain::Box,
            Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
        assert!(matches!(rfft_nd(&gf), Err(Error::InvalidDomain)));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let gf = gf1(vec![0.0; 12]);
        assert!(rfft_nd(&gf).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let gf = random_gf(&[16], 1);
        let sf = rfft_nd(&gf).unwrap();
        assert!(irfft_nd(&sf, &[32]).is_err());
    }

    #[test]
    fn spectral_derivative() {
        // Multiplier 2 pi i xi on sin(2 pi x) gives 2 pi cos(2 pi x).
        let n = 64;
        let data: Vec<f64> = (0..n)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / n as f64).sin())
            .collect();
        let gf = gf1(data);
        let deriv = apply_xi_multiplier(&gf, |k| {
            Complex64::new(0.0, 2.0 * std::f64::consts::PI * k[0] as f64)
        })
        .unwrap();
        for j in 0..n {
            let x = j as f64 / n as f64;
            let want = 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * x).cos();
            assert!((deriv.values.data[j] - want).abs() < 1e-10);
        }
    }
}
