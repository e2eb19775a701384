//! Symbol networks a(x) and a(xi) (optionally time-dependent), their
//! evaluation on grids and frequency lattices, and an empirical
//! symbol-class verifier based on finite differences.

use num_complex::Complex64;

use crate::autodiff::{ActKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, GridFunction};
use crate::rng::Rng;
use crate::tensor::{affine_fwd, numel, Tensor};

/// Which factor of the symbol a network parameterizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolRole {
    XSymbol,
    XiSymbolRe,
    XiSymbolIm,
}

/// Fully connected network specification for one symbol factor. The
/// parameters live in a `ParamStore`; this struct only holds indices.
#[derive(Clone, Debug)]
pub struct SymbolNet {
    pub role: SymbolRole,
    pub activation: ActKind,
    /// Input dimension, including the +1 time column when time-dependent.
    pub d_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub time_dependent: bool,
    /// Optional multiplicative rescaling of frequency inputs (off by
    /// default; the symbol-class theory is stated in raw xi).
    pub xi_input_scale: Option<f64>,
    /// Layer sizes `[d_in, hidden..., c_in * c_out]`.
    pub sizes: Vec<usize>,
    /// (weight, bias) parameter indices per affine layer.
    pub layers: Vec<(usize, usize)>,
}

/// Build and initialize a symbol network. Weights and biases are drawn
/// uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)]; the final-layer
/// weights of xi-symbol networks are additionally scaled by 0.1 so the
/// spectral path starts small.
#[allow(clippy::too_many_arguments)]
pub fn build_symbol_net(
    store: &mut ParamStore,
    name_prefix: &str,
    role: SymbolRole,
    spatial_dim: usize,
    hidden: &[usize],
    activation: ActKind,
    c_in: usize,
    c_out: usize,
    time_dependent: bool,
    seed: u64,
) -> Result<SymbolNet> {
    if spatial_dim == 0 || c_in == 0 || c_out == 0 || hidden.iter().any(|&h| h == 0) {
        return Err(Error::invalid("symbol net sizes must be >= 1"));
    }
    let d_in = spatial_dim + usize::from(time_dependent);
    let mut sizes = vec![d_in];
    sizes.extend_from_slice(hidden);
    sizes.push(c_in * c_out);
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    let last = sizes.len() - 2;
    for l in 0..sizes.len() - 1 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wscale = if l == last && role != SymbolRole::XSymbol { 0.1 } else { 1.0 };
        let w = Tensor {
            shape: vec![fan_out, fan_in],
            data: (0..fan_out * fan_in)
                .map(|_| wscale * rng.uniform_in(-bound, bound))
                .collect(),
        };
        let b = Tensor {
            shape: vec![fan_out],
            data: (0..fan_out).map(|_| rng.uniform_in(-bound, bound)).collect(),
        };
        let wi = store.alloc(format!("{name_prefix}.w{l}"), w);
        let bi = store.alloc(format!("{name_prefix}.b{l}"), b);
        layers.push((wi, bi));
    }
    Ok(SymbolNet {
        role,
        activation,
        d_in,
        c_in,
        c_out,
        time_dependent,
        xi_input_scale: None,
        sizes,
        layers,
    })
}

impl SymbolNet {
    /// Differentiable evaluation at a `[points, d_in]` matrix, producing
    /// `[points, c_in * c_out]`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, points: &Tensor) -> Result<Var> {
        if points.shape.len() != 2 || points.shape[1] != self.d_in {
            return Err(Error::shape(format!(
                "symbol net expects [points, {}], got {:?}",
                self.d_in, points.shape
            )));
        }
        let mut h = tape.constant(points.clone());
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = tape.param(store, wi);
            let b = tape.param(store, bi);
            h = tape.affine(h, w, b)?;
            if l + 1 < self.layers.len() {
                h = tape.activation(h, self.activation)?;
            }
        }
        Ok(h)
    }

    /// Plain (non-differentiable) evaluation, same contract.
    pub fn eval_plain(&self, store: &ParamStore, points: &Tensor) -> Result<Tensor> {
        if points.shape.len() != 2 || points.shape[1] != self.d_in {
            return Err(Error::shape(format!(
                "symbol net expects [points, {}], got {:?}",
                self.d_in, points.shape
            )));
        }
        let batch = points.shape[0];
        let mut cur = points.data.clone();
        let mut cur_dim = self.d_in;
        for (l, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = &store.params[wi].value;
            let b = &store.params[bi].value;
            let dout = w.shape[0];
            let mut next = vec![0.0; batch * dout];
            affine_fwd(&cur, &w.data, &b.data, batch, cur_dim, dout, &mut next);
            if l + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
            cur_dim = dout;
        }
        Tensor::from_vec(&[batch, cur_dim], cur)
    }
}

/// Grid coordinates as a `[points, d]` matrix in row-major grid order.
pub fn coords_points_matrix(coords: &GridFunction) -> Tensor {
    let d = coords.channels();
    let m = coords.grid_len();
    let mut data = vec![0.0; m * d];
    for a in 0..d {
        let chan = coords.channel(a);
        for p in 0..m {
            data[p * d + a] = chan[p];
        }
    }
    Tensor { shape: vec![m, d], data }
}

/// Append a constant time column to a points matrix.
pub fn with_time(points: &Tensor, t: f64) -> Tensor {
    let m = points.shape[0];
    let d = points.shape[1];
    let mut data = vec![0.0; m * (d + 1)];
    for p in 0..m {
        data[p * (d + 1)..p * (d + 1) + d].copy_from_slice(&points.data[p * d..(p + 1) * d]);
        data[p * (d + 1) + d] = t;
    }
    Tensor { shape: vec![m, d + 1], data }
}

fn scale_points(points: &Tensor, scale: Option<f64>, spatial_dim: usize) -> Tensor {
    match scale {
        None => points.clone(),
        Some(s) => {
            let mut out = points.clone();
            let d = points.shape[1];
            for p in 0..points.shape[0] {
                for a in 0..spatial_dim.min(d) {
                    out.data[p * d + a] *= s;
                }
            }
            out
        }
    }
}

/// Evaluate an x-symbol network on grid coordinates, reshaped to
/// `[c_in, c_out, grid...]`. Differentiable in the network parameters.
pub fn eval_x_symbol(
    tape: &mut Tape,
    store: &ParamStore,
    net: &SymbolNet,
    coords: &GridFunction,
    t: Option<f64>,
) -> Result<Var> {
    let base = coords_points_matrix(coords);
    eval_x_symbol_at(tape, store, net, &base, coords.resolution(), t)
}

/// Evaluate an x-symbol network at a precomputed `[points, d]` matrix
/// covering a grid of the given shape.
pub fn eval_x_symbol_at(
    tape: &mut Tape,
    store: &ParamStore,
    net: &SymbolNet,
    points_base: &Tensor,
    grid_shape: &[usize],
    t: Option<f64>,
) -> Result<Var> {
    if net.role != SymbolRole::XSymbol {
        return Err(Error::invalid("eval_x_symbol: network role is not x-symbol"));
    }
    if net.time_dependent != t.is_some() {
        return Err(Error::invalid(
            "time argument does not match the network's time-dependence",
        ));
    }
    if numel(grid_shape) != points_base.shape[0] {
        return Err(Error::shape("point count does not fill the grid shape"));
    }
    let points = match t {
        Some(tv) => with_time(points_base, tv),
        None => points_base.clone(),
    };
    let flat = net.forward_tape(tape, store, &points)?;
    let tposed = tape.transpose2(flat)?;
    let mut shape = vec![net.c_in, net.c_out];
    shape.extend_from_slice(grid_shape);
    tape.reshape(tposed, &shape)
}

/// Evaluate the complex xi-symbol (re + i im networks) at a frequency
/// points matrix, reshaped to `[c_in, c_out, spectral shape...]`.
pub fn eval_xi_symbol_at(
    tape: &mut Tape,
    store: &ParamStore,
    re_net: &SymbolNet,
    im_net: &SymbolNet,
    points: &Tensor,
    spectral_shape: &[usize],
    t: Option<f64>,
) -> Result<Var> {
    if re_net.role != SymbolRole::XiSymbolRe || im_net.role != SymbolRole::XiSymbolIm {
        return Err(Error::invalid("eval_xi_symbol: wrong network roles"));
    }
    if re_net.sizes != im_net.sizes {
        return Err(Error::shape("re/im xi-symbol networks must share shapes"));
    }
    if re_net.time_dependent != t.is_some() {
        return Err(Error::invalid(
            "time argument does not match the network's time-dependence",
        ));
    }
    if numel(spectral_shape) != points.shape[0] {
        return Err(Error::shape(format!(
            "{} frequency points cannot fill spectral shape {:?}",
            points.shape[0], spectral_shape
        )));
    }
    let spatial = points.shape[1];
    let scaled = scale_points(points, re_net.xi_input_scale, spatial);
    let pts = match t {
        Some(tv) => with_time(&scaled, tv),
        None => scaled,
    };
    let re = re_net.forward_tape(tape, store, &pts)?;
    let im = im_net.forward_tape(tape, store, &pts)?;
    let joined = tape.complex_join_transposed(re, im)?; // [ci*co, m]
    let mut shape = vec![re_net.c_in, re_net.c_out];
    shape.extend_from_slice(spectral_shape);
    tape.reshape(joined, &shape)
}

/// Evaluate the complex xi-symbol on a full half-spectrum frequency grid.
pub fn eval_xi_symbol(
    tape: &mut Tape,
    store: &ParamStore,
    re_net: &SymbolNet,
    im_net: &SymbolNet,
    freqs: &FrequencyGrid,
    t: Option<f64>,
) -> Result<Var> {
    let points = freqs.points_matrix();
    eval_xi_symbol_at(tape, store, re_net, im_net, &points, &freqs.shape(), t)
}

/// Plain xi-symbol tabulation (no tape): `[points] -> c_in*c_out` complex
/// values per point, flattened `[m, c_in*c_out]`.
pub fn tabulate_xi_symbol(
    store: &ParamStore,
    re_net: &SymbolNet,
    im_net: &SymbolNet,
    points: &Tensor,
    t: Option<f64>,
) -> Result<Vec<Complex64>> {
    let spatial = points.shape[1];
    let scaled = scale_points(points, re_net.xi_input_scale, spatial);
    let pts = match t {
        Some(tv) => with_time(&scaled, tv),
        None => scaled,
    };
    let re = re_net.eval_plain(store, &pts)?;
    let im = im_net.eval_plain(store, &pts)?;
    Ok(re
        .data
        .iter()
        .zip(&im.data)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect())
}

// ---- symbol-class verification -------------------------------------------

/// A complex symbol of xi that the verifier can sample, possibly with
/// several output components (one per channel pair).
pub trait XiSymbol {
    fn dim(&self) -> usize;
    fn components(&self) -> usize;
    fn eval(&self, xi: &[f64]) -> Vec<Complex64>;
}

/// Closed-form scalar symbol for oracle tests.
pub struct FnSymbol<F: Fn(&[f64]) -> Complex64> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Complex64> XiSymbol for FnSymbol<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn components(&self) -> usize {
        1
    }
    fn eval(&self, xi: &[f64]) -> Vec<Complex64> {
        vec![(self.f)(xi)]
    }
}

/// A (re, im) network pair viewed as a complex symbol of xi.
pub struct NetPairSymbol<'a> {
    pub re: &'a SymbolNet,
    pub im: &'a SymbolNet,
    pub store: &'a ParamStore,
    pub t: Option<f64>,
}

impl XiSymbol for NetPairSymbol<'_> {
    fn dim(&self) -> usize {
        self.re.d_in - usize::from(self.re.time_dependent)
    }
    fn components(&self) -> usize {
        self.re.c_in * self.re.c_out
    }
    fn eval(&self, xi: &[f64]) -> Vec<Complex64> {
        let points = Tensor { shape: vec![1, xi.len()], data: xi.to_vec() };
        tabulate_xi_symbol(self.store, self.re, self.im, &points, self.t)
            .expect("symbol evaluation failed")
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ClassRow {
    pub alpha: Vec<u32>,
    pub c_fit: f64,
    pub holdout_max: f64,
    pub violation_ratio: f64,
    pub pass: bool,
}

/// Result of an empirical symbol-class check: per multi-index fitted
/// constants, holdout ratios, and an overall verdict.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SymbolClassReport {
    pub order: f64,
    pub derivative_cap: usize,
    pub xi_range: f64,
    pub sampled_points: usize,
    pub rows: Vec<ClassRow>,
    pub worst_violation_ratio: f64,
    pub pass: bool,
}

fn multi_indices(d: usize, cap: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; d]];
    if cap >= 1 {
        for a in 0..d {
            let mut m = vec![0u32; d];
            m[a] = 1;
            out.push(m);
        }
    }
    if cap >= 2 {
        for a in 0..d {
            for b in a..d {
                let mut m = vec![0u32; d];
                m[a] += 1;
                m[b] += 1;
                out.push(m);
            }
        }
    }
    out
}

/// Magnitude of the central-difference estimate of the alpha-derivative,
/// maximized over output components.
fn derivative_magnitude(sym: &dyn XiSymbol, xi: &[f64], alpha: &[u32]) -> f64 {
    let order: u32 = alpha.iter().sum();
    let h = |x: f64| 1e-3 * (1.0 + x.abs());
    let max_norm = |v: Vec<Complex64>| v.into_iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    match order {
        0 => max_norm(sym.eval(xi)),
        1 => {
            let a = alpha.iter().position(|&m| m == 1).unwrap();
            let ha = h(xi[a]);
            let mut xp = xi.to_vec();
            let mut xm = xi.to_vec();
            xp[a] += ha;
            xm[a] -= ha;
            let (fp, fm) = (sym.eval(&xp), sym.eval(&xm));
            fp.iter()
                .zip(&fm)
                .map(|(p, m)| ((p - m) / (2.0 * ha)).norm())
                .fold(0.0f64, f64::max)
        }
        2 => {
            if let Some(a) = alpha.iter().position(|&m| m == 2) {
                let ha = h(xi[a]);
                let mut xp = xi.to_vec();
                let mut xm = xi.to_vec();
                xp[a] += ha;
                xm[a] -= ha;
                let (fp, fm) = (sym.eval(&xp), sym.eval(&xm));
                let f0 = sym.eval(xi);
                fp.iter()
                    .zip(&fm)
                    .zip(&f0)
                    .map(|((p, m), c)| ((p + m - 2.0 * c) / (ha * ha)).norm())
                    .fold(0.0f64, f64::max)
            } else {
                let a = alpha.iter().position(|&m| m == 1).unwrap();
                let b = alpha.iter().rposition(|&m| m == 1).unwrap();
                let (ha, hb) = (h(xi[a]), h(xi[b]));
                let eval_at = |da: f64, db: f64| {
                    let mut x = xi.to_vec();
                    x[a] += da;
                    x[b] += db;
                    sym.eval(&x)
                };
                let pp = eval_at(ha, hb);
                let pm = eval_at(ha, -hb);
                let mp = eval_at(-ha, hb);
                let mm = eval_at(-ha, -hb);
                (0..pp.len())
                    .map(|c| ((pp[c] - pm[c] - mp[c] + mm[c]) / (4.0 * ha * hb)).norm())
                    .fold(0.0f64, f64::max)
            }
        }
        _ => unreachable!("derivative cap is 2"),
    }
}

/// Empirically test whether a symbol satisfies the class bound
/// |d^alpha a| <= c_alpha <xi>^(m - |alpha|) over a log-spaced sample up
/// to `xi_range`. Constants are fitted on an inner calibration set
/// (|xi| <= range/10); the check passes if no held-out sample exceeds
/// twice the fitted constant.
pub fn verify_symbol_class(
    sym: &dyn XiSymbol,
    order: f64,
    xi_range: f64,
    samples_per_direction: usize,
    derivative_cap: usize,
) -> Result<SymbolClassReport> {
    if xi_range <= 1.0 {
        return Err(Error::invalid("xi range must exceed 1"));
    }
    if derivative_cap > 2 {
        return Err(Error::invalid(
            "finite differences above order 2 are numerically fragile; cap is 2",
        ));
    }
    if samples_per_direction < 8 {
        return Err(Error::invalid("need at least 8 samples per direction"));
    }
    let d = sym.dim();
    // Sample directions: axis-aligned plus a few fixed random ones for d > 1.
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for a in 0..d {
        for sign in [1.0, -1.0] {
            let mut u = vec![0.0; d];
            u[a] = sign;
            dirs.push(u);
        }
    }
    if d > 1 {
        let mut rng = Rng::new(0x5eed);
        for _ in 0..4 {
            let mut u: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= n);
            dirs.push(u);
        }
    }
    // Log-spaced radii in [1, range], plus the origin.
    let mut points: Vec<Vec<f64>> = vec![vec![0.0; d]];
    for u in &dirs {
        for i in 0..samples_per_direction {
            let t = i as f64 / (samples_per_direction - 1) as f64;
            let r = xi_range.powf(t); // 1 .. range
            points.push(u.iter().map(|c| c * r).collect());
        }
    }
    let calib_limit = xi_range / 10.0;
    let alphas = multi_indices(d, derivative_cap);
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    let mut all_pass = true;
    for alpha in alphas {
        let a_order: u32 = alpha.iter().sum();
        let exponent = order - a_order as f64;
        let mut c_fit = 0.0f64;
        let mut holdout = 0.0f64;
        for p in &points {
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let weight = (1.0 + r * r).powf(exponent / 2.0);
            let ratio = derivative_magnitude(sym, p, &alpha) / weight;
            if r <= calib_limit {
                c_fit = c_fit.max(ratio);
            } else {
                holdout = holdout.max(ratio);
            }
        }
        let allowed = 2.0 * c_fit + 1e-9;
        let pass = holdout <= allowed;
        let violation_ratio = holdout / c_fit.max(1e-12);
        worst = worst.max(violation_ratio);
        all_pass &= pass;
        rows.push(ClassRow { alpha, c_fit, holdout_max: holdout, violation_ratio, pass });
    }
    Ok(SymbolClassReport {
        order,
        derivative_cap,
        xi_range,
        sampled_points: points.len(),
        rows,
        worst_violation_ratio: worst,
        pass: all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use crate::grid::{coordinate_grid, Domain};

    fn zero_final_layer(store: &mut ParamStore, net: &SymbolNet) {
        let (wi, bi) = *net.layers.last().unwrap();
        store.params[wi].value.data.fill(0.0);
        store.params[bi].value.data.fill(0.0);
    }

    #[test]
    fn zeroed_final_layer_gives_zero_symbol() {
        let mut store = ParamStore::new();
        let net = build_symbol_net(
            &mut store,
            "x",
            SymbolRole::XSymbol,
            1,
            &[16],
            ActKind::Gelu,
            2,
            3,
            false,
            1,
        )
        .unwrap();
        zero_final_layer(&mut store, &net);
        let pts = Tensor::from_vec(&[4, 1], vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let out = net.eval_plain(&store, &pts).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_bias_gives_constant_symbol() {
        let mut store = ParamStore::new();
        let net = build_symbol_net(
            &mut store,
            "x",
            SymbolRole::XSymbol,
            1,
            &[8],
            ActKind::Tanh,
            1,
            1,
            false,
            2,
        )
        .unwrap();
        zero_final_layer(&mut store, &net);
        let (_, bi) = *net.layers.last().unwrap();
        store.params[bi].value.data.fill(2.5);
        let pts = Tensor::from_vec(&[3, 1], vec![0.1, 0.5, 0.9]).unwrap();
        let out = net.eval_plain(&store, &pts).unwrap();
        assert!(out.data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn identity_like_single_layer() {
        // One affine layer with W = 1, b = 0 reproduces its input.
        let mut store = ParamStore::new();
        let net = build_symbol_net(
            &mut store,
            "x",
            SymbolRole::XSymbol,
            1,
            &[],
            ActKind::Gelu,
            1,
            1,
            false,
            3,
        )
        .unwrap();
        let (wi, bi) = net.layers[0];
        store.params[wi].value.data[0] = 1.0;
        store.params[bi].value.data[0] = 0.0;
        let coords = coordinate_grid(&[4], Domain::Torus).unwrap();
        let mut tape = Tape::new();
        let out = eval_x_symbol(&mut tape, &store, &net, &coords, None).unwrap();
        let v = tape.value_real(out).unwrap();
        assert_eq!(v.shape, vec![1, 1, 4]);
        assert_eq!(v.data, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn deterministic_under_seed() {
        let build = || {
            let mut store = ParamStore::new();
            let _ = build_symbol_net(
                &mut store,
                "s",
                SymbolRole::XiSymbolRe,
                2,
                &[32],
                ActKind::Gelu,
                2,
                2,
                false,
                77,
            )
            .unwrap();
            store.params.iter().flat_map(|p| p.value.data.clone()).collect::<Vec<_>>()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn x_symbol_gradient_passes_grad_check() {
        let mut store = ParamStore::new();
        let net = build_symbol_net(
            &mut store,
            "x",
            SymbolRole::XSymbol,
            1,
            &[6],
            ActKind::Gelu,
            2,
            2,
            false,
            5,
        )
        .unwrap();
        let coords = coordinate_grid(&[8], Domain::Torus).unwrap();
        let err = grad_check_params(
            &mut store,
            |tape, store| {
                let v = eval_x_symbol(tape, store, &net, &coords, None)?;
                let sq = tape.mul(v, v)?;
                tape.sum_all(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err:.3e}");
    }

    #[test]
    fn xi_symbol_real_when_im_net_zeroed() {
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[8], ActKind::Gelu, 1, 1, false, 6,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[8], ActKind::Gelu, 1, 1, false, 7,
        )
        .unwrap();
        for &(wi, bi) in &im.layers {
            store.params[wi].value.data.fill(0.0);
            store.params[bi].value.data.fill(0.0);
        }
        let fg = FrequencyGrid::half(&[8]).unwrap();
        let mut tape = Tape::new();
        let sym = eval_xi_symbol(&mut tape, &store, &re, &im, &fg, None).unwrap();
        let v = tape.value_complex(sym).unwrap();
        assert_eq!(v.shape, vec![1, 1, 5]);
        assert!(v.data.iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn constant_xi_symbol() {
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[4], ActKind::Tanh, 1, 1, false, 8,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[4], ActKind::Tanh, 1, 1, false, 9,
        )
        .unwrap();
        zero_final_layer(&mut store, &re);
        zero_final_layer(&mut store, &im);
        let (_, rbi) = *re.layers.last().unwrap();
        let (_, ibi) = *im.layers.last().unwrap();
        store.params[rbi].value.data.fill(1.5);
        store.params[ibi].value.data.fill(-0.5);
        let fg = FrequencyGrid::half(&[8]).unwrap();
        let mut tape = Tape::new();
        let sym = eval_xi_symbol(&mut tape, &store, &re, &im, &fg, None).unwrap();
        let v = tape.value_complex(sym).unwrap();
        assert!(v
            .data
            .iter()
            .all(|z| (z - Complex64::new(1.5, -0.5)).norm() < 1e-15));
    }

    #[test]
    fn time_symbols_deterministic_and_continuous() {
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[16], ActKind::Gelu, 1, 1, true, 10,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[16], ActKind::Gelu, 1, 1, true, 11,
        )
        .unwrap();
        let fg = FrequencyGrid::half(&[16]).unwrap();
        let eval_at = |t: f64| {
            let mut tape = Tape::new();
            let sym = eval_xi_symbol(&mut tape, &store, &re, &im, &fg, Some(t)).unwrap();
            tape.value_complex(sym).unwrap().data.clone()
        };
        let a = eval_at(0.3);
        let b = eval_at(0.3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
        // Continuity in t: small step, small change.
        let c = eval_at(0.3 + 1e-7);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).norm() < 1e-4);
        }
        // Non-augmented evaluation must be rejected.
        let mut tape = Tape::new();
        assert!(eval_xi_symbol(&mut tape, &store, &re, &im, &fg, None).is_err());
    }

    #[test]
    fn factorization_product_identity() {
        // The joint symbol a(x, xi) assembled as an outer product matches
        // pointwise multiplication per channel pair.
        let mut store = ParamStore::new();
        let xnet = build_symbol_net(
            &mut store, "x", SymbolRole::XSymbol, 1, &[8], ActKind::Gelu, 2, 2, false, 12,
        )
        .unwrap();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[8], ActKind::Gelu, 2, 2, false, 13,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[8], ActKind::Gelu, 2, 2, false, 14,
        )
        .unwrap();
        let coords = coordinate_grid(&[8], Domain::Torus).unwrap();
        let fg = FrequencyGrid::half(&[8]).unwrap();
        let mut tape = Tape::new();
        let xs = eval_x_symbol(&mut tape, &store, &xnet, &coords, None).unwrap();
        let xis = eval_xi_symbol(&mut tape, &store, &re, &im, &fg, None).unwrap();
        let xv = tape.value_real(xs).unwrap().clone();
        let xiv = tape.value_complex(xis).unwrap().clone();
        for i in 0..2 {
            for j in 0..2 {
                for (p, _) in coords.channel(0).iter().enumerate() {
                    for q in 0..fg.num_points() {
                        let joint =
                            xiv.data[(i * 2 + j) * 5 + q] * xv.data[(i * 2 + j) * 8 + p];
                        let product =
                            xv.data[(i * 2 + j) * 8 + p] * xiv.data[(i * 2 + j) * 5 + q];
                        assert!((joint - product).norm() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn verifier_linear_symbol_passes_m1() {
        let sym = FnSymbol { dim: 1, f: |xi: &[f64]| Complex64::new(xi[0], 0.0) };
        let report = verify_symbol_class(&sym, 1.0, 1e4, 40, 2).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn verifier_quadratic_fails_m1() {
        let sym = FnSymbol { dim: 1, f: |xi: &[f64]| Complex64::new(xi[0] * xi[0], 0.0) };
        let report = verify_symbol_class(&sym, 1.0, 1e4, 40, 2).unwrap();
        assert!(!report.pass, "{report:?}");
    }

    #[test]
    fn verifier_tanh_net_passes_m0() {
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[64], ActKind::Tanh, 1, 1, false, 15,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[64], ActKind::Tanh, 1, 1, false, 16,
        )
        .unwrap();
        let sym = NetPairSymbol { re: &re, im: &im, store: &store, t: None };
        let report = verify_symbol_class(&sym, 0.0, 1e4, 40, 2).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn verifier_gelu_net_passes_m1() {
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[64, 64], ActKind::Gelu, 1, 1, false, 17,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[64, 64], ActKind::Gelu, 1, 1, false, 18,
        )
        .unwrap();
        let sym = NetPairSymbol { re: &re, im: &im, store: &store, t: None };
        let report = verify_symbol_class(&sym, 1.0, 1e4, 40, 2).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn verifier_rejects_bad_args() {
        let sym = FnSymbol { dim: 1, f: |_: &[f64]| Complex64::new(0.0, 0.0) };
        assert!(verify_symbol_class(&sym, 0.0, 0.5, 40, 2).is_err());
        assert!(verify_symbol_class(&sym, 0.0, 1e4, 40, 3).is_err());
        assert!(verify_symbol_class(&sym, 0.0, 1e4, 2, 2).is_err());
    }

    #[test]
    fn gelu_xi_net_linear_growth_bound() {
        // max |a(xi)| / <xi> stays bounded over a wide range.
        let mut store = ParamStore::new();
        let re = build_symbol_net(
            &mut store, "re", SymbolRole::XiSymbolRe, 1, &[64], ActKind::Gelu, 1, 1, false, 19,
        )
        .unwrap();
        let im = build_symbol_net(
            &mut store, "im", SymbolRole::XiSymbolIm, 1, &[64], ActKind::Gelu, 1, 1, false, 20,
        )
        .unwrap();
        let sym = NetPairSymbol { re: &re, im: &im, store: &store, t: None };
        let mut ratios = Vec::new();
        for i in 0..200 {
            let xi = -1e4 + 1e2 * i as f64;
            let v = sym.eval(&[xi])[0].norm();
            ratios.push(v / (1.0 + xi * xi).sqrt());
        }
        let max = ratios.iter().copied().fold(0.0f64, f64::max);
        assert!(max.is_finite() && max < 100.0, "ratio {max}");
    }
}
