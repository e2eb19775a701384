//! The PDIO layer, the multi-channel spectral integral operator, the full
//! PDNO iteration stack, an FNO-style baseline layer with directly
//! tabulated coefficients, mode truncation, and recurrent rollout.

use std::sync::Arc;

use num_complex::Complex64;

use crate::autodiff::{ActKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::SpectralField;
use crate::grid::{append_coords, coordinate_grid, Domain, FrequencyGrid, GridFunction};
use crate::rng::Rng;
use crate::symbols::{
    build_symbol_net, eval_x_symbol, eval_xi_symbol_at, SymbolNet, SymbolRole,
};
use crate::tensor::{numel, CTensor, Tensor};

/// One learnable integral-operator layer: an optional x-symbol network
/// and a (re, im) pair of xi-symbol networks.
#[derive(Clone, Debug)]
pub struct PdioLayer {
    pub x_symbol: Option<SymbolNet>,
    pub xi_re: SymbolNet,
    pub xi_im: SymbolNet,
    pub c_in: usize,
    pub c_out: usize,
    /// Frequency truncation; `None` keeps every available mode.
    pub k_max: Option<usize>,
}

/// Symbol networks evaluated on a tape for one resolution (reused across
/// the samples of a batch).
pub struct SymbolVars {
    pub xi: Var,
    pub x: Option<Var>,
    pub kept: Option<Arc<Vec<usize>>>,
    pub spectral_shape: Vec<usize>,
    pub resolution: Vec<usize>,
}

/// Precomputed coordinate/frequency lattices for symbol evaluation at a
/// fixed resolution (reused across samples and time values).
#[derive(Clone, Debug)]
pub struct SymbolLattice {
    pub resolution: Vec<usize>,
    pub spectral_shape: Vec<usize>,
    pub x_points: Tensor,
    pub xi_points: Tensor,
}

impl SymbolLattice {
    pub fn new(resolution: &[usize]) -> Result<Self> {
        let coords = coordinate_grid(resolution, Domain::Torus)?;
        let x_points = crate::symbols::coords_points_matrix(&coords);
        let fg = FrequencyGrid::half(resolution)?;
        Ok(SymbolLattice {
            resolution: resolution.to_vec(),
            spectral_shape: fg.shape(),
            x_points,
            xi_points: fg.points_matrix(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_pdio_layer(
    store: &mut ParamStore,
    name_prefix: &str,
    spatial_dim: usize,
    c_in: usize,
    c_out: usize,
    hidden: &[usize],
    activation: ActKind,
    with_x_symbol: bool,
    time_dependent: bool,
    k_max: Option<usize>,
    seed: u64,
) -> Result<PdioLayer> {
    let x_symbol = if with_x_symbol {
        Some(build_symbol_net(
            store,
            &format!("{name_prefix}.x"),
            SymbolRole::XSymbol,
            spatial_dim,
            hidden,
            activation,
            c_in,
            c_out,
            time_dependent,
            seed,
        )?)
    } else {
        None
    };
    let xi_re = build_symbol_net(
        store,
        &format!("{name_prefix}.xre"),
        SymbolRole::XiSymbolRe,
        spatial_dim,
        hidden,
        activation,
        c_in,
        c_out,
        time_dependent,
        seed.wrapping_add(1),
    )?;
    let xi_im = build_symbol_net(
        store,
        &format!("{name_prefix}.xim"),
        SymbolRole::XiSymbolIm,
        spatial_dim,
        hidden,
        activation,
        c_in,
        c_out,
        time_dependent,
        seed.wrapping_add(2),
    )?;
    Ok(PdioLayer { x_symbol, xi_re, xi_im, c_in, c_out, k_max })
}

impl PdioLayer {
    pub fn time_dependent(&self) -> bool {
        self.xi_re.time_dependent
    }

    /// Evaluate the layer's symbol networks for a resolution. `t` must be
    /// given exactly when the networks are time-augmented.
    pub fn eval_symbols(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        resolution: &[usize],
        t: Option<f64>,
    ) -> Result<SymbolVars> {
        let fg = FrequencyGrid::half(resolution)?;
        let spectral_shape = fg.shape();
        let max_needed = resolution.iter().map(|&n| n / 2).max().unwrap_or(0);
        let kept = match self.k_max {
            Some(k) if k < max_needed => Some(Arc::new(fg.modes_within(k))),
            _ => None,
        };
        let xi = match &kept {
            Some(idx) => {
                let all = fg.points_matrix();
                let d = all.shape[1];
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    data.extend_from_slice(&all.data[i * d..(i + 1) * d]);
                }
                let pts = Tensor::from_vec(&[idx.len(), d], data)?;
                eval_xi_symbol_at(tape, store, &self.xi_re, &self.xi_im, &pts, &[idx.len()], t)?
            }
            None => {
                let pts = fg.points_matrix();
                eval_xi_symbol_at(tape, store, &self.xi_re, &self.xi_im, &pts, &spectral_shape, t)?
            }
        };
        let x = match &self.x_symbol {
            Some(net) => {
                let coords = coordinate_grid(resolution, Domain::Torus)?;
                Some(eval_x_symbol(tape, store, net, &coords, t)?)
            }
            None => None,
        };
        Ok(SymbolVars { xi, x, kept, spectral_shape, resolution: resolution.to_vec() })
    }

    /// Evaluate symbols on precomputed lattices (no per-call coordinate
    /// or frequency-grid construction). Truncation is not supported on
    /// this path.
    pub fn eval_symbols_on(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lattice: &SymbolLattice,
        t: Option<f64>,
    ) -> Result<SymbolVars> {
        if self.k_max.is_some() {
            return Err(Error::invalid("lattice path does not support k_max"));
        }
        let xi = crate::symbols::eval_xi_symbol_at(
            tape,
            store,
            &self.xi_re,
            &self.xi_im,
            &lattice.xi_points,
            &lattice.spectral_shape,
            t,
        )?;
        let x = match &self.x_symbol {
            Some(net) => Some(crate::symbols::eval_x_symbol_at(
                tape,
                store,
                net,
                &lattice.x_points,
                &lattice.resolution,
                t,
            )?),
            None => None,
        };
        Ok(SymbolVars {
            xi,
            x,
            kept: None,
            spectral_shape: lattice.spectral_shape.clone(),
            resolution: lattice.resolution.clone(),
        })
    }

    /// Apply the layer to `f` (shape `[c_in, grid...]`) using previously
    /// evaluated symbols. Per output channel j the result is
    /// sum_i a1_ij(x) IFFT[ a2_ij(xi) FFT(f_i) ](x); with no x-symbol the
    /// channel sum moves inside the inverse transform.
    pub fn apply(&self, tape: &mut Tape, f: Var, sym: &SymbolVars) -> Result<Var> {
        let fshape = tape.value_real(f)?.shape.clone();
        if fshape[0] != self.c_in || fshape[1..] != sym.resolution[..] {
            return Err(Error::shape(format!(
                "pdio expects [{}, {:?}], got {:?}",
                self.c_in, sym.resolution, fshape
            )));
        }
        let d = sym.resolution.len();
        let spec = tape.fft(f, d)?;
        let spec = match &sym.kept {
            Some(idx) => tape.gather_modes(spec, idx.clone(), d)?,
            None => spec,
        };
        match &sym.x {
            None => {
                let mixed = tape.channel_contract(sym.xi, spec)?;
                let full = match &sym.kept {
                    Some(idx) => tape.scatter_modes(mixed, idx.clone(), &sym.spectral_shape)?,
                    None => mixed,
                };
                tape.ifft(full, &sym.resolution)
            }
            Some(xsym) => {
                let spec_shape = tape.value_complex(spec)?.shape.clone();
                let mut bshape = vec![self.c_in, 1];
                bshape.extend_from_slice(&spec_shape[1..]);
                let spec_b = tape.reshape(spec, &bshape)?;
                let prod = tape.complex_mul(spec_b, sym.xi)?; // [ci, co, modes]
                let full = match &sym.kept {
                    Some(idx) => tape.scatter_modes(prod, idx.clone(), &sym.spectral_shape)?,
                    None => prod,
                };
                let fields = tape.ifft(full, &sym.resolution)?; // [ci, co, grid]
                let weighted = tape.mul(fields, *xsym)?;
                tape.sum_axis0(weighted)
            }
        }
    }

    /// Batched apply: `f` is `[samples, c_in, grid...]`. With no
    /// x-symbol the symbol tensor streams once per sample block; an
    /// x-symbol falls back to assembling per-sample applications.
    pub fn apply_batched(&self, tape: &mut Tape, f: Var, sym: &SymbolVars) -> Result<Var> {
        let fshape = tape.value_real(f)?.shape.clone();
        if fshape.len() < 3 || fshape[1] != self.c_in || fshape[2..] != sym.resolution[..] {
            return Err(Error::shape(format!(
                "batched pdio expects [s, {}, {:?}], got {:?}",
                self.c_in, sym.resolution, fshape
            )));
        }
        if sym.x.is_some() {
            return Err(Error::invalid(
                "batched apply supports the xi-only form; use per-sample apply with an x-symbol",
            ));
        }
        let d = sym.resolution.len();
        let spec = tape.fft(f, d)?; // [s, ci, spec...]
        // The contraction flattens trailing spectral axes itself, so the
        // untruncated path needs no reshapes (their clones dominate the
        // memory traffic at this size).
        match &sym.kept {
            Some(idx) => {
                let spec = tape.gather_modes(spec, idx.clone(), d)?;
                let mixed = tape.channel_contract_batched(sym.xi, spec)?;
                let full = tape.scatter_modes(mixed, idx.clone(), &sym.spectral_shape)?;
                tape.ifft(full, &sym.resolution)
            }
            None => {
                let mixed = tape.channel_contract_batched(sym.xi, spec)?;
                tape.ifft(mixed, &sym.resolution)
            }
        }
    }

    /// Convenience wrapper: run the layer on a grid function through a
    /// fresh tape (inference path).
    pub fn apply_plain(
        &self,
        store: &ParamStore,
        f: &GridFunction,
        t: Option<f64>,
    ) -> Result<GridFunction> {
        if f.domain != Domain::Torus {
            return Err(Error::InvalidDomain);
        }
        if self.time_dependent() != t.is_some() {
            return Err(Error::invalid(
                "time argument does not match the layer's time-dependence",
            ));
        }
        let mut tape = Tape::new();
        let sym = self.eval_symbols(&mut tape, store, f.resolution(), t)?;
        let fv = tape.constant(f.values.clone());
        let out = self.apply(&mut tape, fv, &sym)?;
        GridFunction::new(Domain::Torus, tape.value_real(out)?.clone())
    }
}

/// Apply a pseudo-differential integral operator layer (no time input).
pub fn pdio_apply(layer: &PdioLayer, store: &ParamStore, f: &GridFunction) -> Result<GridFunction> {
    layer.apply_plain(store, f, None)
}

/// Apply a time-dependent PDIO at time `t`.
pub fn time_pdio_apply(
    layer: &PdioLayer,
    store: &ParamStore,
    f: &GridFunction,
    t: f64,
) -> Result<GridFunction> {
    layer.apply_plain(store, f, Some(t))
}

/// Zero every coefficient whose frequency tuple has any component with
/// |xi_i| > k_max.
pub fn truncate_modes(sf: &SpectralField, k_max: usize) -> Result<SpectralField> {
    let fg = sf.frequency_grid()?;
    let m = sf.spectrum_len();
    let mut out = sf.clone();
    for flat in 0..m {
        let keep = fg.tuple(flat).iter().all(|&k| k.unsigned_abs() as usize <= k_max);
        if !keep {
            for c in 0..sf.channels() {
                out.coeffs.data[c * m + flat] = Complex64::new(0.0, 0.0);
            }
        }
    }
    Ok(out)
}

/// Fourier integral operator layer: directly trainable complex
/// coefficients R[c_in, c_out, modes], zero outside `k_max`.
#[derive(Clone, Debug)]
pub struct FnoLayer {
    pub re: usize,
    pub im: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_max: Option<usize>,
    pub kept: Option<Arc<Vec<usize>>>,
    pub spectral_shape: Vec<usize>,
    pub resolution: Vec<usize>,
}

impl FnoLayer {
    /// Allocate zero coefficients for a resolution.
    pub fn zeros(
        store: &mut ParamStore,
        name_prefix: &str,
        c_in: usize,
        c_out: usize,
        resolution: &[usize],
        k_max: Option<usize>,
    ) -> Result<Self> {
        let fg = FrequencyGrid::half(resolution)?;
        let spectral_shape = fg.shape();
        let max_needed = resolution.iter().map(|&n| n / 2).max().unwrap_or(0);
        let kept = match k_max {
            Some(k) if k < max_needed => Some(Arc::new(fg.modes_within(k))),
            _ => None,
        };
        let modes = kept.as_ref().map_or(fg.num_points(), |k| k.len());
        let re = store.alloc(
            format!("{name_prefix}.re"),
            Tensor::zeros(&[c_in, c_out, modes]),
        );
        let im = store.alloc(
            format!("{name_prefix}.im"),
            Tensor::zeros(&[c_in, c_out, modes]),
        );
        Ok(FnoLayer { re, im, c_in, c_out, k_max, kept, spectral_shape, resolution: resolution.to_vec() })
    }

    /// Tabulate R from a xi-symbol network pair at the grid's integer
    /// frequencies (the algebraic bridge between the two layer types).
    pub fn from_tabulated_symbol(
        store: &mut ParamStore,
        name_prefix: &str,
        xi_re: &SymbolNet,
        xi_im: &SymbolNet,
        resolution: &[usize],
        k_max: Option<usize>,
    ) -> Result<Self> {
        let layer = Self::zeros(store, name_prefix, xi_re.c_in, xi_re.c_out, resolution, k_max)?;
        let fg = FrequencyGrid::half(resolution)?;
        let all = fg.points_matrix();
        let d = all.shape[1];
        let points = match &layer.kept {
            Some(idx) => {
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx.iter() {
                    data.extend_from_slice(&all.data[i * d..(i + 1) * d]);
                }
                Tensor::from_vec(&[idx.len(), d], data)?
            }
            None => all,
        };
        let values = crate::symbols::tabulate_xi_symbol(store, xi_re, xi_im, &points, None)?;
        let (ci, co) = (layer.c_in, layer.c_out);
        let modes = points.shape[0];
        // tabulate returns [point, ci*co]; R is stored [ci, co, modes].
        for p in 0..modes {
            for pair in 0..ci * co {
                let z = values[p * ci * co + pair];
                store.params[layer.re].value.data[pair * modes + p] = z.re;
                store.params[layer.im].value.data[pair * modes + p] = z.im;
            }
        }
        Ok(layer)
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let fshape = tape.value_real(f)?.shape.clone();
        if fshape[0] != self.c_in || fshape[1..] != self.resolution[..] {
            return Err(Error::shape(format!(
                "fno layer expects [{}, {:?}], got {:?}",
                self.c_in, self.resolution, fshape
            )));
        }
        let d = self.resolution.len();
        let spec = tape.fft(f, d)?;
        let spec = match &self.kept {
            Some(idx) => tape.gather_modes(spec, idx.clone(), d)?,
            None => {
                let m = numel(&self.spectral_shape);
                tape.reshape(spec, &[self.c_in, m])?
            }
        };
        let re = tape.param(store, self.re);
        let im = tape.param(store, self.im);
        let r = tape.complex_join(re, im)?;
        let mixed = tape.channel_contract(r, spec)?;
        let full = match &self.kept {
            Some(idx) => tape.scatter_modes(mixed, idx.clone(), &self.spectral_shape)?,
            None => {
                let mut shape = vec![self.c_out];
                shape.extend_from_slice(&self.spectral_shape);
                tape.reshape(mixed, &shape)?
            }
        };
        tape.ifft(full, &self.resolution)
    }

    pub fn apply_plain(&self, store: &ParamStore, f: &GridFunction) -> Result<GridFunction> {
        if f.domain != Domain::Torus {
            return Err(Error::InvalidDomain);
        }
        let mut tape = Tape::new();
        let fv = tape.constant(f.values.clone());
        let out = self.apply(&mut tape, store, fv)?;
        GridFunction::new(Domain::Torus, tape.value_real(out)?.clone())
    }
}

pub fn fno_layer_apply(
    layer: &FnoLayer,
    store: &ParamStore,
    f: &GridFunction,
) -> Result<GridFunction> {
    layer.apply_plain(store, f)
}

/// Architecture of a PDNO model.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PdnoArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub sym_hidden: Vec<usize>,
    pub sym_activation: ActKind,
    pub use_x_symbol: bool,
    pub k_max: Option<usize>,
    #[serde(default = "default_proj_hidden")]
    pub proj_hidden: usize,
}

fn default_proj_hidden() -> usize {
    128
}

#[derive(Clone, Debug)]
pub struct PdnoBlock {
    pub w: usize,
    pub b: usize,
    pub pdio: PdioLayer,
}

/// Lifting, L iteration blocks (pointwise linear + integral operator
/// with GELU between blocks), and a two-layer pointwise projection.
#[derive(Clone, Debug)]
pub struct PdnoModel {
    pub arch: PdnoArch,
    pub seed: u64,
    pub store: ParamStore,
    pub lift_w: usize,
    pub lift_b: usize,
    pub blocks: Vec<PdnoBlock>,
    pub proj1_w: usize,
    pub proj1_b: usize,
    pub proj2_w: usize,
    pub proj2_b: usize,
    pub activation: ActKind,
    /// Input normalization (mean, std) fixed at training time.
    pub input_norm: Option<(f64, f64)>,
}

fn alloc_affine(
    store: &mut ParamStore,
    name: &str,
    fan_out: usize,
    fan_in: usize,
    rng: &mut Rng,
) -> (usize, usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor {
        shape: vec![fan_out, fan_in],
        data: (0..fan_out * fan_in).map(|_| rng.uniform_in(-bound, bound)).collect(),
    };
    let b = Tensor {
        shape: vec![fan_out],
        data: (0..fan_out).map(|_| rng.uniform_in(-bound, bound)).collect(),
    };
    (store.alloc(format!("{name}.w"), w), store.alloc(format!("{name}.b"), b))
}

impl PdnoModel {
    pub fn new(arch: PdnoArch, seed: u64) -> Result<Self> {
        if arch.width == 0 || arch.layers == 0 {
            return Err(Error::invalid("width and layer count must be positive"));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0xa11);
        let (lift_w, lift_b) = alloc_affine(
            &mut store,
            "lift",
            arch.width,
            arch.in_channels + arch.spatial_dim,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let (w, b) = alloc_affine(&mut store, &format!("block{l}.lin"), arch.width, arch.width, &mut rng);
            let pdio = build_pdio_layer(
                &mut store,
                &format!("block{l}.k"),
                arch.spatial_dim,
                arch.width,
                arch.width,
                &arch.sym_hidden,
                arch.sym_activation,
                arch.use_x_symbol,
                false,
                arch.k_max,
                seed.wrapping_add(1000 + 10 * l as u64),
            )?;
            blocks.push(PdnoBlock { w, b, pdio });
        }
        let (proj1_w, proj1_b) =
            alloc_affine(&mut store, "proj1", arch.proj_hidden, arch.width, &mut rng);
        let (proj2_w, proj2_b) =
            alloc_affine(&mut store, "proj2", arch.out_channels, arch.proj_hidden, &mut rng);
        Ok(PdnoModel {
            arch,
            seed,
            store,
            lift_w,
            lift_b,
            blocks,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
            activation: ActKind::Gelu,
            input_norm: None,
        })
    }

    pub fn expected_input_channels(&self) -> usize {
        self.arch.in_channels + self.arch.spatial_dim
    }

    /// Evaluate every block's symbol networks once for a resolution
    /// (shared across the samples of a batch on the same tape).
    pub fn eval_symbols(
        &self,
        tape: &mut Tape,
        resolution: &[usize],
        k_max_override: Option<Option<usize>>,
    ) -> Result<Vec<SymbolVars>> {
        self.blocks
            .iter()
            .map(|bl| {
                let mut layer = bl.pdio.clone();
                if let Some(km) = k_max_override {
                    layer.k_max = km;
                }
                layer.eval_symbols(tape, &self.store, resolution, None)
            })
            .collect()
    }

    /// Forward pass on a tape. `input` must already carry the appended
    /// coordinate channels; `syms` comes from `eval_symbols` at the same
    /// resolution.
    pub fn forward(&self, tape: &mut Tape, input: Var, syms: &[SymbolVars]) -> Result<Var> {
        let shape = tape.value_real(input)?.shape.clone();
        if shape[0] != self.expected_input_channels() {
            return Err(Error::shape(format!(
                "model expects {} input channels (including coordinates), got {}",
                self.expected_input_channels(),
                shape[0]
            )));
        }
        if syms.len() != self.blocks.len() {
            return Err(Error::invalid("symbol set does not match block count"));
        }
        let lw = tape.param(&self.store, self.lift_w);
        let lb = tape.param(&self.store, self.lift_b);
        let mut f = tape.channel_affine(input, lw, lb)?;
        let last = self.blocks.len() - 1;
        for (l, block) in self.blocks.iter().enumerate() {
            let w = tape.param(&self.store, block.w);
            let b = tape.param(&self.store, block.b);
            let wf = tape.channel_affine(f, w, b)?;
            let kf = block.pdio.apply(tape, f, &syms[l])?;
            let s = tape.add(wf, kf)?;
            f = if l == last { s } else { tape.activation(s, self.activation)? };
        }
        let p1w = tape.param(&self.store, self.proj1_w);
        let p1b = tape.param(&self.store, self.proj1_b);
        let h = tape.channel_affine(f, p1w, p1b)?;
        let h = tape.activation(h, self.activation)?;
        let p2w = tape.param(&self.store, self.proj2_w);
        let p2b = tape.param(&self.store, self.proj2_b);
        tape.channel_affine(h, p2w, p2b)
    }
}

impl PdnoModel {
    /// Batched forward over `[samples, in_channels + d, grid...]` input.
    /// Requires the xi-only integral operator (no x-symbol).
    pub fn forward_batch(&self, tape: &mut Tape, input: Var, syms: &[SymbolVars]) -> Result<Var> {
        let shape = tape.value_real(input)?.shape.clone();
        if shape.len() < 3 || shape[1] != self.expected_input_channels() {
            return Err(Error::shape(format!(
                "batched model expects [s, {}, grid...], got {:?}",
                self.expected_input_channels(),
                shape
            )));
        }
        if syms.len() != self.blocks.len() {
            return Err(Error::invalid("symbol set does not match block count"));
        }
        let lw = tape.param(&self.store, self.lift_w);
        let lb = tape.param(&self.store, self.lift_b);
        let mut f = tape.channel_affine_batched(input, lw, lb)?;
        let last = self.blocks.len() - 1;
        for (l, block) in self.blocks.iter().enumerate() {
            let w = tape.param(&self.store, block.w);
            let b = tape.param(&self.store, block.b);
            let wf = tape.channel_affine_batched(f, w, b)?;
            let kf = block.pdio.apply_batched(tape, f, &syms[l])?;
            let s = tape.add(wf, kf)?;
            f = if l == last { s } else { tape.activation(s, self.activation)? };
        }
        let p1w = tape.param(&self.store, self.proj1_w);
        let p1b = tape.param(&self.store, self.proj1_b);
        let h = tape.channel_affine_batched(f, p1w, p1b)?;
        let h = tape.activation(h, self.activation)?;
        let p2w = tape.param(&self.store, self.proj2_w);
        let p2b = tape.param(&self.store, self.proj2_b);
        tape.channel_affine_batched(h, p2w, p2b)
    }
}

/// Single forward application to a grid function whose channels already
/// include the appended coordinates. Inference path (fresh tape).
pub fn pdno_forward(model: &PdnoModel, input: &GridFunction) -> Result<GridFunction> {
    if input.domain != Domain::Torus {
        return Err(Error::InvalidDomain);
    }
    let mut tape = Tape::new();
    let syms = model.eval_symbols(&mut tape, input.resolution(), None)?;
    let iv = tape.constant(input.values.clone());
    let out = model.forward(&mut tape, iv, &syms)?;
    GridFunction::new(Domain::Torus, tape.value_real(out)?.clone())
}

/// Recurrent rollout: predict the next field from a sliding window of
/// `in_channels` past fields, `steps` times. Returns the predictions in
/// order.
pub fn rollout(model: &PdnoModel, history: &GridFunction, steps: usize) -> Result<Vec<GridFunction>> {
    if model.arch.out_channels != 1 {
        return Err(Error::invalid("rollout requires a single output channel"));
    }
    let w = model.arch.in_channels;
    if history.channels() != w {
        return Err(Error::shape(format!(
            "rollout window must have {} channels, got {}",
            w,
            history.channels()
        )));
    }
    let grid = history.grid_len();
    let mut window = history.values.data.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut shape = vec![w];
        shape.extend_from_slice(history.resolution());
        let gf = GridFunction::new(history.domain, Tensor::from_vec(&shape, window.clone())?)?;
        let with_xy = append_coords(&gf)?;
        let pred = pdno_forward(model, &with_xy)?;
        window.drain(..grid);
        window.extend_from_slice(&pred.values.data);
        out.push(pred);
    }
    Ok(out)
}

/// A single trainable Fourier integral operator layer (the baseline
/// spectral model: directly tabulated coefficients, no symbol networks).
#[derive(Clone, Debug)]
pub struct FnoModel {
    pub seed: u64,
    pub store: ParamStore,
    pub layer: FnoLayer,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct FnoArch {
    pub c_in: usize,
    pub c_out: usize,
    pub resolution: Vec<usize>,
    pub k_max: Option<usize>,
}

impl FnoModel {
    pub fn new(arch: &FnoArch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layer = FnoLayer::zeros(
            &mut store,
            "fno",
            arch.c_in,
            arch.c_out,
            &arch.resolution,
            arch.k_max,
        )?;
        Ok(FnoModel { seed, store, layer })
    }

    pub fn arch(&self) -> FnoArch {
        FnoArch {
            c_in: self.layer.c_in,
            c_out: self.layer.c_out,
            resolution: self.layer.resolution.clone(),
            k_max: self.layer.k_max,
        }
    }
}

/// Standalone time-dependent PDIO (the heat-equation model): a single
/// linear layer whose symbols also take t.
#[derive(Clone, Debug)]
pub struct TimePdio {
    pub hidden: Vec<usize>,
    pub activation: ActKind,
    pub seed: u64,
    pub store: ParamStore,
    pub layer: PdioLayer,
}

impl TimePdio {
    pub fn new(hidden: &[usize], activation: ActKind, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layer = build_pdio_layer(
            &mut store,
            "tp",
            1,
            1,
            1,
            hidden,
            activation,
            true,
            true,
            None,
            seed,
        )?;
        Ok(TimePdio { hidden: hidden.to_vec(), activation, seed, store, layer })
    }

    pub fn apply(&self, u0: &GridFunction, t: f64) -> Result<GridFunction> {
        time_pdio_apply(&self.layer, &self.store, u0, t)
    }

    /// The effective learned symbol at integer frequencies `ks`: the
    /// x-average of a1 times a2. The operator only consults a2 on the
    /// stored half-spectrum; Hermitian completion makes its action at
    /// -xi the conjugate of the value at +xi, so negative frequencies
    /// report that conjugate rather than the (never used) network value
    /// at negative inputs.
    pub fn effective_symbol(&self, ks: &[i64], t: f64, resolution: usize) -> Result<Vec<Complex64>> {
        let points = Tensor {
            shape: vec![ks.len(), 1],
            data: ks.iter().map(|&k| k.unsigned_abs() as f64).collect(),
        };
        let xi_raw = crate::symbols::tabulate_xi_symbol(
            &self.store,
            &self.layer.xi_re,
            &self.layer.xi_im,
            &points,
            Some(t),
        )?;
        let xi: Vec<Complex64> = xi_raw
            .into_iter()
            .zip(ks)
            .map(|(z, &k)| if k < 0 { z.conj() } else { z })
            .collect();
        let coords = coordinate_grid(&[resolution], Domain::Torus)?;
        let xpts = crate::symbols::coords_points_matrix(&coords);
        let xpts = crate::symbols::with_time(&xpts, t);
        let xnet = self.layer.x_symbol.as_ref().expect("time pdio has an x-symbol");
        let xv = xnet.eval_plain(&self.store, &xpts)?;
        let xmean = xv.data.iter().sum::<f64>() / xv.data.len() as f64;
        Ok(xi.into_iter().map(|z| z * xmean).collect())
    }
}

/// Ratios ||T f||_{H^{s-1}} / ||f||_{H^s} of a PDIO over random
/// band-limited inputs (empirical Sobolev-boundedness check).
pub fn sobolev_ratio_samples(
    layer: &PdioLayer,
    store: &ParamStore,
    resolution: &[usize],
    s: f64,
    band_limit: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let fg = FrequencyGrid::half(resolution)?;
    let m = fg.num_points();
    let kept = fg.modes_within(band_limit);
    let mut ratios = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = Rng::derive(seed, i as u64);
        let mut coeffs = CTensor::zeros(
            &std::iter::once(layer.c_in)
                .chain(fg.shape())
                .collect::<Vec<_>>(),
        );
        for c in 0..layer.c_in {
            for &flat in &kept {
                let self_conj = fg.mode_weight(flat) == 1.0;
                let z = if self_conj {
                    Complex64::new(rng.gaussian(), 0.0)
                } else {
                    Complex64::new(rng.gaussian(), rng.gaussian())
                };
                coeffs.data[c * m + flat] = z;
            }
        }
        let sf = SpectralField {
            coeffs,
            resolution: resolution.to_vec(),
            norm_factor: 1.0 / numel(resolution) as f64,
        };
        let f = crate::fft::irfft_nd(&sf, resolution)?;
        let out = layer.apply_plain(store, &f, None)?;
        let num = crate::fft::sobolev_norm(&crate::fft::rfft_nd(&out)?, s - 1.0)?;
        let den = crate::fft::sobolev_norm(&crate::fft::rfft_nd(&f)?, s)?;
        ratios.push(num / den);
    }
    Ok(ratios)
}
