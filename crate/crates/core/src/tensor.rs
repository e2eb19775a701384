//! Dense row-major f64 and complex128 arrays plus the small set of
//! matrix kernels the rest of the crate is built on.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Complex array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    pub shape: Vec<usize>,
    pub data: Vec<Complex64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

impl CTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        CTensor { shape: shape.to_vec(), data: vec![Complex64::new(0.0, 0.0); numel(shape)] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(CTensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}


use std::sync::atomic::{AtomicUsize, Ordering};

static COMPUTE_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Set the worker count for parallel kernels (0 = autodetect).
pub fn set_compute_threads(n: usize) {
    COMPUTE_THREADS.store(n, Ordering::Relaxed);
}

pub fn compute_threads() -> usize {
    let n = COMPUTE_THREADS.load(Ordering::Relaxed);
    if n != 0 {
        return n;
    }
    std::thread::available_parallelism().map(|v| v.get().min(8)).unwrap_or(1)
}

/// Process contiguous `chunk`-sized rows of `data` on the worker pool
/// when `parallel` is set (callers gate on problem size so small ops skip
/// the spawn cost). Every chunk is computed independently with
/// thread-count-independent arithmetic, so results are bit-identical for
/// any worker count.
pub fn par_chunks_mut<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    parallel: bool,
    data: &mut [T],
    chunk: usize,
    f: F,
) {
    assert!(chunk > 0 && data.len() % chunk == 0);
    let n_chunks = data.len() / chunk;
    let threads = if parallel { compute_threads().min(n_chunks.max(1)) } else { 1 };
    if threads <= 1 || n_chunks <= 1 {
        for (i, c) in data.chunks_exact_mut(chunk).enumerate() {
            f(i, c);
        }
        return;
    }
    let per = n_chunks.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest = data;
        let mut start = 0usize;
        while !rest.is_empty() {
            let take = (per * chunk).min(rest.len());
            let (slab, tail) = rest.split_at_mut(take);
            let f = &f;
            let first = start;
            scope.spawn(move || {
                for (i, c) in slab.chunks_exact_mut(chunk).enumerate() {
                    f(first + i, c);
                }
            });
            start += take / chunk;
            rest = tail;
        }
    });
}

/// out[p, o] = sum_i x[p, i] * w[o, i] + b[o]
///
/// `w` is stored [out, in]; it is transposed into scratch once so the inner
/// loop runs contiguously over the output dimension.
pub fn affine_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    din: usize,
    dout: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), batch * din);
    debug_assert_eq!(w.len(), dout * din);
    debug_assert_eq!(out.len(), batch * dout);
    let mut wt = vec![0.0; din * dout];
    for o in 0..dout {
        for i in 0..din {
            wt[i * dout + o] = w[o * din + i];
        }
    }
    let work = batch * din * dout;
    par_chunks_mut(work >= 1 << 18, out, dout, |p, or| {
        affine_row(&x[p * din..(p + 1) * din], &wt, b, din, dout, or);
    });
}

fn affine_row(xr: &[f64], wt: &[f64], b: &[f64], din: usize, dout: usize, or: &mut [f64]) {
    or.copy_from_slice(b);
    for i in 0..din {
        let xv = xr[i];
        let wr = &wt[i * dout..(i + 1) * dout];
        for (ov, wv) in or.iter_mut().zip(wr) {
            *ov += xv * *wv;
        }
    }
}

/// Gradients of `affine_fwd`: dw[o,i] += sum_p g[p,o] x[p,i],
/// db[o] += sum_p g[p,o], dx[p,i] += sum_o g[p,o] w[o,i].
#[allow(clippy::too_many_arguments)]
pub fn affine_bwd(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    batch: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    // dW and db accumulate per output row (no cross-thread reductions).
    let heavy = batch * din * dout >= 1 << 18;
    let weight_rows = |o0: usize, dwr: &mut [f64], dbo: &mut f64| {
        for p in 0..batch {
            let gv = g[p * dout + o0];
            if gv == 0.0 {
                continue;
            }
            *dbo += gv;
            let xr = &x[p * din..(p + 1) * din];
            for (dwv, xv) in dwr.iter_mut().zip(xr) {
                *dwv += gv * *xv;
            }
        }
    };
    if heavy {
        // dW rows parallel; db summed separately (cheap single pass).
        par_chunks_mut(true, dw, din, |o, dwr| {
            let mut unused = 0.0;
            weight_rows(o, dwr, &mut unused);
        });
        for o in 0..dout {
            let mut acc = 0.0;
            for p in 0..batch {
                acc += g[p * dout + o];
            }
            db[o] += acc;
        }
    } else {
        for o in 0..dout {
            let (dwr, dbo) = (&mut dw[o * din..(o + 1) * din], &mut db[o]);
            weight_rows(o, dwr, dbo);
        }
    }
    if let Some(dx) = dx {
        let row = |p: usize, dxr: &mut [f64]| {
            let gr = &g[p * dout..(p + 1) * dout];
            for (o, &gv) in gr.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let wr = &w[o * din..(o + 1) * din];
                for (dxv, wv) in dxr.iter_mut().zip(wr) {
                    *dxv += gv * *wv;
                }
            }
        };
        par_chunks_mut(heavy, dx, din, row);
    }
}

/// out[o, g] = sum_i w[o, i] * x[i, g] + b[o]  (channel-major layout)
pub fn channel_affine_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    grid: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * grid);
    debug_assert_eq!(out.len(), cout * grid);
    const TILE: usize = 4096;
    let row = |o: usize, or: &mut [f64]| {
        or.fill(b[o]);
        let wrow = &w[o * cin..(o + 1) * cin];
        for t0 in (0..grid).step_by(TILE) {
            let t1 = (t0 + TILE).min(grid);
            for (i, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let xr = &x[i * grid + t0..i * grid + t1];
                for (ov, xv) in or[t0..t1].iter_mut().zip(xr) {
                    *ov += wv * *xv;
                }
            }
        }
    };
    par_chunks_mut(cin * cout * grid >= 1 << 18, out, grid, row);
}

#[allow(clippy::too_many_arguments)]
pub fn channel_affine_bwd(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    grid: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let heavy = cin * cout * grid >= 1 << 18;
    const TILE: usize = 4096;
    let wrow = |o: usize, dwr: &mut [f64]| {
        let gr = &g[o * grid..(o + 1) * grid];
        for t0 in (0..grid).step_by(TILE) {
            let t1 = (t0 + TILE).min(grid);
            for (i, dwv) in dwr.iter_mut().enumerate() {
                let xr = &x[i * grid + t0..i * grid + t1];
                let mut acc = 0.0;
                for (gv, xv) in gr[t0..t1].iter().zip(xr) {
                    acc += *gv * *xv;
                }
                *dwv += acc;
            }
        }
    };
    par_chunks_mut(heavy, dw, cin, wrow);
    for o in 0..cout {
        db[o] += g[o * grid..(o + 1) * grid].iter().sum::<f64>();
    }
    if let Some(dx) = dx {
        const TILE: usize = 4096;
        let xrow = |i: usize, dxr: &mut [f64]| {
            for t0 in (0..grid).step_by(TILE) {
                let t1 = (t0 + TILE).min(grid);
                for o in 0..cout {
                    let wv = w[o * cin + i];
                    if wv == 0.0 {
                        continue;
                    }
                    let gr = &g[o * grid + t0..o * grid + t1];
                    for (dxv, gv) in dxr[t0..t1].iter_mut().zip(gr) {
                        *dxv += wv * *gv;
                    }
                }
            }
        };
        par_chunks_mut(heavy, dx, grid, xrow);
    }
}
