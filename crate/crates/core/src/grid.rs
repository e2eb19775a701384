//! Uniform grids on the unit torus and unit box: coordinate generation,
//! DFT frequency indexing, and resolution subsampling.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Domain the grid lives on. Torus grids exclude the right endpoint
/// (x = j/n); box grids include both endpoints (x = j/(n-1)).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Torus,
    Box,
}

/// Real multi-channel field sampled on a uniform grid.
/// Values have shape `[channels, n1, ..., nd]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub domain: Domain,
    pub values: Tensor,
}

impl GridFunction {
    pub fn new(domain: Domain, values: Tensor) -> Result<Self> {
        if values.shape.len() < 2 {
            return Err(Error::invalid(
                "grid function needs shape [channels, n1, ..., nd]",
            ));
        }
        if values.shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid("zero extent in grid function shape"));
        }
        if !values.all_finite() {
            return Err(Error::invalid("grid function contains non-finite values"));
        }
        Ok(GridFunction { domain, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape[0]
    }

    pub fn resolution(&self) -> &[usize] {
        &self.values.shape[1..]
    }

    pub fn spatial_dim(&self) -> usize {
        self.values.shape.len() - 1
    }

    pub fn grid_len(&self) -> usize {
        numel(self.resolution())
    }

    /// Borrow one channel as a flat slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let g = self.grid_len();
        &self.values.data[c * g..(c + 1) * g]
    }
}

/// Coordinate value of point index `j` on an axis of length `n`.
pub fn axis_coord(domain: Domain, j: usize, n: usize) -> f64 {
    match domain {
        Domain::Torus => j as f64 / n as f64,
        Domain::Box => {
            if n == 1 {
                0.0
            } else {
                j as f64 / (n - 1) as f64
            }
        }
    }
}

/// A grid function with d channels where channel i holds the i-th
/// coordinate of every grid point.
pub fn coordinate_grid(resolution: &[usize], domain: Domain) -> Result<GridFunction> {
    if resolution.is_empty() {
        return Err(Error::invalid("empty resolution"));
    }
    if resolution.iter().any(|&n| n == 0) {
        return Err(Error::invalid("zero resolution"));
    }
    let d = resolution.len();
    let g = numel(resolution);
    let mut shape = vec![d];
    shape.extend_from_slice(resolution);
    let mut data = vec![0.0; d * g];
    // Row-major: stride of axis a is the product of later extents.
    let mut strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * resolution[a + 1];
    }
    for axis in 0..d {
        let chan = &mut data[axis * g..(axis + 1) * g];
        for (flat, v) in chan.iter_mut().enumerate() {
            let j = (flat / strides[axis]) % resolution[axis];
            *v = axis_coord(domain, j, resolution[axis]);
        }
    }
    GridFunction::new(domain, Tensor::from_vec(&shape, data)?)
}

/// Append coordinate channels to an input field (neural-operator
/// convention: the model sees `[input channels..., coordinates...]`).
pub fn append_coords(gf: &GridFunction) -> Result<GridFunction> {
    let coords = coordinate_grid(gf.resolution(), gf.domain)?;
    let mut shape = gf.values.shape.clone();
    shape[0] += coords.channels();
    let mut data = Vec::with_capacity(numel(&shape));
    data.extend_from_slice(&gf.values.data);
    data.extend_from_slice(&coords.values.data);
    GridFunction::new(gf.domain, Tensor::from_vec(&shape, data)?)
}

/// View a box-domain field as periodic samples by dropping the right
/// endpoint of every axis (the standard way to feed box data to a
/// spectral operator: 2^k+1 box points become a 2^k torus grid).
pub fn box_to_torus_view(gf: &GridFunction) -> Result<GridFunction> {
    if gf.domain != Domain::Box {
        return Err(Error::invalid("box_to_torus_view expects a box-domain field"));
    }
    let res = gf.resolution().to_vec();
    let new_res: Vec<usize> = res.iter().map(|&n| n - 1).collect();
    if new_res.iter().any(|&n| n == 0) {
        return Err(Error::invalid("axis too short to drop an endpoint"));
    }
    let d = res.len();
    let mut old_strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        old_strides[a] = old_strides[a + 1] * res[a + 1];
    }
    let c = gf.channels();
    let new_grid = numel(&new_res);
    let mut shape = vec![c];
    shape.extend_from_slice(&new_res);
    let mut data = Vec::with_capacity(c * new_grid);
    for ch in 0..c {
        let src = gf.channel(ch);
        for flat in 0..new_grid {
            let mut rem = flat;
            let mut old_flat = 0usize;
            for a in (0..d).rev() {
                let j = rem % new_res[a];
                rem /= new_res[a];
                old_flat += j * old_strides[a];
            }
            data.push(src[old_flat]);
        }
    }
    GridFunction::new(Domain::Torus, Tensor::from_vec(&shape, data)?)
}

/// Integer frequencies of a length-n axis in DFT order:
/// `[0, 1, ..., ceil(n/2)-1, -floor(n/2), ..., -1]`.
pub fn fftfreq(n: usize) -> Result<Vec<i64>> {
    if n == 0 {
        return Err(Error::invalid("fftfreq of zero-length axis"));
    }
    Ok((0..n)
        .map(|j| {
            if j < n.div_ceil(2) {
                j as i64
            } else {
                j as i64 - n as i64
            }
        })
        .collect())
}

/// Non-negative frequencies stored on a half-spectrum last axis:
/// `[0, 1, ..., floor(n/2)]`.
pub fn rfftfreq(n: usize) -> Result<Vec<i64>> {
    if n == 0 {
        return Err(Error::invalid("rfftfreq of zero-length axis"));
    }
    Ok((0..=(n / 2)).map(|j| j as i64).collect())
}

/// Integer frequency tuples of a (half-spectrum) multi-dimensional grid.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    /// Per-axis frequency lists; the last axis is half-spectrum when
    /// `half_last` is set.
    pub axes: Vec<Vec<i64>>,
    pub half_last: bool,
    /// Source spatial resolution (full lengths, before halving).
    pub resolution: Vec<usize>,
}

impl FrequencyGrid {
    /// Frequency grid matching the spectrum of a real field with the given
    /// spatial resolution (half-spectrum last axis).
    pub fn half(resolution: &[usize]) -> Result<Self> {
        if resolution.is_empty() {
            return Err(Error::invalid("empty resolution"));
        }
        let d = resolution.len();
        let mut axes = Vec::with_capacity(d);
        for (a, &n) in resolution.iter().enumerate() {
            if a + 1 == d {
                axes.push(rfftfreq(n)?);
            } else {
                axes.push(fftfreq(n)?);
            }
        }
        Ok(FrequencyGrid { axes, half_last: true, resolution: resolution.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.len()).collect()
    }

    pub fn num_points(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Frequency tuple at a flattened (row-major) spectrum index.
    pub fn tuple(&self, mut flat: usize) -> Vec<i64> {
        let d = self.dim();
        let mut out = vec![0i64; d];
        for a in (0..d).rev() {
            let n = self.axes[a].len();
            out[a] = self.axes[a][flat % n];
            flat /= n;
        }
        out
    }

    /// All frequency tuples as a `[num_points, d]` real matrix, in
    /// flattened spectrum order (inputs for xi-symbol networks).
    pub fn points_matrix(&self) -> Tensor {
        let m = self.num_points();
        let d = self.dim();
        let mut data = vec![0.0; m * d];
        for flat in 0..m {
            let t = self.tuple(flat);
            for a in 0..d {
                data[flat * d + a] = t[a] as f64;
            }
        }
        Tensor { shape: vec![m, d], data }
    }

    /// Hermitian multiplicity of a stored mode: 2 when its mirror is not
    /// stored (interior last-axis frequency), 1 otherwise.
    pub fn mode_weight(&self, flat: usize) -> f64 {
        if !self.half_last {
            return 1.0;
        }
        let last_n = self.resolution[self.dim() - 1];
        let last = *self.tuple(flat).last().unwrap();
        if last == 0 || (last_n % 2 == 0 && last == (last_n / 2) as i64) {
            1.0
        } else {
            2.0
        }
    }

    /// Flattened indices of modes with every |freq component| <= k_max.
    pub fn modes_within(&self, k_max: usize) -> Vec<usize> {
        (0..self.num_points())
            .filter(|&flat| {
                self.tuple(flat)
                    .iter()
                    .all(|&k| k.unsigned_abs() as usize <= k_max)
            })
            .collect()
    }
}

/// Keep every `factor`-th point along each spatial axis, starting at
/// index 0. On the torus the factor must divide n; on the box it must
/// divide n-1 so both endpoints survive.
pub fn subsample(gf: &GridFunction, factor: usize) -> Result<GridFunction> {
    if factor == 0 {
        return Err(Error::invalid("subsample factor must be positive"));
    }
    if factor == 1 {
        return Ok(gf.clone());
    }
    let res = gf.resolution().to_vec();
    let mut new_res = Vec::with_capacity(res.len());
    for &n in &res {
        match gf.domain {
            Domain::Torus => {
                if n % factor != 0 {
                    return Err(Error::invalid(format!(
                        "factor {factor} does not divide torus axis length {n}"
                    )));
                }
                new_res.push(n / factor);
            }
            Domain::Box => {
                if (n - 1) % factor != 0 {
                    return Err(Error::invalid(format!(
                        "factor {factor} does not divide box axis length {n} minus one"
                    )));
                }
                new_res.push((n - 1) / factor + 1);
            }
        }
    }
    let c = gf.channels();
    let mut shape = vec![c];
    shape.extend_from_slice(&new_res);
    let mut data = Vec::with_capacity(numel(&shape));
    let d = res.len();
    let mut old_strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        old_strides[a] = old_strides[a + 1] * res[a + 1];
    }
    let new_grid = numel(&new_res);
    for ch in 0..c {
        let src = gf.channel(ch);
        for flat in 0..new_grid {
            let mut rem = flat;
            let mut old_flat = 0usize;
            for a in (0..d).rev() {
                let j = rem % new_res[a];
                rem /= new_res[a];
                old_flat += j * factor * old_strides[a];
            }
            data.push(src[old_flat]);
        }
    }
    GridFunction::new(gf.domain, Tensor::from_vec(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_grid_1d_torus() {
        let g = coordinate_grid(&[4], Domain::Torus).unwrap();
        assert_eq!(g.values.shape, vec![1, 4]);
        assert_eq!(g.values.data, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn coordinate_grid_1d_box_endpoints() {
        let g = coordinate_grid(&[2], Domain::Box).unwrap();
        assert_eq!(g.values.data, vec![0.0, 1.0]);
    }

    #[test]
    fn coordinate_grid_2d_torus() {
        let g = coordinate_grid(&[2, 2], Domain::Torus).unwrap();
        // channel 0: row coordinate, channel 1: column coordinate
        assert_eq!(g.values.data, vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn coordinate_grid_rejects_zero() {
        assert!(coordinate_grid(&[0], Domain::Torus).is_err());
    }

    #[test]
    fn fftfreq_small() {
        assert_eq!(fftfreq(1).unwrap(), vec![0]);
        assert_eq!(fftfreq(4).unwrap(), vec![0, 1, -2, -1]);
        assert_eq!(fftfreq(8).unwrap(), vec![0, 1, 2, 3, -4, -3, -2, -1]);
        assert_eq!(fftfreq(5).unwrap(), vec![0, 1, 2, -2, -1]);
        assert!(fftfreq(0).is_err());
    }

    #[test]
    fn fftfreq_covers_range_once() {
        for n in 1..40usize {
            let f = fftfreq(n).unwrap();
            assert_eq!(f.len(), n);
            let lo = -((n / 2) as i64);
            let hi = (n.div_ceil(2) as i64) - 1;
            for k in lo..=hi {
                assert_eq!(f.iter().filter(|&&x| x == k).count(), 1, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn subsample_basic() {
        let gf = GridFunction::new(
            Domain::Torus,
            Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let s = subsample(&gf, 2).unwrap();
        assert_eq!(s.values.data, vec![1.0, 3.0]);
        let id = subsample(&gf, 1).unwrap();
        assert_eq!(id, gf);
        assert!(subsample(&gf, 3).is_err());
    }

    #[test]
    fn subsample_box_keeps_endpoints() {
        let gf = GridFunction::new(
            Domain::Box,
            Tensor::from_vec(&[1, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let s = subsample(&gf, 2).unwrap();
        assert_eq!(s.values.data, vec![0.0, 2.0, 4.0]);
    }

    #[test]
    fn subsample_composes() {
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let gf =
            GridFunction::new(Domain::Torus, Tensor::from_vec(&[1, 16], data).unwrap()).unwrap();
        let a = subsample(&subsample(&gf, 2).unwrap(), 4).unwrap();
        let b = subsample(&gf, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_large_parent_consistency() {
        // Every subsampled value equals the parent at the shared point.
        let n = 8192;
        let mut rng = crate::rng::Rng::new(11);
        let data: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let gf = GridFunction::new(
            Domain::Torus,
            Tensor::from_vec(&[1, n], data.clone()).unwrap(),
        )
        .unwrap();
        let s = subsample(&gf, 32).unwrap();
        assert_eq!(s.resolution(), &[256]);
        for j in 0..256 {
            assert_eq!(s.values.data[j], data[j * 32]);
        }
    }

    #[test]
    fn frequency_grid_2d() {
        let fg = FrequencyGrid::half(&[4, 4]).unwrap();
        assert_eq!(fg.shape(), vec![4, 3]);
        assert_eq!(fg.tuple(0), vec![0, 0]);
        assert_eq!(fg.tuple(5), vec![1, 2]);
        // mode (0, 1): interior last-axis frequency => weight 2
        assert_eq!(fg.mode_weight(1), 2.0);
        // mode (0, 0) and (0, 2)=nyquist => weight 1
        assert_eq!(fg.mode_weight(0), 1.0);
        assert_eq!(fg.mode_weight(2), 1.0);
    }

    #[test]
    fn modes_within_cap() {
        let fg = FrequencyGrid::half(&[8]).unwrap();
        let kept = fg.modes_within(2);
        assert_eq!(kept, vec![0, 1, 2]);
        let all = fg.modes_within(4);
        assert_eq!(all.len(), 5);
    }
}
