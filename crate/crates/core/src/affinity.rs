//! The shared inter-frame affinity and what it is used for: moving features
//! or labels from one frame to another, and tracing where pixels went.
//!
//! Feature maps are stored as `C×N` matrices with `N = H·W` and `x` varying
//! fastest, so cell `j` sits at `(j mod W, j div W)`. Coordinates are in
//! feature-grid cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Graph, Tensor, Var};

/// Default softmax temperature for affinities.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, j: usize) -> (usize, usize) {
        (j % self.width, j / self.width)
    }
}

/// A `C×N` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    geometry: Geometry,
    values: Tensor,
}

impl FeatureMap {
    pub fn new(geometry: Geometry, values: Tensor) -> Result<Self> {
        let (_, n) = values.ensure_matrix("feature map")?;
        if n != geometry.len() {
            return Err(Error::dim(format!(
                "feature map has {n} cells but geometry is {}x{}",
                geometry.height, geometry.width
            )));
        }
        values.check_finite("feature map")?;
        Ok(Self { geometry, values })
    }

    /// Builds a map from a `C×H×W` buffer.
    pub fn from_chw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let values = Tensor::new(&[channels, height * width], data)?;
        Self::new(Geometry::new(height, width), values)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// The same buffer viewed as `C×H×W`.
    pub fn to_chw(&self) -> Tensor {
        self.values
            .reshape(&[self.channels(), self.geometry.height, self.geometry.width])
            .expect("geometry matches data")
    }

    pub fn scaled(&self, s: f64) -> FeatureMap {
        FeatureMap {
            geometry: self.geometry,
            values: self.values.scale(s),
        }
    }

    /// Integer-aligned sub-grid of `h×w` cells starting at `(x0, y0)`.
    pub fn crop_cells(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FeatureMap> {
        if w == 0 || h == 0 || x0 + w > self.geometry.width || y0 + h > self.geometry.height {
            return Err(Error::dim(format!(
                "crop {w}x{h}@({x0},{y0}) outside {}x{}",
                self.geometry.width, self.geometry.height
            )));
        }
        let c = self.channels();
        let n = self.geometry.len();
        let mut data = Vec::with_capacity(c * w * h);
        for ch in 0..c {
            for y in y0..y0 + h {
                let row = ch * n + y * self.geometry.width;
                data.extend_from_slice(&self.values.data()[row + x0..row + x0 + w]);
            }
        }
        FeatureMap::from_chw(c, h, w, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sparsity {
    Dense,
    TopK(usize),
}

/// Column-stochastic `N1×N2` transport matrix: column `j` says how target
/// cell `j` draws from the source cells.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    values: Tensor,
    source: Geometry,
    target: Geometry,
    sparsity: Sparsity,
}

impl AffinityMatrix {
    /// Wraps an existing column-stochastic matrix.
    pub fn from_tensor(values: Tensor, source: Geometry, target: Geometry) -> Result<Self> {
        let (n1, n2) = values.ensure_matrix("affinity")?;
        if n1 != source.len() || n2 != target.len() {
            return Err(Error::dim(format!(
                "affinity is {n1}x{n2}, geometries give {}x{}",
                source.len(),
                target.len()
            )));
        }
        if values.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::param("affinity entries must be finite and non-negative"));
        }
        if let Some(j) = values
            .column_sums()
            .iter()
            .position(|s| (s - 1.0).abs() > 1e-6)
        {
            return Err(Error::param(format!("affinity column {j} does not sum to 1")));
        }
        Ok(Self {
            values,
            source,
            target,
            sparsity: Sparsity::Dense,
        })
    }

    /// Permutation affinity: target cell `j` copies source cell `perm[j]`.
    pub fn permutation(perm: &[usize], source: Geometry, target: Geometry) -> Result<Self> {
        let n1 = source.len();
        if perm.len() != target.len() || perm.iter().any(|&p| p >= n1) {
            return Err(Error::dim("permutation does not fit the geometries"));
        }
        let n2 = perm.len();
        let mut t = Tensor::zeros(&[n1, n2]);
        for (j, &i) in perm.iter().enumerate() {
            t.set(i, j, 1.0);
        }
        Self::from_tensor(t, source, target)
    }

    pub fn identity(geometry: Geometry) -> Self {
        Self::from_tensor(Tensor::identity(geometry.len()), geometry, geometry)
            .expect("identity is column stochastic")
    }

    pub fn uniform(source: Geometry, target: Geometry) -> Self {
        let n1 = source.len();
        Self::from_tensor(
            Tensor::full(&[n1, target.len()], 1.0 / n1 as f64),
            source,
            target,
        )
        .expect("uniform is column stochastic")
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn source(&self) -> Geometry {
        self.source
    }

    pub fn target(&self) -> Geometry {
        self.target
    }

    pub fn sparsity(&self) -> Sparsity {
        self.sparsity
    }

    /// Shannon entropy of column `j` in nats.
    pub fn column_entropy(&self, j: usize) -> f64 {
        self.values
            .column(j)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Columns `cols` of the matrix, each renormalised to sum to one.
    pub fn select_target_cells(&self, cols: &[usize], target: Geometry) -> Result<Self> {
        if cols.len() != target.len() {
            return Err(Error::dim("selected columns do not match target geometry"));
        }
        let n1 = self.values.rows();
        let mut t = Tensor::zeros(&[n1, cols.len()]);
        for (jj, &j) in cols.iter().enumerate() {
            for i in 0..n1 {
                t.set(i, jj, self.values.at(i, j));
            }
        }
        let t = t.normalize_columns()?;
        Ok(Self {
            values: t,
            source: self.source,
            target,
            sparsity: self.sparsity,
        })
    }
}

/// A `2×N` map of `(x, y)` coordinates indexed by the cells of `geometry`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationMap {
    coords: Tensor,
    geometry: Geometry,
}

impl LocationMap {
    pub fn new(coords: Tensor, geometry: Geometry) -> Result<Self> {
        let (r, n) = coords.ensure_matrix("location map")?;
        if r != 2 || n != geometry.len() {
            return Err(Error::dim(format!(
                "location map must be 2x{}, got {r}x{n}",
                geometry.len()
            )));
        }
        Ok(Self { coords, geometry })
    }

    /// `(j mod W, j div W)` for every cell.
    pub fn canonical(geometry: Geometry) -> Self {
        Self {
            coords: canonical_grid(geometry),
            geometry,
        }
    }

    /// A one-row map holding arbitrary points.
    pub fn from_points(points: &[(f64, f64)]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("location map needs at least one point"));
        }
        let mut data: Vec<f64> = points.iter().map(|p| p.0).collect();
        data.extend(points.iter().map(|p| p.1));
        Self::new(
            Tensor::new(&[2, points.len()], data)?,
            Geometry::new(1, points.len()),
        )
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.coords.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &[f64] {
        self.coords.row(0)
    }

    pub fn ys(&self) -> &[f64] {
        self.coords.row(1)
    }

    pub fn point(&self, j: usize) -> (f64, f64) {
        (self.xs()[j], self.ys()[j])
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|j| self.point(j)).collect()
    }
}

pub fn canonical_grid(geometry: Geometry) -> Tensor {
    let n = geometry.len();
    let mut data = vec![0.0; 2 * n];
    for j in 0..n {
        let (x, y) = geometry.coords(j);
        data[j] = x as f64;
        data[n + j] = y as f64;
    }
    Tensor::new(&[2, n], data).expect("non-empty geometry")
}

/// `A = softmax_columns(f1ᵀ f2 / T)`.
pub fn compute_affinity(
    f1: &FeatureMap,
    f2: &FeatureMap,
    temperature: f64,
) -> Result<AffinityMatrix> {
    if f1.channels() != f2.channels() {
        return Err(Error::dim(format!(
            "affinity channel mismatch: {} vs {}",
            f1.channels(),
            f2.channels()
        )));
    }
    let logits = gemm(f1.values(), true, f2.values(), false)?;
    Ok(AffinityMatrix {
        values: logits.softmax_columns(temperature)?,
        source: f1.geometry(),
        target: f2.geometry(),
        sparsity: Sparsity::Dense,
    })
}

/// `ĉ2 = c·A`: every target column is a convex combination of source columns.
pub fn transport(c: &Tensor, a: &AffinityMatrix) -> Result<Tensor> {
    let (_, n1) = c.ensure_matrix("transport")?;
    if n1 != a.source.len() {
        return Err(Error::dim(format!(
            "transport: {n1} source columns for a {}-cell source",
            a.source.len()
        )));
    }
    gemm(c, false, &a.values, false)
}

/// Where each target cell came from: `l12_j = Σ_k l11_k A_kj`.
pub fn trace_locations(l_src: &LocationMap, a: &AffinityMatrix) -> Result<LocationMap> {
    if l_src.len() != a.source.len() {
        return Err(Error::dim(format!(
            "trace: {} locations for a {}-cell source",
            l_src.len(),
            a.source.len()
        )));
    }
    LocationMap::new(gemm(&l_src.coords, false, &a.values, false)?, a.target)
}

/// Keeps the `k` largest entries of every column and renormalises them.
/// Ties go to the lower row index.
pub fn topk_sparsify(a: &AffinityMatrix, k: usize) -> Result<AffinityMatrix> {
    let (n1, n2) = (a.values.rows(), a.values.cols());
    if k == 0 || k > n1 {
        return Err(Error::param(format!("top-k needs 1 <= k <= {n1}, got {k}")));
    }
    let mut out = Tensor::zeros(&[n1, n2]);
    let mut order: Vec<usize> = Vec::with_capacity(n1);
    for j in 0..n2 {
        order.clear();
        order.extend(0..n1);
        order.sort_by(|&p, &q| {
            a.values
                .at(q, j)
                .total_cmp(&a.values.at(p, j))
                .then(p.cmp(&q))
        });
        let total: f64 = order[..k].iter().map(|&i| a.values.at(i, j)).sum();
        for &i in &order[..k] {
            let v = if total > 0.0 {
                a.values.at(i, j) / total
            } else {
                1.0 / k as f64
            };
            out.set(i, j, v);
        }
    }
    Ok(AffinityMatrix {
        values: out,
        source: a.source,
        target: a.target,
        sparsity: Sparsity::TopK(k),
    })
}

/// `f·fᵀ`, the `C×C` energy of a feature map.
pub fn gram_energy(f: &Tensor) -> Result<Tensor> {
    gemm(f, false, f, true)
}

// -- graph versions ------------------------------------------------------------

/// `f1ᵀ f2` on the graph.
pub fn affinity_logits(g: &mut Graph, f1: Var, f2: Var) -> Result<Var> {
    if g.shape(f1)[0] != g.shape(f2)[0] {
        return Err(Error::dim(format!(
            "affinity channel mismatch: {} vs {}",
            g.shape(f1)[0],
            g.shape(f2)[0]
        )));
    }
    let t = g.transpose(f1)?;
    g.matmul(t, f2)
}

/// Differentiable [`compute_affinity`] over `C×N` feature variables.
pub fn affinity_var(g: &mut Graph, f1: Var, f2: Var, temperature: f64) -> Result<Var> {
    let logits = affinity_logits(g, f1, f2)?;
    g.softmax_columns(logits, temperature)
}

/// Differentiable [`transport`] (and, with a `2×N1` input, [`trace_locations`]).
pub fn transport_var(g: &mut Graph, c: Var, a: Var) -> Result<Var> {
    if g.shape(c)[1] != g.shape(a)[0] {
        return Err(Error::dim(format!(
            "transport: {} source columns for a {}-row affinity",
            g.shape(c)[1],
            g.shape(a)[0]
        )));
    }
    g.matmul(c, a)
}
