//! Vector quantisation with an EMA codebook, straight-through gradients
//! and product quantisation for the global embedding.

use perco_tensor::{Elem, Rng, Tensor};

use crate::error::{invalid, mismatch, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const MIN_CODEBOOK_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub size: usize,
    pub dim: usize,
    /// `size × dim`, row-major.
    pub codes: Vec<T>,
    pub ema_count: Vec<T>,
    pub ema_sum: Vec<T>,
    pub gamma: f64,
    pub epsilon: f64,
}

fn sq_dist<T: Elem>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

impl<T: Elem> Codebook<T> {
    /// Codebook from explicit rows; EMA statistics start at one count per code.
    pub fn from_codes(dim: usize, codes: Vec<T>) -> Result<Self> {
        if dim == 0 || codes.is_empty() || codes.len() % dim != 0 {
            return invalid(format!("{} values do not form rows of width {dim}", codes.len()));
        }
        if codes.iter().any(|c| !c.is_finite()) {
            return invalid("codebook rows must be finite");
        }
        let size = codes.len() / dim;
        Ok(Codebook {
            size,
            dim,
            ema_count: vec![T::one(); size],
            ema_sum: codes.clone(),
            codes,
            gamma: DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn code(&self, i: usize) -> &[T] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    /// Enforce the production size floor.
    pub fn check_size(&self) -> Result<()> {
        if self.size < MIN_CODEBOOK_SIZE {
            return invalid(format!("codebook of {} codes is below the minimum of {MIN_CODEBOOK_SIZE}", self.size));
        }
        Ok(())
    }

    /// k-means++ seeding from `vectors` (`n × dim`). With fewer vectors than
    /// codes the draws repeat and the duplicates are left for dead-code
    /// reinitialisation to spread.
    pub fn kmeans_pp(size: usize, dim: usize, vectors: &[T], rng: &mut Rng) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 || size == 0 {
            return invalid("k-means++ needs a nonempty set of dim-wide vectors");
        }
        let n = vectors.len() / dim;
        let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
        let mut codes = Vec::with_capacity(size * dim);
        let first = rng.below(n);
        codes.extend_from_slice(row(first));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)).to_f64().unwrap()).collect();
        for _ in 1..size {
            let total: f64 = d2.iter().sum();
            let pick = if total <= 0.0 {
                rng.below(n)
            } else {
                let mut u = rng.uniform() * total;
                let mut chosen = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if u < d {
                        chosen = i;
                        break;
                    }
                    u -= d;
                }
                chosen
            };
            codes.extend_from_slice(row(pick));
            let c = row(pick).to_vec();
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(row(i), &c).to_f64().unwrap());
            }
        }
        Self::from_codes(dim, codes)
    }
}

/// Index of the nearest code (squared Euclidean), lowest index on ties.
pub fn vq_assign<T: Elem>(h: &[T], cb: &Codebook<T>) -> Result<usize> {
    if cb.size == 0 {
        return invalid("empty codebook");
    }
    if h.len() != cb.dim {
        return mismatch(format!("vector of length {} for codebook dim {}", h.len(), cb.dim));
    }
    let mut best = 0;
    let mut best_d = sq_dist(h, cb.code(0));
    for i in 1..cb.size {
        let d = sq_dist(h, cb.code(i));
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Gather `[B, C, H, W]` into row vectors `[B·H·W, C]` (cell-major).
pub fn grid_vectors<T: Elem>(h: &Tensor<T>) -> Result<Vec<T>> {
    let [b, c, gh, gw] = match h.shape() {
        &[b, c, gh, gw] => [b, c, gh, gw],
        s => return mismatch(format!("expected [B, C, H, W], got {s:?}")),
    };
    let x = h.data();
    let mut out = Vec::with_capacity(h.numel());
    for bi in 0..b {
        for p in 0..gh * gw {
            for ci in 0..c {
                out.push(x[(bi * c + ci) * gh * gw + p]);
            }
        }
    }
    Ok(out)
}

pub struct Quantized<T: Elem> {
    /// Straight-through quantised features, `[B, C, H, W]`.
    pub z: Tensor<T>,
    /// Code index per cell, batch-major then row-major over the grid.
    pub indices: Vec<usize>,
    /// Mean over cells of `‖h − sg(z_q)‖²`.
    pub commit_loss: Tensor<T>,
    /// The hyper-latent vectors as `[cells, C]` rows (no gradient).
    pub vectors: Vec<T>,
}

/// Code rows for `indices`, laid out as `[B, dim, gh, gw]`.
pub fn lookup<T: Elem>(cb: &Codebook<T>, indices: &[usize], b: usize, gh: usize, gw: usize) -> Result<Tensor<T>> {
    if indices.len() != b * gh * gw {
        return mismatch(format!("{} indices for a {b}×{gh}×{gw} grid", indices.len()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= cb.size) {
        return invalid(format!("index {bad} outside codebook of {}", cb.size));
    }
    let c = cb.dim;
    let mut out = vec![T::zero(); b * c * gh * gw];
    for bi in 0..b {
        for p in 0..gh * gw {
            let row = cb.code(indices[bi * gh * gw + p]);
            for ci in 0..c {
                out[(bi * c + ci) * gh * gw + p] = row[ci];
            }
        }
    }
    Ok(Tensor::new(&[b, c, gh, gw], out)?)
}

/// Forward `z_q`, backward identity: `z = h + sg(z_q − h)`, with the
/// forward values taken verbatim from the codebook.
pub fn vq_quantize_st<T: Elem>(h: &Tensor<T>, cb: &Codebook<T>) -> Result<Quantized<T>> {
    let vectors = grid_vectors(h)?;
    let (b, c, gh, gw) = (h.dim(0), h.dim(1), h.dim(2), h.dim(3));
    if c != cb.dim {
        return mismatch(format!("{c} channels for codebook dim {}", cb.dim));
    }
    let indices = vectors.chunks(c).map(|v| vq_assign(v, cb)).collect::<Result<Vec<_>>>()?;
    let zq = lookup(cb, &indices, b, gh, gw)?;
    let z = h.straight_through(zq.to_vec())?;
    // mean over cells of the per-cell squared norm = C · mean over elements
    let commit_loss = h.mse(&zq)?.scale(T::from_usize(c).unwrap());
    Ok(Quantized {
        z,
        indices,
        commit_loss,
        vectors,
    })
}

/// EMA statistics update followed by Laplace-smoothed code refresh.
pub fn ema_update<T: Elem>(cb: &mut Codebook<T>, vectors: &[T], indices: &[usize]) -> Result<()> {
    let dim = cb.dim;
    if vectors.len() != indices.len() * dim {
        return mismatch(format!("{} values for {} indices of dim {dim}", vectors.len(), indices.len()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= cb.size) {
        return invalid(format!("index {bad} outside codebook of {}", cb.size));
    }
    let mut counts = vec![0.0f64; cb.size];
    let mut sums = vec![0.0f64; cb.size * dim];
    for (v, &i) in vectors.chunks(dim).zip(indices) {
        counts[i] += 1.0;
        for (s, x) in sums[i * dim..(i + 1) * dim].iter_mut().zip(v) {
            *s += x.to_f64().unwrap();
        }
    }
    let g = cb.gamma;
    for i in 0..cb.size {
        let c = cb.ema_count[i].to_f64().unwrap();
        cb.ema_count[i] = T::from_f64_lossy(g * c + (1.0 - g) * counts[i]);
    }
    for (s, &n) in cb.ema_sum.iter_mut().zip(&sums) {
        *s = T::from_f64_lossy(g * s.to_f64().unwrap() + (1.0 - g) * n);
    }
    refresh_codes(cb);
    Ok(())
}

fn refresh_codes<T: Elem>(cb: &mut Codebook<T>) {
    let total: f64 = cb.ema_count.iter().map(|c| c.to_f64().unwrap()).sum();
    let denom = total + cb.size as f64 * cb.epsilon;
    for i in 0..cb.size {
        let c = cb.ema_count[i].to_f64().unwrap();
        let smoothed = (c + cb.epsilon) / denom * total;
        if smoothed <= 0.0 {
            continue;
        }
        for d in 0..cb.dim {
            let k = i * cb.dim + d;
            cb.codes[k] = T::from_f64_lossy(cb.ema_sum[k].to_f64().unwrap() / smoothed);
        }
    }
}

/// Reset codes whose EMA count fell below `threshold` to batch vectors.
/// Draws are without replacement while the batch lasts. Each reset code
/// restarts its statistics at one count. Returns the number of resets.
pub fn dead_code_reinit<T: Elem>(cb: &mut Codebook<T>, vectors: &[T], threshold: f64, rng: &mut Rng) -> Result<usize> {
    let dim = cb.dim;
    if vectors.is_empty() || vectors.len() % dim != 0 {
        return mismatch(format!("{} values are not rows of dim {dim}", vectors.len()));
    }
    let dead: Vec<usize> = (0..cb.size).filter(|&i| cb.ema_count[i].to_f64().unwrap() < threshold).collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let n = vectors.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for (k, &i) in dead.iter().enumerate() {
        let src = if k < n { order[k] } else { rng.below(n) };
        let row = &vectors[src * dim..(src + 1) * dim];
        cb.codes[i * dim..(i + 1) * dim].copy_from_slice(row);
        cb.ema_sum[i * dim..(i + 1) * dim].copy_from_slice(row);
        cb.ema_count[i] = T::one();
    }
    Ok(dead.len())
}

/// Product quantiser over `dim`-wide embeddings split into `m` subvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductQuantizer {
    pub m: usize,
    pub size: usize,
    pub sub_dim: usize,
    /// `m × size × sub_dim`.
    pub codebooks: Vec<f32>,
}

impl ProductQuantizer {
    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    pub fn bits(&self) -> usize {
        self.m * bits_for(self.size)
    }

    fn sub_code(&self, j: usize, k: usize) -> &[f32] {
        let o = (j * self.size + k) * self.sub_dim;
        &self.codebooks[o..o + self.sub_dim]
    }

    pub fn encode(&self, e: &[f32]) -> Result<Vec<usize>> {
        if e.len() != self.dim() {
            return mismatch(format!("embedding of length {} for PQ dim {}", e.len(), self.dim()));
        }
        Ok((0..self.m)
            .map(|j| {
                let sub = &e[j * self.sub_dim..(j + 1) * self.sub_dim];
                let mut best = (0, f32::INFINITY);
                for k in 0..self.size {
                    let d = sq_dist(sub, self.sub_code(j, k));
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f32>> {
        if indices.len() != self.m || indices.iter().any(|&k| k >= self.size) {
            return invalid(format!("{indices:?} is not a valid PQ code for M={} V={}", self.m, self.size));
        }
        Ok(indices.iter().enumerate().flat_map(|(j, &k)| self.sub_code(j, k).to_vec()).collect())
    }
}

/// Bits per uniformly coded symbol from a `size`-entry alphabet.
pub fn bits_for(size: usize) -> usize {
    (usize::BITS - size.saturating_sub(1).leading_zeros()) as usize
}

/// Per-subspace Lloyd k-means with a fixed iteration count, initialised
/// from distinct data points drawn without replacement.
pub fn pq_train(embeddings: &[f32], dim: usize, m: usize, size: usize, iters: usize, rng: &mut Rng) -> Result<ProductQuantizer> {
    if m == 0 || dim % m != 0 {
        return invalid(format!("embedding dim {dim} not divisible into {m} subvectors"));
    }
    if embeddings.len() % dim != 0 {
        return mismatch("embedding buffer is not a whole number of rows");
    }
    let n = embeddings.len() / dim;
    if n < size {
        return invalid(format!("{n} embeddings cannot train {size} codewords"));
    }
    let sub_dim = dim / m;
    let mut codebooks = Vec::with_capacity(m * size * sub_dim);
    for j in 0..m {
        let sub = |i: usize| &embeddings[i * dim + j * sub_dim..i * dim + (j + 1) * sub_dim];
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut centers: Vec<f32> = order[..size].iter().flat_map(|&i| sub(i).to_vec()).collect();
        for _ in 0..iters {
            let mut sums = vec![0.0f64; size * sub_dim];
            let mut counts = vec![0usize; size];
            for i in 0..n {
                let x = sub(i);
                let mut best = (0, f32::INFINITY);
                for k in 0..size {
                    let d = sq_dist(x, &centers[k * sub_dim..(k + 1) * sub_dim]);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                counts[best.0] += 1;
                for (s, &v) in sums[best.0 * sub_dim..(best.0 + 1) * sub_dim].iter_mut().zip(x) {
                    *s += v as f64;
                }
            }
            for k in 0..size {
                if counts[k] > 0 {
                    for d in 0..sub_dim {
                        centers[k * sub_dim + d] = (sums[k * sub_dim + d] / counts[k] as f64) as f32;
                    }
                }
            }
        }
        codebooks.extend(centers);
    }
    Ok(ProductQuantizer {
        m,
        size,
        sub_dim,
        codebooks,
    })
}
