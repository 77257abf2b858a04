//! Invertible layers. Every `forward` takes a batched N×H×W×C variable and
//! returns the output together with the batch-summed log-determinant as a
//! scalar variable; every `inverse` works on plain tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Param, Tensor, Var};

fn channels_of(g: &Graph, x: Var) -> Result<(usize, usize)> {
    let shape = g.shape(x);
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "flow layers expect NxHxWxC input, got {shape:?}"
        )));
    }
    let c = shape[3];
    Ok((c, g.value(x).len() / c))
}

/// Per-channel affine map `y = x·exp(log_scale) + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub log_scale: Param,
    pub bias: Param,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            log_scale: Param::new(format!("{prefix}.log_scale"), Tensor::zeros(&[channels])),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[channels])),
            initialized: false,
        }
    }

    /// Unit scale, zero bias, marked initialized.
    pub fn identity(prefix: &str, channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(prefix, channels)
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        if !self.initialized {
            return Err(Error::State(format!(
                "{} used before data-dependent initialization",
                self.log_scale.name
            )));
        }
        let (c, pixels) = channels_of(g, x)?;
        if self.log_scale.value.len() != c {
            return Err(Error::invalid(format!(
                "{} expects {} channels, got {c}",
                self.log_scale.name,
                self.log_scale.value.len()
            )));
        }
        let shape = g.shape(x).to_vec();
        let ls = g.bind(&self.log_scale, trainable);
        let b = g.bind(&self.bias, trainable);
        let s = g.exp(ls);
        let s = g.broadcast(s, &shape)?;
        let b = g.broadcast(b, &shape)?;
        let y = g.mul(x, s)?;
        let y = g.add(y, b)?;
        let total = g.sum(ls);
        let logdet = g.scale(total, pixels as f64);
        Ok((y, logdet))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let c = self.log_scale.value.len();
        if z.last_dim() != c {
            return Err(Error::invalid(format!("actnorm inverse: expected {c} channels")));
        }
        let ls = self.log_scale.value.data();
        let b = self.bias.value.data();
        let mut out = z.clone();
        for row in out.data_mut().chunks_mut(c) {
            for k in 0..c {
                row[k] = (row[k] - b[k]) / ls[k].exp();
            }
        }
        Ok(out)
    }

    /// Sets scale and bias so this layer's output on `x` has zero mean and
    /// unit (population) standard deviation per channel.
    pub fn initialize_from(&mut self, x: &Tensor) -> Result<()> {
        let c = self.log_scale.value.len();
        if x.last_dim() != c {
            return Err(Error::invalid(format!("actnorm init: expected {c} channels")));
        }
        let rows = (x.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            for k in 0..c {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for k in 0..c {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        for (k, v) in var.iter_mut().enumerate() {
            *v /= rows;
            if !(*v > 1e-30) {
                return Err(Error::DegenerateBatch {
                    layer: self.log_scale.name.clone(),
                    channel: k,
                });
            }
        }
        for k in 0..c {
            let std = var[k].sqrt();
            self.log_scale.value.data_mut()[k] = -std.ln();
            self.bias.value.data_mut()[k] = -mean[k] / std;
        }
        self.initialized = true;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.log_scale, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.log_scale, &mut self.bias]
    }
}

/// Invertible channel mix `W = P·L·(U + diag(sign·exp(log_diag)))` with a
/// fixed permutation `P`, unit lower triangular `L` and strictly upper `U`.
#[derive(Clone, Debug)]
pub struct Inv1x1 {
    /// `perm[i]` is the row index of the single 1 in column `i` of `P`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub lower: Param,
    pub upper: Param,
    pub log_diag: Param,
}

impl Inv1x1 {
    pub fn identity(prefix: &str, channels: usize) -> Self {
        Self {
            perm: (0..channels).collect(),
            sign: vec![1.0; channels],
            lower: Param::new(format!("{prefix}.lower"), Tensor::zeros(&[channels, channels])),
            upper: Param::new(format!("{prefix}.upper"), Tensor::zeros(&[channels, channels])),
            log_diag: Param::new(format!("{prefix}.log_diag"), Tensor::zeros(&[channels])),
        }
    }

    /// LU factors of a random rotation.
    pub fn random(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let n = channels;
        let q = linalg::random_rotation(n, rng);
        let (perm, l, u) = linalg::plu(&q, n);
        let mut layer = Self::identity(prefix, n);
        layer.perm = perm;
        for i in 0..n {
            let d = u[i * n + i];
            layer.sign[i] = if d < 0.0 { -1.0 } else { 1.0 };
            layer.log_diag.value.data_mut()[i] = d.abs().ln();
            for j in 0..n {
                if j < i {
                    layer.lower.value.data_mut()[i * n + j] = l[i * n + j];
                } else if j > i {
                    layer.upper.value.data_mut()[i * n + j] = u[i * n + j];
                }
            }
        }
        layer
    }

    fn channels(&self) -> usize {
        self.sign.len()
    }

    fn perm_matrix(&self) -> Tensor {
        let n = self.channels();
        let mut p = Tensor::zeros(&[n, n]);
        for (i, &r) in self.perm.iter().enumerate() {
            p.data_mut()[r * n + i] = 1.0;
        }
        p
    }

    fn masks(&self) -> (Tensor, Tensor) {
        let n = self.channels();
        let mut lo = Tensor::zeros(&[n, n]);
        let mut up = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    lo.data_mut()[i * n + j] = 1.0;
                } else if j > i {
                    up.data_mut()[i * n + j] = 1.0;
                }
            }
        }
        (lo, up)
    }

    /// The reconstructed weight as a graph variable.
    pub fn weight(&self, g: &mut Graph, trainable: bool) -> Result<Var> {
        let n = self.channels();
        let (lo_mask, up_mask) = self.masks();
        let lower = g.bind(&self.lower, trainable);
        let upper = g.bind(&self.upper, trainable);
        let log_diag = g.bind(&self.log_diag, trainable);
        let lo_mask = g.constant(lo_mask);
        let up_mask = g.constant(up_mask);
        let eye = g.constant(Tensor::identity(n));
        let sign = g.constant(Tensor::vector(self.sign.clone()));
        let perm = g.constant(self.perm_matrix());

        let l = g.mul(lower, lo_mask)?;
        let l = g.add(l, eye)?;
        let d = g.exp(log_diag);
        let d = g.mul(d, sign)?;
        let d = g.broadcast(d, &[n, n])?;
        let d = g.mul(d, eye)?;
        let u = g.mul(upper, up_mask)?;
        let u = g.add(u, d)?;
        // matmul_channels(A, B) = B·Aᵀ, so these two calls give (P·L·U)ᵀ.
        let ut = g.permute(u, &[1, 0])?;
        let lu_t = g.matmul_channels(l, ut)?;
        let w_t = g.matmul_channels(perm, lu_t)?;
        g.permute(w_t, &[1, 0])
    }

    pub fn weight_tensor(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.weight(&mut g, false)?;
        Ok(g.value(w).clone())
    }

    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let (c, pixels) = channels_of(g, x)?;
        if c != self.channels() {
            return Err(Error::invalid(format!(
                "{} expects {} channels, got {c}",
                self.lower.name,
                self.channels()
            )));
        }
        let w = self.weight(g, trainable)?;
        let y = g.matmul_channels(w, x)?;
        let ld = g.bind(&self.log_diag, trainable);
        let total = g.sum(ld);
        let logdet = g.scale(total, pixels as f64);
        Ok((y, logdet))
    }

    /// `W⁻¹ = U'⁻¹ · L⁻¹ · Pᵀ` assembled from the factors.
    pub fn inverse_weight(&self) -> Tensor {
        let n = self.channels();
        let mut l = self.lower.value.data().to_vec();
        let mut u = self.upper.value.data().to_vec();
        for i in 0..n {
            for j in 0..n {
                if j > i {
                    l[i * n + j] = 0.0;
                } else if j < i {
                    u[i * n + j] = 0.0;
                }
            }
            l[i * n + i] = 1.0;
            u[i * n + i] = self.sign[i] * self.log_diag.value.data()[i].exp();
        }
        let mut pt = vec![0.0; n * n];
        for (i, &r) in self.perm.iter().enumerate() {
            pt[i * n + r] = 1.0;
        }
        let inv = linalg::matmul(
            &linalg::invert_upper(&u, n),
            &linalg::matmul(&linalg::invert_lower(&l, n), &pt, n),
            n,
        );
        Tensor::new(vec![n, n], inv).expect("square matrix")
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(self.inverse_weight());
        let z = g.constant(z.clone());
        let x = g.matmul_channels(w, z)?;
        Ok(g.value(x).clone())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.lower, &self.upper, &self.log_diag]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_diag]
    }
}

/// Affine coupling: the first `frozen` channels pass through and condition a
/// scale/shift applied to the rest. The effective log-scale is
/// `scale_cap · tanh(raw)`.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub frozen: usize,
    pub scale_cap: f64,
}

impl Coupling {
    /// Hidden conv drawn from `N(0, 1/fan_in)`; output conv zeroed so the
    /// layer starts as the identity.
    pub fn new(
        prefix: &str,
        channels: usize,
        hidden: usize,
        scale_cap: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let frozen = channels / 2;
        let moving = channels - frozen;
        let std = (1.0 / (9 * frozen.max(1)) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w1: Vec<f64> = (0..9 * frozen * hidden).map(|_| normal.sample(rng)).collect();
        Self {
            w1: Param::new(
                format!("{prefix}.w1"),
                Tensor::new(vec![3, 3, frozen, hidden], w1).expect("kernel shape"),
            ),
            b1: Param::new(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: Param::new(format!("{prefix}.w2"), Tensor::zeros(&[3, 3, hidden, 2 * moving])),
            b2: Param::new(format!("{prefix}.b2"), Tensor::zeros(&[2 * moving])),
            frozen,
            scale_cap,
        }
    }

    fn moving(&self) -> usize {
        self.b2.value.len() / 2
    }

    /// (log-scale, shift) for the moving half, given the frozen half.
    fn net(&self, g: &mut Graph, xa: Var, trainable: bool) -> Result<(Var, Var)> {
        let w1 = g.bind(&self.w1, trainable);
        let b1 = g.bind(&self.b1, trainable);
        let w2 = g.bind(&self.w2, trainable);
        let b2 = g.bind(&self.b2, trainable);
        let h = g.conv2d(xa, w1, b1)?;
        let h = g.tanh(h);
        let out = g.conv2d(h, w2, b2)?;
        let m = self.moving();
        let raw = g.slice_axis(out, 3, 0..m)?;
        let shift = g.slice_axis(out, 3, m..2 * m)?;
        let s = g.tanh(raw);
        let s = g.scale(s, self.scale_cap);
        Ok((s, shift))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let (c, _) = channels_of(g, x)?;
        if c != self.frozen + self.moving() {
            return Err(Error::invalid(format!(
                "{} expects {} channels, got {c}",
                self.w1.name,
                self.frozen + self.moving()
            )));
        }
        let xa = g.slice_axis(x, 3, 0..self.frozen)?;
        let xb = g.slice_axis(x, 3, self.frozen..c)?;
        let (s, shift) = self.net(g, xa, trainable)?;
        let e = g.exp(s);
        let yb = g.mul(xb, e)?;
        let yb = g.add(yb, shift)?;
        let y = g.concat(&[xa, yb], 3)?;
        let logdet = g.sum(s);
        Ok((y, logdet))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z.clone());
        let c = g.shape(z)[3];
        let ya = g.slice_axis(z, 3, 0..self.frozen)?;
        let yb = g.slice_axis(z, 3, self.frozen..c)?;
        let (s, shift) = self.net(&mut g, ya, false)?;
        let ns = g.neg(s);
        let e = g.exp(ns);
        let xb = g.sub(yb, shift)?;
        let xb = g.mul(xb, e)?;
        let x = g.concat(&[ya, xb], 3)?;
        Ok(g.value(x).clone())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// 2×2 space-to-channel reshuffle, N×H×W×C → N×H/2×W/2×4C. Channel order
/// within a block is (row offset, column offset, channel).
pub fn squeeze(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [n, h, w, c] = s[..] else {
        return Err(Error::invalid(format!("squeeze expects rank 4, got {s:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "squeeze needs even spatial dims, got {h}x{w}"
        )));
    }
    let t = g.reshape(x, &[n, h / 2, 2, w / 2, 2, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[n, h / 2, w / 2, 4 * c])
}

pub fn unsqueeze(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [n, h, w, c4] = s[..] else {
        return Err(Error::invalid(format!("unsqueeze expects rank 4, got {s:?}")));
    };
    if c4 % 4 != 0 {
        return Err(Error::invalid(format!("unsqueeze needs 4k channels, got {c4}")));
    }
    let c = c4 / 4;
    let t = g.reshape(x, &[n, h, w, 2, 2, c])?;
    let t = g.permute(t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(t, &[n, 2 * h, 2 * w, c])
}

pub fn squeeze_tensor(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = squeeze(&mut g, v)?;
    Ok(g.value(y).clone())
}

pub fn unsqueeze_tensor(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = unsqueeze(&mut g, v)?;
    Ok(g.value(y).clone())
}
