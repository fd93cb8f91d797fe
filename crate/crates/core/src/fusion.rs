//! Fusion of time- and frequency-branch embeddings.
//!
//! All three topologies concatenate (time, frequency) and differ only in
//! where the transformation blocks sit. With `hidden` the width of the
//! first transformation:
//!
//! ```text
//! early:  concat -> dense(hidden) -> dense(out)
//! middle: dense(hidden/2) per branch -> concat -> dense(out)
//! late:   dense(hidden/2) -> dense(out/2) per branch -> concat
//! ```
//!
//! A dense block is linear + batch norm + ReLU.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Result, TfnError};
use crate::layers::{
    batchnorm_backward, batchnorm_normalize, concat_features, he_uniform, linear_backward,
    linear_forward, relu_backward, relu_forward, split_features, BatchNormParams, BnStats,
    LinearParams, Mode, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionType {
    Early,
    Middle,
    Late,
}

impl FusionType {
    pub const ALL: [FusionType; 3] = [FusionType::Early, FusionType::Middle, FusionType::Late];
}

impl fmt::Display for FusionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionType::Early => "early",
            FusionType::Middle => "middle",
            FusionType::Late => "late",
        })
    }
}

impl FromStr for FusionType {
    type Err = TfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionType::Early),
            // "normal" is the name the middle variant goes by in ablation tables
            "middle" | "normal" => Ok(FusionType::Middle),
            "late" => Ok(FusionType::Late),
            other => Err(TfnError::Config(format!(
                "unknown fusion type {other:?} (expected early|middle|late)"
            ))),
        }
    }
}

/// Linear + batch norm + ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub linear: LinearParams,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Tensor,
    z: Tensor,
    y: Tensor,
    stats: BnStats,
}

impl DenseBlock {
    pub fn new<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Self {
            linear: LinearParams {
                weight: he_uniform(rng, &[out_dim, in_dim], in_dim),
                bias: Tensor::zeros(&[out_dim]),
            },
            bn: BatchNormParams::new(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.linear.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count() + 2 * self.bn.channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, DenseCache)> {
        let z = linear_forward(x, &self.linear)?;
        let (y, stats) = batchnorm_normalize(&z, &self.bn)?;
        let out = relu_forward(&y);
        Ok((
            out,
            DenseCache {
                x: x.clone(),
                z,
                y,
                stats,
            },
        ))
    }

    /// Returns the input gradient and `[weight, bias, gamma, beta]` gradients.
    pub fn backward(&self, cache: &DenseCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let gy = relu_backward(&cache.y, grad_out)?;
        let bn = batchnorm_backward(&cache.z, &self.bn, &gy)?;
        let lin = linear_backward(&cache.x, &self.linear, &bn.x)?;
        Ok((lin.x, vec![lin.weight, lin.bias, bn.gamma, bn.beta]))
    }

    pub fn commit_stats(&mut self, cache: &DenseCache) {
        if self.bn.mode == Mode::Training {
            self.bn.update_running(&cache.stats);
        }
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.linear.weight, &self.linear.bias, &self.bn.gamma, &self.bn.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.linear.weight,
            &mut self.linear.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }

    pub fn buffers(&self) -> [&Tensor; 2] {
        [&self.bn.running_mean, &self.bn.running_var]
    }

    pub fn buffers_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

/// Names for the four trainable tensors of a dense block.
pub(crate) const DENSE_PARAM_NAMES: [&str; 4] = ["weight", "bias", "bn_gamma", "bn_beta"];
pub(crate) const BN_BUFFER_NAMES: [&str; 2] = ["bn_running_mean", "bn_running_var"];

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub fusion_type: FusionType,
    pub intra_time: Vec<DenseBlock>,
    pub intra_freq: Vec<DenseBlock>,
    pub global: Vec<DenseBlock>,
    pub out_dim: usize,
}

/// Checks the width rules of a topology without building it.
pub fn validate_dims(
    fusion_type: FusionType,
    d_t: usize,
    d_f: usize,
    out_dim: usize,
    hidden: usize,
) -> Result<()> {
    let cfg = |m: String| Err(TfnError::Config(m));
    if out_dim == 0 {
        return cfg("fusion out_dim must be positive".into());
    }
    if d_t == 0 || d_f == 0 || hidden == 0 {
        return cfg(format!("fusion dims must be positive (d_t={d_t}, d_f={d_f}, hidden={hidden})"));
    }
    if fusion_type != FusionType::Early && !hidden.is_multiple_of(2) {
        return cfg(format!(
            "{fusion_type} fusion splits hidden width {hidden} evenly between branches; it must be even"
        ));
    }
    if fusion_type == FusionType::Late && !out_dim.is_multiple_of(2) {
        return cfg(format!(
            "late fusion splits class_space_dim {out_dim} evenly between branches; it must be even"
        ));
    }
    Ok(())
}

impl FusionParams {
    /// `hidden` defaults to `d_t + d_f`.
    pub fn new<R: Rng>(
        rng: &mut R,
        fusion_type: FusionType,
        d_t: usize,
        d_f: usize,
        out_dim: usize,
        hidden: Option<usize>,
    ) -> Result<Self> {
        let hidden = hidden.unwrap_or(d_t + d_f);
        validate_dims(fusion_type, d_t, d_f, out_dim, hidden)?;
        let (intra_time, intra_freq, global) = match fusion_type {
            FusionType::Early => (
                vec![],
                vec![],
                vec![
                    DenseBlock::new(rng, d_t + d_f, hidden),
                    DenseBlock::new(rng, hidden, out_dim),
                ],
            ),
            FusionType::Middle => (
                vec![DenseBlock::new(rng, d_t, hidden / 2)],
                vec![DenseBlock::new(rng, d_f, hidden / 2)],
                vec![DenseBlock::new(rng, hidden, out_dim)],
            ),
            FusionType::Late => (
                vec![
                    DenseBlock::new(rng, d_t, hidden / 2),
                    DenseBlock::new(rng, hidden / 2, out_dim / 2),
                ],
                vec![
                    DenseBlock::new(rng, d_f, hidden / 2),
                    DenseBlock::new(rng, hidden / 2, out_dim / 2),
                ],
                vec![],
            ),
        };
        Ok(Self {
            fusion_type,
            intra_time,
            intra_freq,
            global,
            out_dim,
        })
    }

    fn blocks(&self) -> Vec<(&'static str, usize, &DenseBlock)> {
        let mut out = Vec::new();
        for (group, blocks) in [
            ("intra_time", &self.intra_time),
            ("intra_freq", &self.intra_freq),
            ("global", &self.global),
        ] {
            out.extend(blocks.iter().enumerate().map(|(i, b)| (group, i, b)));
        }
        out
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut DenseBlock> {
        self.intra_time
            .iter_mut()
            .chain(self.intra_freq.iter_mut())
            .chain(self.global.iter_mut())
    }

    /// Trainable scalars: `(in + 1)·out` per linear layer plus `2·ch` per
    /// batch norm.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, _, b)| b.param_count()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, i, b) in self.blocks() {
            for (name, t) in DENSE_PARAM_NAMES.iter().zip(b.params()) {
                out.push((format!("fusion.{group}.{i}.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (group, i, b) in self.blocks() {
            for (name, t) in BN_BUFFER_NAMES.iter().zip(b.buffers()) {
                out.push((format!("fusion.{group}.{i}.{name}"), t));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks_mut().flat_map(|b| b.buffers_mut()).collect()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in self.blocks_mut() {
            b.bn.mode = mode;
        }
    }

    pub fn forward(&self, t_emb: &Tensor, f_emb: &Tensor) -> Result<(Tensor, FusionCache)> {
        let expect_t = self.intra_time.first().or(self.global.first()).map(|b| b.in_dim());
        let mut t = t_emb.clone();
        let mut f = f_emb.clone();
        if t.shape().len() != 2 || f.shape().len() != 2 || t.shape()[0] != f.shape()[0] {
            return shape_err(format!(
                "fusion expects [batch × d] embeddings, got {:?} and {:?}",
                t.shape(),
                f.shape()
            ));
        }
        if self.fusion_type == FusionType::Early {
            let want = expect_t.unwrap_or(0);
            if t.shape()[1] + f.shape()[1] != want {
                return shape_err(format!(
                    "early fusion expects d_t + d_f = {want}, got {} + {}",
                    t.shape()[1],
                    f.shape()[1]
                ));
            }
        }
        let mut intra_time = Vec::with_capacity(self.intra_time.len());
        for b in &self.intra_time {
            let (y, c) = b.forward(&t)?;
            intra_time.push(c);
            t = y;
        }
        let mut intra_freq = Vec::with_capacity(self.intra_freq.len());
        for b in &self.intra_freq {
            let (y, c) = b.forward(&f)?;
            intra_freq.push(c);
            f = y;
        }
        let t_width = t.shape()[1];
        let mut g = concat_features(&t, &f)?;
        let mut global = Vec::with_capacity(self.global.len());
        for b in &self.global {
            let (y, c) = b.forward(&g)?;
            global.push(c);
            g = y;
        }
        if g.shape()[1] != self.out_dim {
            return shape_err(format!(
                "fusion produced {} features, expected {}",
                g.shape()[1],
                self.out_dim
            ));
        }
        Ok((
            g,
            FusionCache {
                intra_time,
                intra_freq,
                global,
                t_width,
            },
        ))
    }

    /// Gradients w.r.t. both embeddings and every trainable tensor, the
    /// latter in [`FusionParams::named_params`] order.
    pub fn backward(&self, cache: &FusionCache, grad_out: &Tensor) -> Result<FusionGrads> {
        let mut global_grads = Vec::new();
        let mut g = grad_out.clone();
        for (b, c) in self.global.iter().zip(&cache.global).rev() {
            let (gx, gp) = b.backward(c, &g)?;
            global_grads.push(gp);
            g = gx;
        }
        global_grads.reverse();
        let (mut gt, mut gf) = split_features(&g, cache.t_width)?;
        let mut time_grads = Vec::new();
        for (b, c) in self.intra_time.iter().zip(&cache.intra_time).rev() {
            let (gx, gp) = b.backward(c, &gt)?;
            time_grads.push(gp);
            gt = gx;
        }
        time_grads.reverse();
        let mut freq_grads = Vec::new();
        for (b, c) in self.intra_freq.iter().zip(&cache.intra_freq).rev() {
            let (gx, gp) = b.backward(c, &gf)?;
            freq_grads.push(gp);
            gf = gx;
        }
        freq_grads.reverse();
        let params = time_grads
            .into_iter()
            .chain(freq_grads)
            .chain(global_grads)
            .flatten()
            .collect();
        Ok(FusionGrads {
            t: gt,
            f: gf,
            params,
        })
    }

    pub fn commit_stats(&mut self, cache: &FusionCache) {
        for (b, c) in self.intra_time.iter_mut().zip(&cache.intra_time) {
            b.commit_stats(c);
        }
        for (b, c) in self.intra_freq.iter_mut().zip(&cache.intra_freq) {
            b.commit_stats(c);
        }
        for (b, c) in self.global.iter_mut().zip(&cache.global) {
            b.commit_stats(c);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    intra_time: Vec<DenseCache>,
    intra_freq: Vec<DenseCache>,
    global: Vec<DenseCache>,
    t_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub t: Tensor,
    pub f: Tensor,
    pub params: Vec<Tensor>,
}

/// Runs the fusion module, updating batch-norm running statistics in
/// training mode.
pub fn fuse_forward(t_emb: &Tensor, f_emb: &Tensor, p: &mut FusionParams) -> Result<Tensor> {
    let (out, cache) = p.forward(t_emb, f_emb)?;
    p.commit_stats(&cache);
    Ok(out)
}

/// Recomputes the forward pass (without touching running statistics) and
/// back-propagates `grad_out`.
pub fn fuse_backward(
    t_emb: &Tensor,
    f_emb: &Tensor,
    p: &FusionParams,
    grad_out: &Tensor,
) -> Result<FusionGrads> {
    let (out, cache) = p.forward(t_emb, f_emb)?;
    if out.shape() != grad_out.shape() {
        return shape_err(format!(
            "fusion grad_out {:?} vs output {:?}",
            grad_out.shape(),
            out.shape()
        ));
    }
    p.backward(&cache, grad_out)
}

pub fn param_count(p: &FusionParams) -> usize {
    p.param_count()
}

/// Closed-form parameter count of a topology, without allocating it.
pub fn param_count_for(
    fusion_type: FusionType,
    d_t: usize,
    d_f: usize,
    out_dim: usize,
    hidden: usize,
) -> Result<usize> {
    validate_dims(fusion_type, d_t, d_f, out_dim, hidden)?;
    let dense = |i: usize, o: usize| (i + 1) * o + 2 * o;
    Ok(match fusion_type {
        FusionType::Early => dense(d_t + d_f, hidden) + dense(hidden, out_dim),
        FusionType::Middle => {
            dense(d_t, hidden / 2) + dense(d_f, hidden / 2) + dense(hidden, out_dim)
        }
        FusionType::Late => {
            dense(d_t, hidden / 2)
                + dense(hidden / 2, out_dim / 2)
                + dense(d_f, hidden / 2)
                + dense(hidden / 2, out_dim / 2)
        }
    })
}
