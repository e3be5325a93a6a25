//! Network architectures: U-nets with channel attention, the end-to-end
//! reconstruction pairing, the latent-conditioned generator, the spectrally
//! normalized critic, and the pointwise posterior regressors.
//!
//! Forward passes double as initializers: parameters are materialized by
//! name on first use (see `ParamStore`), so a network is fully described by
//! its preset string plus a handful of channel counts.

use crate::graph::{Graph, Var};
use crate::spectral::spectral_normalize;
use crate::store::{Bindings, Init, ParamStore};
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;
use thiserror::Error;
use tomoforge_core::geom::ScanGeometry;
use tomoforge_core::posterior::SIGMA_FLOOR;
use tomoforge_core::radon::Projector;
use tomoforge_core::Real;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("input {height}x{width} is not divisible by 2^{downs} as preset `{preset}` requires")]
    NotDivisible { preset: String, height: usize, width: usize, downs: usize },
    #[error("input {height}x{width} underflows at the bottleneck of preset `{preset}`")]
    ResolutionUnderflow { preset: String, height: usize, width: usize },
    #[error("latent channels ({z}) must be smaller than the injection block width ({width})")]
    LatentTooWide { z: usize, width: usize },
}

/// Residual-block counts per stage and the stem width of a U-net variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub down: &'static [usize],
    pub up: &'static [usize],
    pub base: usize,
}

/// Every named variant, smallest to largest. The `down` list includes the
/// full-resolution stem stage; `up` therefore has one entry fewer.
pub const PRESETS: &[Preset] = &[
    Preset { name: "t32", down: &[1, 1], up: &[1], base: 16 },
    Preset { name: "t16", down: &[1, 1, 1], up: &[1, 1], base: 16 },
    Preset { name: "xxs", down: &[1, 1, 2], up: &[2, 1], base: 32 },
    Preset { name: "xs", down: &[1, 1, 1, 2], up: &[2, 2, 2], base: 32 },
    Preset { name: "s", down: &[1, 1, 1, 2, 2], up: &[2, 2, 2, 2], base: 32 },
    Preset { name: "s64", down: &[1, 1, 1, 2, 2], up: &[2, 2, 2, 2], base: 64 },
    Preset { name: "m", down: &[2, 1, 1, 1, 1, 2], up: &[2, 2, 2, 2, 2], base: 64 },
    Preset { name: "l", down: &[2, 2, 2, 2, 2, 3], up: &[3, 3, 3, 3, 4], base: 64 },
    Preset { name: "xl", down: &[3, 3, 3, 3, 3, 5], up: &[4, 4, 4, 4, 4], base: 64 },
    Preset { name: "xxl", down: &[5, 5, 5, 5, 5, 9], up: &[6, 6, 6, 6, 6], base: 64 },
];

pub fn preset(name: &str) -> Result<&'static Preset, ZooError> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| ZooError::UnknownPreset(name.to_string()))
}

impl Preset {
    pub fn n_down(&self) -> usize {
        self.down.len()
    }

    /// Channel width at stage depth `d`: the stem width doubles every other
    /// stage.
    pub fn channels(&self, d: usize) -> usize {
        self.base << (d / 2)
    }

    /// Rejects inputs the stage stack cannot halve cleanly (odd intermediate
    /// sizes would break the skip concatenations) or that vanish at the
    /// bottleneck.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), ZooError> {
        let downs = self.n_down() - 1;
        let div = 1usize << downs;
        if height % div != 0 || width % div != 0 {
            return Err(ZooError::NotDivisible {
                preset: self.name.to_string(),
                height,
                width,
                downs,
            });
        }
        if height / div < 2 || width / div < 2 {
            return Err(ZooError::ResolutionUnderflow {
                preset: self.name.to_string(),
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Latent tensor wired into one U-net block.
#[derive(Clone, Copy)]
pub struct ZInjection {
    pub var: Var,
    pub channels: usize,
}

/// Index of the latent injection site in the down-then-up block sequence
/// (readout excluded): third from the end.
pub fn injection_block(preset: &Preset) -> usize {
    let total = preset.down.len() + preset.up.len();
    total - 3
}

/// Channel width of block `at` in the down-then-up sequence.
fn block_width(preset: &Preset, at: usize) -> usize {
    if at < preset.n_down() {
        preset.channels(at)
    } else {
        preset.channels(preset.n_down() - 2 - (at - preset.n_down()))
    }
}

/// Spatial side of block `at` for an input of side `n`.
fn block_resolution(preset: &Preset, at: usize, n: usize) -> usize {
    if at < preset.n_down() {
        n >> at
    } else {
        n >> (preset.n_down() - 2 - (at - preset.n_down()))
    }
}

struct UnetCtx<'a, T: Real> {
    g: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    bind: &'a mut Bindings,
}

impl<T: Real> UnetCtx<'_, T> {
    fn conv(
        &mut self,
        prefix: &str,
        x: Var,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Var {
        let w = self.store.var(
            self.g,
            self.bind,
            &format!("{prefix}/w"),
            &[cout, cin, k, k],
            Init::He { fan_in: cin * k * k },
        );
        let b = self.store.var(self.g, self.bind, &format!("{prefix}/b"), &[cout], Init::Zeros);
        self.g.conv2d(x, w, b, stride)
    }

    /// Single-channel output head with near-zero weights and a chosen bias,
    /// so its initial output is flat at the bias value. Heads that feed an
    /// exponential need this: a fan-in-sized init on top of a trunk scaled
    /// for wide-range outputs can place whole input regions so deep in the
    /// exponential's flat tail that their gradient never recovers.
    fn head(&mut self, prefix: &str, x: Var, cin: usize, k: usize, bias: f64) -> Var {
        let w = self.store.var(
            self.g,
            self.bind,
            &format!("{prefix}/w"),
            &[1, cin, k, k],
            Init::Normal { std: 0.01 },
        );
        let b =
            self.store.var(self.g, self.bind, &format!("{prefix}/b"), &[1], Init::Const(bias));
        self.g.conv2d(x, w, b, 1)
    }

    fn prelu(&mut self, prefix: &str, x: Var, channels: usize) -> Var {
        let a = self.store.var(
            self.g,
            self.bind,
            &format!("{prefix}/alpha"),
            &[channels],
            Init::Const(0.25),
        );
        self.g.prelu(x, a)
    }

    fn conv_act(
        &mut self,
        prefix: &str,
        x: Var,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Var {
        let c = self.conv(prefix, x, cin, cout, k, stride);
        self.prelu(prefix, c, cout)
    }

    fn residual_block(&mut self, prefix: &str, x: Var, ch: usize) -> Var {
        let c1 = self.conv_act(&format!("{prefix}/c1"), x, ch, ch, 3, 1);
        let c2 = self.conv(&format!("{prefix}/c2"), c1, ch, ch, 3, 1);
        self.g.add(c2, x)
    }

    /// Squeeze-and-gate attention over the channels of `x`. With all-zero
    /// weights every gate sigmoids to one half.
    fn channel_attention(&mut self, prefix: &str, x: Var, ch: usize) -> Var {
        let mid = (ch / 8).max(1);
        let pooled = self.g.global_avg_pool(x);
        let w1 = self.store.var(
            self.g,
            self.bind,
            &format!("{prefix}/w1"),
            &[mid, ch],
            Init::He { fan_in: ch },
        );
        let b1 = self.store.var(self.g, self.bind, &format!("{prefix}/b1"), &[mid], Init::Zeros);
        let h = self.g.linear(pooled, w1, b1);
        let h = self.prelu(&format!("{prefix}/mid"), h, mid);
        let w2 = self.store.var(
            self.g,
            self.bind,
            &format!("{prefix}/w2"),
            &[ch, mid],
            Init::He { fan_in: mid },
        );
        let b2 = self.store.var(self.g, self.bind, &format!("{prefix}/b2"), &[ch], Init::Zeros);
        let gates = self.g.linear(h, w2, b2);
        let gates = self.g.sigmoid(gates);
        self.g.scale_channels(x, gates)
    }

    /// Scales the trailing latent-gate channels with exp and multiplies them
    /// into the upsampled latent, keeping the block width unchanged.
    fn inject_latent(&mut self, x: Var, ch: usize, res: usize, z: ZInjection) -> Var {
        let zv = self.g.value(z.var);
        let (zh, zw) = (zv.shape()[2], zv.shape()[3]);
        assert_eq!(zh, zw, "square latent");
        assert_eq!(zv.shape()[1], z.channels);
        assert!(res % zh == 0 && (res / zh).is_power_of_two(), "latent upsamples to block");
        let mut zu = z.var;
        let mut cur = zh;
        while cur < res {
            zu = self.g.bilinear_upsample(zu);
            cur *= 2;
        }
        let (rest, gate_src) = self.g.split2(x, 1, ch - z.channels);
        let gates = self.g.exp(gate_src);
        let scaled = self.g.mul(gates, zu);
        self.g.concat(&[rest, scaled], 1)
    }
}

/// U-net forward pass. `x` is (B, Cin, H, W); the output keeps the spatial
/// size and has `out_channels` channels with no output nonlinearity.
/// `z` injects a latent into the block chosen by `injection_block`.
pub fn unet_forward<T: Real>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    bind: &mut Bindings,
    prefix: &str,
    preset: &Preset,
    x: Var,
    out_channels: usize,
    z: Option<ZInjection>,
) -> Var {
    let shape: Vec<usize> = g.value(x).shape().to_vec();
    let (cin, h, w) = (shape[1], shape[2], shape[3]);
    preset.validate(h, w).expect("validated by the network constructor");
    let inject_at = z.map(|_| injection_block(preset));
    if let (Some(z), Some(at)) = (z, inject_at) {
        assert!(z.channels < block_width(preset, at), "validated by the network constructor");
    }

    let mut ctx = UnetCtx { g, store, bind };
    let n_down = preset.n_down();
    let mut down_out: Vec<Var> = Vec::with_capacity(n_down);
    let mut cur = x;
    let mut cur_ch = cin;
    let mut res_h = h;
    let mut embed = None;
    let mut block_index = 0usize;
    for d in 0..n_down {
        let ch = preset.channels(d);
        let stride = if d == 0 { 1 } else { 2 };
        if stride == 2 {
            res_h /= 2;
        }
        let entry = ctx.conv_act(&format!("{prefix}/d{d}/entry"), cur, cur_ch, ch, 3, stride);
        if d == 0 {
            embed = Some(entry);
        }
        let mut t = entry;
        if inject_at == Some(block_index) {
            t = ctx.inject_latent(t, ch, res_h, z.unwrap());
        }
        for r in 0..preset.down[d] {
            t = ctx.residual_block(&format!("{prefix}/d{d}/r{r}"), t, ch);
        }
        down_out.push(t);
        cur = t;
        cur_ch = ch;
        block_index += 1;
    }

    for (i, &n_res) in preset.up.iter().enumerate() {
        let d = n_down - 2 - i;
        let ch = preset.channels(d);
        res_h *= 2;
        let upsampled = ctx.g.bilinear_upsample(cur);
        let cat = ctx.g.concat(&[upsampled, down_out[d]], 1);
        let cat_ch = cur_ch + preset.channels(d);
        let att = ctx.channel_attention(&format!("{prefix}/u{i}/att"), cat, cat_ch);
        let mut t = ctx.conv_act(&format!("{prefix}/u{i}/fuse"), att, cat_ch, ch, 1, 1);
        if inject_at == Some(block_index) {
            t = ctx.inject_latent(t, ch, res_h, z.unwrap());
        }
        for r in 0..n_res {
            t = ctx.residual_block(&format!("{prefix}/u{i}/r{r}"), t, ch);
        }
        cur = t;
        cur_ch = ch;
        block_index += 1;
    }

    let ch0 = preset.channels(0);
    let tap = ctx.g.concat(&[embed.unwrap(), down_out[0], cur], 1);
    ctx.conv(&format!("{prefix}/readout"), tap, 2 * ch0 + cur_ch, out_channels, 3, 1)
}

/// Coordinate channels fed to the image-domain network: centered x and y,
/// radius in units of the inscribed-circle radius, and angle over pi.
pub fn positional_features<T: Real>(n: usize, batch: usize) -> ArrayD<T> {
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let mut feat = ArrayD::<T>::zeros(IxDyn(&[batch, 4, n, n]));
    for i in 0..n {
        for j in 0..n {
            let dx = j as f64 - c;
            let dy = i as f64 - c;
            let vals = [
                dx / n as f64,
                dy / n as f64,
                dx.hypot(dy) / half,
                dy.atan2(dx) / std::f64::consts::PI,
            ];
            for (k, v) in vals.iter().enumerate() {
                let tv = T::from_f64(*v);
                for b in 0..batch {
                    feat[[b, k, i, j]] = tv;
                }
            }
        }
    }
    feat
}

fn circle_mask_array<T: Real>(geom: &ScanGeometry, batch: usize) -> ArrayD<T> {
    let n = geom.image_size();
    let mut m = ArrayD::<T>::zeros(IxDyn(&[batch, 1, n, n]));
    for i in 0..n {
        for j in 0..n {
            if geom.inside_circle(i, j) {
                for b in 0..batch {
                    m[[b, 0, i, j]] = T::one();
                }
            }
        }
    }
    m
}

/// Reconstruction stack: a sinogram-domain U-net, a learned multi-channel
/// back-projection bridge, and an image-domain U-net with coordinate
/// features, masked to the scanned circle.
pub struct End2End {
    pub g1: &'static Preset,
    pub g2: &'static Preset,
    pub bridge: usize,
    pub z_channels: usize,
    projector: Arc<Projector>,
}

impl End2End {
    pub fn new(
        g1: &str,
        g2: &str,
        bridge: usize,
        geom: ScanGeometry,
    ) -> Result<Self, ZooError> {
        Self::with_latent(g1, g2, bridge, 0, geom)
    }

    /// As `new`, plus a latent input of `z_channels` channels injected into
    /// the image-domain net (the generator configuration).
    pub fn with_latent(
        g1: &str,
        g2: &str,
        bridge: usize,
        z_channels: usize,
        geom: ScanGeometry,
    ) -> Result<Self, ZooError> {
        let g1 = preset(g1)?;
        let g2 = preset(g2)?;
        g1.validate(geom.n_angles(), geom.n_detectors())?;
        let n = geom.image_size();
        g2.validate(n, n)?;
        if z_channels > 0 {
            let width = block_width(g2, injection_block(g2));
            if z_channels >= width {
                return Err(ZooError::LatentTooWide { z: z_channels, width });
            }
        }
        Ok(End2End { g1, g2, bridge, z_channels, projector: Arc::new(Projector::new(geom)) })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.projector.geometry()
    }

    pub fn projector(&self) -> &Arc<Projector> {
        &self.projector
    }

    /// Spatial shape of the latent tensor: a quarter of the injection
    /// block's resolution per side (at least one pixel).
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let n = self.geometry().image_size();
        let res = block_resolution(self.g2, injection_block(self.g2), n);
        let side = (res / 4).max(1);
        (self.z_channels, side, side)
    }

    /// `readings` is (B, 1, A, D) already normalized to [0, 1]; `z` must be
    /// given exactly when the model was built with latent channels. Returns
    /// the masked reconstruction (B, 1, N, N).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
        z: Option<Var>,
    ) -> Var {
        assert_eq!(z.is_some(), self.z_channels > 0, "latent expected iff configured");
        let batch = g.value(readings).shape()[0];
        let sino_feat = unet_forward(g, store, bind, "g1", self.g1, readings, self.bridge, None);
        let img = g.radon_backproject(sino_feat, self.projector.clone());
        let n = self.geometry().image_size();
        let pos = g.input(positional_features::<T>(n, batch));
        let x2 = g.concat(&[img, pos], 1);
        let z = z.map(|var| ZInjection { var, channels: self.z_channels });
        let out = unet_forward(g, store, bind, "g2", self.g2, x2, 1, z);
        let mask = g.input(circle_mask_array::<T>(self.geometry(), batch));
        g.mul(out, mask)
    }
}

/// Wasserstein critic: a stack of stride-2 spectrally normalized
/// convolutions, global average pooling, and a normalized linear head.
pub struct Critic {
    pub stages: usize,
    pub base: usize,
    n: usize,
}

impl Critic {
    pub fn new(stages: usize, base: usize, n: usize) -> Result<Self, ZooError> {
        let div = 1usize << stages;
        if n % div != 0 {
            return Err(ZooError::NotDivisible {
                preset: "critic".to_string(),
                height: n,
                width: n,
                downs: stages,
            });
        }
        if n / div < 2 {
            return Err(ZooError::ResolutionUnderflow {
                preset: "critic".to_string(),
                height: n,
                width: n,
            });
        }
        Ok(Critic { stages, base, n })
    }

    fn width(&self, stage: usize) -> usize {
        self.base << stage.min(3)
    }

    /// Scores (B, 1, N, N) images; returns (B, 1) and the per-layer sigma
    /// nodes in stage order for auditing.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        x: Var,
    ) -> (Var, Vec<Var>) {
        assert_eq!(g.value(x).shape()[2], self.n);
        let mut sigmas = Vec::new();
        let mut cur = x;
        let mut cin = 1;
        for s in 0..self.stages {
            let ch = self.width(s);
            let name = format!("critic/s{s}");
            let w = store.var(
                g,
                bind,
                &format!("{name}/w"),
                &[ch, cin, 3, 3],
                Init::He { fan_in: cin * 9 },
            );
            let (wsn, sigma) = spectral_normalize(g, store, &format!("{name}/w"), w);
            sigmas.push(sigma);
            let b = store.var(g, bind, &format!("{name}/b"), &[ch], Init::Zeros);
            let c = g.conv2d(cur, wsn, b, 2);
            let alpha = store.var(
                g,
                bind,
                &format!("{name}/alpha"),
                &[ch],
                Init::Const(0.25),
            );
            cur = g.prelu(c, alpha);
            cin = ch;
        }
        let pooled = g.global_avg_pool(cur);
        let w = store.var(
            g,
            bind,
            "critic/head/w",
            &[1, cin],
            Init::He { fan_in: cin },
        );
        let (wsn, sigma) = spectral_normalize(g, store, "critic/head/w", w);
        sigmas.push(sigma);
        let b = store.var(g, bind, "critic/head/b", &[1], Init::Zeros);
        (g.linear(pooled, wsn, b), sigmas)
    }
}

/// Pointwise posterior regressors over sensor readings. With unit kernels
/// the network is an MLP applied at every sinogram entry, which is exactly
/// the form of the per-entry posterior-moment map.
pub struct PosteriorNet {
    pub hidden: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl PosteriorNet {
    pub fn new(hidden: usize, depth: usize, kernel: usize) -> Self {
        assert!(depth >= 1 && kernel % 2 == 1);
        PosteriorNet { hidden, depth, kernel }
    }

    fn trunk<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        prefix: &str,
        x: Var,
    ) -> Var {
        let mut ctx = UnetCtx { g, store, bind };
        let mut cur = ctx.conv_act(&format!("{prefix}/l0"), x, 1, self.hidden, self.kernel, 1);
        for l in 1..self.depth {
            cur = ctx.conv_act(
                &format!("{prefix}/l{l}"),
                cur,
                self.hidden,
                self.hidden,
                self.kernel,
                1,
            );
        }
        cur
    }

    /// Posterior-mean head: (B, 1, A, D) normalized readings to mean signals.
    pub fn forward_mu<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
    ) -> Var {
        let t = self.trunk(g, store, bind, "pmu", readings);
        let mut ctx = UnetCtx { g, store, bind };
        ctx.conv("pmu/head", t, self.hidden, 1, self.kernel, 1)
    }

    /// Log-spread before the fixed activation; `forward_sigma` applies
    /// exp + floor on top. Exposed because distillation matches the heads
    /// here: in log space the match is well conditioned at every scale,
    /// while squared error on the exponentiated spread loses its gradient
    /// exactly where underestimates are most dangerous.
    pub fn forward_sigma_pre<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
    ) -> Var {
        let t = self.trunk(g, store, bind, "psig", readings);
        let mut ctx = UnetCtx { g, store, bind };
        ctx.conv("psig/head", t, self.hidden, 1, self.kernel, 1)
    }

    /// Posterior-spread head, floored away from zero.
    pub fn forward_sigma<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
    ) -> Var {
        let pre = self.forward_sigma_pre(g, store, bind, readings);
        let e = g.exp(pre);
        g.add_scalar(e, T::from_f64(SIGMA_FLOOR))
    }

    /// Two-headed form sharing one trunk, before the spread activation;
    /// returns (mu, log-spread). See [`Self::forward_sigma_pre`].
    pub fn forward_joint_pre<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
    ) -> (Var, Var) {
        let t = self.trunk(g, store, bind, "pjoint", readings);
        let mut ctx = UnetCtx { g, store, bind };
        let mu = ctx.head("pjoint/mu", t, self.hidden, self.kernel, 0.0);
        let pre = ctx.head("pjoint/sigma", t, self.hidden, self.kernel, 0.0);
        (mu, pre)
    }

    /// Distilled two-headed form sharing one trunk; returns (mu, sigma).
    pub fn forward_joint<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        bind: &mut Bindings,
        readings: Var,
    ) -> (Var, Var) {
        let (mu, pre) = self.forward_joint_pre(g, store, bind, readings);
        let e = g.exp(pre);
        let sigma = g.add_scalar(e, T::from_f64(SIGMA_FLOOR));
        (mu, sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use tomoforge_core::rng::{phase_seed, root};

    fn rand_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = root(phase_seed(seed, "zoo-test"));
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.1
        })
    }

    #[test]
    fn preset_lookup_round_trips_every_entry() {
        for p in PRESETS {
            let got = preset(p.name).unwrap();
            assert_eq!(got, p);
            assert_eq!(got.up.len() + 1, got.down.len());
        }
        assert!(preset("t99").is_err());
        // Case-insensitive lookup for config convenience.
        assert_eq!(preset("T16").unwrap().name, "t16");
    }

    #[test]
    fn channel_widths_double_every_other_stage() {
        let p = preset("s").unwrap();
        let got: Vec<usize> = (0..p.n_down()).map(|d| p.channels(d)).collect();
        assert_eq!(got, vec![32, 32, 64, 64, 128]);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let p = preset("t16").unwrap();
        assert!(p.validate(64, 64).is_ok());
        assert!(matches!(p.validate(66, 64), Err(ZooError::NotDivisible { .. })));
        assert!(matches!(p.validate(4, 4), Err(ZooError::ResolutionUnderflow { .. })));
    }

    #[test]
    fn unet_preserves_spatial_shape() {
        let p = preset("t16").unwrap();
        let mut g = Graph::<f64>::checked();
        let mut store = ParamStore::new(1);
        let mut bind = Bindings::new();
        let x = g.input(rand_input(&[2, 3, 16, 24], 1));
        let y = unet_forward(&mut g, &mut store, &mut bind, "u", p, x, 5, None);
        assert_eq!(g.value(y).shape(), &[2, 5, 16, 24]);
    }

    #[test]
    fn zeroed_attention_weights_gate_at_one_half() {
        let mut g = Graph::<f64>::checked();
        let mut store = ParamStore::new(2);
        let mut bind = Bindings::new();
        let x = g.input(ArrayD::from_elem(IxDyn(&[1, 8, 4, 4]), 2.0));
        // Force the attention weights to zero, then gate.
        store.materialize("a/w1", &[1, 8], Init::Zeros);
        store.materialize("a/b1", &[1], Init::Zeros);
        store.materialize("a/w2", &[8, 1], Init::Zeros);
        store.materialize("a/b2", &[8], Init::Zeros);
        store.materialize("a/mid/alpha", &[1], Init::Const(0.25));
        let mut ctx = UnetCtx { g: &mut g, store: &mut store, bind: &mut bind };
        let y = ctx.channel_attention("a", x, 8);
        assert!(g.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn injection_site_is_third_from_last_block() {
        assert_eq!(injection_block(preset("t16").unwrap()), 2); // bottleneck
        assert_eq!(injection_block(preset("t32").unwrap()), 0);
        assert_eq!(injection_block(preset("s").unwrap()), 6); // second up block
    }

    #[test]
    fn end2end_masks_outside_circle_and_keeps_shape() {
        let geom = ScanGeometry::with_detectors(16, 8, 32).unwrap();
        let net = End2End::new("t32", "t32", 3, geom).unwrap();
        let mut g = Graph::<f64>::checked();
        let mut store = ParamStore::new(3);
        let mut bind = Bindings::new();
        let r = g.input(rand_input(&[2, 1, 8, 32], 2).mapv(f64::abs));
        let y = net.forward(&mut g, &mut store, &mut bind, r, None);
        let out = g.value(y);
        assert_eq!(out.shape(), &[2, 1, 16, 16]);
        // Corners sit outside the inscribed circle.
        assert_eq!(out[[0, 0, 0, 0]], 0.0);
        assert_eq!(out[[1, 0, 15, 15]], 0.0);
        let center = out[[0, 0, 8, 8]];
        assert!(center != 0.0, "interior survives the mask");
    }

    #[test]
    fn latent_changes_output_and_carries_gradient() {
        let geom = ScanGeometry::with_detectors(16, 8, 32).unwrap();
        let net = End2End::with_latent("t32", "t16", 3, 4, geom).unwrap();
        // t16 injects at its bottleneck: 16 >> 2 = 4 per side, latent 1x1.
        let (zc, zh, zw) = net.latent_shape();
        assert_eq!((zc, zh, zw), (4, 1, 1));

        let readings = rand_input(&[1, 1, 8, 32], 3).mapv(f64::abs);
        let run = |zval: ArrayD<f64>, store: &mut ParamStore<f64>| {
            let mut g = Graph::<f64>::checked();
            let mut bind = Bindings::new();
            let r = g.input(readings.clone());
            let z = g.param(zval);
            let y = net.forward(&mut g, store, &mut bind, r, Some(z));
            let loss = g.sum(y);
            g.backward(loss);
            (g.value(y).clone(), g.grad(z).cloned())
        };

        let mut store = ParamStore::new(4);
        let (y0, _) = run(ArrayD::zeros(IxDyn(&[1, 4, 1, 1])), &mut store);
        let (y0b, _) = run(ArrayD::zeros(IxDyn(&[1, 4, 1, 1])), &mut store);
        // Zero latent is a fixed point of the sampler: identical reruns.
        assert_eq!(y0, y0b);

        let (y1, grad) = run(rand_input(&[1, 4, 1, 1], 5), &mut store);
        assert!(y1 != y0, "latent moves the output");
        let gz = grad.expect("latent receives gradient");
        let gnorm: f64 = gz.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gnorm > 0.0, "nonzero latent gradient");
    }

    #[test]
    fn latent_wider_than_block_is_rejected() {
        let geom = ScanGeometry::with_detectors(16, 8, 32).unwrap();
        // t16 bottleneck is 32 channels wide; 40 latent channels cannot fit.
        match End2End::with_latent("t32", "t16", 3, 40, geom) {
            Err(ZooError::LatentTooWide { z: 40, width: 32 }) => {}
            other => panic!("expected latent rejection, got {:?}", other.err()),
        }
    }

    #[test]
    fn critic_scores_scalars_and_audits_sigmas() {
        let c = Critic::new(3, 8, 16).unwrap();
        let mut g = Graph::<f64>::checked();
        let mut store = ParamStore::new(6);
        let mut bind = Bindings::new();
        let x = g.input(rand_input(&[3, 1, 16, 16], 7));
        let (score, sigmas) = c.forward(&mut g, &mut store, &mut bind, x);
        assert_eq!(g.value(score).shape(), &[3, 1]);
        assert_eq!(sigmas.len(), 4); // three stages plus the head
        for s in sigmas {
            assert!(g.scalar(s) > 0.0);
        }
        assert!(Critic::new(3, 8, 12).is_err(), "12 is not divisible by 8");
    }

    #[test]
    fn posterior_sigma_respects_the_floor() {
        let p = PosteriorNet::new(8, 2, 1);
        let mut g = Graph::<f64>::checked();
        let mut store = ParamStore::new(8);
        let mut bind = Bindings::new();
        let r = g.input(rand_input(&[1, 1, 4, 8], 9).mapv(f64::abs));
        let sig = p.forward_sigma(&mut g, &mut store, &mut bind, r);
        assert!(g.value(sig).iter().all(|&v| v > SIGMA_FLOOR));
        let (mu, sig2) = p.forward_joint(&mut g, &mut store, &mut bind, r);
        assert_eq!(g.value(mu).shape(), &[1, 1, 4, 8]);
        assert!(g.value(sig2).iter().all(|&v| v > SIGMA_FLOOR));
    }

    /// The whole reconstruction stack differentiates correctly: a compact
    /// end-to-end gradient check through both U-nets and the bridge.
    #[test]
    fn end2end_gradcheck_on_a_subset_of_parameters() {
        let geom = ScanGeometry::with_detectors(8, 4, 16).unwrap();
        let net = End2End::new("t32", "t32", 2, geom).unwrap();
        let readings = rand_input(&[1, 1, 4, 16], 11).mapv(f64::abs);

        // Materialize everything once.
        let mut store = ParamStore::new(12);
        {
            let mut g = Graph::<f64>::new();
            let mut bind = Bindings::new();
            let r = g.input(readings.clone());
            let _ = net.forward(&mut g, &mut store, &mut bind, r, None);
        }
        // Check the two most structurally interesting tensors end to end.
        for target in ["g1/readout/w", "g2/d0/entry/w"] {
            let w0 = store.values[target].clone();
            let store_cell = std::cell::RefCell::new(store);
            crate::graph::gradcheck(
                &[w0],
                |g, ins| {
                    let mut st = store_cell.borrow_mut();
                    st.set(target, ins[0].clone());
                    let mut bind = Bindings::new();
                    let r = g.input(readings.clone());
                    let y = net.forward(g, &mut st, &mut bind, r, None);
                    let loss = g.sum(y);
                    (loss, vec![bind.var_of(target).unwrap()])
                },
                1e-6,
                1e-6,
            );
            store = store_cell.into_inner();
        }
    }
}
