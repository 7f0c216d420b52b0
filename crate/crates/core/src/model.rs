//! The PEAR network: patch embedding, a windowed-attention encoder stage, a
//! downsampled bottleneck, a decoder stage with a skip connection, and patch
//! recovery back to the HEALPix grid.
//!
//! All latent tensors are laid out as `(patches, slots, channels)` with
//! patches in nested order. Slot 0 carries the surface, slots `1..` carry
//! pairs of upper-air levels.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamId;
use crate::autodiff::{attention, Element, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hpx::{GridSpec, RingTable};
use crate::window::WindowLayout;

pub const SURFACE_VARIABLES: [&str; 4] = ["u10", "v10", "t2m", "msl"];
pub const UPPER_VARIABLES: [&str; 5] = ["q", "t", "u", "v", "z"];
/// Pressure levels in hPa, top of the atmosphere last.
pub const PRESSURE_LEVELS: [u32; 13] = [1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_side: u64,
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    /// Blocks in the encoder stage, bottleneck and decoder stage.
    pub depths: [usize; 3],
    pub heads: [usize; 3],
    /// Patches per window along the sphere. Capped per stage at the largest
    /// power of 4 that tiles that stage's patch grid.
    pub window_hp: usize,
    pub window_d: usize,
    /// Input pixels per patch (a power of 4).
    pub patch_hp: usize,
    pub patch_d: usize,
    pub surface_channels: usize,
    pub upper_channels: usize,
    pub upper_levels: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    /// Shift every other block; off turns every block into a plain windowed
    /// block.
    pub shift_windows: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_side: 64,
            embed_dim: 48,
            bottleneck_dim: 96,
            depths: [2, 12, 2],
            heads: [6, 12, 6],
            window_hp: 64,
            window_d: 2,
            patch_hp: 16,
            patch_d: 2,
            surface_channels: 4,
            upper_channels: 5,
            upper_levels: 13,
            mlp_ratio: 4,
            init_std: 0.02,
            shift_windows: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for n_side = 8 grids.
    pub fn desk() -> Self {
        Self { n_side: 8, window_hp: 4, ..Self::default() }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::from_nside(self.n_side)
    }

    /// Upper levels after padding to a multiple of `patch_d`.
    pub fn padded_levels(&self) -> usize {
        self.upper_levels.div_ceil(self.patch_d) * self.patch_d
    }

    /// Latent slots: one surface slot plus the upper slots.
    pub fn slots(&self) -> usize {
        1 + self.padded_levels() / self.patch_d
    }

    fn patch_levels(&self) -> Result<u32> {
        let p = self.patch_hp;
        if p < 4 || !p.is_power_of_two() || p.trailing_zeros() % 2 != 0 {
            return Err(Error::Config(format!("patch_hp = {p} is not a power of 4")));
        }
        Ok(p.trailing_zeros() / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        let levels = self.patch_levels()?;
        if grid.k() < levels + 1 {
            return Err(Error::Config(format!(
                "n_side = {} is too small: patching needs {levels} nesting levels and downsampling one more",
                self.n_side
            )));
        }
        if self.window_hp == 0 || !self.window_hp.is_power_of_two() || self.window_hp.trailing_zeros() % 2 != 0 {
            return Err(Error::Config(format!("window_hp = {} is not a power of 4", self.window_hp)));
        }
        if self.window_d == 0 || self.slots() % self.window_d != 0 {
            return Err(Error::Config(format!("window_d = {} does not divide {} slots", self.window_d, self.slots())));
        }
        if self.depths.iter().any(|d| d % 2 != 0) {
            return Err(Error::Config(format!("depths {:?} must be even", self.depths)));
        }
        let dims = [self.embed_dim, self.bottleneck_dim, self.embed_dim];
        for (d, h) in dims.iter().zip(self.heads) {
            if h == 0 || d % h != 0 {
                return Err(Error::Config(format!("{h} heads do not divide width {d}")));
            }
        }
        if self.patch_d == 0 || self.surface_channels == 0 || self.upper_channels == 0 || self.upper_levels == 0 {
            return Err(Error::Config("empty variable layout".into()));
        }
        Ok(())
    }

    /// Patch grid of the encoder and decoder stages.
    pub fn patch_grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid()?.k() - self.patch_levels()?)
    }

    /// Patch grid of the bottleneck.
    pub fn bottleneck_grid(&self) -> Result<GridSpec> {
        self.patch_grid()?.parent_spec()
    }

    /// Window size actually used on a stage grid.
    pub fn effective_window_hp(&self, grid: GridSpec) -> usize {
        let cap = 4 * grid.face_pixels() as usize;
        self.window_hp.min(cap)
    }

    /// Trainable scalar count, from the configuration alone.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        let block = |c: usize, h: usize, w: usize| {
            let hidden = self.mlp_ratio * c;
            (3 * c * c + 3 * c) + (c * c + c) + h * w * w + 4 * c + (c * hidden + hidden) + (hidden * c + c)
        };
        let (e, b) = (self.embed_dim, self.bottleneck_dim);
        let w1 = self.effective_window_hp(self.patch_grid()?) * self.window_d;
        let w2 = self.effective_window_hp(self.bottleneck_grid()?) * self.window_d;
        let surf_in = self.patch_hp * self.surface_channels;
        let up_in = self.patch_hp * self.patch_d * self.upper_channels;
        Ok((surf_in * e + e)
            + (up_in * e + e)
            + self.depths[0] * block(e, self.heads[0], w1)
            + (4 * e * b + b)
            + self.depths[1] * block(b, self.heads[1], w2)
            + (b * 4 * e + 4 * e)
            + self.depths[2] * block(e, self.heads[2], w1)
            + (2 * e * surf_in + surf_in)
            + (2 * e * up_in + up_in))
    }
}

/// Surface `(N, surface_channels)` and upper `(N, upper_levels,
/// upper_channels)` fields in nested pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumetricState<T> {
    pub surface: Tensor<T>,
    pub upper: Tensor<T>,
}

impl<T: Element> VolumetricState<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let n = config.grid()?.n_pix() as usize;
        Ok(Self {
            surface: Tensor::zeros(vec![n, config.surface_channels]),
            upper: Tensor::zeros(vec![n, config.upper_levels, config.upper_channels]),
        })
    }

    pub fn n_pix(&self) -> usize {
        self.surface.shape()[0]
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let n = config.grid()?.n_pix() as usize;
        if self.surface.shape() != [n, config.surface_channels] {
            return Err(Error::dim("surface", format!("expected ({n}, {}), got {:?}", config.surface_channels, self.surface.shape())));
        }
        let upper = [n, config.upper_levels, config.upper_channels];
        if self.upper.shape() != upper {
            return Err(Error::dim("upper", format!("expected {upper:?}, got {:?}", self.upper.shape())));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.surface.all_finite() && self.upper.all_finite()
    }

    pub fn cast<U: Element>(&self) -> VolumetricState<U> {
        VolumetricState { surface: self.surface.cast(), upper: self.upper.cast() }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    qkv: LinearIds,
    proj: LinearIds,
    bias_table: ParamId,
    norm1: LinearIds,
    fc1: LinearIds,
    fc2: LinearIds,
    norm2: LinearIds,
    heads: usize,
    shifted: bool,
}

/// Plain and shifted window layouts of one stage grid, with the shifted mask.
#[derive(Debug, Clone)]
struct StageWindows<T> {
    plain: WindowLayout,
    shifted: WindowLayout,
    mask: Option<Arc<Tensor<T>>>,
}

impl<T: Element> StageWindows<T> {
    fn new(grid: GridSpec, depth: usize, window_hp: usize, window_d: usize) -> Result<Self> {
        let table = Arc::new(RingTable::new(grid));
        let plain = WindowLayout::with_table(Arc::clone(&table), depth, window_hp, window_d, false)?;
        let shifted = WindowLayout::with_table(table, depth, window_hp, window_d, true)?;
        let mask = shifted.mask_tensor().map(Arc::new);
        Ok(Self { plain, shifted, mask })
    }

    fn cast<U: Element>(&self) -> StageWindows<U> {
        StageWindows {
            plain: self.plain.clone(),
            shifted: self.shifted.clone(),
            mask: self.mask.as_ref().map(|m| Arc::new(m.cast())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pear<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed_surface: LinearIds,
    embed_upper: LinearIds,
    stage1: Vec<BlockIds>,
    down: LinearIds,
    bottleneck: Vec<BlockIds>,
    up: LinearIds,
    stage3: Vec<BlockIds>,
    recover_surface: LinearIds,
    recover_upper: LinearIds,
    fine: StageWindows<T>,
    coarse: StageWindows<T>,
}

struct Init<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    std: f64,
}

impl<T: Element, R: Rng> Init<'_, T, R> {
    /// Normal(0, std) truncated to two standard deviations.
    fn trunc_normal(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let normal = Normal::new(0.0, self.std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * self.std {
                    break T::from_f64(v);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("init extents")
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> LinearIds {
        let w = self.trunc_normal(vec![n_in, n_out]);
        LinearIds {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> LinearIds {
        LinearIds {
            w: self.store.add(format!("{name}.gamma"), Tensor::full(vec![c], T::ONE)),
            b: self.store.add(format!("{name}.beta"), Tensor::zeros(vec![c])),
        }
    }

    fn blocks(&mut self, stage: &str, n: usize, c: usize, heads: usize, tokens: usize, hidden: usize, shift: bool) -> Vec<BlockIds> {
        (0..n)
            .map(|i| {
                let name = format!("{stage}.block{i}");
                BlockIds {
                    qkv: self.linear(&format!("{name}.attn.qkv"), c, 3 * c),
                    proj: self.linear(&format!("{name}.attn.proj"), c, c),
                    bias_table: self.store.add(format!("{name}.attn.bias_table"), Tensor::zeros(vec![heads, tokens, tokens])),
                    norm1: self.norm(&format!("{name}.norm1"), c),
                    fc1: self.linear(&format!("{name}.mlp.fc1"), c, hidden),
                    fc2: self.linear(&format!("{name}.mlp.fc2"), hidden, c),
                    norm2: self.norm(&format!("{name}.norm2"), c),
                    heads,
                    shifted: shift && i % 2 == 1,
                }
            })
            .collect()
    }
}

impl<T: Element> Pear<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fine_grid = config.patch_grid()?;
        let coarse_grid = config.bottleneck_grid()?;
        let slots = config.slots();
        let fine = StageWindows::new(fine_grid, slots, config.effective_window_hp(fine_grid), config.window_d)?;
        let coarse = StageWindows::new(coarse_grid, slots, config.effective_window_hp(coarse_grid), config.window_d)?;
        let w_fine = fine.plain.window_len();
        let w_coarse = coarse.plain.window_len();

        let (e, b) = (config.embed_dim, config.bottleneck_dim);
        let surf_in = config.patch_hp * config.surface_channels;
        let up_in = config.patch_hp * config.patch_d * config.upper_channels;
        let shift = config.shift_windows;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, rng, std: config.init_std };
        let embed_surface = init.linear("patch_embed.surface", surf_in, e);
        let embed_upper = init.linear("patch_embed.upper", up_in, e);
        let stage1 = init.blocks("stage1", config.depths[0], e, config.heads[0], w_fine, config.mlp_ratio * e, shift);
        let down = init.linear("downsample", 4 * e, b);
        let bottleneck = init.blocks("bottleneck", config.depths[1], b, config.heads[1], w_coarse, config.mlp_ratio * b, shift);
        let up = init.linear("upsample", b, 4 * e);
        let stage3 = init.blocks("stage3", config.depths[2], e, config.heads[2], w_fine, config.mlp_ratio * e, shift);
        let recover_surface = init.linear("patch_recover.surface", 2 * e, surf_in);
        let recover_upper = init.linear("patch_recover.upper", 2 * e, up_in);

        Ok(Self {
            config,
            params,
            embed_surface,
            embed_upper,
            stage1,
            down,
            bottleneck,
            up,
            stage3,
            recover_surface,
            recover_upper,
            fine,
            coarse,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Window layouts of the encoder/decoder grid and of the bottleneck grid,
    /// each as (plain, shifted).
    pub fn layouts(&self) -> [(&WindowLayout, &WindowLayout); 2] {
        [(&self.fine.plain, &self.fine.shifted), (&self.coarse.plain, &self.coarse.shifted)]
    }

    /// Same network in another precision.
    pub fn cast<U: Element>(&self) -> Pear<U> {
        Pear {
            config: self.config.clone(),
            params: self.params.cast(),
            embed_surface: self.embed_surface,
            embed_upper: self.embed_upper,
            stage1: self.stage1.clone(),
            down: self.down,
            bottleneck: self.bottleneck.clone(),
            up: self.up,
            stage3: self.stage3.clone(),
            recover_surface: self.recover_surface,
            recover_upper: self.recover_upper,
            fine: self.fine.cast(),
            coarse: self.coarse.cast(),
        }
    }

    /// Places the parameters on `tape`.
    pub fn bind<'a>(&'a self, tape: &'a Tape<T>) -> Bound<'a, T> {
        Bound { model: self, tape, vars: self.params.bind(tape) }
    }

    /// One forecast step without recording gradients.
    pub fn forward(&self, state: &VolumetricState<T>) -> Result<VolumetricState<T>> {
        let tape = Tape::no_grad();
        let net = self.bind(&tape);
        let surface = tape.constant(state.surface.clone());
        let upper = tape.constant(state.upper.clone());
        let (s, u) = net.forward(&surface, &upper)?;
        Ok(VolumetricState { surface: s.into_tensor(), upper: u.into_tensor() })
    }
}

/// A model whose parameters live on a tape; exposes each stage separately.
pub struct Bound<'a, T: Element> {
    model: &'a Pear<T>,
    tape: &'a Tape<T>,
    vars: Vec<Var<T>>,
}

impl<'a, T: Element> Bound<'a, T> {
    /// Parameter leaves in store order, for reading gradients.
    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    fn linear(&self, x: &Var<T>, ids: LinearIds) -> Result<Var<T>> {
        self.tape.linear(x, self.var(ids.w), self.var(ids.b))
    }

    fn norm(&self, x: &Var<T>, ids: LinearIds) -> Result<Var<T>> {
        self.tape.layer_norm(x, self.var(ids.w), self.var(ids.b))
    }

    /// `(N, Cs)` and `(N, L, Cu)` -> `(P, slots, embed_dim)`.
    pub fn patch_embed(&self, surface: &Var<T>, upper: &Var<T>) -> Result<Var<T>> {
        let cfg = &self.model.config;
        let t = self.tape;
        let n = cfg.grid()?.n_pix() as usize;
        let p = n / cfg.patch_hp;
        let (cs, cu, l) = (cfg.surface_channels, cfg.upper_channels, cfg.upper_levels);
        if surface.shape() != [n, cs] || upper.shape() != [n, l, cu] {
            return Err(Error::dim(
                "patch embed",
                format!("surface {:?}, upper {:?} for n_pix {n}", surface.shape(), upper.shape()),
            ));
        }
        let s = t.reshape(surface, &[p, cfg.patch_hp * cs])?;
        let s = self.linear(&s, self.model.embed_surface)?;
        let s = t.reshape(&s, &[p, 1, cfg.embed_dim])?;

        let padded = self.pad_levels(upper)?;
        let slots_u = cfg.padded_levels() / cfg.patch_d;
        let u = t.reshape(&padded, &[p, cfg.patch_hp, slots_u, cfg.patch_d, cu])?;
        let u = t.permute(&u, &[0, 2, 1, 3, 4])?;
        let u = t.reshape(&u, &[p * slots_u, cfg.patch_hp * cfg.patch_d * cu])?;
        let u = self.linear(&u, self.model.embed_upper)?;
        let u = t.reshape(&u, &[p, slots_u, cfg.embed_dim])?;
        t.concat(&[&s, &u], 1)
    }

    /// Repeats the top level until the level count is a multiple of `patch_d`.
    fn pad_levels(&self, upper: &Var<T>) -> Result<Var<T>> {
        let cfg = &self.model.config;
        let extra = cfg.padded_levels() - cfg.upper_levels;
        if extra == 0 {
            return Ok(upper.clone());
        }
        let top = self.tape.narrow(upper, 1, cfg.upper_levels - 1, 1)?;
        let mut parts = vec![upper];
        parts.extend(std::iter::repeat(&top).take(extra));
        self.tape.concat(&parts, 1)
    }

    fn block(&self, x: &Var<T>, ids: &BlockIds, windows: &StageWindows<T>) -> Result<Var<T>> {
        let t = self.tape;
        let (layout, mask) = if ids.shifted {
            (&windows.shifted, windows.mask.as_ref().map(|m| t.constant_shared(Arc::clone(m))))
        } else {
            (&windows.plain, None)
        };
        let c = x.shape()[2];
        let h = ids.heads;
        let win = layout.partition(t, x)?;
        let (nw, w) = (layout.n_windows(), layout.window_len());
        let qkv = self.linear(&win, ids.qkv)?;
        let qkv = t.reshape(&qkv, &[nw, w, 3, h, c / h])?;
        let qkv = t.permute(&qkv, &[2, 0, 3, 1, 4])?;
        let parts = t.split(&qkv, 0, &[1, 1, 1])?;
        let shape = [nw, h, w, c / h];
        let q = t.reshape(&parts[0], &shape)?;
        let k = t.reshape(&parts[1], &shape)?;
        let v = t.reshape(&parts[2], &shape)?;
        let a = attention(t, &q, &k, &v, Some(self.var(ids.bias_table)), mask.as_ref())?;
        let a = t.permute(&a, &[0, 2, 1, 3])?;
        let a = t.reshape(&a, &[nw, w, c])?;
        let a = self.linear(&a, ids.proj)?;
        let a = layout.merge(t, &a)?;
        let x = t.add(x, &self.norm(&a, ids.norm1)?)?;

        let m = self.linear(&x, ids.fc1)?;
        let m = t.gelu(&m);
        let m = self.linear(&m, ids.fc2)?;
        t.add(&x, &self.norm(&m, ids.norm2)?)
    }

    fn stage(&self, name: &str, x: &Var<T>, blocks: &[BlockIds], windows: &StageWindows<T>, width: usize) -> Result<Var<T>> {
        let expected = [windows.plain.n_pix(), windows.plain.depth(), width];
        if x.shape() != expected {
            return Err(Error::dim(name, format!("expected {expected:?}, got {:?}", x.shape())));
        }
        let mut x = x.clone();
        for ids in blocks {
            x = self.block(&x, ids, windows)?;
        }
        Ok(x)
    }

    pub fn encoder(&self, x: &Var<T>) -> Result<Var<T>> {
        self.stage("encoder stage", x, &self.model.stage1, &self.model.fine, self.model.config.embed_dim)
    }

    pub fn bottleneck(&self, x: &Var<T>) -> Result<Var<T>> {
        self.stage("bottleneck", x, &self.model.bottleneck, &self.model.coarse, self.model.config.bottleneck_dim)
    }

    pub fn decoder(&self, x: &Var<T>) -> Result<Var<T>> {
        self.stage("decoder stage", x, &self.model.stage3, &self.model.fine, self.model.config.embed_dim)
    }

    /// Merges each group of four sibling patches: `(P, D, C)` -> `(P/4, D, 2C')`.
    pub fn downsample(&self, x: &Var<T>) -> Result<Var<T>> {
        let t = self.tape;
        let [p, d, c] = dims3("downsample", x)?;
        let y = t.reshape(x, &[p / 4, 4, d, c])?;
        let y = t.permute(&y, &[0, 2, 1, 3])?;
        let y = t.reshape(&y, &[p / 4, d, 4 * c])?;
        self.linear(&y, self.model.down)
    }

    /// Splits each patch into its four children: `(P/4, D, C')` -> `(P, D, C)`.
    pub fn upsample(&self, x: &Var<T>) -> Result<Var<T>> {
        let t = self.tape;
        let [q, d, _] = dims3("upsample", x)?;
        let c = self.model.config.embed_dim;
        let y = self.linear(x, self.model.up)?;
        let y = t.reshape(&y, &[q, d, 4, c])?;
        let y = t.permute(&y, &[0, 2, 1, 3])?;
        t.reshape(&y, &[4 * q, d, c])
    }

    /// `(P, slots, embed_dim)` decoder output and skip -> surface and upper
    /// fields on the input grid.
    pub fn patch_recover(&self, x: &Var<T>, skip: Option<&Var<T>>) -> Result<(Var<T>, Var<T>)> {
        let cfg = &self.model.config;
        let t = self.tape;
        let skip = skip.ok_or_else(|| Error::Contract("patch recovery needs the encoder skip tensor".into()))?;
        if x.shape() != skip.shape() {
            return Err(Error::dim("skip concat", format!("{:?} vs {:?}", x.shape(), skip.shape())));
        }
        let [p, slots, _] = dims3("patch recover", x)?;
        let z = t.concat(&[x, skip], 2)?;
        let parts = t.split(&z, 1, &[1, slots - 1])?;
        let (cs, cu) = (cfg.surface_channels, cfg.upper_channels);
        let s = t.reshape(&parts[0], &[p, 2 * cfg.embed_dim])?;
        let s = self.linear(&s, self.model.recover_surface)?;
        let surface = t.reshape(&s, &[p * cfg.patch_hp, cs])?;

        let slots_u = slots - 1;
        let u = self.linear(&parts[1], self.model.recover_upper)?;
        let u = t.reshape(&u, &[p, slots_u, cfg.patch_hp, cfg.patch_d, cu])?;
        let u = t.permute(&u, &[0, 2, 1, 3, 4])?;
        let u = t.reshape(&u, &[p * cfg.patch_hp, slots_u * cfg.patch_d, cu])?;
        let upper = t.narrow(&u, 1, 0, cfg.upper_levels)?;
        Ok((surface, upper))
    }

    pub fn forward(&self, surface: &Var<T>, upper: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        if !surface.value().all_finite() || !upper.value().all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let x = self.patch_embed(surface, upper)?;
        let skip = self.encoder(&x)?;
        let y = self.downsample(&skip)?;
        let y = self.bottleneck(&y)?;
        let y = self.upsample(&y)?;
        let y = self.decoder(&y)?;
        self.patch_recover(&y, Some(&skip))
    }
}

fn dims3<T: Element>(context: &str, x: &Var<T>) -> Result<[usize; 3]> {
    match *x.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::dim(context, format!("expected rank 3, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_config_parameter_count() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.parameter_count().unwrap(), 4_277_408);
        assert_eq!(cfg.slots(), 8);
        assert_eq!(cfg.padded_levels(), 14);
    }

    #[test]
    fn built_store_matches_formula() {
        let cfg = ModelConfig { depths: [2, 2, 2], ..ModelConfig::desk() };
        let model = Pear::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.parameter_count(), cfg.parameter_count().unwrap());
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            ModelConfig { n_side: 4, ..ModelConfig::desk() },
            ModelConfig { window_hp: 8, ..ModelConfig::desk() },
            ModelConfig { depths: [2, 3, 2], ..ModelConfig::desk() },
            ModelConfig { heads: [5, 12, 6], ..ModelConfig::desk() },
            ModelConfig { window_d: 3, ..ModelConfig::desk() },
            ModelConfig { patch_hp: 8, ..ModelConfig::desk() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn window_cap_per_stage() {
        let cfg = ModelConfig { n_side: 8, ..ModelConfig::default() };
        assert_eq!(cfg.effective_window_hp(cfg.patch_grid().unwrap()), 16);
        assert_eq!(cfg.effective_window_hp(cfg.bottleneck_grid().unwrap()), 4);
        let paper = ModelConfig::default();
        assert_eq!(paper.effective_window_hp(paper.patch_grid().unwrap()), 64);
        assert_eq!(paper.effective_window_hp(paper.bottleneck_grid().unwrap()), 64);
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ModelConfig::desk();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }
}
