//! The conditional consistency network.
//!
//! A three-level U-Net over `x_t ⊕ y0` (6 channels in, 3 out). A sinusoidal
//! embedding of `t` goes through a two-layer MLP and is projected into every
//! residual block. The output projection starts at zero, so a fresh network
//! reduces to the skip path of the consistency parameterization.

use std::sync::atomic::{AtomicU64, Ordering};

use hdrcm_core::{ImageF, SeededRng};

use crate::error::{NnError, Result};
use crate::layers::{
    silu, silu_backward, silu_backward_vec, silu_vec, time_embedding, upsample2, upsample2_backward, Conv,
    ConvCache, GroupNorm, GroupNormCache, Linear,
};
use crate::real::Real;
use crate::tensor::{Act, ParamSet};

/// Number of down/up stages.
pub const DEPTH: usize = 3;
/// Channel multiplier per level, the last entry being the bottleneck.
pub const CHANNEL_MULT: [usize; DEPTH + 1] = [1, 2, 2, 2];
/// Channels per normalization group.
pub const GROUP_SIZE: usize = 8;
/// Data scale of the skip/out parameterization.
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub time_embed_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            blocks_per_stage: 2,
            time_embed_dim: 128,
            in_channels: 6,
            out_channels: 3,
        }
    }
}

impl NetConfig {
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            blocks_per_stage: 1,
            time_embed_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks_per_stage == 0 {
            return Err(NnError::Config("base_channels and blocks_per_stage must be positive".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(NnError::Config("time_embed_dim must be positive and even".into()));
        }
        if self.in_channels != 6 || self.out_channels != 3 {
            return Err(NnError::Config("network maps x_t ⊕ y0 (6 channels) to RGB (3 channels)".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * CHANNEL_MULT[level]
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << DEPTH
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "base_channels = {}\nblocks_per_stage = {}\ntime_embed_dim = {}\nin_channels = {}\nout_channels = {}\n",
            self.base_channels, self.blocks_per_stage, self.time_embed_dim, self.in_channels, self.out_channels
        )
    }

    /// Applies one `key`/`value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .trim()
            .parse()
            .map_err(|_| NnError::Config(format!("net.{key}: expected an integer, got '{value}'")))?;
        match key {
            "base_channels" => self.base_channels = v,
            "blocks_per_stage" => self.blocks_per_stage = v,
            "time_embed_dim" => self.time_embed_dim = v,
            "in_channels" => self.in_channels = v,
            "out_channels" => self.out_channels = v,
            _ => return Err(NnError::Config(format!("unknown key net.{key}"))),
        }
        Ok(())
    }
}

pub fn c_skip(t: f64, eps_t: f64) -> f64 {
    let d = t - eps_t;
    SIGMA_DATA * SIGMA_DATA / (d * d + SIGMA_DATA * SIGMA_DATA)
}

pub fn c_out(t: f64, eps_t: f64) -> f64 {
    let d = t - eps_t;
    d * SIGMA_DATA / (d * d + SIGMA_DATA * SIGMA_DATA).sqrt()
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    proj: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

struct ResCache<T> {
    n1: GroupNormCache<T>,
    h1: Act<T>,
    c1: ConvCache<T>,
    n2: GroupNormCache<T>,
    h2: Act<T>,
    c2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

/// About `GROUP_SIZE` channels per group, rounded down to a divisor.
fn groups(channels: usize) -> usize {
    let mut g = channels.div_ceil(GROUP_SIZE).max(1);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}

/// Fan-in-scaled normal initial values.
fn init_weights<T: Real>(rng: &mut SeededRng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(std * rng.normal())).collect()
}

fn conv<T: Real>(
    p: &mut ParamSet<T>,
    rng: &mut SeededRng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Conv {
    let w = init_weights(rng, cout * cin * k * k, cin * k * k);
    Conv::new(p, name, cin, cout, k, stride, w)
}

impl ResBlock {
    fn new<T: Real>(p: &mut ParamSet<T>, rng: &mut SeededRng, name: &str, cin: usize, cout: usize, temb: usize) -> Self {
        let norm1 = GroupNorm::new(p, &format!("{name}.norm1"), cin, groups(cin));
        let conv1 = conv(p, rng, &format!("{name}.conv1"), cin, cout, 3, 1);
        let proj = Linear::new(p, &format!("{name}.temb"), temb, cout, init_weights(rng, cout * temb, temb));
        let norm2 = GroupNorm::new(p, &format!("{name}.norm2"), cout, groups(cout));
        let conv2 = conv(p, rng, &format!("{name}.conv2"), cout, cout, 3, 1);
        let skip = (cin != cout).then(|| conv(p, rng, &format!("{name}.skip"), cin, cout, 1, 1));
        Self {
            norm1,
            conv1,
            proj,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Act<T>, temb: &[T]) -> (Act<T>, ResCache<T>) {
        let (h1, n1) = self.norm1.forward(p, x);
        let (mut c1_out, c1) = self.conv1.forward(p, &silu(&h1));
        let shift = self.proj.forward(p, temb);
        for (c, &s) in shift.iter().enumerate() {
            c1_out.plane_mut(c).iter_mut().for_each(|v| *v = *v + s);
        }
        let (h2, n2) = self.norm2.forward(p, &c1_out);
        let (mut out, c2) = self.conv2.forward(p, &silu(&h2));
        let skip = match &self.skip {
            Some(s) => {
                let (y, cache) = s.forward(p, x);
                out.add_assign(&y);
                Some(cache)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (
            out,
            ResCache {
                n1,
                h1,
                c1,
                n2,
                h2,
                c2,
                skip,
            },
        )
    }

    /// Returns the input gradient and adds into `dtemb`.
    fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ResCache<T>,
        temb: &[T],
        grad: &Act<T>,
        grads: &mut ParamSet<T>,
        dtemb: &mut [T],
    ) -> Act<T> {
        let da2 = self.conv2.backward(p, &cache.c2, grad, grads, true).expect("input grad");
        let dh2 = silu_backward(&cache.h2, &da2);
        let dc1 = self.norm2.backward(p, &cache.n2, &dh2, grads);
        let dshift: Vec<T> = (0..dc1.c).map(|c| dc1.plane(c).iter().copied().sum()).collect();
        let dt = self.proj.backward(p, temb, &dshift, grads);
        for (a, b) in dtemb.iter_mut().zip(dt) {
            *a = *a + b;
        }
        let da1 = self.conv1.backward(p, &cache.c1, &dc1, grads, true).expect("input grad");
        let dh1 = silu_backward(&cache.h1, &da1);
        let mut dx = self.norm1.backward(p, &cache.n1, &dh1, grads);
        match (&self.skip, &cache.skip) {
            (Some(s), Some(c)) => dx.add_assign(&s.backward(p, c, grad, grads, true).expect("input grad")),
            _ => dx.add_assign(grad),
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct Arch {
    temb1: Linear,
    temb2: Linear,
    input: Conv,
    down_blocks: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv>,
    mid: Vec<ResBlock>,
    upsample: Vec<Conv>,
    up_blocks: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv,
}

/// Everything the backward pass needs from one forward evaluation.
/// Tape of a padded evaluation.
pub struct PaddedTape<T> {
    tape: Tape<T>,
    padded: (usize, usize),
}

pub struct Tape<T> {
    temb0: Vec<T>,
    t1: Vec<T>,
    t2: Vec<T>,
    temb: Vec<T>,
    input: ConvCache<T>,
    down: Vec<Vec<ResCache<T>>>,
    downsample: Vec<ConvCache<T>>,
    mid: Vec<ResCache<T>>,
    upsample: Vec<ConvCache<T>>,
    up: Vec<Vec<ResCache<T>>>,
    skip_channels: Vec<usize>,
    out_norm: GroupNormCache<T>,
    out_h: Act<T>,
    out_conv: ConvCache<T>,
}

pub struct ConsistencyNet<T> {
    cfg: NetConfig,
    params: ParamSet<T>,
    arch: Arch,
    forward_calls: AtomicU64,
}

impl<T: Real> Clone for ConsistencyNet<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            arch: self.arch.clone(),
            forward_calls: AtomicU64::new(self.forward_calls()),
        }
    }
}

impl<T: Real> std::fmt::Debug for ConsistencyNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConsistencyNet")
            .field("cfg", &self.cfg)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl<T: Real> ConsistencyNet<T> {
    /// Random fan-in-scaled weights, zero biases, unit norm scales and a
    /// zero output projection.
    pub fn init(cfg: &NetConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::default();
        let e = cfg.time_embed_dim;
        let temb1 = Linear::new(&mut p, "temb.fc1", e, e, init_weights(rng, e * e, e));
        let temb2 = Linear::new(&mut p, "temb.fc2", e, e, init_weights(rng, e * e, e));
        let input = conv(&mut p, rng, "input", cfg.in_channels, cfg.channels(0), 3, 1);

        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = cfg.channels(0);
        for l in 0..DEPTH {
            let ch = cfg.channels(l);
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(&mut p, rng, &format!("down{l}.block{b}"), prev, ch, e));
                prev = ch;
            }
            down_blocks.push(blocks);
            downsample.push(conv(&mut p, rng, &format!("down{l}.pool"), ch, ch, 3, 2));
        }
        let ch_mid = cfg.channels(DEPTH);
        let mid = (0..2)
            .map(|b| {
                let block = ResBlock::new(&mut p, rng, &format!("mid.block{b}"), prev, ch_mid, e);
                prev = ch_mid;
                block
            })
            .collect();

        let mut upsample = vec![];
        let mut up_blocks = vec![];
        for l in (0..DEPTH).rev() {
            upsample.push(conv(&mut p, rng, &format!("up{l}.conv"), prev, prev, 3, 1));
            let ch = cfg.channels(l);
            let mut blocks = Vec::new();
            let mut cin = prev + ch;
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(&mut p, rng, &format!("up{l}.block{b}"), cin, ch, e));
                cin = ch;
            }
            up_blocks.push(blocks);
            prev = ch;
        }
        let out_norm = GroupNorm::new(&mut p, "out.norm", prev, groups(prev));
        let zeros = vec![T::zero(); cfg.out_channels * prev * 9];
        let out_conv = Conv::new(&mut p, "out.conv", prev, cfg.out_channels, 3, 1, zeros);
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            arch: Arch {
                temb1,
                temb2,
                input,
                down_blocks,
                downsample,
                mid,
                upsample,
                up_blocks,
                out_norm,
                out_conv,
            },
            forward_calls: AtomicU64::new(0),
        })
    }

    /// A network with this layout and the given parameter values.
    pub fn with_params(cfg: &NetConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::init(cfg, &mut SeededRng::new(0))?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(NnError::Shape("parameter set does not match the network layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Network evaluations since construction or the last reset.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    /// Raw network on a 6-channel activation whose sides are multiples of
    /// `2^DEPTH`; also returns the tape for [`ConsistencyNet::backward`].
    pub fn forward(&self, input: &Act<T>, t: f64) -> Result<(Act<T>, Tape<T>)> {
        self.run(&self.params, input, t)
    }

    /// [`ConsistencyNet::forward`] with another parameter set of the same
    /// layout, such as the EMA shadow. The tape is not usable for
    /// [`ConsistencyNet::backward`].
    pub fn forward_with(&self, params: &ParamSet<T>, input: &Act<T>, t: f64) -> Result<Act<T>> {
        if !self.params.same_layout(params) {
            return Err(NnError::Shape("parameter set does not match the network layout".into()));
        }
        Ok(self.run(params, input, t)?.0)
    }

    fn run(&self, p: &ParamSet<T>, input: &Act<T>, t: f64) -> Result<(Act<T>, Tape<T>)> {
        let m = self.cfg.size_multiple();
        if input.c != self.cfg.in_channels || !input.h.is_multiple_of(m) || !input.w.is_multiple_of(m) || input.h == 0 || input.w == 0 {
            return Err(NnError::Shape(format!(
                "input must be {}×H×W with H, W positive multiples of {m}; got {}×{}×{}",
                self.cfg.in_channels, input.c, input.h, input.w
            )));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let a = &self.arch;
        let temb0: Vec<T> = time_embedding(t, self.cfg.time_embed_dim);
        let t1 = a.temb1.forward(p, &temb0);
        let t2 = a.temb2.forward(p, &silu_vec(&t1));
        let temb = silu_vec(&t2);

        let (mut h, input_cache) = a.input.forward(p, input);
        let mut skips = Vec::with_capacity(DEPTH);
        let mut down = Vec::with_capacity(DEPTH);
        let mut downsample = Vec::with_capacity(DEPTH);
        for l in 0..DEPTH {
            let mut caches = Vec::new();
            for block in &a.down_blocks[l] {
                let (y, c) = block.forward(p, &h, &temb);
                h = y;
                caches.push(c);
            }
            down.push(caches);
            let (y, c) = a.downsample[l].forward(p, &h);
            skips.push(std::mem::replace(&mut h, y));
            downsample.push(c);
        }
        let mut mid = Vec::new();
        for block in &a.mid {
            let (y, c) = block.forward(p, &h, &temb);
            h = y;
            mid.push(c);
        }
        let mut upsample = Vec::with_capacity(DEPTH);
        let mut up = Vec::with_capacity(DEPTH);
        let mut skip_channels = Vec::with_capacity(DEPTH);
        for (i, l) in (0..DEPTH).rev().enumerate() {
            let (y, c) = a.upsample[i].forward(p, &upsample2(&h));
            upsample.push(c);
            skip_channels.push(y.c);
            h = y.concat(&skips[l]);
            let mut caches = Vec::new();
            for block in &a.up_blocks[i] {
                let (y, c) = block.forward(p, &h, &temb);
                h = y;
                caches.push(c);
            }
            up.push(caches);
        }
        let (out_h, out_norm) = a.out_norm.forward(p, &h);
        let (out, out_conv) = a.out_conv.forward(p, &silu(&out_h));
        Ok((
            out,
            Tape {
                temb0,
                t1,
                t2,
                temb,
                input: input_cache,
                down,
                downsample,
                mid,
                upsample,
                up,
                skip_channels,
                out_norm,
                out_h,
                out_conv,
            },
        ))
    }

    /// Parameter gradients of `<grad, forward(input)>`.
    pub fn backward(&self, tape: &Tape<T>, grad: &Act<T>) -> ParamSet<T> {
        let p = &self.params;
        let a = &self.arch;
        let mut g = p.zeros_like();
        let mut dtemb = vec![T::zero(); self.cfg.time_embed_dim];

        let da = a.out_conv.backward(p, &tape.out_conv, grad, &mut g, true).expect("input grad");
        let mut dh = a.out_norm.backward(p, &tape.out_norm, &silu_backward(&tape.out_h, &da), &mut g);
        let mut dskips: Vec<Option<Act<T>>> = (0..DEPTH).map(|_| None).collect();
        // Decoder stage i ran at level DEPTH - 1 - i; undo them last to first.
        for i in (0..DEPTH).rev() {
            let l = DEPTH - 1 - i;
            for (block, cache) in a.up_blocks[i].iter().zip(&tape.up[i]).rev() {
                dh = block.backward(p, cache, &tape.temb, &dh, &mut g, &mut dtemb);
            }
            let (dup, dskip) = dh.split(tape.skip_channels[i]);
            dskips[l] = Some(dskip);
            let dconv = a.upsample[i].backward(p, &tape.upsample[i], &dup, &mut g, true).expect("input grad");
            dh = upsample2_backward(&dconv);
        }
        for (block, cache) in a.mid.iter().zip(&tape.mid).rev() {
            dh = block.backward(p, cache, &tape.temb, &dh, &mut g, &mut dtemb);
        }
        for l in (0..DEPTH).rev() {
            dh = a.downsample[l]
                .backward(p, &tape.downsample[l], &dh, &mut g, true)
                .expect("input grad");
            dh.add_assign(dskips[l].as_ref().expect("skip gradient"));
            for (block, cache) in a.down_blocks[l].iter().zip(&tape.down[l]).rev() {
                dh = block.backward(p, cache, &tape.temb, &dh, &mut g, &mut dtemb);
            }
        }
        a.input.backward(p, &tape.input, &dh, &mut g, false);

        let dt2 = silu_backward_vec(&tape.t2, &dtemb);
        let da1 = a.temb2.backward(p, &silu_vec(&tape.t1), &dt2, &mut g);
        let dt1 = silu_backward_vec(&tape.t1, &da1);
        a.temb1.backward(p, &tape.temb0, &dt1, &mut g);
        g
    }

    /// Value and parameter gradient of `loss(forward(input, t))`, where
    /// `loss` returns its value and its gradient with respect to the output.
    pub fn gradients(
        &self,
        input: &Act<T>,
        t: f64,
        loss: impl FnOnce(&Act<T>) -> (f64, Act<T>),
    ) -> Result<(f64, ParamSet<T>)> {
        let (out, tape) = self.forward(input, t)?;
        let (value, grad) = loss(&out);
        if !value.is_finite() || grad.data.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite(format!("loss {value} at t = {t}")));
        }
        Ok((value, self.backward(&tape, &grad)))
    }

    /// `x_t ⊕ y0` as a network input, both `H×W×3` images.
    pub fn stack_input(x_t: &ImageF, y0: &ImageF) -> Result<Act<T>> {
        if x_t.channels() != 3 || y0.channels() != 3 {
            return Err(NnError::Shape("x_t and y0 must be RGB".into()));
        }
        x_t.ensure_same_shape(y0, "x_t vs y0")?;
        Ok(image_to_act(x_t).concat(&image_to_act(y0)))
    }

    /// Raw network output for arbitrary sizes: reflect-pads to the next
    /// multiple of `2^DEPTH`, evaluates once and crops back.
    pub fn raw_forward(&self, x_t: &ImageF, t: f64, y0: &ImageF) -> Result<ImageF> {
        self.raw_forward_with(&self.params, x_t, t, y0)
    }

    pub fn raw_forward_with(&self, params: &ParamSet<T>, x_t: &ImageF, t: f64, y0: &ImageF) -> Result<ImageF> {
        x_t.ensure_same_shape(y0, "x_t vs y0")?;
        let (h, w) = (x_t.height(), x_t.width());
        let m = self.cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let (xp, yp) = if (ph, pw) == (h, w) {
            (x_t.clone(), y0.clone())
        } else {
            (x_t.reflect_pad_to(ph, pw)?, y0.reflect_pad_to(ph, pw)?)
        };
        let out = self.forward_with(params, &Self::stack_input(&xp, &yp)?, t)?;
        Ok(act_to_image(&out).crop(0, 0, h, w)?)
    }

    /// [`ConsistencyNet::raw_forward`] that also keeps the tape, for
    /// training on sizes that need padding.
    pub fn raw_forward_tape(&self, x_t: &ImageF, t: f64, y0: &ImageF) -> Result<(ImageF, PaddedTape<T>)> {
        x_t.ensure_same_shape(y0, "x_t vs y0")?;
        let (h, w) = (x_t.height(), x_t.width());
        let m = self.cfg.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let (xp, yp) = if (ph, pw) == (h, w) {
            (x_t.clone(), y0.clone())
        } else {
            (x_t.reflect_pad_to(ph, pw)?, y0.reflect_pad_to(ph, pw)?)
        };
        let (out, tape) = self.forward(&Self::stack_input(&xp, &yp)?, t)?;
        let raw = act_to_image(&out).crop(0, 0, h, w)?;
        Ok((raw, PaddedTape { tape, padded: (ph, pw) }))
    }

    /// Parameter gradient for an output gradient `grad` of the cropped
    /// output: the crop's adjoint embeds it in zeros.
    pub fn raw_backward(&self, tape: &PaddedTape<T>, grad: &ImageF) -> ParamSet<T> {
        let (ph, pw) = tape.padded;
        let (h, w, c) = grad.shape();
        let mut g = Act::zeros(c, ph, pw);
        for ch in 0..c {
            let plane = g.plane_mut(ch);
            for y in 0..h {
                for x in 0..w {
                    plane[y * pw + x] = T::of(grad.get(y, x, ch));
                }
            }
        }
        self.backward(&tape.tape, &g)
    }

    /// `c_skip(t)·x_t + c_out(t)·raw_forward(x_t, t, y0)`.
    pub fn consistency_out(&self, x_t: &ImageF, t: f64, y0: &ImageF, eps_t: f64) -> Result<ImageF> {
        self.consistency_out_with(&self.params, x_t, t, y0, eps_t)
    }

    pub fn consistency_out_with(
        &self,
        params: &ParamSet<T>,
        x_t: &ImageF,
        t: f64,
        y0: &ImageF,
        eps_t: f64,
    ) -> Result<ImageF> {
        let raw = self.raw_forward_with(params, x_t, t, y0)?;
        let (s, o) = (c_skip(t, eps_t), c_out(t, eps_t));
        Ok(x_t.zip_map(&raw, |x, r| s * x + o * r)?)
    }
}

/// `H×W×C` image to `C×H×W` activation.
pub fn image_to_act<T: Real>(img: &ImageF) -> Act<T> {
    let (h, w, c) = img.shape();
    let mut out = Act::zeros(c, h, w);
    for (i, px) in img.data().chunks_exact(c).enumerate() {
        for (k, &v) in px.iter().enumerate() {
            out.data[k * h * w + i] = T::of(v);
        }
    }
    out
}

pub fn act_to_image<T: Real>(a: &Act<T>) -> ImageF {
    ImageF::from_fn(a.h, a.w, a.c, |y, x, c| a.data[(c * a.h + y) * a.w + x].f64())
}

/// Shadow parameters `θ⁻` tracked by exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ParamSet<T>,
    pub decay: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(params: &ParamSet<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(NnError::Config(format!("EMA decay must be in [0, 1], got {decay}")));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }

    /// `θ⁻ ← μθ⁻ + (1 − μ)θ`, evaluated as `θ⁻ + (1 − μ)(θ − θ⁻)` so that
    /// `θ⁻ = θ` is an exact fixed point.
    pub fn update(&mut self, params: &ParamSet<T>) -> Result<()> {
        if !self.shadow.same_layout(params) {
            return Err(NnError::Shape("EMA shadow does not match the parameters".into()));
        }
        if self.decay == 0.0 {
            self.shadow = params.clone();
            return Ok(());
        }
        let rate = T::of(1.0 - self.decay);
        for (s, p) in self.shadow.params.iter_mut().zip(&params.params) {
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = *a + rate * (b - *a);
            }
        }
        Ok(())
    }
}
