//! Three-level UNet with cross-attention and a ControlNet-style branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Float, Graph, GroupNorm, Linear, ParamId, ParamStore, Segment, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub widths: [usize; 3],
    pub d_text: usize,
    pub heads: usize,
    pub groups: usize,
    /// Width of the conditioning-image stem before it joins the control branch.
    pub stem_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128], d_text: 128, heads: 4, groups: 8, stem_width: 16 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.widths;
        if [a, b, c, self.d_text, self.heads, self.groups, self.stem_width].contains(&0) {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        for ch in [a, b, c, a + b, b + c] {
            if ch % self.groups.min(ch) != 0 {
                return Err(Error::Config(format!("{ch} channels do not split into {} groups", self.groups)));
            }
        }
        if b % self.heads != 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("attention widths must divide into {} heads", self.heads)));
        }
        Ok(())
    }

    pub fn time_dim(&self) -> usize {
        2 * self.widths[0]
    }
}

/// `[B, dim]` sinusoidal embedding of integer timesteps.
pub fn timestep_embedding<T: Float>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); t.len() * dim];
    for (b, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            data[b * dim + i] = T::of(arg.sin());
            data[b * dim + half + i] = T::of(arg.cos());
        }
    }
    Tensor::new([t.len(), dim], data)
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Float, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            gn1: GroupNorm::new(s, &format!("{name}.gn1"), cin, cfg.groups),
            conv1: Conv2d::new(s, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            temb: Linear::new(s, &format!("{name}.temb"), cfg.time_dim(), cout, true, rng),
            gn2: GroupNorm::new(s, &format!("{name}.gn2"), cout, cfg.groups),
            conv2: Conv2d::new(s, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(s, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    /// `temb` is the already activated `[B, time_dim]` embedding.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Var {
        let h = self.gn1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let t = self.temb.forward(g, temb);
        let h = g.add_channel(h, t);
        let h = self.gn2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct CrossAttn {
    gn: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl CrossAttn {
    fn new<T: Float, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, ch: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            gn: GroupNorm::new(s, &format!("{name}.gn"), ch, cfg.groups),
            q: Linear::new(s, &format!("{name}.q"), ch, ch, false, rng),
            k: Linear::new(s, &format!("{name}.k"), cfg.d_text, ch, false, rng),
            v: Linear::new(s, &format!("{name}.v"), cfg.d_text, ch, false, rng),
            o: Linear::new(s, &format!("{name}.o"), ch, ch, true, rng),
            heads: cfg.heads,
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &Context) -> Var {
        let s = g.shape(x).to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let hw = h * w;
        let n = self.gn.forward(g, x);
        let rows = g.nchw_to_rows(n);
        let q = self.q.forward(g, rows);
        let k = self.k.forward(g, ctx.tokens);
        let v = self.v.forward(g, ctx.tokens);
        let q_seg = (0..b).map(|i| Segment::new(i * hw, hw)).collect();
        let a = g.attention(q, k, v, q_seg, ctx.segments.clone(), self.heads);
        let a = self.o.forward(g, a);
        let a = g.rows_to_nchw(a, b, h, w);
        g.add(x, a)
    }
}

/// Cross-attention context for a batch: all samples' tokens stacked, with
/// one row segment per sample.
#[derive(Clone, Debug)]
pub struct Context {
    pub tokens: Var,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
struct Encoder {
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    attn1: CrossAttn,
    down1: Conv2d,
    res2: ResBlock,
    attn2: CrossAttn,
}

impl Encoder {
    fn new<T: Float, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = cfg.widths;
        Self {
            res0: ResBlock::new(s, &format!("{name}.res0"), c0, c0, cfg, rng),
            down0: Conv2d::new(s, &format!("{name}.down0"), c0, c0, 3, 2, 1, rng),
            res1: ResBlock::new(s, &format!("{name}.res1"), c0, c1, cfg, rng),
            attn1: CrossAttn::new(s, &format!("{name}.attn1"), c1, cfg, rng),
            down1: Conv2d::new(s, &format!("{name}.down1"), c1, c1, 3, 2, 1, rng),
            res2: ResBlock::new(s, &format!("{name}.res2"), c1, c2, cfg, rng),
            attn2: CrossAttn::new(s, &format!("{name}.attn2"), c2, cfg, rng),
        }
    }

    /// Features at full, half and quarter resolution.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, h: Var, temb: Var, ctx: &Context) -> [Var; 3] {
        let s0 = self.res0.forward(g, h, temb);
        let h = self.down0.forward(g, s0);
        let h = self.res1.forward(g, h, temb);
        let s1 = self.attn1.forward(g, h, ctx);
        let h = self.down1.forward(g, s1);
        let h = self.res2.forward(g, h, temb);
        let s2 = self.attn2.forward(g, h, ctx);
        [s0, s1, s2]
    }
}

#[derive(Clone, Debug)]
struct ControlBranch {
    conv_in: Conv2d,
    stem1: Conv2d,
    stem2: Conv2d,
    encoder: Encoder,
    zero: [Conv2d; 3],
}

/// Parameters of the ε-prediction network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    encoder: Encoder,
    up1: ResBlock,
    up1_attn: CrossAttn,
    up0: ResBlock,
    out_gn: GroupNorm,
    conv_out: Conv2d,
    control: ControlBranch,
}

impl Denoiser {
    /// Builds all parameters. The control encoder starts as a copy of the
    /// base encoder; its output projections start at exactly zero.
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.widths;
        let td = cfg.time_dim();
        let time1 = Linear::new(store, "unet.time1", c0, td, true, rng);
        let time2 = Linear::new(store, "unet.time2", td, td, true, rng);
        let conv_in = Conv2d::new(store, "unet.conv_in", 3, c0, 3, 1, 1, rng);
        let first_enc = store.len();
        let encoder = Encoder::new(store, "unet.enc", cfg, rng);
        let enc_range = first_enc..store.len();
        let up1 = ResBlock::new(store, "unet.up1", c2 + c1, c1, cfg, rng);
        let up1_attn = CrossAttn::new(store, "unet.up1_attn", c1, cfg, rng);
        let up0 = ResBlock::new(store, "unet.up0", c1 + c0, c0, cfg, rng);
        let out_gn = GroupNorm::new(store, "unet.out_gn", c0, cfg.groups);
        let conv_out = Conv2d::new(store, "unet.conv_out", c0, 3, 3, 1, 1, rng);

        let ctrl_conv_in = Conv2d::new(store, "control.conv_in", 3, c0, 3, 1, 1, rng);
        let stem1 = Conv2d::new(store, "control.stem1", 3, cfg.stem_width, 3, 1, 1, rng);
        let stem2 = Conv2d::new(store, "control.stem2", cfg.stem_width, c0, 3, 1, 1, rng);
        let first_ctrl = store.len();
        let ctrl_enc = Encoder::new(store, "control.enc", cfg, rng);
        for (off, src) in enc_range.enumerate() {
            let value = store.get(ParamId(src)).clone();
            *store.get_mut(ParamId(first_ctrl + off)) = value;
        }
        let zero = [
            Conv2d::zeros(store, "control.zero0", c0, c0, 1),
            Conv2d::zeros(store, "control.zero1", c1, c1, 1),
            Conv2d::zeros(store, "control.zero2", c2, c2, 1),
        ];
        let control = ControlBranch { conv_in: ctrl_conv_in, stem1, stem2, encoder: ctrl_enc, zero };
        Ok(Self { cfg: cfg.clone(), time1, time2, conv_in, encoder, up1, up1_attn, up0, out_gn, conv_out, control })
    }

    /// Parameter ids of the zero-initialized control output projections.
    pub fn zero_conv_params(&self) -> Vec<ParamId> {
        self.control.zero.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    /// Predicted noise for `x_t: [B, 3, H, W]` at timesteps `t`. `cond` is the
    /// `[B, 3, H, W]` conditioning image; `None` bypasses the control branch.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x_t: Var, t: &[usize], cond: Option<Var>, ctx: &Context) -> Var {
        let s = g.shape(x_t).to_vec();
        assert!(s.len() == 4 && s[1] == 3, "denoiser expects [B, 3, H, W], got {s:?}");
        assert_eq!(t.len(), s[0], "one timestep per sample");
        assert!(s[2] % 4 == 0 && s[3] % 4 == 0, "image sides must be divisible by 4");
        assert_eq!(ctx.segments.len(), s[0], "one context segment per sample");
        let temb = g.constant(timestep_embedding(t, self.cfg.widths[0]));
        let temb = self.time1.forward(g, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, temb);
        let temb = g.silu(temb);

        let h = self.conv_in.forward(g, x_t);
        let [mut s0, mut s1, mut s2] = self.encoder.forward(g, h, temb, ctx);
        if let Some(cond) = cond {
            assert_eq!(g.shape(cond), s.as_slice(), "conditioning image shape");
            let c = &self.control;
            let hc = c.conv_in.forward(g, x_t);
            let st = c.stem1.forward(g, cond);
            let st = g.silu(st);
            let st = c.stem2.forward(g, st);
            let hc = g.add(hc, st);
            let feats = c.encoder.forward(g, hc, temb, ctx);
            let res: Vec<Var> = feats.iter().zip(&c.zero).map(|(&f, z)| z.forward(g, f)).collect();
            s0 = g.add(s0, res[0]);
            s1 = g.add(s1, res[1]);
            s2 = g.add(s2, res[2]);
        }
        let u = g.upsample2x(s2);
        let u = g.concat_channels(u, s1);
        let u = self.up1.forward(g, u, temb);
        let u = self.up1_attn.forward(g, u, ctx);
        let u = g.upsample2x(u);
        let u = g.concat_channels(u, s0);
        let u = self.up0.forward(g, u, temb);
        let u = self.out_gn.forward(g, u);
        let u = g.silu(u);
        self.conv_out.forward(g, u)
    }
}
