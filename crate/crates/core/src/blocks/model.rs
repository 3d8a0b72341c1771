use rand::Rng;

use super::config::{Conditioning, GatePlacement, ModelConfig, SublayerKind};
use super::embed::{patchify, positional_embedding, timestep_features, unpatchify};
use super::tokens::{prepend_cond, relayout, split_cond, Axes, Layout, TokenSequence};
use crate::attention::{multi_head_attention, AttentionParams};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamSet};
use crate::ssm::{bidirectional_scan, ScanMode, SsmParams};
use crate::tensor::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Gated bidirectional Mamba mixer.
#[derive(Clone, Debug)]
pub struct MambaParams {
    pub in_proj: Linear,
    /// `[D_inner, K]`
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub fwd: SsmParams,
    pub bwd: SsmParams,
    pub out_proj: Linear,
    pub d_inner: usize,
}

impl MambaParams {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, di, k) = (cfg.hidden, cfg.d_inner(), cfg.conv_kernel);
        let in_proj = Linear::new(ps, &format!("{name}.in_proj"), d, 2 * di, false, Init::Xavier, rng);
        let lim = 1.0 / (k as f64).sqrt();
        let conv_w = ps.add(format!("{name}.conv.weight"), Tensor::uniform(&[di, k], -lim, lim, rng));
        let conv_b = ps.add(format!("{name}.conv.bias"), Tensor::zeros(&[di]));
        let fwd = SsmParams::new(ps, &format!("{name}.ssm_fwd"), di, cfg.d_state, cfg.dt_rank(), rng);
        let bwd = SsmParams::new(ps, &format!("{name}.ssm_bwd"), di, cfg.d_state, cfg.dt_rank(), rng);
        let out_proj = Linear::new(ps, &format!("{name}.out_proj"), di, d, false, Init::Zeros, rng);
        Self {
            in_proj,
            conv_w,
            conv_b,
            fwd,
            bwd,
            out_proj,
            d_inner: di,
        }
    }
}

/// Mixer body on `x: [R, L, D]`: projection to two `E·D` branches, causal
/// conv and SiLU on one, bidirectional scan, SiLU gate from the other,
/// projection back to `D`.
pub fn mamba_mixer<T: Real>(g: &mut Graph<T>, p: &Bound, mp: &MambaParams, x: Var, mode: ScanMode) -> Result<Var> {
    let xz = mp.in_proj.forward(g, p, x)?;
    let xs = g.slice_last(xz, 0, mp.d_inner)?;
    let z = g.slice_last(xz, mp.d_inner, mp.d_inner)?;
    let xs = g.causal_conv1d(xs, p[mp.conv_w], p[mp.conv_b])?;
    let xs = g.silu(xs);
    let y = bidirectional_scan(g, p, &mp.fwd, &mp.bwd, xs, mode)?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    mp.out_proj.forward(g, p, y)
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub enum SublayerBody {
    Attention(AttentionParams),
    Mamba(MambaParams),
    Mlp(MlpParams),
}

#[derive(Clone, Debug)]
pub enum NormParams {
    /// Per-sublayer head `D -> 3D` on the shared condition trunk: (γ, β, α) offsets.
    Modulated(Linear),
    /// LayerNorm with affine gain and bias.
    Plain { gain: ParamId, bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct Sublayer {
    pub kind: SublayerKind,
    pub norm: NormParams,
    pub body: SublayerBody,
}

impl Sublayer {
    pub fn layout(&self) -> Layout {
        match self.kind {
            SublayerKind::SpatialAttention | SublayerKind::SpatialMamba => Layout::Spatial,
            SublayerKind::TemporalAttention | SublayerKind::TemporalMamba => Layout::Temporal,
            SublayerKind::GlobalMamba | SublayerKind::Mlp => Layout::Full,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinalLayer {
    pub norm: NormParams,
    pub proj: Linear,
}

/// The full denoising backbone and its parameters.
#[derive(Clone, Debug)]
pub struct Matten<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub patch_embed: Linear,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub class_table: Option<ParamId>,
    /// Shared modulation trunk (M-AdaN) or condition-token projection.
    pub cond_head: Linear,
    pub sublayers: Vec<Sublayer>,
    pub final_layer: FinalLayer,
}

/// Model outputs for a batch `[B, F, H, W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub eps: Var,
    pub sigma_raw: Var,
    /// Embedded tokens entering the first sublayer.
    pub tokens_in: TokenSequence,
    /// Tokens leaving the last sublayer.
    pub tokens_out: TokenSequence,
}

fn plain_norm<T: Real>(ps: &mut ParamSet<T>, name: &str, d: usize) -> NormParams {
    NormParams::Plain {
        gain: ps.add(format!("{name}.gain"), Tensor::ones(&[d])),
        bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    }
}

/// `γ ⊙ LayerNorm(f) + β` for `f: [B, .., D]` and per-sample `γ`, `β`: `[B, D]`.
pub fn m_adan<T: Real>(g: &mut Graph<T>, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm(f, None, None, LN_EPS)?;
    let m = g.mul_per_sample(n, gamma)?;
    g.add_per_sample(m, beta)
}

impl<T: Real> Matten<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let plan = config.plan()?;
        let mut ps = ParamSet::new();
        let d = config.hidden;
        let p2 = config.patch * config.patch;
        let patch_embed = Linear::new(&mut ps, "patch_embed", p2 * config.in_channels, d, true, Init::Xavier, rng);
        let t_fc1 = Linear::new(&mut ps, "t_embed.fc1", config.freq_dim, d, true, Init::Normal(0.02), rng);
        let t_fc2 = Linear::new(&mut ps, "t_embed.fc2", d, d, true, Init::Normal(0.02), rng);
        let class_table = config
            .num_classes
            .map(|n| ps.add("class_embed", Tensor::randn(&[n, d], 0.02, rng)));
        let modulated = config.conditioning == Conditioning::MAdan;
        let cond_head = Linear::new(
            &mut ps,
            if modulated { "cond.trunk" } else { "cond.proj" },
            d,
            d,
            true,
            Init::Xavier,
            rng,
        );
        let mut sublayers = Vec::with_capacity(plan.len());
        for (i, &kind) in plan.iter().enumerate() {
            let name = format!("blocks.{i}.{}", kind.short());
            let norm = if modulated {
                NormParams::Modulated(Linear::new(&mut ps, &format!("{name}.adan"), d, 3 * d, true, Init::Zeros, rng))
            } else {
                plain_norm(&mut ps, &format!("{name}.norm"), d)
            };
            let body = match kind {
                SublayerKind::SpatialAttention | SublayerKind::TemporalAttention => SublayerBody::Attention(
                    AttentionParams::new(&mut ps, &format!("{name}.attn"), d, config.heads(), Init::Zeros, rng)?,
                ),
                SublayerKind::Mlp => SublayerBody::Mlp(MlpParams {
                    fc1: Linear::new(&mut ps, &format!("{name}.fc1"), d, 4 * d, true, Init::Xavier, rng),
                    fc2: Linear::new(&mut ps, &format!("{name}.fc2"), 4 * d, d, true, Init::Zeros, rng),
                }),
                _ => SublayerBody::Mamba(MambaParams::new(&mut ps, &format!("{name}.mamba"), &config, rng)),
            };
            sublayers.push(Sublayer { kind, norm, body });
        }
        let norm = if modulated {
            NormParams::Modulated(Linear::new(&mut ps, "final.adan", d, 2 * d, true, Init::Zeros, rng))
        } else {
            plain_norm(&mut ps, "final.norm", d)
        };
        let proj = Linear::new(&mut ps, "final.proj", d, p2 * config.out_channels(), true, Init::Zeros, rng);
        Ok(Self {
            config,
            params: ps,
            patch_embed,
            t_fc1,
            t_fc2,
            class_table,
            cond_head,
            sublayers,
            final_layer: FinalLayer { norm, proj },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Condition vector `[B, D]`: timestep MLP plus optional class embedding.
    pub fn embed_condition(&self, g: &mut Graph<T>, p: &Bound, t: &[usize], class: Option<&[usize]>) -> Result<Var> {
        if t.is_empty() {
            return Err(shape_err!("embed_condition: empty batch"));
        }
        let feats = g.constant(&timestep_features(t, self.config.freq_dim));
        let h = self.t_fc1.forward(g, p, feats)?;
        let h = g.silu(h);
        let c = self.t_fc2.forward(g, p, h)?;
        let Some(ids) = class else {
            return Ok(c);
        };
        let (Some(table), Some(n)) = (self.class_table, self.config.num_classes) else {
            return Err(Error::Index("class labels given to an unconditional model".into()));
        };
        if ids.len() != t.len() {
            return Err(shape_err!("{} class labels for {} timesteps", ids.len(), t.len()));
        }
        if let Some(bad) = ids.iter().find(|&&y| y >= n) {
            return Err(Error::Index(format!("class {bad} out of range for {n} classes")));
        }
        let e = g.gather_rows(p[table], ids, &[ids.len(), self.config.hidden])?;
        g.add(c, e)
    }

    /// Patch tokens plus positional embedding, in full layout.
    pub fn patchify_and_embed(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<TokenSequence> {
        let s = g.shape(x).to_vec();
        let [b, f, h, w, c] = s[..] else {
            return Err(shape_err!("model input must be [B, F, H, W, C], got {s:?}"));
        };
        let pz = self.config.patch;
        if c != self.config.in_channels {
            return Err(shape_err!("model expects {} channels, got {c}", self.config.in_channels));
        }
        let patches = patchify(g, x, pz)?;
        let tok = self.patch_embed.forward(g, p, patches)?;
        let axes = Axes {
            batch: b,
            n_f: f,
            n_h: h / pz,
            n_w: w / pz,
            d: self.config.hidden,
        };
        let pe = g.constant(&positional_embedding(f, axes.n_h, axes.n_w, axes.d)?);
        let tok = g.add_bcast(tok, pe)?;
        TokenSequence::new(g, tok, Layout::Full, axes)
    }

    fn body(&self, g: &mut Graph<T>, p: &Bound, sub: &Sublayer, x: Var) -> Result<Var> {
        match &sub.body {
            SublayerBody::Attention(ap) => multi_head_attention(g, p, ap, x),
            SublayerBody::Mamba(mp) => mamba_mixer(g, p, mp, x, self.config.scan_mode),
            SublayerBody::Mlp(mp) => {
                let h = mp.fc1.forward(g, p, x)?;
                let h = g.silu(h);
                mp.fc2.forward(g, p, h)
            }
        }
    }

    /// One residual sublayer on full-layout tokens. `cond` is the modulation
    /// trunk output (M-AdaN) or the running condition token.
    pub fn sublayer_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sub: &Sublayer,
        ts: &TokenSequence,
        cond: Var,
    ) -> Result<(TokenSequence, Var)> {
        ts.expect(Layout::Full)?;
        let d = self.config.hidden;
        let x = ts.data;
        let (normed, alpha, cond_in) = match &sub.norm {
            NormParams::Modulated(head) => {
                let mods = head.forward(g, p, cond)?;
                let gr = g.slice_last(mods, 0, d)?;
                let beta = g.slice_last(mods, d, d)?;
                let ar = g.slice_last(mods, 2 * d, d)?;
                let gamma = g.add_scalar(gr, T::one());
                (m_adan(g, x, gamma, beta)?, Some(ar), None)
            }
            NormParams::Plain { gain, bias } => {
                let n = g.layer_norm(x, Some(p[*gain]), Some(p[*bias]), LN_EPS)?;
                let nc = g.layer_norm(cond, Some(p[*gain]), Some(p[*bias]), LN_EPS)?;
                (n, None, Some(nc))
            }
        };
        let inner = relayout(g, &ts.with_data(normed), sub.layout())?;
        let (out, cond_out) = match cond_in {
            Some(nc) => {
                let with = prepend_cond(g, inner.data, nc)?;
                let y = self.body(g, p, sub, with)?;
                let (tok, c) = split_cond(g, y, ts.axes.batch)?;
                (tok, Some(c))
            }
            None => (self.body(g, p, sub, inner.data)?, None),
        };
        let back = relayout(g, &inner.with_data(out), Layout::Full)?;
        let y = match (alpha, self.config.gate) {
            (Some(ar), GatePlacement::Identity) => {
                let a = g.add_scalar(ar, T::one());
                let gated = g.mul_per_sample(x, a)?;
                g.add(gated, back.data)?
            }
            (Some(ar), GatePlacement::Sublayer) => {
                let gated = g.mul_per_sample(back.data, ar)?;
                g.add(x, gated)?
            }
            (None, _) => g.add(x, back.data)?,
        };
        let cond = match cond_out {
            Some(c) => g.add(cond, c)?,
            None => cond,
        };
        Ok((ts.with_data(y), cond))
    }

    /// Per-sublayer conditioning input derived from the condition vector.
    pub fn condition_stream(&self, g: &mut Graph<T>, p: &Bound, c: Var) -> Result<Var> {
        match self.config.conditioning {
            Conditioning::MAdan => {
                let s = g.silu(c);
                let h = self.cond_head.forward(g, p, s)?;
                Ok(g.silu(h))
            }
            Conditioning::ConditionalTokens => self.cond_head.forward(g, p, c),
        }
    }

    /// All sublayers of the configured variant.
    pub fn variant_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ts: &TokenSequence,
        c: Var,
    ) -> Result<(TokenSequence, Var)> {
        let mut cur = relayout(g, ts, Layout::Full)?;
        let mut cond = self.condition_stream(g, p, c)?;
        for sub in &self.sublayers {
            (cur, cond) = self.sublayer_forward(g, p, sub, &cur, cond)?;
        }
        Ok((cur, cond))
    }

    /// Final norm, projection and reassembly into `(eps_hat, sigma_raw)`,
    /// each `[B, F, H, W, C]`.
    pub fn unpatchify_final(&self, g: &mut Graph<T>, p: &Bound, ts: &TokenSequence, cond: Var) -> Result<(Var, Var)> {
        let full = relayout(g, ts, Layout::Full)?;
        let d = self.config.hidden;
        let n = match &self.final_layer.norm {
            NormParams::Modulated(head) => {
                let mods = head.forward(g, p, cond)?;
                let shift = g.slice_last(mods, 0, d)?;
                let sr = g.slice_last(mods, d, d)?;
                let scale = g.add_scalar(sr, T::one());
                m_adan(g, full.data, scale, shift)?
            }
            NormParams::Plain { gain, bias } => g.layer_norm(full.data, Some(p[*gain]), Some(p[*bias]), LN_EPS)?,
        };
        let out = self.final_layer.proj.forward(g, p, n)?;
        let a = ts.axes;
        let pz = self.config.patch;
        let img = unpatchify(g, out, a.n_f, a.n_h * pz, a.n_w * pz, pz)?;
        let c = self.config.in_channels;
        let eps = g.slice_last(img, 0, c)?;
        let sigma = g.slice_last(img, c, c)?;
        Ok((eps, sigma))
    }

    /// Full forward pass on noisy latents `x: [B, F, H, W, C]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, t: &[usize], class: Option<&[usize]>) -> Result<ModelOutput> {
        let b = g.shape(x)[0];
        if t.len() != b {
            return Err(shape_err!("{} timesteps for batch {b}", t.len()));
        }
        let tokens_in = self.patchify_and_embed(g, p, x)?;
        let c = self.embed_condition(g, p, t, class)?;
        let (tokens_out, cond) = self.variant_forward(g, p, &tokens_in, c)?;
        let (eps, sigma_raw) = self.unpatchify_final(g, p, &tokens_out, cond)?;
        Ok(ModelOutput {
            eps,
            sigma_raw,
            tokens_in,
            tokens_out,
        })
    }
}
