//! A small token-space denoiser for driving the pipeline end to end.
//!
//! Latent grids are flattened per item into a tokens-by-channels matrix and
//! pushed through one down/up level: embed, 2x2 pool, self-attention with
//! low-rank adapters on the Q/K/V projections, optional cross-attention to
//! a conditioning embedding, a tanh MLP, nearest upsample, and a skip merge
//! whose output is the feature-capture site. Everything runs on the tape, so
//! the inference path and the training path share one forward definition.
//!
//! Weights are stored output-by-input and applied to row-token matrices as
//! `X W^T`, which keeps them directly compatible with [`AdapterParams`] and
//! [`merge_adapter`].

use serde::{Deserialize, Serialize};

use crate::adapter::{is_active, merge_adapter, ActivationWindow, AdapterParams, DEFAULT_RANK};
use crate::error::{CoreError, Result};
use crate::grid::{Grid, GridShape, Scalar};
use crate::mat::Mat;
use crate::schedule::Denoiser;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    /// Channels of the latent input; also the channels of the predicted noise.
    pub latent_channels: usize,
    /// Extra channels concatenated to the input tokens. Absent control
    /// signals are replaced by zeros, which matches a control-free model.
    pub control_channels: usize,
    /// Latent spatial size. Both sides must be even for the 2x2 pool.
    pub height: usize,
    pub width: usize,
    /// Token width after embedding; attention and the MLP run at twice this.
    pub d_feat: usize,
    /// Width of conditioning rows accepted by cross-attention; 0 removes the
    /// cross-attention block entirely.
    pub d_cond: usize,
    /// Adapter rank on the attention projections.
    pub rank: usize,
    /// Schedule length that activation-window fractions refer to.
    pub t_total: usize,
    pub seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 1,
            control_channels: 1,
            height: 16,
            width: 16,
            d_feat: 16,
            d_cond: 32,
            rank: DEFAULT_RANK,
            t_total: 1000,
            seed: 0,
        }
    }
}

impl ToyDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(CoreError::InvalidParameter("latent_channels must be positive".into()));
        }
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(CoreError::InvalidParameter(format!(
                "latent size {}x{} must be even and positive",
                self.height, self.width
            )));
        }
        if self.d_feat == 0 {
            return Err(CoreError::InvalidParameter("d_feat must be positive".into()));
        }
        if self.rank == 0 || self.rank > 2 * self.d_feat {
            return Err(CoreError::InvalidParameter(format!(
                "rank {} invalid for attention width {}",
                self.rank,
                2 * self.d_feat
            )));
        }
        if self.t_total == 0 {
            return Err(CoreError::InvalidParameter("t_total must be positive".into()));
        }
        Ok(())
    }

    fn tokens(&self) -> usize {
        self.height * self.width
    }

    fn in_channels(&self) -> usize {
        self.latent_channels + self.control_channels
    }
}

/// Dense weights. Attention Q/K/V live in [`AttentionAdapters`] instead so
/// the adapter machinery owns their base matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyWeights {
    pub embed: Mat,
    pub embed_b: Mat,
    pub time_w: Mat,
    pub time_b: Mat,
    pub lift: Mat,
    pub lift_b: Mat,
    pub attn_out: Mat,
    pub cross_q: Mat,
    pub cross_k: Mat,
    pub cross_v: Mat,
    pub mlp1: Mat,
    pub mlp1_b: Mat,
    pub mlp2: Mat,
    pub mlp2_b: Mat,
    pub merge: Mat,
    pub merge_b: Mat,
    pub head: Mat,
    pub head_b: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionAdapters {
    pub q: AdapterParams,
    pub k: AdapterParams,
    pub v: AdapterParams,
}

/// Which leaves receive gradients when the forward pass is taped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainScope {
    /// Every weight trains, adapters included.
    Full,
    /// Base weights stay frozen; only adapter factors train.
    AdapterOnly,
    /// Nothing trains (inference).
    Frozen,
}

pub struct ToyDenoiser {
    pub cfg: ToyDenoiserConfig,
    pub w: ToyWeights,
    pub adapters: AttentionAdapters,
    /// Master switch for the adapter path; the activation window gates it
    /// further per timestep.
    pub adapter_enabled: bool,
    pub window: Option<ActivationWindow>,
    /// Set by the training driver; the edit pipeline refuses models that
    /// never saw a training step.
    pub trained: bool,
    pool: Mat,
    unpool: Mat,
}

/// Persistable view of a denoiser; pooling matrices are rebuilt on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserSnapshot {
    pub cfg: ToyDenoiserConfig,
    pub w: ToyWeights,
    pub adapters: AttentionAdapters,
    pub adapter_enabled: bool,
    pub window: Option<ActivationWindow>,
    #[serde(default)]
    pub trained: bool,
}

/// Leaf handles for one taped forward pass. Build once per tape and reuse
/// across the frames of a clip so gradients accumulate into shared weights.
#[derive(Clone, Copy)]
pub struct DenoiserVars {
    embed: Var,
    embed_b: Var,
    time_w: Var,
    time_b: Var,
    lift: Var,
    lift_b: Var,
    wq0: Var,
    wk0: Var,
    wv0: Var,
    aq: Var,
    bq: Var,
    ak: Var,
    bk: Var,
    av: Var,
    bv: Var,
    attn_out: Var,
    cross_q: Var,
    cross_k: Var,
    cross_v: Var,
    mlp1: Var,
    mlp1_b: Var,
    mlp2: Var,
    mlp2_b: Var,
    merge: Var,
    merge_b: Var,
    head: Var,
    head_b: Var,
    pool: Var,
    unpool: Var,
}

impl DenoiserVars {
    /// Adapter factor handles in a fixed order: Aq, Bq, Ak, Bk, Av, Bv.
    pub fn adapter_vars(&self) -> [Var; 6] {
        [self.aq, self.bq, self.ak, self.bk, self.av, self.bv]
    }

    /// Handles for the weights trainable under `scope`, named to match
    /// [`ToyDenoiser::weight_refs`].
    pub fn trainable(&self, scope: TrainScope) -> Vec<(&'static str, Var)> {
        let adapters = vec![
            ("adapter_aq", self.aq),
            ("adapter_bq", self.bq),
            ("adapter_ak", self.ak),
            ("adapter_bk", self.bk),
            ("adapter_av", self.av),
            ("adapter_bv", self.bv),
        ];
        match scope {
            TrainScope::Frozen => vec![],
            TrainScope::AdapterOnly => adapters,
            TrainScope::Full => {
                let mut all = vec![
                    ("embed", self.embed),
                    ("embed_b", self.embed_b),
                    ("time_w", self.time_w),
                    ("time_b", self.time_b),
                    ("lift", self.lift),
                    ("lift_b", self.lift_b),
                    ("attn_q", self.wq0),
                    ("attn_k", self.wk0),
                    ("attn_v", self.wv0),
                    ("attn_out", self.attn_out),
                    ("cross_q", self.cross_q),
                    ("cross_k", self.cross_k),
                    ("cross_v", self.cross_v),
                    ("mlp1", self.mlp1),
                    ("mlp1_b", self.mlp1_b),
                    ("mlp2", self.mlp2),
                    ("mlp2_b", self.mlp2_b),
                    ("merge", self.merge),
                    ("merge_b", self.merge_b),
                    ("head", self.head),
                    ("head_b", self.head_b),
                ];
                all.extend(adapters);
                all
            }
        }
    }
}

/// Taped outputs for one frame.
pub struct TapedPrediction {
    /// Predicted noise, tokens by latent channels.
    pub eps_tokens: Var,
    /// Skip-merge output on the up path, the feature the temporal loss reads.
    pub decoder_features: Var,
}

/// Averaging map from an h-by-w token grid to its 2x2 block means.
pub fn spatial_pool_matrix(h: usize, w: usize) -> Result<Mat> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::InvalidParameter(format!("pool needs even dims, got {h}x{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let mut p = Mat::zeros(hh * hw, h * w);
    for cy in 0..hh {
        for cx in 0..hw {
            let row = cy * hw + cx;
            for dy in 0..2 {
                for dx in 0..2 {
                    p.set(row, (2 * cy + dy) * w + (2 * cx + dx), 0.25);
                }
            }
        }
    }
    Ok(p)
}

/// Nearest-neighbor expansion back to the fine token grid; the exact
/// transpose-with-unit-weights of [`spatial_pool_matrix`]'s support.
pub fn nearest_upsample_matrix(h: usize, w: usize) -> Result<Mat> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::InvalidParameter(format!(
            "upsample needs even dims, got {h}x{w}"
        )));
    }
    let hw = w / 2;
    let mut u = Mat::zeros(h * w, (h / 2) * hw);
    for y in 0..h {
        for x in 0..w {
            u.set(y * w + x, (y / 2) * hw + x / 2, 1.0);
        }
    }
    Ok(u)
}

/// Sinusoidal features of a raw timestep, `[sin(t w_i), cos(t w_i)]` pairs
/// with geometrically spaced frequencies.
pub fn time_features(t: usize, dim: usize) -> Mat {
    debug_assert!(dim % 2 == 0 && dim > 0);
    let mut m = Mat::zeros(1, dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        m.set(0, 2 * i, arg.sin());
        m.set(0, 2 * i + 1, arg.cos());
    }
    m
}

/// Flatten one batch item to a tokens-by-channels matrix (row-major tokens).
pub fn grid_item_tokens<T: Scalar>(x: &Grid<T>, item: usize) -> Result<Mat> {
    let s = x.shape();
    if item >= s.batch {
        return Err(CoreError::InvalidParameter(format!(
            "item {item} out of range for batch {}",
            s.batch
        )));
    }
    let n = s.height * s.width;
    let mut m = Mat::zeros(n, s.channels);
    for c in 0..s.channels {
        let plane = x.plane(item, c);
        for (tok, &v) in plane.iter().enumerate() {
            m.set(tok, c, v.to_f64().ok_or_else(|| CoreError::NonFinite("token cast".into()))?);
        }
    }
    Ok(m)
}

fn write_tokens_to_item<T: Scalar>(tokens: &Mat, out: &mut Grid<T>, item: usize) -> Result<()> {
    let s = out.shape();
    if tokens.rows() != s.height * s.width || tokens.cols() != s.channels {
        return Err(CoreError::shape_mismatch(
            format!("{}x{} tokens", s.height * s.width, s.channels),
            format!("{}x{}", tokens.rows(), tokens.cols()),
        ));
    }
    for c in 0..s.channels {
        let plane = out.plane_mut(item, c);
        for (tok, slot) in plane.iter_mut().enumerate() {
            *slot = T::from_f64(tokens.get(tok, c))
                .ok_or_else(|| CoreError::NonFinite("token cast".into()))?;
        }
    }
    Ok(())
}

impl ToyDenoiser {
    pub fn init(cfg: ToyDenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.d_feat;
        let f2 = 2 * f;
        let c_in = cfg.in_channels();
        let s = cfg.seed;
        let xavier = |d_in: usize| 1.0 / (d_in as f64).sqrt();

        let w = ToyWeights {
            embed: Mat::randn(f, c_in, xavier(c_in), s),
            embed_b: Mat::zeros(1, f),
            time_w: Mat::randn(f, f2, xavier(f2), s + 1),
            time_b: Mat::zeros(1, f),
            lift: Mat::randn(f2, f, xavier(f), s + 2),
            lift_b: Mat::zeros(1, f2),
            attn_out: Mat::randn(f2, f2, xavier(f2), s + 3),
            cross_q: Mat::randn(f2, f2, xavier(f2), s + 4),
            cross_k: Mat::randn(f2, cfg.d_cond.max(1), xavier(cfg.d_cond.max(1)), s + 5),
            cross_v: Mat::randn(f2, cfg.d_cond.max(1), xavier(cfg.d_cond.max(1)), s + 6),
            mlp1: Mat::randn(4 * f, f2, xavier(f2), s + 7),
            mlp1_b: Mat::zeros(1, 4 * f),
            mlp2: Mat::randn(f2, 4 * f, xavier(4 * f), s + 8),
            mlp2_b: Mat::zeros(1, f2),
            merge: Mat::randn(f, 3 * f, xavier(3 * f), s + 9),
            merge_b: Mat::zeros(1, f),
            head: Mat::randn(cfg.latent_channels, f, 0.05, s + 10),
            head_b: Mat::zeros(1, cfg.latent_channels),
        };
        let adapters = AttentionAdapters {
            q: AdapterParams::init(Mat::randn(f2, f2, xavier(f2), s + 11), cfg.rank, s + 14)?,
            k: AdapterParams::init(Mat::randn(f2, f2, xavier(f2), s + 12), cfg.rank, s + 15)?,
            v: AdapterParams::init(Mat::randn(f2, f2, xavier(f2), s + 13), cfg.rank, s + 16)?,
        };
        Ok(Self {
            pool: spatial_pool_matrix(cfg.height, cfg.width)?,
            unpool: nearest_upsample_matrix(cfg.height, cfg.width)?,
            cfg,
            w,
            adapters,
            adapter_enabled: true,
            window: None,
            trained: false,
        })
    }

    pub fn snapshot(&self) -> DenoiserSnapshot {
        DenoiserSnapshot {
            cfg: self.cfg,
            w: self.w.clone(),
            adapters: self.adapters.clone(),
            adapter_enabled: self.adapter_enabled,
            window: self.window,
            trained: self.trained,
        }
    }

    pub fn from_snapshot(s: DenoiserSnapshot) -> Result<Self> {
        s.cfg.validate()?;
        let fresh = Self::init(s.cfg)?;
        for (have, want) in fresh.weight_shapes().iter().zip(snapshot_shapes(&s).iter()) {
            if have != want {
                return Err(CoreError::shape_mismatch(
                    format!("{}x{}", have.0, have.1),
                    format!("{}x{}", want.0, want.1),
                ));
            }
        }
        Ok(Self {
            pool: fresh.pool,
            unpool: fresh.unpool,
            cfg: s.cfg,
            w: s.w,
            adapters: s.adapters,
            adapter_enabled: s.adapter_enabled,
            window: s.window,
            trained: s.trained,
        })
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.weight_refs().into_iter().map(|(_, m)| (m.rows(), m.cols())).collect()
    }

    /// Named views over every learnable matrix, adapters included.
    pub fn weight_refs(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("embed", &self.w.embed),
            ("embed_b", &self.w.embed_b),
            ("time_w", &self.w.time_w),
            ("time_b", &self.w.time_b),
            ("lift", &self.w.lift),
            ("lift_b", &self.w.lift_b),
            ("attn_q", &self.adapters.q.w0),
            ("attn_k", &self.adapters.k.w0),
            ("attn_v", &self.adapters.v.w0),
            ("adapter_aq", &self.adapters.q.a),
            ("adapter_bq", &self.adapters.q.b),
            ("adapter_ak", &self.adapters.k.a),
            ("adapter_bk", &self.adapters.k.b),
            ("adapter_av", &self.adapters.v.a),
            ("adapter_bv", &self.adapters.v.b),
            ("attn_out", &self.w.attn_out),
            ("cross_q", &self.w.cross_q),
            ("cross_k", &self.w.cross_k),
            ("cross_v", &self.w.cross_v),
            ("mlp1", &self.w.mlp1),
            ("mlp1_b", &self.w.mlp1_b),
            ("mlp2", &self.w.mlp2),
            ("mlp2_b", &self.w.mlp2_b),
            ("merge", &self.w.merge),
            ("merge_b", &self.w.merge_b),
            ("head", &self.w.head),
            ("head_b", &self.w.head_b),
        ]
    }

    pub fn weight_refs_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("embed", &mut self.w.embed),
            ("embed_b", &mut self.w.embed_b),
            ("time_w", &mut self.w.time_w),
            ("time_b", &mut self.w.time_b),
            ("lift", &mut self.w.lift),
            ("lift_b", &mut self.w.lift_b),
            ("attn_q", &mut self.adapters.q.w0),
            ("attn_k", &mut self.adapters.k.w0),
            ("attn_v", &mut self.adapters.v.w0),
            ("adapter_aq", &mut self.adapters.q.a),
            ("adapter_bq", &mut self.adapters.q.b),
            ("adapter_ak", &mut self.adapters.k.a),
            ("adapter_bk", &mut self.adapters.k.b),
            ("adapter_av", &mut self.adapters.v.a),
            ("adapter_bv", &mut self.adapters.v.b),
            ("attn_out", &mut self.w.attn_out),
            ("cross_q", &mut self.w.cross_q),
            ("cross_k", &mut self.w.cross_k),
            ("cross_v", &mut self.w.cross_v),
            ("mlp1", &mut self.w.mlp1),
            ("mlp1_b", &mut self.w.mlp1_b),
            ("mlp2", &mut self.w.mlp2),
            ("mlp2_b", &mut self.w.mlp2_b),
            ("merge", &mut self.w.merge),
            ("merge_b", &mut self.w.merge_b),
            ("head", &mut self.w.head),
            ("head_b", &mut self.w.head_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_refs().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// SHA-256 over the config and every weight, stable across runs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(
            format!(
                "{}x{}x{}x{}+{} d{} c{} r{} t{}",
                self.cfg.latent_channels,
                self.cfg.height,
                self.cfg.width,
                self.cfg.control_channels,
                self.adapter_enabled,
                self.cfg.d_feat,
                self.cfg.d_cond,
                self.cfg.rank,
                self.cfg.t_total
            )
            .as_bytes(),
        );
        for (name, m) in self.weight_refs() {
            hasher.update(name.as_bytes());
            for &v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        for p in [&self.adapters.q, &self.adapters.k, &self.adapters.v] {
            hasher.update(p.scale.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn set_adapter_scale(&mut self, scale: f64) {
        self.adapters.q.scale = scale;
        self.adapters.k.scale = scale;
        self.adapters.v.scale = scale;
    }

    /// Fold `ratio * B A` into the attention bases and zero the factors.
    pub fn merge_adapters(&mut self, ratio: f64) -> Result<()> {
        for p in [&mut self.adapters.q, &mut self.adapters.k, &mut self.adapters.v] {
            p.w0 = merge_adapter(p, ratio)?;
            p.b = Mat::zeros(p.b.rows(), p.b.cols());
        }
        Ok(())
    }

    /// Whether the adapter path runs at timestep `t`.
    pub fn adapter_active(&self, t: usize) -> Result<bool> {
        if !self.adapter_enabled {
            return Ok(false);
        }
        match &self.window {
            Some(w) => is_active(t, self.cfg.t_total, w),
            None => Ok(true),
        }
    }

    /// Register every weight on the tape. `scope` picks which leaves are
    /// trainable; inputs and pooling maps are always constant.
    pub fn vars(&self, tape: &mut Tape, scope: TrainScope) -> DenoiserVars {
        let mut base = |m: &Mat| match scope {
            TrainScope::Full => tape.leaf(m.clone()),
            _ => tape.leaf_const(m.clone()),
        };
        let embed = base(&self.w.embed);
        let embed_b = base(&self.w.embed_b);
        let time_w = base(&self.w.time_w);
        let time_b = base(&self.w.time_b);
        let lift = base(&self.w.lift);
        let lift_b = base(&self.w.lift_b);
        let wq0 = base(&self.adapters.q.w0);
        let wk0 = base(&self.adapters.k.w0);
        let wv0 = base(&self.adapters.v.w0);
        let attn_out = base(&self.w.attn_out);
        let cross_q = base(&self.w.cross_q);
        let cross_k = base(&self.w.cross_k);
        let cross_v = base(&self.w.cross_v);
        let mlp1 = base(&self.w.mlp1);
        let mlp1_b = base(&self.w.mlp1_b);
        let mlp2 = base(&self.w.mlp2);
        let mlp2_b = base(&self.w.mlp2_b);
        let merge = base(&self.w.merge);
        let merge_b = base(&self.w.merge_b);
        let head = base(&self.w.head);
        let head_b = base(&self.w.head_b);

        let mut factor = |m: &Mat| match scope {
            TrainScope::Frozen => tape.leaf_const(m.clone()),
            _ => tape.leaf(m.clone()),
        };
        let aq = factor(&self.adapters.q.a);
        let bq = factor(&self.adapters.q.b);
        let ak = factor(&self.adapters.k.a);
        let bk = factor(&self.adapters.k.b);
        let av = factor(&self.adapters.v.a);
        let bv = factor(&self.adapters.v.b);

        DenoiserVars {
            embed,
            embed_b,
            time_w,
            time_b,
            lift,
            lift_b,
            wq0,
            wk0,
            wv0,
            aq,
            bq,
            ak,
            bk,
            av,
            bv,
            attn_out,
            cross_q,
            cross_k,
            cross_v,
            mlp1,
            mlp1_b,
            mlp2,
            mlp2_b,
            merge,
            merge_b,
            head,
            head_b,
            pool: tape.leaf_const(self.pool.clone()),
            unpool: tape.leaf_const(self.unpool.clone()),
        }
    }

    /// Row-token linear layer `X W^T (+ bias)`, optionally with the adapter
    /// delta `scale * (X A^T) B^T`. The inactive branch never touches the
    /// factors, so gating is exact.
    fn adapted_linear(
        &self,
        tape: &mut Tape,
        x: Var,
        w0: Var,
        a: Var,
        b: Var,
        scale: f64,
        adapter_on: bool,
    ) -> Result<Var> {
        let basev = tape.matmul_nt(x, w0)?;
        if !adapter_on || scale == 0.0 {
            return Ok(basev);
        }
        let low = tape.matmul_nt(x, a)?;
        let delta = tape.matmul_nt(low, b)?;
        let scaled = tape.scale(delta, scale);
        tape.add(basev, scaled)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, w)?;
        tape.add_row_broadcast(y, b)
    }

    /// One frame through the network on an existing tape. `x_tokens` must be
    /// `tokens x (latent_channels + control_channels)`; missing control
    /// columns must already be zero-filled by the caller.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        v: &DenoiserVars,
        x_tokens: Mat,
        t: usize,
        conditioning: Option<Var>,
        adapter_on: bool,
    ) -> Result<TapedPrediction> {
        let n = self.cfg.tokens();
        if x_tokens.rows() != n || x_tokens.cols() != self.cfg.in_channels() {
            return Err(CoreError::shape_mismatch(
                format!("{}x{} tokens", n, self.cfg.in_channels()),
                format!("{}x{}", x_tokens.rows(), x_tokens.cols()),
            ));
        }
        if t == 0 || t > self.cfg.t_total {
            return Err(CoreError::TimestepOutOfRange { t, t_total: self.cfg.t_total });
        }
        let f2 = 2 * self.cfg.d_feat;
        if let Some(c) = conditioning {
            if self.cfg.d_cond == 0 {
                return Err(CoreError::InvalidParameter(
                    "conditioning passed to a model without cross-attention".into(),
                ));
            }
            let cm = tape.value(c);
            if cm.cols() != self.cfg.d_cond {
                return Err(CoreError::shape_mismatch(self.cfg.d_cond, cm.cols()));
            }
        }

        let x = tape.leaf_const(x_tokens);
        let tf = tape.leaf_const(time_features(t, f2));
        let tlin = self.linear(tape, tf, v.time_w, v.time_b)?;
        let trow = tape.tanh(tlin);

        let e_lin = self.linear(tape, x, v.embed, v.embed_b)?;
        let e_shift = tape.add_row_broadcast(e_lin, trow)?;
        let e = tape.tanh(e_shift);

        let pooled = tape.matmul(v.pool, e)?;
        let l_lin = self.linear(tape, pooled, v.lift, v.lift_b)?;
        let l = tape.tanh(l_lin);

        let q = self.adapted_linear(tape, l, v.wq0, v.aq, v.bq, self.adapters.q.scale, adapter_on)?;
        let k = self.adapted_linear(tape, l, v.wk0, v.ak, v.bk, self.adapters.k.scale, adapter_on)?;
        let val =
            self.adapted_linear(tape, l, v.wv0, v.av, v.bv, self.adapters.v.scale, adapter_on)?;
        let logits = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(logits, 1.0 / (f2 as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        let gathered = tape.matmul(attn, val)?;
        let projected = tape.matmul_nt(gathered, v.attn_out)?;
        let h1 = tape.add(l, projected)?;

        let h2 = match conditioning {
            Some(cond) => {
                let cq = tape.matmul_nt(h1, v.cross_q)?;
                let ck = tape.matmul_nt(cond, v.cross_k)?;
                let cv = tape.matmul_nt(cond, v.cross_v)?;
                let clog = tape.matmul_nt(cq, ck)?;
                let cscaled = tape.scale(clog, 1.0 / (f2 as f64).sqrt());
                let cattn = tape.softmax_rows(cscaled);
                let cgather = tape.matmul(cattn, cv)?;
                tape.add(h1, cgather)?
            }
            None => h1,
        };

        let m_lin = self.linear(tape, h2, v.mlp1, v.mlp1_b)?;
        let m_act = tape.tanh(m_lin);
        let m_out = self.linear(tape, m_act, v.mlp2, v.mlp2_b)?;
        let h3 = tape.add(h2, m_out)?;

        let up = tape.matmul(v.unpool, h3)?;
        let cat = tape.hstack(e, up)?;
        let dec_lin = self.linear(tape, cat, v.merge, v.merge_b)?;
        let decoder_features = tape.tanh(dec_lin);
        let eps_tokens = self.linear(tape, decoder_features, v.head, v.head_b)?;

        Ok(TapedPrediction { eps_tokens, decoder_features })
    }

    /// Assemble the token matrix for one batch item, zero-filling control
    /// columns when no control grid is given.
    pub fn input_tokens<T: Scalar>(
        &self,
        x: &Grid<T>,
        control: Option<&Grid<T>>,
        item: usize,
    ) -> Result<Mat> {
        let s = x.shape();
        let want = GridShape {
            batch: s.batch,
            channels: self.cfg.latent_channels,
            height: self.cfg.height,
            width: self.cfg.width,
        };
        if s != want {
            return Err(CoreError::shape_mismatch(
                format!("{want:?}"),
                format!("{s:?}"),
            ));
        }
        let latent = grid_item_tokens(x, item)?;
        let mut out = Mat::zeros(self.cfg.tokens(), self.cfg.in_channels());
        for r in 0..latent.rows() {
            for c in 0..latent.cols() {
                out.set(r, c, latent.get(r, c));
            }
        }
        if let Some(ctrl) = control {
            if self.cfg.control_channels == 0 {
                return Err(CoreError::InvalidParameter(
                    "control passed to a model without control channels".into(),
                ));
            }
            let cs = ctrl.shape();
            if cs.batch != s.batch
                || cs.channels != self.cfg.control_channels
                || cs.height != s.height
                || cs.width != s.width
            {
                return Err(CoreError::shape_mismatch(
                    format!(
                        "control {}x{}x{}x{}",
                        s.batch, self.cfg.control_channels, s.height, s.width
                    ),
                    format!("{cs:?}"),
                ));
            }
            let ctokens = grid_item_tokens(ctrl, item)?;
            for r in 0..ctokens.rows() {
                for c in 0..ctokens.cols() {
                    out.set(r, self.cfg.latent_channels + c, ctokens.get(r, c));
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Denoiser<T> for ToyDenoiser {
    fn predict_noise(
        &self,
        x: &Grid<T>,
        t: usize,
        conditioning: Option<&Mat>,
        control: Option<&Grid<T>>,
    ) -> Result<Grid<T>> {
        let adapter_on = self.adapter_active(t)?;
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, TrainScope::Frozen);
        let cond_var = conditioning.map(|c| tape.leaf_const(c.clone()));
        let shape = x.shape();
        let mut out = Grid::<T>::zeros(GridShape {
            batch: shape.batch,
            channels: self.cfg.latent_channels,
            height: shape.height,
            width: shape.width,
        });
        for item in 0..shape.batch {
            let tokens = self.input_tokens(x, control, item)?;
            let pred = self.forward_tape(&mut tape, &vars, tokens, t, cond_var, adapter_on)?;
            write_tokens_to_item(tape.value(pred.eps_tokens), &mut out, item)?;
        }
        Ok(out)
    }

    fn requires_conditioning(&self) -> bool {
        self.cfg.d_cond > 0
    }

    fn weight_fingerprint(&self) -> Option<String> {
        Some(self.fingerprint())
    }

    fn edit_ready(&self) -> bool {
        self.trained
    }
}

fn snapshot_shapes(s: &DenoiserSnapshot) -> Vec<(usize, usize)> {
    let w = &s.w;
    let a = &s.adapters;
    let mats: Vec<&Mat> = vec![
        &w.embed,
        &w.embed_b,
        &w.time_w,
        &w.time_b,
        &w.lift,
        &w.lift_b,
        &a.q.w0,
        &a.k.w0,
        &a.v.w0,
        &a.q.a,
        &a.q.b,
        &a.k.a,
        &a.k.b,
        &a.v.a,
        &a.v.b,
        &w.attn_out,
        &w.cross_q,
        &w.cross_k,
        &w.cross_v,
        &w.mlp1,
        &w.mlp1_b,
        &w.mlp2,
        &w.mlp2_b,
        &w.merge,
        &w.merge_b,
        &w.head,
        &w.head_b,
    ];
    mats.into_iter().map(|m| (m.rows(), m.cols())).collect()
}
