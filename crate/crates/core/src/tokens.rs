//! Shared/unshared conditioning tokens and cross-attention guidance.
//!
//! A conditioning embedding stacks four row blocks: learned shared tokens,
//! per-frame tokens pooled from vision features and projected, then the
//! conditional and unconditional text rows. Segment offsets record where
//! each block landed so ablations can drop or rescale blocks exactly.
//! Matrices are row-major with rows as tokens.

use crate::error::{CoreError, Result};
use crate::grid::{Grid, Scalar};
use crate::mat::Mat;
use crate::schedule::{ddim_denoise_step, Denoiser, NoiseSchedule};
use crate::tape::{Tape, Var};

pub const D_MODEL: usize = 768;
pub const N_SHARE: usize = 18;
pub const N_VISION: usize = 50;
pub const L_TEXT_REAL: usize = 77;
pub const L_TEXT_TOY: usize = 8;
pub const TOKEN_INIT_STD: f64 = 0.02;

/// Learned token parameters: the shared block and the unshared projection.
#[derive(Clone, Debug)]
pub struct TokenBundle {
    pub t_share: Mat,
    pub w_unshare: Mat,
    pub n_vision: usize,
}

impl TokenBundle {
    /// Shared tokens drawn from `N(0, 0.02^2)`; the projection starts at the
    /// identity so unshared tokens initially pass pooled features through.
    pub fn init(n_share: usize, d: usize, n_vision: usize, seed: u64) -> Result<Self> {
        if n_vision % 2 != 0 {
            return Err(CoreError::InvalidParameter(format!(
                "vision sequence length must be even, got {n_vision}"
            )));
        }
        Ok(Self {
            t_share: init_shared(n_share, d, seed)?,
            w_unshare: Mat::identity(d),
            n_vision,
        })
    }

    pub fn d(&self) -> usize {
        self.t_share.cols()
    }
}

/// Shared token matrix, i.i.d. `N(0, 0.02^2)`.
pub fn init_shared(n_share: usize, d: usize, seed: u64) -> Result<Mat> {
    if n_share == 0 {
        return Err(CoreError::InvalidParameter(
            "shared token count must be at least 1".to_string(),
        ));
    }
    Ok(Mat::randn(n_share, d, TOKEN_INIT_STD, seed))
}

/// Frozen per-frame vision features, one `N_vision x d` matrix per frame.
#[derive(Clone, Debug)]
pub struct VisionFeatures {
    frames: Vec<Mat>,
}

impl VisionFeatures {
    pub fn new(frames: Vec<Mat>) -> Result<Self> {
        if frames.is_empty() {
            return Err(CoreError::EmptyInput("vision features".to_string()));
        }
        let (n, d) = (frames[0].rows(), frames[0].cols());
        if n % 2 != 0 {
            return Err(CoreError::InvalidParameter(format!(
                "vision sequence length must be even, got {n}"
            )));
        }
        for f in &frames {
            if f.rows() != n || f.cols() != d {
                return Err(CoreError::shape_mismatch(
                    format!("{n}x{d}"),
                    format!("{}x{}", f.rows(), f.cols()),
                ));
            }
            if f.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("vision features".to_string()));
            }
        }
        Ok(Self { frames })
    }

    pub fn frame(&self, i: usize) -> &Mat {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Average adjacent row pairs: row i of the result is the mean of rows 2i
/// and 2i+1.
pub fn pool_adjacent(h_vision: &Mat) -> Result<Mat> {
    let n = h_vision.rows();
    if n == 0 || n % 2 != 0 {
        return Err(CoreError::InvalidParameter(format!(
            "adjacent pooling needs an even positive row count, got {n}"
        )));
    }
    let d = h_vision.cols();
    let mut out = Mat::zeros(n / 2, d);
    for i in 0..n / 2 {
        let r0 = h_vision.row(2 * i);
        let r1 = h_vision.row(2 * i + 1);
        for (o, (&a, &b)) in out.row_mut(i).iter_mut().zip(r0.iter().zip(r1.iter())) {
            *o = 0.5 * (a + b);
        }
    }
    Ok(out)
}

/// The pooling operation as an explicit `n/2 x n` matrix, for use on the
/// tape where pooling becomes a constant matmul.
pub fn pooling_matrix(n: usize) -> Result<Mat> {
    if n == 0 || n % 2 != 0 {
        return Err(CoreError::InvalidParameter(format!(
            "pooling matrix needs an even positive size, got {n}"
        )));
    }
    let mut p = Mat::zeros(n / 2, n);
    for i in 0..n / 2 {
        p.set(i, 2 * i, 0.5);
        p.set(i, 2 * i + 1, 0.5);
    }
    Ok(p)
}

/// Row-wise projection preserving the feature dimension.
pub fn project_unshared(h_sub: &Mat, w_unshare: &Mat) -> Result<Mat> {
    if w_unshare.rows() != h_sub.cols() || w_unshare.cols() != h_sub.cols() {
        return Err(CoreError::shape_mismatch(
            format!("{0}x{0} projection", h_sub.cols()),
            format!("{}x{}", w_unshare.rows(), w_unshare.cols()),
        ));
    }
    h_sub.matmul(w_unshare)
}

/// Half-open row range of one block inside an assembled embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Stacked conditioning rows plus the offsets of each block.
#[derive(Clone, Debug)]
pub struct ConditioningEmbedding {
    pub z_final: Mat,
    pub shared: Segment,
    pub frame: Segment,
    pub cond: Segment,
    pub uncond: Segment,
}

impl ConditioningEmbedding {
    pub fn rows(&self) -> usize {
        self.z_final.rows()
    }

    pub fn segment(&self, s: Segment) -> Result<Mat> {
        self.z_final.row_block(s.start, s.len)
    }
}

/// Stack `[T_share; Z_frame; cond; uncond]`. Zero-row shared or frame
/// blocks are permitted; the ablations use them.
pub fn assemble(
    t_share: &Mat,
    z_frame: &Mat,
    cond_text: &Mat,
    uncond_text: &Mat,
) -> Result<ConditioningEmbedding> {
    let d = cond_text.cols();
    for (name, m) in [
        ("shared tokens", t_share),
        ("frame tokens", z_frame),
        ("unconditional text", uncond_text),
    ] {
        if m.cols() != d && m.rows() > 0 {
            return Err(CoreError::InvalidParameter(format!(
                "{name} have width {} but text rows have width {d}",
                m.cols()
            )));
        }
    }
    let mut z = Mat::zeros(0, d);
    let mut offsets = Vec::with_capacity(4);
    for block in [t_share, z_frame, cond_text, uncond_text] {
        offsets.push(Segment { start: z.rows(), len: block.rows() });
        if block.rows() > 0 {
            z = if z.rows() == 0 { block.clone() } else { z.vstack(block)? };
        }
    }
    Ok(ConditioningEmbedding {
        z_final: z,
        shared: offsets[0],
        frame: offsets[1],
        cond: offsets[2],
        uncond: offsets[3],
    })
}

/// Row-wise query/key/value projections, all `d x d`.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

impl CrossAttentionParams {
    pub fn init(d: usize, std: f64, seed: u64) -> Self {
        Self {
            w_q: Mat::randn(d, d, std, seed),
            w_k: Mat::randn(d, d, std, seed.wrapping_add(1)),
            w_v: Mat::randn(d, d, std, seed.wrapping_add(2)),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self { w_q: Mat::identity(d), w_k: Mat::identity(d), w_v: Mat::identity(d) }
    }
}

/// `softmax(X W_Q (Z W_K)^T / sqrt(d)) (Z W_V)` with rows as tokens.
pub fn cross_attention(x_t: &Mat, z_final: &Mat, p: &CrossAttentionParams) -> Result<Mat> {
    let d = x_t.cols();
    if z_final.cols() != d {
        return Err(CoreError::shape_mismatch(d, z_final.cols()));
    }
    let q = x_t.matmul(&p.w_q)?;
    let k = z_final.matmul(&p.w_k)?;
    let v = z_final.matmul(&p.w_v)?;
    let mut logits = q.matmul_nt(&k)?.scale(1.0 / (d as f64).sqrt());
    logits.softmax_rows();
    logits.matmul(&v)
}

/// Tape version of [`cross_attention`].
pub fn cross_attention_tape(
    tape: &mut Tape,
    x_t: Var,
    z_final: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<Var> {
    let d = tape.value(x_t).cols();
    let q = tape.matmul(x_t, w_q)?;
    let k = tape.matmul(z_final, w_k)?;
    let v = tape.matmul(z_final, w_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Which update the guided sampler applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GuidedMode {
    /// The simplified update `x_{t-1} = x_t - alpha_t * eps`.
    Paper,
    /// The usual reverse step fed with the conditioned noise prediction.
    Standard,
}

/// The simplified update applied verbatim.
pub fn simplified_update<T: Scalar>(
    x_t: &Grid<T>,
    eps: &Grid<T>,
    alpha_t: f64,
) -> Result<Grid<T>> {
    let a = T::from_f64(alpha_t).unwrap();
    x_t.zip_map(eps, |x, e| x - a * e)
}

/// One conditioned reverse step in the selected mode.
pub fn guided_step<T: Scalar>(
    x_t: &Grid<T>,
    t: usize,
    s: &NoiseSchedule,
    d: &dyn Denoiser<T>,
    conditioning: Option<&Mat>,
    mode: GuidedMode,
) -> Result<Grid<T>> {
    let eps = d.predict_noise(x_t, t, conditioning, None)?;
    match mode {
        GuidedMode::Paper => simplified_update(x_t, &eps, s.alpha(t)),
        GuidedMode::Standard => ddim_denoise_step(x_t, &eps, t, s, None),
    }
}

/// True iff the temporal term is gated on at `t`: the closed upper half of
/// the schedule, `t >= 0.5 T`.
pub fn temporal_gate_open(t: usize, t_total: usize) -> bool {
    2 * t >= t_total
}

/// Diffusion MSE everywhere; plus `lambda * temporal_term` on the gated
/// upper half of the schedule.
pub fn piecewise_loss<T: Scalar>(
    eps_true: &Grid<T>,
    eps_pred: &Grid<T>,
    t: usize,
    t_total: usize,
    temporal_term: f64,
    lambda: f64,
) -> Result<f64> {
    if t == 0 || t > t_total {
        return Err(CoreError::TimestepOutOfRange { t, t_total });
    }
    let mse = crate::adapter::diffusion_loss(eps_true, eps_pred)?;
    if temporal_gate_open(t, t_total) {
        Ok(mse + lambda * temporal_term)
    } else {
        Ok(mse)
    }
}

/// Tape version of [`piecewise_loss`]. When the gate is closed the temporal
/// node is simply never connected, so its parameters get exact zero
/// gradients.
pub fn piecewise_loss_tape(
    tape: &mut Tape,
    eps_true: Var,
    eps_pred: Var,
    t: usize,
    t_total: usize,
    temporal_term: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if t == 0 || t > t_total {
        return Err(CoreError::TimestepOutOfRange { t, t_total });
    }
    let mse = tape.mse(eps_pred, eps_true)?;
    match temporal_term {
        Some(term) if temporal_gate_open(t, t_total) => {
            let weighted = tape.scale(term, lambda);
            tape.add(mse, weighted)
        }
        _ => Ok(mse),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    #[test]
    fn init_shared_variance_and_determinism() {
        let t = init_shared(N_SHARE, D_MODEL, 1).unwrap();
        assert_eq!(t.rows(), 18);
        assert_eq!(t.cols(), 768);
        let var: f64 = t.data().iter().map(|&v| v * v).sum::<f64>() / t.data().len() as f64;
        assert!((0.0003..=0.0005).contains(&var), "init variance {var}");
        assert_eq!(init_shared(N_SHARE, D_MODEL, 1).unwrap(), t);
        assert!(init_shared(0, D_MODEL, 1).is_err());
    }

    #[test]
    fn pool_adjacent_examples() {
        // Constant rows pool to themselves.
        let mut m = Mat::zeros(4, 3);
        for r in 0..4 {
            for c in 0..3 {
                m.set(r, c, 7.5);
            }
        }
        let p = pool_adjacent(&m).unwrap();
        assert!(p.data().iter().all(|&v| v == 7.5));

        // Rows 1,3,2,4 (constant vectors) pool to 2 and 3.
        let rows = [1.0, 3.0, 2.0, 4.0];
        let mut m = Mat::zeros(4, 2);
        for (r, &v) in rows.iter().enumerate() {
            for c in 0..2 {
                m.set(r, c, v);
            }
        }
        let p = pool_adjacent(&m).unwrap();
        assert_eq!(p.row(0), &[2.0, 2.0]);
        assert_eq!(p.row(1), &[3.0, 3.0]);

        // The stock sequence length halves to 25.
        let m = Mat::randn(N_VISION, 8, 1.0, 2);
        assert_eq!(pool_adjacent(&m).unwrap().rows(), 25);

        assert!(pool_adjacent(&Mat::zeros(5, 2)).is_err());
    }

    #[test]
    fn pooling_matrix_agrees_with_direct_pooling() {
        let m = Mat::randn(10, 6, 1.0, 3);
        let direct = pool_adjacent(&m).unwrap();
        let via_matrix = pooling_matrix(10).unwrap().matmul(&m).unwrap();
        assert!(direct.linf_distance(&via_matrix).unwrap() < 1e-15);
    }

    #[test]
    fn project_unshared_examples() {
        let h = Mat::randn(5, 4, 1.0, 4);
        let id = Mat::identity(4);
        assert_eq!(project_unshared(&h, &id).unwrap(), h);
        let doubled = project_unshared(&h, &id.scale(2.0)).unwrap();
        assert!(doubled.linf_distance(&h.scale(2.0)).unwrap() < 1e-15);

        let h2 = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Mat::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let z = project_unshared(&h2, &w).unwrap();
        assert_eq!(z.data(), &[13.0, 16.0]);

        assert!(project_unshared(&h, &Mat::zeros(3, 4)).is_err());
    }

    #[test]
    fn assemble_row_counts_and_recovery() {
        let d = D_MODEL;
        let t_share = init_shared(N_SHARE, d, 5).unwrap();
        let z_frame = Mat::randn(N_VISION / 2, d, 0.1, 6);
        let cond = Mat::randn(L_TEXT_REAL, d, 0.1, 7);
        let uncond = Mat::randn(L_TEXT_REAL, d, 0.1, 8);

        let emb = assemble(&t_share, &z_frame, &cond, &uncond).unwrap();
        assert_eq!(emb.rows(), 18 + 25 + 154);
        assert_eq!(emb.segment(emb.shared).unwrap(), t_share);
        assert_eq!(emb.segment(emb.frame).unwrap(), z_frame);
        assert_eq!(emb.segment(emb.cond).unwrap(), cond);
        assert_eq!(emb.segment(emb.uncond).unwrap(), uncond);

        // Ablations drop blocks by passing zero-row matrices.
        let no_frame = assemble(&t_share, &Mat::zeros(0, d), &cond, &uncond).unwrap();
        assert_eq!(no_frame.rows(), 18 + 154);
        let no_shared = assemble(&Mat::zeros(0, d), &z_frame, &cond, &uncond).unwrap();
        assert_eq!(no_shared.rows(), 25 + 154);
        assert_eq!(no_shared.segment(no_shared.frame).unwrap(), z_frame);

        let bad = Mat::zeros(2, d + 1);
        assert!(assemble(&bad, &z_frame, &cond, &uncond).is_err());
    }

    #[test]
    fn cross_attention_single_row_and_uniform_cases() {
        let d = 4;
        let x = Mat::randn(3, d, 1.0, 9);
        let p = CrossAttentionParams::identity(d);

        // One conditioning row: softmax over one element is 1.
        let z = Mat::randn(1, d, 1.0, 10);
        let out = cross_attention(&x, &z, &p).unwrap();
        for r in 0..3 {
            for c in 0..d {
                assert!((out.get(r, c) - z.get(0, c)).abs() < 1e-12);
            }
        }

        // Zero key projection: uniform attention, output = mean value row.
        let z2 = Mat::randn(2, d, 1.0, 11);
        let pz = CrossAttentionParams {
            w_q: Mat::identity(d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::identity(d),
        };
        let out = cross_attention(&x, &z2, &pz).unwrap();
        for r in 0..3 {
            for c in 0..d {
                let mean = 0.5 * (z2.get(0, c) + z2.get(1, c));
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_hand_case() {
        // Explicit 2x2 projections against inline softmax arithmetic.
        let x = Mat::from_vec(1, 2, vec![1.0, -0.5]).unwrap();
        let z = Mat::from_vec(2, 2, vec![0.5, 1.0, -1.0, 0.25]).unwrap();
        let p = CrossAttentionParams {
            w_q: Mat::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap(),
            w_k: Mat::from_vec(2, 2, vec![0.75, -0.25, 0.5, 1.0]).unwrap(),
            w_v: Mat::from_vec(2, 2, vec![0.2, 0.0, -0.4, 0.6]).unwrap(),
        };
        let out = cross_attention(&x, &z, &p).unwrap();

        let q = [1.0 * 1.0 + (-0.5) * 0.0, 1.0 * 0.5 + (-0.5) * 1.0];
        let k = [
            [0.5 * 0.75 + 1.0 * 0.5, 0.5 * (-0.25) + 1.0 * 1.0],
            [-1.0 * 0.75 + 0.25 * 0.5, -1.0 * (-0.25) + 0.25 * 1.0],
        ];
        let v = [
            [0.5 * 0.2 + 1.0 * (-0.4), 0.5 * 0.0 + 1.0 * 0.6],
            [-1.0 * 0.2 + 0.25 * (-0.4), -1.0 * 0.0 + 0.25 * 0.6],
        ];
        let sqrt_d = 2.0f64.sqrt();
        let l0 = (q[0] * k[0][0] + q[1] * k[0][1]) / sqrt_d;
        let l1 = (q[0] * k[1][0] + q[1] * k[1][1]) / sqrt_d;
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let expected = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
        assert!((out.get(0, 0) - expected[0]).abs() <= 1e-10);
        assert!((out.get(0, 1) - expected[1]).abs() <= 1e-10);
    }

    #[test]
    fn attention_rows_are_distributions() {
        for seed in 0..5u64 {
            let d = 3 + seed as usize;
            let x = Mat::randn(4, d, 2.0, 700 + seed);
            let z = Mat::randn(6, d, 2.0, 800 + seed);
            let p = CrossAttentionParams::init(d, 0.5, 900 + seed);
            let q = x.matmul(&p.w_q).unwrap();
            let k = z.matmul(&p.w_k).unwrap();
            let mut attn = q.matmul_nt(&k).unwrap().scale(1.0 / (d as f64).sqrt());
            attn.softmax_rows();
            for r in 0..attn.rows() {
                let s: f64 = attn.row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(attn.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn tape_attention_agrees_with_plain() {
        let d = 5;
        let x = Mat::randn(3, d, 1.0, 20);
        let z = Mat::randn(7, d, 1.0, 21);
        let p = CrossAttentionParams::init(d, 0.3, 22);
        let plain = cross_attention(&x, &z, &p).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let zv = tape.leaf(z);
        let wq = tape.leaf(p.w_q.clone());
        let wk = tape.leaf(p.w_k.clone());
        let wv = tape.leaf(p.w_v.clone());
        let out = cross_attention_tape(&mut tape, xv, zv, wq, wk, wv).unwrap();
        assert!(tape.value(out).linf_distance(&plain).unwrap() < 1e-12);
    }

    #[test]
    fn simplified_update_examples() {
        let x = Grid::scalar(1.0f64);
        let e = Grid::scalar(0.5f64);
        let out = simplified_update(&x, &e, 0.1).unwrap();
        assert!((out.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(simplified_update(&x, &e, 0.0).unwrap().data()[0], 1.0);
        let z = Grid::<f64>::zeros(GridShape::new(1, 1, 2, 2));
        let xg = Grid::filled(GridShape::new(1, 1, 2, 2), 3.0f64);
        assert_eq!(simplified_update(&xg, &z, 0.7).unwrap(), xg);
    }

    #[test]
    fn piecewise_loss_gating() {
        let t_total = 1000;
        let a = Grid::<f64>::zeros(GridShape::new(1, 1, 2, 2));
        let b = Grid::filled(GridShape::new(1, 1, 2, 2), 1.0f64);
        // MSE(a, b) = 1; temporal term 0.1, lambda 1.
        let below = piecewise_loss(&a, &b, 250, t_total, 0.1, 1.0).unwrap();
        assert!((below - 1.0).abs() < 1e-12);
        let above = piecewise_loss(&a, &b, 750, t_total, 0.1, 1.0).unwrap();
        assert!((above - 1.1).abs() < 1e-12);
        // Closed boundary: the gate is on exactly at t = 0.5 T.
        let boundary = piecewise_loss(&a, &b, 500, t_total, 0.1, 1.0).unwrap();
        assert!((boundary - 1.1).abs() < 1e-12);
        assert!(piecewise_loss(&a, &b, 0, t_total, 0.1, 1.0).is_err());
        assert!(piecewise_loss(&a, &b, 1001, t_total, 0.1, 1.0).is_err());

        // The 0.2 + 1 * 0.1 = 0.3 case.
        let half = Grid::filled(GridShape::new(1, 1, 2, 2), 0.2f64.sqrt());
        let v = piecewise_loss(&a, &half, 750, t_total, 0.1, 1.0).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
    }

    #[test]
    fn token_bundle_init() {
        let b = TokenBundle::init(N_SHARE, 32, 10, 3).unwrap();
        assert_eq!(b.t_share.rows(), 18);
        assert_eq!(b.d(), 32);
        assert_eq!(b.w_unshare, Mat::identity(32));
        assert!(TokenBundle::init(N_SHARE, 32, 9, 3).is_err());
    }

    #[test]
    fn vision_features_validation() {
        let f = Mat::randn(6, 4, 1.0, 1);
        let ok = VisionFeatures::new(vec![f.clone(), f.clone()]).unwrap();
        assert_eq!(ok.len(), 2);
        assert!(VisionFeatures::new(vec![]).is_err());
        assert!(VisionFeatures::new(vec![Mat::zeros(5, 4)]).is_err());
        let mut bad = Mat::zeros(6, 4);
        bad.set(0, 0, f64::INFINITY);
        assert!(VisionFeatures::new(vec![bad]).is_err());
        assert!(VisionFeatures::new(vec![f, Mat::zeros(6, 5)]).is_err());
    }
}
