//! Low-rank adapters, feature capture, and the frame-similarity losses.
//!
//! An adapter adds `scale * B (A x)` to a frozen linear map `W0 x`. `B`
//! starts at zero, so a freshly initialized adapter leaves the host model
//! bit-identical. The temporal loss penalizes change in consecutive-frame
//! feature similarity rather than the similarity itself: perfectly steady
//! drift is free, acceleration is not.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::grid::{Grid, Scalar};
use crate::mat::Mat;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdapterParams {
    pub w0: Mat,
    pub a: Mat,
    pub b: Mat,
    pub rank: usize,
    pub scale: f64,
}

pub const DEFAULT_RANK: usize = 4;
pub const INIT_STD: f64 = 0.02;

impl AdapterParams {
    /// Wrap a frozen weight. `A` is drawn from `N(0, 0.02^2)`, `B` is zero,
    /// so the initial adapter delta vanishes.
    pub fn init(w0: Mat, rank: usize, seed: u64) -> Result<Self> {
        let (d_out, d_in) = (w0.rows(), w0.cols());
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(CoreError::InvalidParameter(format!(
                "rank {rank} invalid for {d_out}x{d_in} weight"
            )));
        }
        Ok(Self {
            a: Mat::randn(rank, d_in, INIT_STD, seed),
            b: Mat::zeros(d_out, rank),
            w0,
            rank,
            scale: 1.0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }
}

/// `W0 x + scale * B (A x)` with `x` holding column samples.
pub fn lora_forward(x: &Mat, p: &AdapterParams) -> Result<Mat> {
    if x.rows() != p.d_in() {
        return Err(CoreError::shape_mismatch(p.d_in(), x.rows()));
    }
    let base = p.w0.matmul(x)?;
    if p.scale == 0.0 {
        return Ok(base);
    }
    let low = p.a.matmul(x)?;
    let delta = p.b.matmul(&low)?;
    base.add(&delta.scale(p.scale))
}

/// Fold the adapter into the frozen weight: `W0 + ratio * B A`.
pub fn merge_adapter(p: &AdapterParams, ratio: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CoreError::InvalidParameter(format!(
            "merge ratio must be in [0, 1], got {ratio}"
        )));
    }
    let delta = p.b.matmul(&p.a)?;
    p.w0.add(&delta.scale(ratio))
}

/// Tape version of [`lora_forward`] for training and gradient checks.
pub fn lora_forward_tape(
    tape: &mut Tape,
    x: Var,
    w0: Var,
    a: Var,
    b: Var,
    scale: f64,
) -> Result<Var> {
    let base = tape.matmul(w0, x)?;
    let low = tape.matmul(a, x)?;
    let delta = tape.matmul(b, low)?;
    let scaled = tape.scale(delta, scale);
    tape.add(base, scaled)
}

/// Cosine similarity over flattened features.
pub fn frame_similarity(f_a: &Mat, f_b: &Mat) -> Result<f64> {
    f_a.check_same_shape(f_b)?;
    let dot: f64 = f_a.data().iter().zip(f_b.data().iter()).map(|(&x, &y)| x * y).sum();
    let na: f64 = f_a.data().iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = f_b.data().iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::InvalidParameter(
            "frame similarity of zero-norm feature".to_string(),
        ));
    }
    Ok(dot / (na * nb))
}

/// Mean squared change of consecutive-frame similarities. With frames
/// `0..n-1` and `s_k = Sim(F_k, F_{k+1})`, the loss is
/// `(1/(n-2)) sum_{k=1}^{n-2} (s_k - s_{k-1})^2`.
pub fn temporal_loss(features: &[Mat]) -> Result<f64> {
    let n = features.len();
    if n < 3 {
        return Err(CoreError::InvalidParameter(format!(
            "temporal loss needs at least 3 frames, got {n}"
        )));
    }
    let mut sims = Vec::with_capacity(n - 1);
    for pair in features.windows(2) {
        sims.push(frame_similarity(&pair[0], &pair[1])?);
    }
    let sum: f64 = sims.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok(sum / (n - 2) as f64)
}

/// Tape version of [`temporal_loss`].
pub fn temporal_loss_tape(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    let n = features.len();
    if n < 3 {
        return Err(CoreError::InvalidParameter(format!(
            "temporal loss needs at least 3 frames, got {n}"
        )));
    }
    let mut sims = Vec::with_capacity(n - 1);
    for pair in features.windows(2) {
        sims.push(tape.cosine(pair[0], pair[1])?);
    }
    let mut terms: Option<Var> = None;
    for w in sims.windows(2) {
        let d = tape.sub(w[1], w[0])?;
        let sq = tape.hadamard(d, d)?;
        terms = Some(match terms {
            None => sq,
            Some(t) => tape.vstack(t, sq)?,
        });
    }
    let stacked = terms.expect("n >= 3 gives at least one term");
    Ok(tape.mean_all(stacked))
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss<T: Scalar>(eps_true: &Grid<T>, eps_pred: &Grid<T>) -> Result<f64> {
    eps_true.check_same_shape(eps_pred)?;
    let sum: f64 = eps_true
        .data()
        .iter()
        .zip(eps_pred.data().iter())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / eps_true.data().len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_temporal: f64,
    pub lambda_diffusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_temporal: 1.0, lambda_diffusion: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_temporal < 0.0 || self.lambda_diffusion < 0.0 {
            return Err(CoreError::InvalidParameter(
                "loss weights must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// `lambda_temporal * lt + lambda_diffusion * ld`.
pub fn total_loss(lt: f64, ld: f64, w: &LossWeights) -> f64 {
    w.lambda_temporal * lt + w.lambda_diffusion * ld
}

/// Fraction-of-schedule interval during which adapters act.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ActivationWindow {
    pub lo: f64,
    pub hi: f64,
}

impl ActivationWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(CoreError::InvalidParameter(format!(
                "window must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn train_default() -> Self {
        Self { lo: 0.5, hi: 1.0 }
    }

    pub fn infer_default() -> Self {
        Self { lo: 0.9, hi: 1.0 }
    }
}

/// True iff `t / t_total` falls inside the closed window.
pub fn is_active(t: usize, t_total: usize, w: &ActivationWindow) -> Result<bool> {
    if t == 0 || t > t_total {
        return Err(CoreError::TimestepOutOfRange { t, t_total });
    }
    let frac = t as f64 / t_total as f64;
    Ok(frac >= w.lo && frac <= w.hi)
}

/// Detached copies of intermediate feature maps, keyed by
/// (layer, block, frame). Recording while disabled is a no-op.
#[derive(Clone, Debug, Default)]
pub struct FeatureCapture {
    enabled: bool,
    features: BTreeMap<(u32, u32, u32), Mat>,
}

impl FeatureCapture {
    pub fn new() -> Self {
        Self { enabled: true, features: BTreeMap::new() }
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, layer: u32, block: u32, frame: u32, feature: &Mat) {
        if self.enabled {
            self.features.insert((layer, block, frame), feature.clone());
        }
    }

    pub fn get(&self, layer: u32, block: u32, frame: u32) -> Option<&Mat> {
        self.features.get(&(layer, block, frame))
    }

    /// Frame-ordered features for one (layer, block) site.
    pub fn frames(&self, layer: u32, block: u32) -> Vec<&Mat> {
        self.features
            .iter()
            .filter(|((l, b, _), _)| *l == layer && *b == block)
            .map(|(_, m)| m)
            .collect()
    }

    pub fn clear(&mut self) {
        self.features.clear();
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use crate::tape::{central_difference, gradient_relative_error};

    fn hand_params() -> AdapterParams {
        AdapterParams {
            w0: Mat::identity(2),
            a: Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            b: Mat::from_vec(2, 1, vec![0.0, 1.0]).unwrap(),
            rank: 1,
            scale: 1.0,
        }
    }

    #[test]
    fn lora_forward_hand_case() {
        let p = hand_params();
        let x = Mat::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let y = lora_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn zero_b_and_zero_scale_give_base_output() {
        let w0 = Mat::randn(3, 4, 1.0, 1);
        let p = AdapterParams::init(w0.clone(), 2, 7).unwrap();
        let x = Mat::randn(4, 5, 1.0, 2);
        let y = lora_forward(&x, &p).unwrap();
        let base = w0.matmul(&x).unwrap();
        assert_eq!(y, base);

        let mut p2 = hand_params();
        p2.scale = 0.0;
        let x = Mat::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(lora_forward(&x, &p2).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn init_validates_rank_and_draws_a() {
        assert!(AdapterParams::init(Mat::zeros(2, 3), 0, 0).is_err());
        assert!(AdapterParams::init(Mat::zeros(2, 3), 3, 0).is_err());
        let p = AdapterParams::init(Mat::zeros(64, 64), DEFAULT_RANK, 3).unwrap();
        assert!(p.b.data().iter().all(|&v| v == 0.0));
        let var: f64 =
            p.a.data().iter().map(|&v| v * v).sum::<f64>() / p.a.data().len() as f64;
        assert!(var > 1e-4 && var < 1e-3, "A variance {var}");
    }

    #[test]
    fn merge_hand_case_and_bounds() {
        let p = hand_params();
        let x = Mat::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let w0 = merge_adapter(&p, 0.0).unwrap();
        assert_eq!(w0, p.w0);
        let half = merge_adapter(&p, 0.5).unwrap();
        let y = half.matmul(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.5]);
        assert!(merge_adapter(&p, 1.5).is_err());
        assert!(merge_adapter(&p, -0.1).is_err());
    }

    #[test]
    fn merge_matches_runtime_scale_on_random_shapes() {
        let mut rng_seed = 0u64;
        for case in 0..100 {
            rng_seed += 17;
            let d_out = 1 + (case % 7);
            let d_in = 1 + (case % 5);
            let rank = 1 + (case % d_out.min(d_in));
            let mut p = AdapterParams::init(
                Mat::randn(d_out, d_in, 1.0, rng_seed),
                rank,
                rng_seed + 1,
            )
            .unwrap();
            p.b = Mat::randn(d_out, rank, 0.5, rng_seed + 2);
            p.scale = 0.5;
            let x = Mat::randn(d_in, 3, 1.0, rng_seed + 3);
            let runtime = lora_forward(&x, &p).unwrap();
            let merged = merge_adapter(&p, 0.5).unwrap().matmul(&x).unwrap();
            let d = runtime.linf_distance(&merged).unwrap();
            assert!(d <= 1e-6, "case {case}: diff {d:.2e}");
        }
    }

    #[test]
    fn frame_similarity_examples() {
        let f = Mat::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((frame_similarity(&f, &f).unwrap() - 1.0).abs() < 1e-12);

        let ex = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let ey = Mat::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(frame_similarity(&ex, &ey).unwrap().abs() < 1e-12);

        let g = Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let s = frame_similarity(&ex, &g).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);

        // Positive rescaling of either side changes nothing.
        let s2 = frame_similarity(&ex.scale(3.0), &g.scale(0.25)).unwrap();
        assert!((s - s2).abs() < 1e-12);

        assert!(frame_similarity(&Mat::zeros(1, 2), &g).is_err());
    }

    #[test]
    fn temporal_loss_examples() {
        let e = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let same = vec![e.clone(), e.clone(), e.clone(), e.clone()];
        assert!(temporal_loss(&same).unwrap().abs() < 1e-9);

        // Three frames with s = [1, 0]: loss = (0 - 1)^2 = 1.
        let f0 = Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let f1 = f0.clone();
        let f2 = Mat::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let l = temporal_loss(&[f0.clone(), f1.clone(), f2]).unwrap();
        assert!((l - 1.0).abs() < 1e-9);

        // Four frames with s = [1, 0.5, 0.5]: loss = 0.25 / 2 = 0.125.
        let deg60 = Mat::from_vec(1, 2, vec![0.5, 3.0f64.sqrt() / 2.0]).unwrap();
        let deg120 = Mat::from_vec(1, 2, vec![-0.5, 3.0f64.sqrt() / 2.0]).unwrap();
        let l = temporal_loss(&[f0, f1, deg60, deg120]).unwrap();
        assert!((l - 0.125).abs() < 1e-9);

        let two = vec![e.clone(), e];
        assert!(temporal_loss(&two).is_err());
    }

    #[test]
    fn temporal_loss_invariant_under_positive_frame_rescaling() {
        let frames: Vec<Mat> = (0..5).map(|i| Mat::randn(2, 3, 1.0, 100 + i)).collect();
        let base = temporal_loss(&frames).unwrap();
        let scales = [0.3, 2.0, 17.0, 0.01, 5.5];
        let rescaled: Vec<Mat> =
            frames.iter().zip(scales.iter()).map(|(f, &s)| f.scale(s)).collect();
        let l = temporal_loss(&rescaled).unwrap();
        assert!((base - l).abs() <= 1e-8);
    }

    #[test]
    fn tape_temporal_loss_agrees_with_plain() {
        let frames: Vec<Mat> = (0..4).map(|i| Mat::randn(1, 6, 1.0, 300 + i)).collect();
        let plain = temporal_loss(&frames).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        let l = temporal_loss_tape(&mut tape, &vars).unwrap();
        assert!((tape.value(l).get(0, 0) - plain).abs() < 1e-12);
    }

    #[test]
    fn temporal_loss_through_adapter_matches_finite_differences() {
        // Loss as a function of (A, B) through per-frame adapter outputs.
        let w0 = Mat::randn(3, 3, 0.8, 40);
        let xs: Vec<Mat> = (0..4).map(|i| Mat::randn(3, 2, 1.0, 50 + i)).collect();
        let a0 = Mat::randn(2, 3, 0.5, 60);
        let b0 = Mat::randn(3, 2, 0.5, 61);

        let eval = |p: &[Mat]| {
            let mut t = Tape::new();
            let w0v = t.leaf(w0.clone());
            let av = t.leaf(p[0].clone());
            let bv = t.leaf(p[1].clone());
            let feats: Vec<Var> = xs
                .iter()
                .map(|x| {
                    let xv = t.leaf(x.clone());
                    lora_forward_tape(&mut t, xv, w0v, av, bv, 1.0).unwrap()
                })
                .collect();
            let l = temporal_loss_tape(&mut t, &feats).unwrap();
            t.value(l).get(0, 0)
        };
        let numeric = central_difference(eval, &[a0.clone(), b0.clone()], 1e-5);

        let mut t = Tape::new();
        let w0v = t.leaf(w0.clone());
        let av = t.leaf(a0);
        let bv = t.leaf(b0);
        let feats: Vec<Var> = xs
            .iter()
            .map(|x| {
                let xv = t.leaf(x.clone());
                lora_forward_tape(&mut t, xv, w0v, av, bv, 1.0).unwrap()
            })
            .collect();
        let l = temporal_loss_tape(&mut t, &feats).unwrap();
        let grads = t.backward(l).unwrap();
        for (v, n) in [av, bv].iter().zip(numeric.iter()) {
            let rel = gradient_relative_error(&grads.get(&t, *v), n);
            assert!(rel <= 1e-4, "rel {rel:.2e}");
        }
    }

    #[test]
    fn diffusion_loss_examples() {
        let z = Grid::<f64>::zeros(GridShape::new(1, 1, 2, 2));
        assert_eq!(diffusion_loss(&z, &z).unwrap(), 0.0);
        let ones = Grid::filled(GridShape::new(1, 1, 2, 2), 1.0f64);
        assert!((diffusion_loss(&z, &ones).unwrap() - 1.0).abs() < 1e-12);

        // Elementwise oracle on random grids.
        let a: Grid<f64> =
            Grid::noise(GridShape::new(1, 2, 3, 3), &crate::grid::NoiseSpec::standard(1));
        let b: Grid<f64> =
            Grid::noise(GridShape::new(1, 2, 3, 3), &crate::grid::NoiseSpec::standard(2));
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            acc += (x - y) * (x - y);
        }
        let oracle = acc / a.data().len() as f64;
        assert!((diffusion_loss(&a, &b).unwrap() - oracle).abs() <= 1e-10);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 1.0, &w) - 1.01).abs() < 1e-9);
        assert!((total_loss(0.125, 2.0, &w) - 0.145).abs() < 1e-9);
        assert!(LossWeights { lambda_temporal: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn activation_window_examples() {
        let train = ActivationWindow::train_default();
        let infer = ActivationWindow::infer_default();
        let t_total = 1000;
        assert!(!is_active(250, t_total, &train).unwrap());
        assert!(is_active(750, t_total, &train).unwrap());
        assert!(is_active(500, t_total, &train).unwrap());
        assert!(is_active(1000, t_total, &train).unwrap());
        assert!(is_active(950, t_total, &infer).unwrap());
        assert!(!is_active(850, t_total, &infer).unwrap());
        assert!(is_active(0, t_total, &train).is_err());
        assert!(is_active(1001, t_total, &train).is_err());
        assert!(ActivationWindow::new(0.9, 0.5).is_err());
        assert!(ActivationWindow::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn feature_capture_stores_detached_copies() {
        let mut cap = FeatureCapture::new();
        let mut f = Mat::randn(2, 2, 1.0, 5);
        cap.record(0, 1, 2, &f);
        f.set(0, 0, 99.0);
        assert!(cap.get(0, 1, 2).unwrap().get(0, 0) != 99.0);

        cap.set_enabled(false);
        cap.record(0, 1, 3, &f);
        assert!(cap.get(0, 1, 3).is_none());
        cap.set_enabled(true);
        cap.record(0, 1, 3, &f);
        cap.record(0, 1, 1, &f);
        assert_eq!(cap.frames(0, 1).len(), 3);
        cap.clear();
        assert!(cap.is_empty());
    }
}
