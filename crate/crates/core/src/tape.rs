//! Minimal reverse-mode differentiation over f64 matrices.
//!
//! A `Tape` records every operation applied to `Var` handles; `backward`
//! walks the record once and accumulates adjoints. Nodes are created in
//! topological order by construction, so the reverse sweep is a single
//! reversed index loop. Scalars are 1x1 matrices.
//!
//! The op set is intentionally small: enough for low-rank adapters,
//! attention, pooling expressed as constant matrix products, and the loss
//! heads. Every op's adjoint is verified against central finite differences
//! in the unit tests below.

use crate::error::{CoreError, Result};
use crate::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Matmul(usize, usize),
    /// a * b^T
    MatmulNT(usize, usize),
    ScaleConst(usize, f64),
    /// Multiply a matrix by a 1x1 node.
    MulScalar(usize, usize),
    /// Add a 1 x d row vector to every row of a matrix.
    AddRowBroadcast(usize, usize),
    Tanh(usize),
    SoftmaxRows(usize),
    VStack(usize, usize),
    HStack(usize, usize),
    RowBlock(usize, usize, usize),
    MeanAll(usize),
    Mse(usize, usize),
    /// Cosine similarity of the flattened matrices.
    Cosine(usize, usize),
}

struct Node {
    op: Op,
    value: Mat,
    /// False only for subtrees built purely from [`Tape::leaf_const`];
    /// backward skips adjoint work for those nodes.
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never needs a gradient (inputs, frozen weights, pooling
    /// matrices). Adjoints are not propagated into const-only subtrees.
    pub fn leaf_const(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Add(a.0, b.0), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Sub(a.0, b.0), value, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        ma.check_same_shape(mb)?;
        let data: Vec<f64> =
            ma.data().iter().zip(mb.data().iter()).map(|(&x, &y)| x * y).collect();
        let value = Mat::from_vec(ma.rows(), ma.cols(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Hadamard(a.0, b.0), value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Matmul(a.0, b.0), value, rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::MatmulNT(a.0, b.0), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a.0);
        self.push(Op::ScaleConst(a.0, c), value, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ms = self.value(s);
        if ms.rows() != 1 || ms.cols() != 1 {
            return Err(CoreError::shape_mismatch(
                "1x1 scalar",
                format!("{}x{}", ms.rows(), ms.cols()),
            ));
        }
        let value = self.value(a).scale(ms.get(0, 0));
        let rg = self.rg(a.0) || self.rg(s.0);
        Ok(self.push(Op::MulScalar(a.0, s.0), value, rg))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, mr) = (self.value(a), self.value(row));
        if mr.rows() != 1 || mr.cols() != ma.cols() {
            return Err(CoreError::shape_mismatch(
                format!("1x{} bias row", ma.cols()),
                format!("{}x{}", mr.rows(), mr.cols()),
            ));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(mr.data().iter()) {
                *v += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        Ok(self.push(Op::AddRowBroadcast(a.0, row.0), value, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let data: Vec<f64> = ma.data().iter().map(|&x| x.tanh()).collect();
        let value = Mat::from_vec(ma.rows(), ma.cols(), data).unwrap();
        let rg = self.rg(a.0);
        self.push(Op::Tanh(a.0), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.softmax_rows();
        let rg = self.rg(a.0);
        self.push(Op::SoftmaxRows(a.0), value, rg)
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).vstack(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::VStack(a.0, b.0), value, rg))
    }

    pub fn hstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hstack(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::HStack(a.0, b.0), value, rg))
    }

    pub fn row_block(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let value = self.value(a).row_block(start, count)?;
        let rg = self.rg(a.0);
        Ok(self.push(Op::RowBlock(a.0, start, count), value, rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mean = ma.data().iter().sum::<f64>() / ma.data().len() as f64;
        let rg = self.rg(a.0);
        self.push(Op::MeanAll(a.0), Mat::from_vec(1, 1, vec![mean]).unwrap(), rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        ma.check_same_shape(mb)?;
        let n = ma.data().len() as f64;
        let sum: f64 = ma
            .data()
            .iter()
            .zip(mb.data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Mse(a.0, b.0), Mat::from_vec(1, 1, vec![sum / n]).unwrap(), rg))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        ma.check_same_shape(mb)?;
        let dot: f64 = ma.data().iter().zip(mb.data().iter()).map(|(&x, &y)| x * y).sum();
        let na: f64 = ma.data().iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb: f64 = mb.data().iter().map(|&x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(CoreError::InvalidParameter(
                "cosine similarity of zero-norm input".to_string(),
            ));
        }
        let value = Mat::from_vec(1, 1, vec![dot / (na * nb)]).unwrap();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Op::Cosine(a.0, b.0), value, rg))
    }

    /// Reverse sweep from a scalar output. Returns one adjoint per node,
    /// indexable by `Var`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lm = self.value(loss);
        if lm.rows() != 1 || lm.cols() != 1 {
            return Err(CoreError::InvalidParameter(format!(
                "backward needs a scalar, got {}x{}",
                lm.rows(),
                lm.cols()
            )));
        }
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, &needs, a, g.clone());
                    accumulate(&mut grads, &needs, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &needs, a, g.clone());
                    accumulate(&mut grads, &needs, b, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let ga = hadamard_mats(&g, &self.nodes[b].value);
                    let gb = hadamard_mats(&g, &self.nodes[a].value);
                    accumulate(&mut grads, &needs, a, ga);
                    accumulate(&mut grads, &needs, b, gb);
                }
                Op::Matmul(a, b) => {
                    if needs[a] {
                        let ga = g.matmul_nt(&self.nodes[b].value)?;
                        accumulate(&mut grads, &needs, a, ga);
                    }
                    if needs[b] {
                        let gb = self.nodes[a].value.matmul_tn(&g)?;
                        accumulate(&mut grads, &needs, b, gb);
                    }
                }
                Op::MatmulNT(a, b) => {
                    // y = a b^T: dA = g b, dB = g^T a.
                    if needs[a] {
                        let ga = g.matmul(&self.nodes[b].value)?;
                        accumulate(&mut grads, &needs, a, ga);
                    }
                    if needs[b] {
                        let gb = g.matmul_tn(&self.nodes[a].value)?;
                        accumulate(&mut grads, &needs, b, gb);
                    }
                }
                Op::ScaleConst(a, c) => {
                    accumulate(&mut grads, &needs, a, g.scale(c));
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s].value.get(0, 0);
                    let av = &self.nodes[a].value;
                    let dot: f64 =
                        g.data().iter().zip(av.data().iter()).map(|(&x, &y)| x * y).sum();
                    accumulate(&mut grads, &needs, a, g.scale(sv));
                    accumulate(&mut grads, &needs, s, Mat::from_vec(1, 1, vec![dot])?);
                }
                Op::AddRowBroadcast(a, row) => {
                    let mut row_grad = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in row_grad.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, &needs, a, g.clone());
                    accumulate(&mut grads, &needs, row, row_grad);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data().iter())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, &needs, a, Mat::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 =
                            g.row(r).iter().zip(y.row(r).iter()).map(|(&a, &b)| a * b).sum();
                        for (o, (&gv, &yv)) in gx
                            .row_mut(r)
                            .iter_mut()
                            .zip(g.row(r).iter().zip(y.row(r).iter()))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, &needs, a, gx);
                }
                Op::VStack(a, b) => {
                    let ra = self.nodes[a].value.rows();
                    let rb = self.nodes[b].value.rows();
                    accumulate(&mut grads, &needs, a, g.row_block(0, ra)?);
                    accumulate(&mut grads, &needs, b, g.row_block(ra, rb)?);
                }
                Op::HStack(a, b) => {
                    let ca = self.nodes[a].value.cols();
                    let cb = self.nodes[b].value.cols();
                    let mut ga = Mat::zeros(g.rows(), ca);
                    let mut gb = Mat::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(&mut grads, &needs, a, ga);
                    accumulate(&mut grads, &needs, b, gb);
                }
                Op::RowBlock(a, start, count) => {
                    let src = &self.nodes[a].value;
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..count {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, &needs, a, ga);
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[a].value;
                    let c = g.get(0, 0) / src.data().len() as f64;
                    accumulate(&mut grads, &needs, a, Mat::filled_like(src, c));
                }
                Op::Mse(a, b) => {
                    let (ma, mb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let n = ma.data().len() as f64;
                    let c = 2.0 * g.get(0, 0) / n;
                    let data: Vec<f64> = ma
                        .data()
                        .iter()
                        .zip(mb.data().iter())
                        .map(|(&x, &y)| c * (x - y))
                        .collect();
                    let ga = Mat::from_vec(ma.rows(), ma.cols(), data)?;
                    accumulate(&mut grads, &needs, b, ga.scale(-1.0));
                    accumulate(&mut grads, &needs, a, ga);
                }
                Op::Cosine(a, b) => {
                    let (ma, mb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let dot: f64 =
                        ma.data().iter().zip(mb.data().iter()).map(|(&x, &y)| x * y).sum();
                    let na2: f64 = ma.data().iter().map(|&x| x * x).sum();
                    let nb2: f64 = mb.data().iter().map(|&x| x * x).sum();
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let gs = g.get(0, 0);
                    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                    let cosv = dot / (na * nb);
                    let da: Vec<f64> = ma
                        .data()
                        .iter()
                        .zip(mb.data().iter())
                        .map(|(&x, &y)| gs * (y / (na * nb) - cosv * x / na2))
                        .collect();
                    let db: Vec<f64> = ma
                        .data()
                        .iter()
                        .zip(mb.data().iter())
                        .map(|(&x, &y)| gs * (x / (na * nb) - cosv * y / nb2))
                        .collect();
                    accumulate(&mut grads, &needs, a, Mat::from_vec(ma.rows(), ma.cols(), da)?);
                    accumulate(&mut grads, &needs, b, Mat::from_vec(mb.rows(), mb.cols(), db)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn hadamard_mats(a: &Mat, b: &Mat) -> Mat {
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn accumulate(grads: &mut [Option<Mat>], needs: &[bool], idx: usize, g: Mat) {
    if !needs[idx] {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            let sum = existing.add(&g).expect("adjoint shapes agree");
            *existing = sum;
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`]. Nodes the loss does not depend
/// on report a zero matrix.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, tape: &Tape, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let m = tape.value(v);
                Mat::zeros(m.rows(), m.cols())
            }
        }
    }

    /// True when the loss genuinely did not touch the node.
    pub fn is_disconnected(&self, v: Var) -> bool {
        self.grads[v.0].is_none()
    }
}

impl Mat {
    fn filled_like(src: &Mat, v: f64) -> Mat {
        Mat::from_vec(src.rows(), src.cols(), vec![v; src.data().len()]).unwrap()
    }
}

/// Central-difference gradient of `f` with respect to every entry of every
/// matrix in `params`.
pub fn central_difference<F>(mut f: F, params: &[Mat], h: f64) -> Vec<Mat>
where
    F: FnMut(&[Mat]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<Mat> = params.to_vec();
    for p in 0..params.len() {
        let mut g = Mat::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].data().len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let fp = f(&work);
            work[p].data_mut()[i] = orig - h;
            let fm = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error with an absolute floor so exactly-zero pairs compare equal.
pub fn gradient_relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data().iter()) {
        let scale = a.abs().max(n.abs());
        if scale < 1e-8 {
            continue;
        }
        let rel = (a - n).abs() / scale;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
