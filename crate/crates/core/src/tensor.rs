//! Minimal reverse-mode automatic differentiation on dense 2-D arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] walks the record once in reverse and accumulates
//! gradients. All values are `f64` and every op is single-threaded, so a
//! fixed op sequence always reproduces bit-identical results.
//!
//! Ops are deliberately coarse (matmul, softmax, layer norm, fused losses)
//! rather than scalar-level: the backward of each op is written by hand and
//! verified against central finite differences in the tests below.

use ndarray::{concatenate, s, Array2, Axis};

pub type Arr = Array2<f64>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (m,k) dot b (k,n)
    Matmul(Var, Var),
    /// a (m,k) dot b^T (n,k) -> (m,n)
    MatmulNT(Var, Var),
    Add(Var, Var),
    /// Elementwise (Hadamard) product of same-shape operands.
    Mul(Var, Var),
    /// (m,n) + broadcast row (1,n)
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    Gelu(Var),
    /// Row-wise layer normalization with learnable gain/bias rows.
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Per-column batch normalization using batch statistics (training mode).
    BatchNormCols { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// (m,n) -> (1,n) mean over rows
    MeanRows(Var),
    /// Mean over rows of -log softmax(logits)[label]; logits (b,c) -> (1,1)
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
    /// Batch-hard triplet loss over a feature matrix (b,d) -> (1,1)
    TripletBatchHard { feats: Var, labels: Vec<usize>, margin: f64 },
}

struct Node {
    value: Arr,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a var, or zeros of the given shape if it never
    /// participated in the output.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Arr {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Arr::zeros((rows, cols)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (sqrt_2_over_pi() * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = sqrt_2_over_pi() * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = sqrt_2_over_pi() * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(x: &Arr) -> Arr {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Pairwise Euclidean distances between rows, computed from explicit row
/// differences so the result is exactly translation invariant.
pub fn pairwise_distances(feats: &Arr) -> Arr {
    let b = feats.nrows();
    let mut d = Arr::zeros((b, b));
    for i in 0..b {
        for j in (i + 1)..b {
            let mut acc = 0.0;
            for k in 0..feats.ncols() {
                let diff = feats[[i, k]] - feats[[j, k]];
                acc += diff * diff;
            }
            let dist = (acc + 1e-12).sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

struct HardTriplet {
    anchor: usize,
    pos: usize,
    neg: usize,
    active: bool,
}

/// Per anchor: hardest positive (max distance, same label, other index) and
/// hardest negative (min distance, different label). Ties break on the
/// lowest index. Requires every label to appear at least twice.
fn mine_batch_hard(dist: &Arr, labels: &[usize], margin: f64) -> (f64, Vec<HardTriplet>) {
    let b = labels.len();
    let mut triplets = Vec::with_capacity(b);
    let mut total = 0.0;
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for o in 0..b {
            if o == a {
                continue;
            }
            let d = dist[[a, o]];
            if labels[o] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((o, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((o, d));
            }
        }
        let (p, d_ap) = pos.expect("triplet mining requires >=2 samples per identity");
        let (n, d_an) = neg.expect("triplet mining requires >=2 identities");
        let hinge = (d_ap - d_an + margin).max(0.0);
        total += hinge;
        triplets.push(HardTriplet { anchor: a, pos: p, neg: n, active: hinge > 0.0 });
    }
    (total / b as f64, triplets)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    /// a . b^T without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a (1,n) bias");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows width mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols height mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        assert_eq!(g.ncols(), xv.ncols());
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(out, Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn batch_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let be = self.value(beta);
        assert_eq!(g.ncols(), xv.ncols());
        let m = xv.nrows() as f64;
        let mut out = xv.clone();
        for j in 0..xv.ncols() {
            let col = xv.column(j);
            let mean = col.sum() / m;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + eps).sqrt();
            for i in 0..xv.nrows() {
                out[[i, j]] = (xv[[i, j]] - mean) * rstd * g[[0, j]] + be[[0, j]];
            }
        }
        self.push(out, Op::BatchNormCols { x, gamma, beta, eps })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let m = xv.nrows() as f64;
        let v = xv.sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        self.push(v, Op::MeanRows(a))
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "one label per logits row");
        let mut total = 0.0;
        for (row, &y) in lv.rows().into_iter().zip(labels) {
            assert!(y < lv.ncols(), "label out of range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
        }
        let v = Arr::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CrossEntropyMean { logits, labels: labels.to_vec() })
    }

    pub fn triplet_batch_hard(&mut self, feats: Var, labels: &[usize], margin: f64) -> Var {
        let dist = pairwise_distances(self.value(feats));
        let (loss, _) = mine_batch_hard(&dist, labels, margin);
        let v = Arr::from_elem((1, 1), loss);
        self.push(v, Op::TripletBatchHard { feats, labels: labels.to_vec(), margin })
    }

    /// Backpropagate from a (1,1) output node. Consumes intermediate values
    /// as it goes; the tape cannot be extended or re-walked afterwards.
    pub fn backward(&mut self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Arr::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Leaves keep their gradient; interior nodes surrender theirs.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.step_backward(idx, &g, &mut grads);
            // Interior values are dead once their own backward has run: every
            // consumer sits later on the tape and was already processed.
            self.nodes[idx].value = Arr::zeros((0, 0));
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Arr>], v: Var, delta: Arr) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, idx: usize, g: &Arr, grads: &mut Vec<Option<Arr>>) {
        match &self.nodes[idx].op {
            Op::Leaf => unreachable!(),
            Op::Matmul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::MatmulNT(a, b) => {
                // y = a b^T  =>  da = g b ; db = g^T a
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                Self::accumulate(grads, *a, g.clone());
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                Self::accumulate(grads, *row, dr);
            }
            Op::Scale(a, c) => {
                Self::accumulate(grads, *a, g * *c);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    let dp = g.slice(s![start..start + rows, ..]).to_owned();
                    Self::accumulate(grads, *p, dp);
                    start += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                let av = self.value(*a);
                let mut da = Arr::zeros(av.dim());
                da.slice_mut(s![*start..*start + *len, ..]).assign(g);
                Self::accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).ncols();
                    let dp = g.slice(s![.., start..start + cols]).to_owned();
                    Self::accumulate(grads, *p, dp);
                    start += cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let mut da = Arr::zeros(av.dim());
                da.slice_mut(s![.., *start..*start + *len]).assign(g);
                Self::accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut da = g.clone();
                for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - dot) * y;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g * &self.value(*a).mapv(gelu_grad_scalar);
                Self::accumulate(grads, *a, da);
            }
            Op::LayerNormRows { x, gamma, beta: _, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = xv.ncols() as f64;
                let mut dx = Arr::zeros(xv.dim());
                let mut dgamma = Arr::zeros((1, xv.ncols()));
                let mut dbeta = Arr::zeros((1, xv.ncols()));
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; xv.ncols()];
                    for j in 0..xv.ncols() {
                        let xhat = (row[j] - mean) * rstd;
                        let dyj = g[[i, j]];
                        dgamma[[0, j]] += dyj * xhat;
                        dbeta[[0, j]] += dyj;
                        let d = dyj * gv[[0, j]];
                        dxhat[j] = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                    }
                    for j in 0..xv.ncols() {
                        let xhat = (row[j] - mean) * rstd;
                        dx[[i, j]] =
                            rstd * (dxhat[j] - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                let (x, gamma, beta) = match &self.nodes[idx].op {
                    Op::LayerNormRows { x, gamma, beta, .. } => (*x, *gamma, *beta),
                    _ => unreachable!(),
                };
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, gamma, dgamma);
                Self::accumulate(grads, beta, dbeta);
            }
            Op::BatchNormCols { x, gamma, beta: _, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let m = xv.nrows() as f64;
                let mut dx = Arr::zeros(xv.dim());
                let mut dgamma = Arr::zeros((1, xv.ncols()));
                let mut dbeta = Arr::zeros((1, xv.ncols()));
                for j in 0..xv.ncols() {
                    let col = xv.column(j);
                    let mean = col.sum() / m;
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; xv.nrows()];
                    for i in 0..xv.nrows() {
                        let xhat = (xv[[i, j]] - mean) * rstd;
                        let dyi = g[[i, j]];
                        dgamma[[0, j]] += dyi * xhat;
                        dbeta[[0, j]] += dyi;
                        let d = dyi * gv[[0, j]];
                        dxhat[i] = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                    }
                    for i in 0..xv.nrows() {
                        let xhat = (xv[[i, j]] - mean) * rstd;
                        dx[[i, j]] =
                            rstd * (dxhat[i] - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                    }
                }
                let (x, gamma, beta) = match &self.nodes[idx].op {
                    Op::BatchNormCols { x, gamma, beta, .. } => (*x, *gamma, *beta),
                    _ => unreachable!(),
                };
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, gamma, dgamma);
                Self::accumulate(grads, beta, dbeta);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let m = av.nrows();
                let mut da = Arr::zeros(av.dim());
                for i in 0..m {
                    for j in 0..da.ncols() {
                        da[[i, j]] = g[[0, j]] / m as f64;
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let lv = self.value(*logits);
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut da = softmax_rows(lv);
                for (i, &y) in labels.iter().enumerate() {
                    da[[i, y]] -= 1.0;
                }
                da *= scale;
                Self::accumulate(grads, *logits, da);
            }
            Op::TripletBatchHard { feats, labels, margin } => {
                let fv = self.value(*feats);
                let dist = pairwise_distances(fv);
                let (_, triplets) = mine_batch_hard(&dist, labels, *margin);
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut da = Arr::zeros(fv.dim());
                for t in triplets.iter().filter(|t| t.active) {
                    // d(d_ij)/d x_i = (x_i - x_j) / d_ij
                    let d_ap = dist[[t.anchor, t.pos]];
                    let d_an = dist[[t.anchor, t.neg]];
                    for k in 0..fv.ncols() {
                        let dap_a = (fv[[t.anchor, k]] - fv[[t.pos, k]]) / d_ap;
                        let dan_a = (fv[[t.anchor, k]] - fv[[t.neg, k]]) / d_an;
                        da[[t.anchor, k]] += scale * (dap_a - dan_a);
                        da[[t.pos, k]] += scale * (-dap_a);
                        da[[t.neg, k]] += scale * dan_a;
                    }
                }
                Self::accumulate(grads, *feats, da);
            }
        }
    }
}
